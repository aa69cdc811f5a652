# Services package: channel model, curves, reliability, simulation and converse checks
