# Utils package for configuration, logging and output provenance
