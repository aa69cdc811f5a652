from commands import EXIT_OK, say
from services.load_curves import get_capacity_curve
from services.load_data import load_channel, payload_to_json, write_frame, write_output
from utils.config import RunConfig
from utils.provenance import provenance_info


def cmd_capacity(config: RunConfig) -> int:
    """Solve C(P) for the channel and write the knot table; print C(0), C*, P* and beta."""
    dmc = load_channel(config.channel)
    caps = get_capacity_curve(dmc, settings=config.solver)
    provenance = provenance_info(dmc, config)
    frame = caps.to_frame()
    if config.format == "json":
        payload = {"landmarks": caps.landmarks, "rows": frame.to_dict(orient="records")}
        write_output(payload_to_json(payload, provenance), config.out)
    else:
        write_frame(frame, provenance, config.out)
    say(
        config,
        f"C(0) = {caps.c0:.9g}  C* = {caps.c_star:.9g}  P* = {caps.p_star:.9g}  beta = {caps.beta:.9g}",
    )
    return EXIT_OK
