import logging
import math

import numpy as np
import pandas as pd

from commands import EXIT_OK, say
from services.errors import ConfigError
from services.load_curves import get_capacity_curve, get_divergence_curve
from services.load_data import load_channel, payload_to_json, write_frame, write_output
from services.reliability import points_frame, reliability_at_capacity, reliability_curve
from utils.config import RunConfig, parse_rate_grid
from utils.provenance import provenance_info

logger = logging.getLogger(__name__)


def _rates(config: RunConfig) -> np.ndarray:
    if config.rate_grid is not None:
        lo, hi, n = parse_rate_grid(config.rate_grid)
        return np.linspace(lo, hi, n)
    if config.rate is not None:
        return np.array([config.rate])
    raise ConfigError("reliability needs --rate-grid or --rate")


def cmd_reliability(config: RunConfig) -> int:
    """Solve E(r, P) over a rate grid; optionally append the limit point at r = C(P)."""
    if config.power is None:
        raise ConfigError("reliability needs --power")
    dmc = load_channel(config.channel)
    caps = get_capacity_curve(dmc, settings=config.solver)
    divs = get_divergence_curve(dmc)
    p = config.power
    points = reliability_curve(caps, divs, p, _rates(config), config.solver)
    frame = points_frame(points)

    if config.append_limit:
        limit = reliability_at_capacity(caps, divs, p, config.solver)
        tail = pd.DataFrame(
            {"r": [caps.value(p)], "exponent": [limit], "eta_opt": [math.nan], "p1": [math.nan], "p2": [math.nan]}
        )
        frame = pd.concat([frame, tail], ignore_index=True)
        logger.info("limit at capacity for p=%.6g: %.9g", p, limit)

    provenance = provenance_info(dmc, config)
    if config.format == "json":
        payload = {"c_p": caps.value(p), "points": [pt.to_dict() for pt in points]}
        if config.append_limit:
            payload["limit_at_capacity"] = float(frame["exponent"].iloc[-1])
        write_output(payload_to_json(payload, provenance), config.out)
    else:
        write_frame(frame, provenance, config.out)
    say(config, f"C(P) = {caps.value(p):.9g}; solved {len(points)} rates, E in [{frame['exponent'].min():.6g}, {frame['exponent'].max():.6g}]")
    return EXIT_OK
