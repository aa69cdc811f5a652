from services.channel_core import Dmc
from services.yi_simulator import RNG_NAME
from utils.config import RunConfig

ARTIFACT_VERSION = "0.1.0"


def provenance_info(dmc: Dmc, config: RunConfig) -> dict:
    """Metadata stamped on every output file; nothing here depends on the wall clock."""
    return {
        "artifact_version": ARTIFACT_VERSION,
        "channel": dmc.name,
        "channel_hash": dmc.channel_hash,
        "config": config.to_dict(),
        "rng": RNG_NAME,
        "seed": config.seed,
    }
