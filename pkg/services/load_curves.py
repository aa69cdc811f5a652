import logging
from functools import lru_cache

from services.capacity import CapacityCurve, CurveGrid, build_capacity_curve
from services.channel_core import Dmc
from services.divergence_envelope import DivergenceCurve, build_divergence_curve
from utils.config import DEFAULT_SETTINGS, SolverSettings

logger = logging.getLogger(__name__)


@lru_cache(maxsize=32)
def get_capacity_curve(
    dmc: Dmc, grid: CurveGrid = CurveGrid(), settings: SolverSettings = DEFAULT_SETTINGS
) -> CapacityCurve:
    """Solve C(P) once per channel and reuse it across commands and tests.

    Channels hash by their transition and cost bytes, so two loads of the same
    channel share one curve.
    """
    logger.info("building capacity curve for %s", dmc.name)
    return build_capacity_curve(dmc, grid, settings)


@lru_cache(maxsize=32)
def get_divergence_curve(dmc: Dmc) -> DivergenceCurve:
    """Build D(P) once per channel."""
    return build_divergence_curve(dmc)
