"""Reliability function E(R, P) of variable-length feedback codes under a cost constraint.

A split eta gives phase 1 the cost P1 = C^{-1}(R / eta) and phase 2 the
remaining budget P2 = (P - eta P1) / (1 - eta); the exponent at that split is
(1 - eta) D(P2). E(R, P) is its maximum over the feasible interval of eta, on
which the exponent is concave.
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from services.capacity import CapacityCurve, capacity_inverse, eta_star
from services.divergence_envelope import DivergenceCurve
from services.errors import InfeasibleSplit, RateOutOfRange
from utils.config import DEFAULT_SETTINGS, SolverSettings

logger = logging.getLogger(__name__)

INV_PHI = (math.sqrt(5) - 1) / 2
INV_PHI_SQ = (3 - math.sqrt(5)) / 2
# eta this close to 1 leaves no room for phase 2
ETA_ONE = 1e-12
SPLIT_TOL = 1e-9
CAPACITY_DELTAS = (1e-3, 1e-4, 1e-5)


@dataclass(frozen=True)
class ReliabilityPoint:
    r: float
    p: float
    eta_star: float
    interval: tuple[float, float]
    eta_opt: float
    p1: float
    p2: float
    exponent: float
    # phase 1 sits on the flat part of C, where any cost >= P* gives the same rate
    p1_on_plateau: bool = False
    method: str = "golden"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TangentReport:
    """Horizontal-axis intercepts of the tangents to C at P1 and to D at P2."""

    c_intercepts: tuple[float, float]
    d_intercepts: tuple[float, float]
    overlap: bool
    separation: float
    interior: bool


def feasible_interval(caps: CapacityCurve, r: float, p: float) -> tuple[float, float]:
    """[eta*, min(1, r / C(0))], with the upper end 1 when C(0) = 0."""
    lo = eta_star(caps, r, p)
    hi = 1.0 if caps.c0 <= 0 else min(1.0, r / caps.c0)
    return lo, hi


def exponent_for_split(
    caps: CapacityCurve, divs: DivergenceCurve, r: float, p: float, eta: float
) -> tuple[float, float, float]:
    """Phase costs and exponent (P1, P2, (1 - eta) D(P2)) at the split eta.

    Args:
        caps (CapacityCurve): solved capacity curve
        divs (DivergenceCurve): divergence envelope of the same channel
        r (float): rate in nats per symbol
        p (float): overall cost per symbol
        eta (float): fraction of the block spent in phase 1

    Returns:
        tuple: (p1, p2, exponent)
    """
    if not 0 < eta <= 1:
        raise InfeasibleSplit(f"eta must lie in (0, 1], got {eta}")
    level = r / eta
    if level > caps.c_star * (1 + 1e-12) + 1e-15:
        raise InfeasibleSplit(f"eta={eta:.12g} needs phase-1 rate {level:.9g} above C*={caps.c_star:.9g}")
    p1 = capacity_inverse(caps, min(level, caps.c_star))
    if eta >= 1 - ETA_ONE:
        return p1, 0.0, 0.0
    p2 = (p - eta * p1) / (1 - eta)
    if p2 < -SPLIT_TOL:
        raise InfeasibleSplit(f"eta={eta:.12g} leaves negative phase-2 cost {p2:.3g}")
    p2 = max(p2, 0.0)
    return p1, p2, (1 - eta) * divs.value(p2)


def _check_rate(caps: CapacityCurve, r: float, p: float) -> float:
    c_p = caps.value(p)
    if not 0 < r < c_p:
        raise RateOutOfRange(f"rate {r:.9g} must lie in (0, C(P)) where C(P) = {c_p:.9g}", limit=c_p)
    return c_p


def exponent_at(caps: CapacityCurve, divs: DivergenceCurve, r: float, p: float, eta: float) -> float:
    """E(R, P, eta); raises InfeasibleSplit for eta outside the feasible interval."""
    _check_rate(caps, r, p)
    lo, hi = feasible_interval(caps, r, p)
    if eta < lo - SPLIT_TOL or eta > hi + ETA_ONE:
        raise InfeasibleSplit(f"eta={eta:.12g} outside the feasible interval [{lo:.12g}, {hi:.12g}]")
    return exponent_for_split(caps, divs, r, p, min(max(eta, lo), hi))[2]


def golden_section_max(objective, a: float, b: float, tol: float) -> tuple[float, float]:
    """Maximize a unimodal function on [a, b] to bracket width ``tol``."""
    dist = b - a
    if dist <= tol:
        mid = 0.5 * (a + b)
        return mid, objective(mid)
    n = int(math.ceil(math.log(tol / dist) / math.log(INV_PHI)))
    c = a + INV_PHI_SQ * dist
    d = a + INV_PHI * dist
    yc, yd = objective(c), objective(d)
    for _ in range(n - 1):
        if yc > yd:
            b, d, yd = d, c, yc
            dist *= INV_PHI
            c = a + INV_PHI_SQ * dist
            yc = objective(c)
        else:
            a, c, yc = c, d, yd
            dist *= INV_PHI
            d = a + INV_PHI * dist
            yd = objective(d)
    return (c, yc) if yc > yd else (d, yd)


def _grid_search(objective, lo: float, hi: float, settings: SolverSettings) -> tuple[float, float]:
    etas = np.linspace(lo, hi, settings.grid_points)
    values = np.array([objective(float(e)) for e in etas])
    best = int(np.argmax(values))
    left = etas[max(best - 1, 0)]
    right = etas[min(best + 1, len(etas) - 1)]
    eta, value = golden_section_max(objective, float(left), float(right), settings.golden_tol)
    if value >= values[best]:
        return eta, value
    return float(etas[best]), float(values[best])


def reliability(
    caps: CapacityCurve,
    divs: DivergenceCurve,
    r: float,
    p: float,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> ReliabilityPoint:
    """E(R, P) with its maximizing split and phase costs."""
    _check_rate(caps, r, p)
    lo, hi = feasible_interval(caps, r, p)

    def objective(eta: float) -> float:
        return exponent_for_split(caps, divs, r, p, eta)[2]

    width = hi - lo
    method = "golden"
    if width <= settings.golden_tol:
        candidates = [(lo, objective(lo))]
    else:
        q1, q2, q3 = (objective(lo + f * width) for f in (0.25, 0.5, 0.75))
        if q2 < 0.5 * (q1 + q3) - 1e-12:
            logger.warning(
                "exponent not concave on the sample points at r=%.6g p=%.6g; falling back to grid scan", r, p
            )
            method = "grid"
            inner = _grid_search(objective, lo, hi, settings)
        else:
            inner = golden_section_max(objective, lo, hi, settings.golden_tol)
        candidates = [(lo, objective(lo)), inner, (hi, objective(hi))]

    eta_opt, _ = max(candidates, key=lambda item: item[1])
    p1, p2, exponent = exponent_for_split(caps, divs, r, p, eta_opt)
    on_plateau = r / eta_opt >= caps.c_star * (1 - 1e-12) and caps.p_star > 0
    return ReliabilityPoint(
        r=r,
        p=p,
        eta_star=lo,
        interval=(lo, hi),
        eta_opt=eta_opt,
        p1=p1,
        p2=p2,
        exponent=exponent,
        p1_on_plateau=bool(on_plateau),
        method=method,
    )


def reliability_curve(
    caps: CapacityCurve,
    divs: DivergenceCurve,
    p: float,
    r_grid,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> list[ReliabilityPoint]:
    """Solve E(r, p) for every r in the grid, in grid order."""
    r_grid = np.asarray(r_grid, dtype=np.float64)
    if r_grid.size == 0:
        raise RateOutOfRange("rate grid is empty", limit=caps.value(p))
    c_p = caps.value(p)
    outside = r_grid[(r_grid <= 0) | (r_grid >= c_p)]
    if outside.size:
        raise RateOutOfRange(
            f"rates {outside.tolist()} outside (0, C(P)) where C(P) = {c_p:.9g}", limit=c_p
        )
    return [reliability(caps, divs, float(r), p, settings) for r in r_grid]


def reliability_at_capacity(
    caps: CapacityCurve,
    divs: DivergenceCurve,
    p: float,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> float:
    """lim E(C(P) - delta, P) as delta -> 0+, extrapolated to delta = 0 through the solves at CAPACITY_DELTAS."""
    c_p = caps.value(p)
    if c_p <= 0:
        return 0.0
    deltas = [d * c_p for d in CAPACITY_DELTAS]
    values = [reliability(caps, divs, c_p - d, p, settings).exponent for d in deltas]
    # Richardson: the interpolating polynomial through every (delta, E) pair, evaluated at 0
    limit = float(np.polynomial.polynomial.polyfit(deltas, values, len(deltas) - 1)[0])
    logger.debug("exponent near capacity at p=%.6g: %s -> %.9g", p, values, limit)
    return max(limit, 0.0)


def _intercepts(x: float, value: float, right: float, left: float) -> tuple[float, float]:
    def intercept(slope: float) -> float:
        if slope == 0:
            return -math.inf if value > 0 else x
        if math.isinf(slope):
            return x
        return x - value / slope

    return intercept(right), intercept(left)


def tangent_intercept_check(
    caps: CapacityCurve, divs: DivergenceCurve, point: ReliabilityPoint, tol: float = 1e-6
) -> TangentReport:
    """Compare the tangent intercepts of C at P1 and of D at P2 at a solved optimum.

    At an optimum with eta strictly inside its interval the two intercept
    intervals must overlap.
    """
    lo, hi = point.interval
    interior = lo + SPLIT_TOL < point.eta_opt < hi - SPLIT_TOL
    c_right, c_left = caps.slopes_at(point.p1)
    d_right, d_left = divs.slopes_at(point.p2)
    c_int = _intercepts(point.p1, caps.value(point.p1), c_right, c_left)
    d_int = _intercepts(point.p2, divs.value(point.p2), d_right, d_left)
    separation = max(c_int[0], d_int[0]) - min(c_int[1], d_int[1])
    overlap = bool(separation <= tol or math.isnan(separation))
    return TangentReport(
        c_intercepts=c_int,
        d_intercepts=d_int,
        overlap=overlap,
        separation=float(separation),
        interior=interior,
    )


def classify_regime(
    point: ReliabilityPoint,
    c_breaks: tuple[float, float],
    d_break: float,
    tol: float = 1e-5,
) -> tuple[str, ...]:
    """Which of the three phase-cost regimes of a two-knot C and one-knot D hold at an optimum.

    A: P1 at the first C knot and 0 < P2 < the D knot.
    B: P1 strictly between the C knots and P2 at the D knot.
    C: P1 at the second C knot and P2 beyond the D knot.
    """
    first, second = c_breaks
    labels = []
    if abs(point.p1 - first) <= tol and tol < point.p2 < d_break - tol:
        labels.append("A")
    if first + tol < point.p1 < second - tol and abs(point.p2 - d_break) <= tol:
        labels.append("B")
    if abs(point.p1 - second) <= tol and point.p2 > d_break + tol:
        labels.append("C")
    return tuple(labels)


def points_frame(points: list[ReliabilityPoint]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "r": [pt.r for pt in points],
            "exponent": [pt.exponent for pt in points],
            "eta_opt": [pt.eta_opt for pt in points],
            "p1": [pt.p1 for pt in points],
            "p2": [pt.p2 for pt in points],
        }
    )
