"""Cost-constrained capacity C(P) by a Lagrangian sweep of cost-tilted Blahut-Arimoto.

For a multiplier gamma >= 0 the tilted problem max_phi I(phi) - gamma * cost(phi)
is solved by alternating maximization. Its optimizer traces the point
(P(gamma), C(P(gamma))) of the capacity curve, and gamma is a supergradient
of C there. The curve is sampled by splitting the chord between two solved
points at the chord slope: the tilted optimum there either touches C strictly
above the chord, giving a new point, or equals the chord intercept, in which
case C is linear between the two and is answered by mixing their optimizers.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy.special import logsumexp, rel_entr

from services.channel_core import Dmc, InputDistribution, average_cost, mutual_information
from services.divergence_envelope import upper_concave_hull
from services.errors import RateOutOfRange, SolverNotConverged
from utils.config import DEFAULT_SETTINGS, SolverSettings

logger = logging.getLogger(__name__)

# smallest multiplier used in place of 0 so ties in the unconstrained optimum resolve to the cheapest input law
GAMMA_FLOOR = 1e-9
MAX_SPLITS = 200
# weight given to every letter in a warm start so none is frozen at zero by the multiplicative update
WARM_FLOOR = 1e-12
# optimal costs produced by the inner solver are accurate to roughly this, relative to rho_max
COST_RESOLUTION = 1e-7
BETA_GAMMA_TOL = 1e-7
# knots closer than this to the chord of their neighbours are solver noise on a linear piece
HULL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class TiltedSolution:
    """Optimizer of the tilted problem at one multiplier."""

    gamma: float
    phi: InputDistribution
    p: float
    c: float
    gap: float
    iterations: int


@dataclass(frozen=True, eq=False)
class CapacityPoint:
    p: float
    c: float
    phi: InputDistribution
    gamma: float


@dataclass(frozen=True)
class CurveGrid:
    """Resolution of a capacity sweep: target number of knots and the flat margin past P*."""

    n_points: int = 64
    margin: float = 0.1
    max_solves: int = 4096


@dataclass(frozen=True, eq=False)
class CapacityCurve:
    """Piecewise-linear concave representation of C(P) with landmarks and multipliers.

    Knots are vertices of the upper concave hull of solved (cost, capacity)
    pairs; ``gamma_lo``/``gamma_hi`` hold the right and left chord slopes at each
    knot, so [gamma_lo, gamma_hi] is the supergradient interval of the
    interpolant there.
    """

    dmc: Dmc
    p: np.ndarray
    c: np.ndarray
    gamma_lo: np.ndarray
    gamma_hi: np.ndarray
    phi: np.ndarray
    c0: float
    c_star: float
    p_star: float
    beta: float
    landmarks: dict = field(default_factory=dict)

    @property
    def gamma(self) -> np.ndarray:
        return self.gamma_lo

    def value(self, p: float) -> float:
        if p < 0:
            raise RateOutOfRange(f"cost must be non-negative, got {p}", limit=0.0)
        if p >= self.p[-1]:
            return self.c_star
        return float(np.interp(p, self.p, self.c))

    def _locate(self, p: float) -> int:
        """Index i with p[i] <= p < p[i+1], clipped to the sampled range."""
        idx = int(np.searchsorted(self.p, p, side="right")) - 1
        return min(max(idx, 0), len(self.p) - 2)

    def _knot(self, p: float, snap: float) -> int | None:
        idx = int(np.argmin(np.abs(self.p - p)))
        if abs(self.p[idx] - p) <= snap * max(1.0, self.p_star):
            return idx
        return None

    def gamma_interval(self, p: float) -> tuple[float, float]:
        """Supergradient interval (right slope, left slope) of the curve at p."""
        if p > self.p_star:
            return 0.0, 0.0
        knot = self._knot(p, 1e-12)
        if knot is not None:
            return float(self.gamma_lo[knot]), float(self.gamma_hi[knot])
        i = self._locate(p)
        return float(self.gamma_lo[i]), float(self.gamma_lo[i])

    def slopes_at(self, p: float, snap: float = 1e-7) -> tuple[float, float]:
        """One-sided derivatives (C'(p+), C'(p-)), treating p within ``snap`` of a knot as the knot."""
        knot = self._knot(p, snap)
        if knot is not None:
            return float(self.gamma_lo[knot]), float(self.gamma_hi[knot])
        return self.gamma_interval(p)

    def phi_at(self, p: float) -> InputDistribution:
        """Input law on the curve at cost p, mixing the two bracketing knots."""
        if p >= self.p_star:
            return InputDistribution(self.phi[self._knot(self.p_star, 1e-12)])
        i = self._locate(p)
        width = self.p[i + 1] - self.p[i]
        t = 0.0 if width <= 0 else (p - self.p[i]) / width
        mix = (1.0 - t) * self.phi[i] + t * self.phi[i + 1]
        return InputDistribution(mix / mix.sum())

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"p": self.p, "c": self.c, "gamma": self.gamma_lo})
        for k in range(self.phi.shape[1]):
            frame[f"phi_{k}"] = self.phi[:, k]
        return frame


def _alternate(
    transition: np.ndarray,
    tilt: np.ndarray,
    settings: SolverSettings,
    initial: np.ndarray | None = None,
    ceiling: float | None = None,
) -> tuple[np.ndarray, float, float, int]:
    """Alternating maximization with its lower and upper bounds on the tilted optimum.

    Stops when the bounds meet within ``settings.ba_tol`` or, when ``ceiling``
    is given, as soon as the upper bound drops to it.
    """
    n = transition.shape[0]
    if initial is None:
        log_phi = np.full(n, -math.log(n))
    else:
        with np.errstate(divide="ignore"):
            log_phi = np.log(np.asarray(initial, dtype=np.float64) / np.sum(initial))

    phi = np.exp(log_phi)
    lower, upper = -math.inf, math.inf
    iteration = 0
    for iteration in range(1, settings.ba_max_iter + 1):
        phi = np.exp(log_phi)
        q = phi @ transition
        log_c = rel_entr(transition, q[np.newaxis, :]).sum(axis=1) - tilt
        lower = float(logsumexp(log_phi + log_c))
        upper = float(log_c.max())
        if upper - lower < settings.ba_tol or (ceiling is not None and upper <= ceiling):
            break
        log_phi = log_phi + log_c - lower
        log_phi -= logsumexp(log_phi)

    return phi / phi.sum(), lower, upper, iteration


def blahut_arimoto(
    transition: np.ndarray,
    tilt: np.ndarray,
    settings: SolverSettings = DEFAULT_SETTINGS,
    initial: np.ndarray | None = None,
) -> tuple[np.ndarray, float, int]:
    """Maximize I(phi) - sum_k phi_k tilt_k by alternating maximization.

    Works in the log domain so large tilts cannot overflow. Stops when the
    gap between the upper bound max_k ln c_k and the lower bound
    ln sum_k phi_k c_k of the tilted objective falls below ``settings.ba_tol``.

    Args:
        transition (np.ndarray): row-stochastic matrix, inputs by outputs
        tilt (np.ndarray): per-letter penalty gamma * rho_k
        settings (SolverSettings): tolerance and iteration cap
        initial (np.ndarray | None): starting input law, uniform by default

    Returns:
        tuple: (phi, gap, iterations)
    """
    phi, lower, upper, iterations = _alternate(transition, tilt, settings, initial)
    return phi, max(upper - lower, 0.0), iterations


def _solution(dmc: Dmc, gamma: float, phi: np.ndarray, gap: float, iterations: int) -> TiltedSolution:
    law = InputDistribution(phi)
    return TiltedSolution(
        gamma=gamma,
        phi=law,
        p=average_cost(dmc, law),
        c=mutual_information(dmc, law),
        gap=gap,
        iterations=iterations,
    )


@lru_cache(maxsize=8192)
def solve_tilted(dmc: Dmc, gamma: float, settings: SolverSettings = DEFAULT_SETTINGS) -> TiltedSolution:
    """Solve the tilted capacity problem at multiplier gamma, from a uniform start."""
    phi, gap, iterations = blahut_arimoto(dmc.transition, gamma * dmc.costs, settings)
    solution = _solution(dmc, gamma, phi, gap, iterations)
    if gap >= settings.ba_tol:
        if gap > settings.ba_accept_gap:
            raise SolverNotConverged(
                f"Blahut-Arimoto at gamma={gamma:.6g} stopped after {iterations} iterations "
                f"with gap {gap:.3g}",
                best=solution,
                gap=gap,
            )
        logger.warning(
            "Blahut-Arimoto at gamma=%.6g hit the iteration cap with gap %.3g", gamma, gap
        )
    logger.debug(
        "gamma=%.6g P=%.9g C=%.9g after %d iterations", gamma, solution.p, solution.c, iterations
    )
    return solution


@lru_cache(maxsize=64)
def solve_restricted(dmc: Dmc, settings: SolverSettings = DEFAULT_SETTINGS) -> TiltedSolution:
    """C(0): capacity of the sub-channel of zero-cost letters, embedded back into the full alphabet."""
    free = dmc.zero_cost_letters
    phi = np.zeros(dmc.n_inputs)
    if free.size == 1:
        phi[free[0]] = 1.0
        return _solution(dmc, math.inf, phi, 0.0, 0)
    rows = dmc.transition[free]
    rows = rows[:, rows.max(axis=0) > 0]
    sub_phi, gap, iterations = blahut_arimoto(rows, np.zeros(free.size), settings)
    if gap > settings.ba_accept_gap:
        raise SolverNotConverged(f"zero-cost sub-channel solve stopped with gap {gap:.3g}", gap=gap)
    phi[free] = sub_phi
    return _solution(dmc, math.inf, phi, gap, iterations)


def _cost_tol(dmc: Dmc) -> float:
    return COST_RESOLUTION * max(1.0, dmc.rho_max)


def _chord_slope(a: TiltedSolution, b: TiltedSolution) -> float:
    return max((a.c - b.c) / (a.p - b.p), 0.0)


@lru_cache(maxsize=8192)
def _split_chord(
    dmc: Dmc, a: TiltedSolution, b: TiltedSolution, settings: SolverSettings
) -> TiltedSolution | None:
    """Point of C touched by the tangent parallel to the chord from ``b`` (cheaper) to ``a``.

    Returns None when C lies within ``settings.ba_accept_gap`` of the chord. On
    a linear piece the mixture of the two end laws already attains the tilted
    optimum at the chord slope, so starting there certifies the piece at once
    instead of iterating on a degenerate problem.
    """
    slope = _chord_slope(a, b)
    intercept = a.c - slope * a.p
    start = (1.0 - WARM_FLOOR) * 0.5 * (a.phi.probs + b.phi.probs) + WARM_FLOOR / dmc.n_inputs
    phi, lower, upper, iterations = _alternate(
        dmc.transition, slope * dmc.costs, settings, start, ceiling=intercept + settings.ba_accept_gap
    )
    if upper <= intercept + settings.ba_accept_gap:
        return None
    mid = _solution(dmc, slope, phi, max(upper - lower, 0.0), iterations)
    if mid.gap > settings.ba_accept_gap:
        logger.warning(
            "Blahut-Arimoto at chord slope %.6g stopped after %d iterations with gap %.3g",
            slope,
            iterations,
            mid.gap,
        )
    tol = _cost_tol(dmc)
    if not b.p + tol < mid.p < a.p - tol or mid.c - slope * mid.p <= intercept:
        return None
    return mid


def _bracket(
    dmc: Dmc, p: float, a: TiltedSolution, b: TiltedSolution, settings: SolverSettings
) -> tuple[TiltedSolution, TiltedSolution]:
    """Shrink the chord (a, b) around cost p until C is linear on it or it is shorter than the cost resolution."""
    tol = _cost_tol(dmc)
    for _ in range(MAX_SPLITS):
        if a.p - b.p <= tol:
            break
        mid = _split_chord(dmc, a, b, settings)
        if mid is None:
            break
        if mid.p >= p:
            a = mid
        else:
            b = mid
    return a, b


@lru_cache(maxsize=4096)
def _anchor(dmc: Dmc, p: float, settings: SolverSettings) -> TiltedSolution:
    if p == 0:
        return solve_restricted(dmc, settings)
    point = capacity_at(dmc, p, settings)
    return _solution(dmc, point.gamma, point.phi.probs, 0.0, 0)


def _edge_slope(
    dmc: Dmc, anchor: TiltedSolution, far: TiltedSolution, settings: SolverSettings
) -> float:
    """Limit of the chord slope from ``anchor`` toward ``far`` as the far end closes in."""
    tol = _cost_tol(dmc)
    for _ in range(MAX_SPLITS):
        if abs(far.p - anchor.p) <= tol:
            break
        hi, lo = (far, anchor) if far.p > anchor.p else (anchor, far)
        mid = _split_chord(dmc, hi, lo, settings)
        if mid is None:
            break
        far = mid
    hi, lo = (far, anchor) if far.p > anchor.p else (anchor, far)
    return _chord_slope(hi, lo)


def supergradient_interval(
    dmc: Dmc, p: float, settings: SolverSettings = DEFAULT_SETTINGS
) -> tuple[float, float]:
    """(C'(p+), C'(p-)), each the limit of chord slopes refined toward p from that side."""
    if p < 0:
        raise RateOutOfRange(f"cost must be non-negative, got {p}", limit=0.0)
    tol = _cost_tol(dmc)
    top = solve_tilted(dmc, GAMMA_FLOOR, settings)
    if p > top.p + tol:
        return 0.0, 0.0
    anchor = _anchor(dmc, p, settings)
    right = 0.0 if p >= top.p - tol else _edge_slope(dmc, anchor, top, settings)
    left = math.inf if p <= tol else _edge_slope(dmc, anchor, solve_restricted(dmc, settings), settings)
    return right, left


@lru_cache(maxsize=4096)
def capacity_at(dmc: Dmc, p: float, settings: SolverSettings = DEFAULT_SETTINGS) -> CapacityPoint:
    """C(p) with a feasible optimizer and a supergradient multiplier."""
    if p < 0:
        raise RateOutOfRange(f"cost must be non-negative, got {p}", limit=0.0)
    top = solve_tilted(dmc, GAMMA_FLOOR, settings)
    if p >= top.p:
        return CapacityPoint(p=p, c=top.c, phi=top.phi, gamma=0.0)

    bottom = solve_restricted(dmc, settings)
    if p == 0:
        right, _ = supergradient_interval(dmc, 0.0, settings)
        return CapacityPoint(p=0.0, c=bottom.c, phi=bottom.phi, gamma=right)

    a, b = _bracket(dmc, p, top, bottom, settings)
    t = (p - b.p) / (a.p - b.p)
    mix = t * a.phi.probs + (1.0 - t) * b.phi.probs
    phi = InputDistribution(mix / mix.sum())
    return CapacityPoint(p=p, c=mutual_information(dmc, phi), phi=phi, gamma=_chord_slope(a, b))


def _sweep(dmc: Dmc, grid: CurveGrid, settings: SolverSettings) -> list[TiltedSolution]:
    """Split chords between solved points at their own slope until each is linear or short."""
    top = solve_tilted(dmc, GAMMA_FLOOR, settings)
    bottom = solve_restricted(dmc, settings)
    if top.p <= _cost_tol(dmc):
        return [top, bottom]

    resolution = top.p / grid.n_points
    solutions = [top, bottom]
    pending = [(top, bottom)]
    linear = 0
    while pending and len(solutions) < grid.max_solves:
        a, b = pending.pop()
        if a.p - b.p <= resolution:
            continue
        mid = _split_chord(dmc, a, b, settings)
        if mid is None:
            linear += 1
            continue
        solutions.append(mid)
        pending.extend([(a, mid), (mid, b)])
    logger.info(
        "capacity sweep for %s: %d solves, %d linear segments", dmc.name, len(solutions), linear
    )
    return sorted(solutions, key=lambda s: -s.p)


def _detect_beta(
    dmc: Dmc, p: np.ndarray, c: np.ndarray, resolution: float, settings: SolverSettings
) -> float:
    """Largest x with C(x)/x equal to its initial value, or 0 when C(0) > 0 or no such segment exists."""
    if c[0] > 1e-12 or len(p) < 2 or p[1] <= 0:
        return 0.0
    ratio = c[1:] / p[1:]
    first = ratio[0]
    tol = BETA_GAMMA_TOL * max(1.0, first)
    chain = 1
    while chain < len(ratio) and abs(ratio[chain] - first) < tol:
        chain += 1
    # the sweep refines every chord longer than its resolution unless the chord is a jump
    if p[chain] <= resolution:
        return 0.0

    lo = float(p[chain])
    hi = float(p[chain + 1]) if chain + 1 < len(p) else lo
    for _ in range(40):
        if hi - lo <= 1e-6 * max(1.0, lo):
            break
        mid = 0.5 * (lo + hi)
        if abs(capacity_at(dmc, mid, settings).c / mid - first) < tol:
            lo = mid
        else:
            hi = mid
    return lo


def build_capacity_curve(
    dmc: Dmc, grid: CurveGrid = CurveGrid(), settings: SolverSettings = DEFAULT_SETTINGS
) -> CapacityCurve:
    """Sample C(P) over [0, P*(1+margin)] and compute C(0), C*, P* and beta."""
    solutions = _sweep(dmc, grid, settings)
    costs = np.array([s.p for s in solutions])
    values = np.array([s.c for s in solutions])

    c_star = float(values.max())
    vertices = upper_concave_hull(costs, values, tol=HULL_TOL)
    knots_p = costs[vertices]
    knots_c = values[vertices]
    knots_phi = np.array([solutions[v].phi.probs for v in vertices])

    # the first knot reaching C* within solver tolerance is P*
    first_top = int(np.flatnonzero(knots_c >= c_star - settings.ba_tol)[0])
    knots_p, knots_c, knots_phi = (
        knots_p[: first_top + 1],
        knots_c[: first_top + 1],
        knots_phi[: first_top + 1],
    )
    knots_c[-1] = c_star
    p_star = float(knots_p[-1])
    c0 = float(knots_c[0])

    extent = p_star * (1.0 + grid.margin) if p_star > 0 else grid.margin * max(1.0, dmc.rho_max)
    knots_p = np.append(knots_p, extent)
    knots_c = np.append(knots_c, c_star)
    knots_phi = np.vstack([knots_phi, knots_phi[-1]])

    chords = np.diff(knots_c) / np.diff(knots_p)
    gamma_lo = np.append(chords, 0.0)
    gamma_hi = np.insert(chords, 0, math.inf)
    gamma_lo[knots_p >= p_star] = 0.0
    gamma_hi[knots_p > p_star] = 0.0

    beta = _detect_beta(dmc, knots_p, knots_c, p_star / grid.n_points, settings)
    logger.info(
        "capacity curve for %s: C(0)=%.9g C*=%.9g P*=%.9g beta=%.9g", dmc.name, c0, c_star, p_star, beta
    )
    return CapacityCurve(
        dmc=dmc,
        p=knots_p,
        c=knots_c,
        gamma_lo=gamma_lo,
        gamma_hi=gamma_hi,
        phi=knots_phi,
        c0=c0,
        c_star=c_star,
        p_star=p_star,
        beta=beta,
        landmarks={"c0": c0, "c_star": c_star, "p_star": p_star, "beta": beta},
    )


def capacity_inverse(curve: CapacityCurve, c: float) -> float:
    """Smallest cost p in [0, P*] with C(p) = c on the curve."""
    if c < curve.c0 - 1e-12 or c > curve.c_star + 1e-12:
        raise RateOutOfRange(
            f"capacity level {c:.9g} outside [C(0), C*] = [{curve.c0:.9g}, {curve.c_star:.9g}]",
            limit=curve.c_star,
        )
    if c <= curve.c[0]:
        return 0.0
    idx = int(np.searchsorted(curve.c, c, side="left"))
    idx = min(idx, int(np.searchsorted(curve.p, curve.p_star)))
    c_a, c_b = curve.c[idx - 1], curve.c[idx]
    p_a, p_b = curve.p[idx - 1], curve.p[idx]
    if c_b <= c_a:
        return float(p_a)
    return float(min(p_a + (c - c_a) * (p_b - p_a) / (c_b - c_a), curve.p_star))


def eta_star(curve: CapacityCurve, r: float, p: float, tol: float = DEFAULT_SETTINGS.bisection_tol) -> float:
    """Unique eta in (0, 1) with eta * C(p / eta) = r."""
    c_p = curve.value(p)
    if not 0 < r < c_p:
        raise RateOutOfRange(f"rate {r:.9g} must lie in (0, C(P)) with C(P) = {c_p:.9g}", limit=c_p)
    lo = r / curve.c_star
    hi = 1.0 if curve.c0 <= 0 else min(1.0, r / curve.c0)

    def throughput(eta: float) -> float:
        return eta * curve.value(p / eta)

    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if throughput(mid) >= r:
            hi = mid
        else:
            lo = mid
    return hi
