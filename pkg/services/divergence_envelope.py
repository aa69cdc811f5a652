"""D(P): the largest average letter divergence sum_k phi_k D_k under average cost P.

D is the upper concave envelope of the points (rho_k, D_k), started at the best
zero-cost letter and held flat past the envelope's maximum. Every point on it
is realized by mixing at most two letters.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from services.channel_core import Dmc, InputDistribution, LetterDivergences, letter_divergences
from services.errors import RateOutOfRange, ZeroErrorRegime

logger = logging.getLogger(__name__)


def upper_concave_hull(x: np.ndarray, y: np.ndarray, tol: float = 0.0) -> list[int]:
    """Indices of the upper hull vertices of the points (x, y), left to right.

    For equal x only the highest point survives, lowest index on ties. A point
    lying no more than ``tol`` above the chord joining its neighbours is dropped.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    order = np.lexsort((np.arange(len(x)), -y, x))

    hull: list[int] = []
    for i in order:
        if hull and x[hull[-1]] == x[i]:
            continue
        while len(hull) >= 2:
            o, a = hull[-2], hull[-1]
            chord = y[o] + (y[i] - y[o]) * (x[a] - x[o]) / (x[i] - x[o])
            if y[a] <= chord + tol:
                hull.pop()
            else:
                break
        hull.append(int(i))
    return hull


@dataclass(frozen=True, eq=False)
class DivergencePoint:
    p: float
    d: float
    phi: InputDistribution
    gamma: float


@dataclass(frozen=True, eq=False)
class DivergenceCurve:
    """Breakpoints (p, d), the letter realizing each breakpoint and the segment slopes."""

    p: np.ndarray
    d: np.ndarray
    letters: np.ndarray
    slopes: np.ndarray
    saturation_cost: float
    letter_divergences: LetterDivergences
    n_inputs: int

    @property
    def d_max(self) -> float:
        return float(self.d[-1])

    def value(self, p: float) -> float:
        if p < 0:
            raise RateOutOfRange(f"cost must be non-negative, got {p}", limit=0.0)
        return float(np.interp(p, self.p, self.d))

    def slopes_at(self, p: float, snap: float = 1e-7) -> tuple[float, float]:
        """One-sided derivatives (D'(p+), D'(p-)); p within ``snap`` of a breakpoint counts as on it."""
        if p > self.saturation_cost + snap:
            return 0.0, 0.0
        right = np.append(self.slopes, 0.0)
        left = np.insert(self.slopes, 0, np.inf)
        idx = int(np.argmin(np.abs(self.p - p)))
        if abs(self.p[idx] - p) <= snap * max(1.0, self.saturation_cost):
            return float(right[idx]), float(left[idx])
        seg = int(np.searchsorted(self.p, p, side="right")) - 1
        return float(self.slopes[seg]), float(self.slopes[seg])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"p": self.p, "d": self.d, "gamma": np.append(self.slopes, 0.0)})


def build_divergence_curve(dmc: Dmc) -> DivergenceCurve:
    """Upper concave envelope of {(rho_k, D_k)} from the best zero-cost letter up to max_k D_k."""
    divs = letter_divergences(dmc)
    if np.any(np.isinf(divs.d)):
        infinite = np.flatnonzero(np.isinf(divs.d)).tolist()
        raise ZeroErrorRegime(
            f"letters {infinite} have infinite divergence; use the zero-error scheme instead"
        )

    free = dmc.zero_cost_letters
    start = int(free[np.argmax(divs.d[free])])
    candidates = np.concatenate(([start], np.flatnonzero(dmc.costs > 0)))
    hull = [int(candidates[i]) for i in upper_concave_hull(dmc.costs[candidates], divs.d[candidates])]

    d = divs.d[hull]
    top = int(np.argmax(d))
    letters = np.array(hull[: top + 1], dtype=np.int64)
    p = dmc.costs[letters].astype(np.float64)
    d = divs.d[letters].astype(np.float64)
    slopes = np.diff(d) / np.diff(p) if len(letters) > 1 else np.array([], dtype=np.float64)

    logger.debug("divergence envelope for %s: letters %s", dmc.name, letters.tolist())
    return DivergenceCurve(
        p=p,
        d=d,
        letters=letters,
        slopes=slopes,
        saturation_cost=float(p[-1]),
        letter_divergences=divs,
        n_inputs=dmc.n_inputs,
    )


def divergence_at(curve: DivergenceCurve, p: float) -> DivergencePoint:
    """Envelope value at p with its two-letter optimizer and the right segment slope."""
    if p < 0:
        raise RateOutOfRange(f"cost must be non-negative, got {p}", limit=0.0)
    phi = np.zeros(curve.n_inputs)
    if p >= curve.saturation_cost:
        phi[curve.letters[-1]] = 1.0
        return DivergencePoint(p=p, d=curve.d_max, phi=InputDistribution(phi), gamma=0.0)

    seg = int(np.searchsorted(curve.p, p, side="right")) - 1
    t = (p - curve.p[seg]) / (curve.p[seg + 1] - curve.p[seg])
    phi[curve.letters[seg]] += 1.0 - t
    phi[curve.letters[seg + 1]] += t
    d = (1.0 - t) * curve.d[seg] + t * curve.d[seg + 1]
    return DivergencePoint(p=p, d=float(d), phi=InputDistribution(phi), gamma=float(curve.slopes[seg]))
