"""Cost-constrained discrete memoryless channel and its single-letter quantities.

All information quantities are in nats. KL terms follow the conventions
0 ln(0/x) = 0 and x ln(x/0) = +inf for x > 0, which is what
``scipy.special.rel_entr`` implements.
"""

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import rel_entr

from services.errors import (
    DegenerateDimensions,
    NegativeEntry,
    NoZeroCostLetter,
    RowSumViolation,
    UnreachableOutput,
)

logger = logging.getLogger(__name__)

STOCHASTIC_TOL = 1e-12


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Dmc:
    """Transition matrix indexed (input k, output j) plus per-letter costs."""

    transition: np.ndarray
    costs: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "costs", _frozen(self.costs))

    @property
    def n_inputs(self) -> int:
        return self.transition.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.transition.shape[1]

    @property
    def rho_max(self) -> float:
        return float(self.costs.max())

    @property
    def zero_cost_letters(self) -> np.ndarray:
        return np.flatnonzero(self.costs == 0.0)

    @property
    def channel_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.transition).tobytes())
        digest.update(np.ascontiguousarray(self.costs).tobytes())
        return digest.hexdigest()

    def __hash__(self):
        return hash(self.channel_hash)

    def __eq__(self, other):
        if not isinstance(other, Dmc):
            return NotImplemented
        return self.channel_hash == other.channel_hash

    def to_dict(self) -> dict:
        return {"transition": self.transition.tolist(), "costs": self.costs.tolist()}


@dataclass(frozen=True, eq=False)
class InputDistribution:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64, copy=True)
        if probs.ndim != 1 or np.any(probs < 0) or abs(probs.sum() - 1.0) > STOCHASTIC_TOL:
            raise ValueError("input distribution must be a probability vector")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)


@dataclass(frozen=True, eq=False)
class LetterDivergences:
    """Maximum single-letter divergence D_k and its maximizing reject letter m_k."""

    d: np.ndarray
    argmax_letter: np.ndarray


def validate(dmc: Dmc) -> None:
    """Raise a ChannelValidationError subclass unless every Dmc invariant holds."""
    transition = dmc.transition
    if transition.ndim != 2 or transition.shape[0] < 2 or transition.shape[1] < 2:
        raise DegenerateDimensions(f"need |X| >= 2 and |Y| >= 2, got shape {transition.shape}")
    if dmc.costs.shape != (transition.shape[0],):
        raise DegenerateDimensions(
            f"costs has shape {dmc.costs.shape}, expected ({transition.shape[0]},)"
        )
    if np.any(transition < 0):
        raise NegativeEntry("transition matrix has a negative entry")
    if np.any(dmc.costs < 0):
        raise NegativeEntry("costs must be non-negative")
    row_error = np.abs(transition.sum(axis=1) - 1.0)
    if np.any(row_error > STOCHASTIC_TOL):
        worst = int(np.argmax(row_error))
        raise RowSumViolation(f"row {worst} sums to {transition[worst].sum()!r}")
    if not np.any(dmc.costs == 0.0):
        raise NoZeroCostLetter("at least one input letter must have cost 0")
    unreachable = np.flatnonzero(transition.max(axis=0) <= 0)
    if unreachable.size:
        raise UnreachableOutput(f"output columns {unreachable.tolist()} cannot be reached")


def make_dmc(transition, costs, name: str = "custom") -> Dmc:
    """Build and validate a channel; rows within tolerance are renormalized exactly."""
    dmc = Dmc(transition=transition, costs=costs, name=name)
    validate(dmc)
    rows = np.array(dmc.transition)
    rows = rows / rows.sum(axis=1, keepdims=True)
    return Dmc(transition=rows, costs=dmc.costs, name=name)


def output_distribution(dmc: Dmc, phi: InputDistribution) -> np.ndarray:
    return phi.probs @ dmc.transition


def mutual_information(dmc: Dmc, phi: InputDistribution) -> float:
    """I(phi) = sum_{k,j} phi_k P_kj ln(P_kj / q_j), in nats."""
    q = output_distribution(dmc, phi)
    support = phi.probs > 0
    rows = dmc.transition[support]
    per_letter = rel_entr(rows, q[np.newaxis, :]).sum(axis=1)
    return max(float(phi.probs[support] @ per_letter), 0.0)


def average_cost(dmc: Dmc, phi: InputDistribution) -> float:
    return float(phi.probs @ dmc.costs)


def kl_matrix(dmc: Dmc) -> np.ndarray:
    """Matrix of KL(row k || row m); +inf where row m misses mass of row k."""
    rows = dmc.transition
    return rel_entr(rows[:, np.newaxis, :], rows[np.newaxis, :, :]).sum(axis=2)


def letter_divergences(dmc: Dmc) -> LetterDivergences:
    """D_k = max_m KL(row k || row m), ties broken toward the smallest m."""
    kl = kl_matrix(dmc)
    argmax = np.argmax(kl, axis=1)
    d = kl[np.arange(dmc.n_inputs), argmax]
    return LetterDivergences(d=_frozen(d), argmax_letter=_frozen(argmax, dtype=np.int64))


def worst_llr_bound(dmc: Dmc) -> float:
    """F = max_{k,m,j} ln(P_kj / P_mj) over reachable (k, j) pairs."""
    rows = dmc.transition
    with np.errstate(divide="ignore"):
        logs = np.log(rows)
    best = -np.inf
    for j in range(dmc.n_outputs):
        column = logs[:, j]
        reachable = column[rows[:, j] > 0]
        best = max(best, float(reachable.max() - column.min()))
    return best


def is_zero_error_capable(dmc: Dmc) -> bool:
    return bool(np.any(dmc.transition == 0.0))


def bsc(alpha: float) -> Dmc:
    """Binary symmetric channel with both letters free."""
    return make_dmc([[1 - alpha, alpha], [alpha, 1 - alpha]], [0.0, 0.0], name=f"bsc({alpha})")


def example1(alpha: float = 0.1) -> Dmc:
    """BSC with unit-cost letters plus a completely noisy free letter."""
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 1/2)")
    return make_dmc(
        [[0.5, 0.5], [alpha, 1 - alpha], [1 - alpha, alpha]],
        [0.0, 1.0, 1.0],
        name=f"example1({alpha})",
    )


def example2(eps: float = 1 / 75, delta: float = 1 / 100) -> Dmc:
    """Free 4-ary noisy letter, a cost-1 binary pair and a cost-4 quaternary symmetric block."""
    transition = [
        [0.25, 0.25, 0.25, 0.25],
        [delta, delta, 0.5 - delta, 0.5 - delta],
        [0.5 - delta, 0.5 - delta, delta, delta],
        [1 - 3 * eps, eps, eps, eps],
        [eps, 1 - 3 * eps, eps, eps],
        [eps, eps, 1 - 3 * eps, eps],
        [eps, eps, eps, 1 - 3 * eps],
    ]
    return make_dmc(transition, [0.0, 1.0, 1.0, 4.0, 4.0, 4.0, 4.0], name="example2")


def zchannel(alpha: float = 0.1) -> Dmc:
    """Z-channel: the free letter is received perfectly, the unit-cost letter flips w.p. alpha."""
    return make_dmc([[1.0, 0.0], [alpha, 1 - alpha]], [0.0, 1.0], name=f"zchannel({alpha})")


BUILTIN_CHANNELS = {
    "bsc": bsc,
    "example1": example1,
    "example2": example2,
    "zchannel": zchannel,
}
