"""Two-phase error-and-erasure scheme with retransmission, run over a sampled DMC with ideal feedback.

Each round sends the phase-1 codeword of the message, the receiver makes a
maximum-likelihood tentative decision, and the transmitter, seeing that
decision through the feedback link, sends the accept word when it is right and
the reject word otherwise. The receiver's accept/reject test ends the
transmission on accept; a reject erases the round and the message is sent
again from scratch.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from services.capacity import CapacityCurve
from services.channel_core import Dmc, is_zero_error_capable
from services.divergence_envelope import DivergenceCurve, divergence_at
from services.errors import (
    CodebookTooLarge,
    NotZeroErrorCapable,
    SimulationStalled,
    ZeroErrorViolation,
)
from services.reliability import exponent_at, exponent_for_split
from utils.config import worker_threads

logger = logging.getLogger(__name__)

RNG_NAME = "Philox"
CHUNK_SIZE = 1024
CODE_STREAM = 0
TRIAL_STREAM = 1
LOG_FLOOR = -1e6
REPAIR_ATTEMPTS = 1000
# per-symbol slack on phase energy caps; phase powers come out of the solvers this close to their knots
ENERGY_TOL = 1e-6
WORD_COUNT_KEYS = 100_000
EXACT_CONVOLUTION_CAP = 64
MAX_ROUNDS = 10_000


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based Philox stream for (seed, key); streams with distinct keys are independent."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass(frozen=True, eq=False)
class TwoPhaseCode:
    """Phase-1 codebook plus the phase-2 accept/reject words and the receiver's test."""

    ell1: int
    ell2: int
    codebook: np.ndarray
    accept_word: np.ndarray
    reject_word: np.ndarray
    llr_threshold: float
    r: float
    p: float
    eta: float
    p1: float
    p2: float
    kappa: float = 0.1
    # zero-error variant: accept iff this output shows up during phase 2
    marker_output: int | None = None

    @property
    def ell(self) -> int:
        return self.ell1 + self.ell2

    @property
    def m(self) -> int:
        return self.codebook.shape[0]

    @property
    def zero_error(self) -> bool:
        return self.marker_output is not None


@dataclass(frozen=True, eq=False)
class Round:
    y1: np.ndarray
    decision: int
    y2: np.ndarray
    accepted: bool


@dataclass(frozen=True, eq=False)
class Transcript:
    """Everything the receiver saw while one message was transmitted."""

    message: int
    rounds: tuple[Round, ...]

    @property
    def decoded(self) -> int:
        return self.rounds[-1].decision


@dataclass(frozen=True, eq=False)
class SimResult:
    trials: int
    errors: int
    p_e_hat: float
    ci_low: float
    ci_high: float
    tau_bar: float
    energy_rate: float
    energy_se: float
    mean_energy: float
    energy_per_round: float
    rounds_histogram: tuple[int, ...]
    tentative_errors: int
    seed: int
    rng: str = RNG_NAME
    transcripts: tuple[Transcript, ...] | None = field(default=None, repr=False)

    @property
    def total_rounds(self) -> int:
        return int(sum((i + 1) * n for i, n in enumerate(self.rounds_histogram)))

    @property
    def erasure_rate(self) -> float:
        """Fraction of rounds that ended in a reject."""
        total = self.total_rounds
        return (total - self.trials) / total if total else 0.0

    @property
    def accept_probability(self) -> float:
        total = self.total_rounds
        return self.trials / total if total else 1.0

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "errors": self.errors,
            "p_e_hat": self.p_e_hat,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "tau_bar": self.tau_bar,
            "energy_rate": self.energy_rate,
            "energy_per_round": self.energy_per_round,
            "rounds_histogram": list(self.rounds_histogram),
            "tentative_errors": self.tentative_errors,
            "seed": self.seed,
            "rng": self.rng,
        }


@dataclass(frozen=True)
class Phase2Errors:
    p_ra: float
    p_ar: float
    p_ra_bound: float
    exact: bool


@dataclass(frozen=True)
class EnergyCheck:
    energy_rate: float
    bound: float
    slack: float
    holds: bool


def _codebook_size(ell: int, r: float, m_cap: int) -> int:
    m = math.ceil(math.exp(ell * r))
    if m > m_cap:
        raise CodebookTooLarge(
            f"codebook needs M = ceil(exp(ell * r)) = {m} codewords, above the cap {m_cap}; "
            "reduce --ell or --rate, or raise --m-cap"
        )
    return max(m, 2)


def _phase_lengths(ell: int, eta: float) -> tuple[int, int]:
    ell1 = min(max(int(round(eta * ell)), 1), ell - 1)
    return ell1, ell - ell1


def phase_energy_cap(dmc: Dmc, length: int, power: float) -> float:
    """Total cost allowed for a phase word of ``length`` symbols at ``power`` per symbol."""
    return length * (power + ENERGY_TOL * max(1.0, dmc.rho_max))


def _words_within(costs: np.ndarray, length: int, cap: float, enough: int) -> int:
    """Number of words of ``length`` letters with these costs whose total is at most ``cap``, capped at ``enough``."""
    totals = {0.0: 1}
    for _ in range(length):
        step: dict[float, int] = {}
        for total, count in totals.items():
            for rho in costs:
                key = round(total + float(rho), 9)
                if key <= cap:
                    step[key] = step.get(key, 0) + count
        totals = step
        if len(totals) > WORD_COUNT_KEYS:
            return enough
    return min(sum(totals.values()), enough)


def _draw_codebook(
    dmc: Dmc, probs: np.ndarray, m: int, ell1: int, cap: float, rng: np.random.Generator
) -> np.ndarray:
    """``m`` distinct i.i.d. codewords under ``probs``, each with total cost at most ``cap``."""
    costs = dmc.costs
    support = np.flatnonzero(probs > 0)
    available = _words_within(costs[support], ell1, cap, m)
    if available < m:
        raise CodebookTooLarge(
            f"only {available} distinct length-{ell1} words fit the energy cap {cap:.6g}, "
            f"the codebook needs M = {m}; raise --ell or lower --rate"
        )

    codebook = rng.choice(dmc.n_inputs, size=(m, ell1), p=probs)
    for _ in range(REPAIR_ATTEMPTS):
        _, first = np.unique(codebook, axis=0, return_index=True)
        redraw = np.union1d(
            np.flatnonzero(costs[codebook].sum(axis=1) > cap), np.setdiff1d(np.arange(m), first)
        )
        if redraw.size == 0:
            return codebook
        codebook[redraw] = rng.choice(dmc.n_inputs, size=(redraw.size, ell1), p=probs)

    over = np.flatnonzero(costs[codebook].sum(axis=1) > cap)
    if over.size:
        free = dmc.zero_cost_letters
        filler = int(free[np.argmax(probs[free])])
        for row in over:
            word = codebook[row]
            for pos in np.argsort(-costs[word], kind="stable"):
                if costs[word].sum() <= cap:
                    break
                word[pos] = filler
        logger.info("substituted zero-cost letters into %d codewords to meet the energy cap", over.size)
    if np.unique(codebook, axis=0).shape[0] < m:
        raise CodebookTooLarge(
            f"could not draw {m} distinct codewords of length {ell1} under the energy cap {cap:.6g}"
        )
    return codebook


def _accept_composition(dmc: Dmc, probs: np.ndarray, ell2: int, cap: float) -> np.ndarray:
    """Largest-remainder apportionment of ell2 symbols to ``probs``, kept under the energy cap."""
    quota = ell2 * probs
    counts = np.floor(quota).astype(np.int64)
    remainder = quota - counts
    short = ell2 - int(counts.sum())
    for k in np.argsort(-remainder, kind="stable")[:short]:
        counts[k] += 1

    support = np.flatnonzero(counts)
    while counts @ dmc.costs > cap and support.size > 1:
        dear = support[np.argmax(dmc.costs[support])]
        cheap = support[np.argmin(dmc.costs[support])]
        counts[dear] -= 1
        counts[cheap] += 1
        support = np.flatnonzero(counts)
    return np.repeat(np.arange(dmc.n_inputs), counts)


def build_code(
    dmc: Dmc,
    caps: CapacityCurve,
    divs: DivergenceCurve,
    r: float,
    p: float,
    eta: float,
    ell: int,
    seed: int,
    kappa: float = 0.1,
    m_cap: int = 4096,
) -> TwoPhaseCode:
    """Random phase-1 codebook at cost P1 plus accept/reject words at cost P2 for the split eta."""
    if ell < 2:
        raise ValueError("block length must be at least 2")
    exponent_at(caps, divs, r, p, eta)
    m = _codebook_size(ell, r, m_cap)
    ell1, ell2 = _phase_lengths(ell, eta)
    p1, p2, _ = exponent_for_split(caps, divs, r, p, eta)

    rng = make_rng(seed, CODE_STREAM)
    codebook = _draw_codebook(dmc, caps.phi_at(p1).probs, m, ell1, phase_energy_cap(dmc, ell1, p1), rng)

    accept_law = divergence_at(divs, p2).phi.probs
    accept_word = _accept_composition(dmc, accept_law, ell2, phase_energy_cap(dmc, ell2, p2))
    reject_word = divs.letter_divergences.argmax_letter[accept_word]
    threshold = (1 - kappa) * float(divs.letter_divergences.d[accept_word].sum())
    logger.info(
        "two-phase code: M=%d ell1=%d ell2=%d P1=%.6g P2=%.6g threshold=%.6g", m, ell1, ell2, p1, p2, threshold
    )
    return TwoPhaseCode(
        ell1=ell1,
        ell2=ell2,
        codebook=codebook,
        accept_word=accept_word,
        reject_word=np.asarray(reject_word, dtype=np.int64),
        llr_threshold=threshold,
        r=r,
        p=p,
        eta=eta,
        p1=p1,
        p2=p2,
        kappa=kappa,
    )


def zero_error_triple(dmc: Dmc) -> tuple[int, int, int]:
    """(k, m, j) with P_kj > 0 = P_mj and P_kj largest; ties go to the cheaper, then lower, k."""
    if not is_zero_error_capable(dmc):
        raise NotZeroErrorCapable(f"channel {dmc.name} has no zero transition probability")
    best = None
    for k in range(dmc.n_inputs):
        for j in range(dmc.n_outputs):
            if dmc.transition[k, j] <= 0:
                continue
            blocked = np.flatnonzero(dmc.transition[:, j] == 0)
            if blocked.size == 0:
                continue
            key = (-dmc.transition[k, j], dmc.costs[k], k)
            if best is None or key < best[0]:
                best = (key, (k, int(blocked[0]), j))
    if best is None:
        raise NotZeroErrorCapable(f"channel {dmc.name} has no usable zero-error output")
    return best[1]


def build_zero_error_code(
    dmc: Dmc, caps: CapacityCurve, r: float, p: float, ell: int, seed: int, m_cap: int = 4096
) -> TwoPhaseCode:
    """Phase 1 at the full cost budget, phase 2 of length ceil(ln ell) with a marker-output test."""
    k, m_letter, j = zero_error_triple(dmc)
    ell2 = max(1, math.ceil(math.log(ell)))
    ell1 = ell - ell2
    if ell1 < 1:
        raise ValueError(f"block length {ell} leaves no room for phase 1")
    m = _codebook_size(ell, r, m_cap)
    rng = make_rng(seed, CODE_STREAM)
    codebook = _draw_codebook(dmc, caps.phi_at(p).probs, m, ell1, phase_energy_cap(dmc, ell1, p), rng)
    return TwoPhaseCode(
        ell1=ell1,
        ell2=ell2,
        codebook=codebook,
        accept_word=np.full(ell2, k, dtype=np.int64),
        reject_word=np.full(ell2, m_letter, dtype=np.int64),
        llr_threshold=math.nan,
        r=r,
        p=p,
        eta=ell1 / ell,
        p1=p,
        p2=float(dmc.costs[k]),
        kappa=0.0,
        marker_output=j,
    )


def llr_table(code: TwoPhaseCode, dmc: Dmc) -> np.ndarray:
    """ln(P[x_A[i], j] / P[x_R[i], j]) per phase-2 position i and output j."""
    with np.errstate(divide="ignore", invalid="ignore"):
        table = np.log(dmc.transition[code.accept_word]) - np.log(dmc.transition[code.reject_word])
    return np.nan_to_num(table, nan=0.0, posinf=np.inf, neginf=-np.inf)


@dataclass
class _Tables:
    cdf: np.ndarray
    loglik: np.ndarray
    llr: np.ndarray
    word_energy: np.ndarray
    accept_energy: float
    reject_energy: float


def _tables(code: TwoPhaseCode, dmc: Dmc) -> _Tables:
    cdf = np.cumsum(dmc.transition, axis=1)
    cdf[:, -1] = 1.0
    with np.errstate(divide="ignore"):
        log_p = np.maximum(np.log(dmc.transition), LOG_FLOOR)
    # row m holds log P[codebook[m, i], j] at column i * |Y| + j
    loglik = log_p[code.codebook].reshape(code.m, -1)
    return _Tables(
        cdf=cdf,
        loglik=loglik,
        llr=llr_table(code, dmc) if not code.zero_error else np.zeros((code.ell2, dmc.n_outputs)),
        word_energy=dmc.costs[code.codebook].sum(axis=1),
        accept_energy=float(dmc.costs[code.accept_word].sum()),
        reject_energy=float(dmc.costs[code.reject_word].sum()),
    )


def _transmit(letters: np.ndarray, cdf: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(letters.shape)
    return (cdf[letters] > u[..., np.newaxis]).argmax(axis=-1)


def _decode(y1: np.ndarray, loglik: np.ndarray, n_outputs: int) -> np.ndarray:
    """ML decision per row of y1; ties go to the lowest message index."""
    onehot = np.zeros((y1.shape[0], y1.shape[1] * n_outputs))
    cols = np.arange(y1.shape[1]) * n_outputs + y1
    onehot[np.arange(y1.shape[0])[:, np.newaxis], cols] = 1.0
    return (onehot @ loglik.T).argmax(axis=1)


@dataclass
class _ChunkStats:
    errors: int
    tentative_errors: int
    rounds: np.ndarray
    energy: np.ndarray
    transcripts: list | None


def _run_chunk(
    code: TwoPhaseCode,
    tables: _Tables,
    n_outputs: int,
    n: int,
    rng: np.random.Generator,
    keep_traces: bool,
    max_rounds: int,
) -> _ChunkStats:
    theta = rng.integers(code.m, size=n)
    rounds = np.zeros(n, dtype=np.int64)
    energy = np.zeros(n)
    wrong = np.zeros(n, dtype=bool)
    tentative_errors = 0
    history = [[] for _ in range(n)] if keep_traces else None

    active = np.arange(n)
    while active.size:
        if rounds[active[0]] >= max_rounds:
            raise SimulationStalled(f"{active.size} trials still unresolved after {max_rounds} rounds")
        sent = theta[active]
        y1 = _transmit(code.codebook[sent], tables.cdf, rng)
        decision = _decode(y1, tables.loglik, n_outputs)
        correct = decision == sent
        words = np.where(correct[:, np.newaxis], code.accept_word, code.reject_word)
        y2 = _transmit(words, tables.cdf, rng)
        if code.zero_error:
            accepted = (y2 == code.marker_output).any(axis=1)
        else:
            llr = tables.llr[np.arange(code.ell2), y2].sum(axis=1)
            accepted = llr >= code.llr_threshold

        rounds[active] += 1
        energy[active] += tables.word_energy[sent] + np.where(
            correct, tables.accept_energy, tables.reject_energy
        )
        tentative_errors += int((~correct).sum())
        wrong[active[accepted & ~correct]] = True
        if keep_traces:
            for i, trial in enumerate(active):
                history[trial].append(Round(y1[i], int(decision[i]), y2[i], bool(accepted[i])))
        active = active[~accepted]

    transcripts = None
    if keep_traces:
        transcripts = [Transcript(int(theta[i]), tuple(history[i])) for i in range(n)]
    return _ChunkStats(int(wrong.sum()), tentative_errors, rounds, energy, transcripts)


def wilson_interval(errors: int, trials: int) -> tuple[float, float]:
    ci = stats.binomtest(errors, trials).proportion_ci(confidence_level=0.95, method="wilson")
    return float(ci.low), float(ci.high)


def simulate_trials(
    code: TwoPhaseCode,
    dmc: Dmc,
    n_trials: int,
    seed: int,
    keep_traces: bool = False,
    threads: int | None = None,
    max_rounds: int = MAX_ROUNDS,
) -> SimResult:
    """Run n_trials independent transmissions; identical inputs give identical results for any thread count."""
    if n_trials < 1:
        raise ValueError("need at least one trial")
    tables = _tables(code, dmc)
    sizes = [min(CHUNK_SIZE, n_trials - start) for start in range(0, n_trials, CHUNK_SIZE)]

    def run(index: int) -> _ChunkStats:
        return _run_chunk(
            code,
            tables,
            dmc.n_outputs,
            sizes[index],
            make_rng(seed, TRIAL_STREAM, index),
            keep_traces,
            max_rounds,
        )

    workers = worker_threads(threads)
    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run, range(len(sizes))))
    else:
        chunks = [run(i) for i in range(len(sizes))]

    rounds = np.concatenate([c.rounds for c in chunks])
    energy = np.concatenate([c.energy for c in chunks])
    errors = sum(c.errors for c in chunks)
    tau = rounds * code.ell
    tau_bar = float(tau.mean())
    energy_rate = float(energy.sum() / tau.sum())
    residual = energy - energy_rate * tau
    energy_se = float(residual.std(ddof=1) / (math.sqrt(n_trials) * tau_bar)) if n_trials > 1 else 0.0
    ci_low, ci_high = wilson_interval(errors, n_trials)
    histogram = np.bincount(rounds)[1:]
    transcripts = None
    if keep_traces:
        transcripts = tuple(t for c in chunks for t in c.transcripts)

    result = SimResult(
        trials=n_trials,
        errors=errors,
        p_e_hat=errors / n_trials,
        ci_low=ci_low,
        ci_high=ci_high,
        tau_bar=tau_bar,
        energy_rate=energy_rate,
        energy_se=energy_se,
        mean_energy=float(energy.mean()),
        energy_per_round=float(energy.sum() / rounds.sum()),
        rounds_histogram=tuple(int(x) for x in histogram),
        tentative_errors=sum(c.tentative_errors for c in chunks),
        seed=seed,
        transcripts=transcripts,
    )
    logger.info(
        "simulated %d trials: %d errors, tau_bar=%.4g, energy rate=%.4g",
        n_trials,
        errors,
        tau_bar,
        energy_rate,
    )
    return result


def simulate_zero_error(
    dmc: Dmc,
    caps: CapacityCurve,
    r: float,
    p: float,
    ell: int,
    n_trials: int,
    seed: int,
    m_cap: int = 4096,
    keep_traces: bool = False,
    threads: int | None = None,
    code: TwoPhaseCode | None = None,
) -> SimResult:
    """Zero-error scheme on a channel with a zero transition; any decoding error is a hard failure.

    A ``code`` already built by ``build_zero_error_code`` is simulated as is.
    """
    if code is None:
        code = build_zero_error_code(dmc, caps, r, p, ell, seed, m_cap)
    elif not code.zero_error:
        raise ValueError("simulate_zero_error needs a code with a marker output")
    result = simulate_trials(code, dmc, n_trials, seed, keep_traces=keep_traces, threads=threads)
    if result.errors:
        raise ZeroErrorViolation(f"{result.errors} decoding errors under the zero-error scheme")
    return result


def _merge(values: np.ndarray, probs: np.ndarray, quantum: float) -> tuple[np.ndarray, np.ndarray]:
    keys = np.round(values / quantum)
    unique, inverse = np.unique(keys, return_inverse=True)
    merged = np.bincount(inverse, weights=probs)
    return unique * quantum, merged


def phase2_error_probs(
    code: TwoPhaseCode, dmc: Dmc, threshold: float | None = None, exact_cap: int = EXACT_CONVOLUTION_CAP
) -> Phase2Errors:
    """P(accept | reject word sent) and P(reject | accept word sent) for the phase-2 test.

    The LLR law is convolved position by position, merging atoms that agree to
    1e-12. Past ``exact_cap`` positions atoms are merged on a coarser grid.
    """
    if code.zero_error:
        j = code.marker_output
        miss = float(np.prod(1.0 - dmc.transition[code.accept_word, j]))
        return Phase2Errors(p_ra=0.0, p_ar=miss, p_ra_bound=0.0, exact=True)

    threshold = code.llr_threshold if threshold is None else threshold
    table = llr_table(code, dmc)
    exact = code.ell2 <= exact_cap
    if exact:
        quantum = 1e-12
    else:
        spread = float(np.ptp(table[np.isfinite(table)])) if np.isfinite(table).any() else 1.0
        quantum = max(spread * code.ell2 / 2**16, 1e-12)

    def law(word: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        values, probs = np.zeros(1), np.ones(1)
        for i, letter in enumerate(word):
            atoms = dmc.transition[letter] > 0
            values = (values[:, np.newaxis] + table[i, atoms][np.newaxis, :]).ravel()
            probs = (probs[:, np.newaxis] * dmc.transition[letter, atoms][np.newaxis, :]).ravel()
            values, probs = _merge(values, probs, quantum)
        return values, probs

    values_r, probs_r = law(code.reject_word)
    values_a, probs_a = law(code.accept_word)
    p_ra = float(probs_r[values_r >= threshold].sum())
    p_ar = float(probs_a[values_a < threshold].sum())
    # Chernoff: E_R[exp(LLR)] = 1, so P_R(LLR >= T) <= exp(-T)
    if threshold == math.inf:
        bound = 0.0
    elif threshold == -math.inf:
        bound = 1.0
    else:
        bound = min(math.exp(-threshold), 1.0)
    return Phase2Errors(
        p_ra=min(max(p_ra, 0.0), 1.0),
        p_ar=min(max(p_ar, 0.0), 1.0),
        p_ra_bound=bound,
        exact=exact,
    )


def rounds_geometric_test(result: SimResult) -> float:
    """Chi-square p-value of the rounds-per-message histogram against a geometric law."""
    counts = np.asarray(result.rounds_histogram, dtype=np.float64)
    accept = result.accept_probability
    if counts.size <= 1 or accept >= 1.0:
        return 1.0
    n = result.trials
    expected = n * accept * (1 - accept) ** np.arange(counts.size)
    # pool the tail so every bin expects at least five messages
    bins = int((expected >= 5.0).sum())
    if bins < 3:
        return 1.0
    observed = np.append(counts[: bins - 1], counts[bins - 1 :].sum())
    expected = np.append(expected[: bins - 1], n * (1 - accept) ** (bins - 1))
    return float(stats.chisquare(observed, expected, ddof=1).pvalue)


def energy_rate_bound(code: TwoPhaseCode, dmc: Dmc, result: SimResult) -> EnergyCheck:
    """Energy rate against eta P1 + (1 - eta) P2 + rho_max * erasure rate, with a 3 SE slack."""
    eta = code.ell1 / code.ell
    bound = eta * code.p1 + (1 - eta) * code.p2 + dmc.rho_max * result.erasure_rate
    slack = 3 * result.energy_se
    return EnergyCheck(
        energy_rate=result.energy_rate,
        bound=bound,
        slack=slack,
        holds=result.energy_rate <= bound + slack + ENERGY_TOL * max(1.0, dmc.rho_max),
    )
