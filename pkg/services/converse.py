"""Converse bounds and their checks on simulated transmissions.

The receiver's exact posterior over the M messages is rebuilt symbol by symbol
from a simulator transcript. The posterior entropy path, the energy ledger and
the two stopping times it defines are then checked against Fano's inequality,
the expected-time bounds of the two converse phases, and the submartingale
properties of the entropy/energy processes.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp, xlogy

from services.capacity import CapacityCurve
from services.channel_core import Dmc, letter_divergences
from services.divergence_envelope import DivergenceCurve
from services.errors import PathwiseViolation, TranscriptMismatch
from services.reliability import ReliabilityPoint
from services.yi_simulator import SimResult, Transcript, TwoPhaseCode, wilson_interval

logger = logging.getLogger(__name__)

ENTROPY_THRESHOLD = 1.0
PATHWISE_SLACK = 1e-9
N_BINS = 10
MIN_BIN = 30

PASS = "pass"
FAIL = "fail"
VACUOUS = "vacuous"
ASYMPTOTIC = "asymptotic-note"


@dataclass(frozen=True, eq=False)
class EntropyTrace:
    """Posterior entropy and energy along one transmission, indexed by symbol count n = 0..tau."""

    h: np.ndarray
    s: np.ndarray
    expected_energy: np.ndarray
    expected_divergence: np.ndarray
    tau: int
    tau1: int
    message_correct: bool
    m: int
    # 1 - posterior of the decoded message at tau
    posterior_error: float = 0.0
    # entropy level that defines tau1
    threshold: float = ENTROPY_THRESHOLD


@dataclass(frozen=True)
class CheckResult:
    name: str
    status: str
    margin: float
    details: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PhaseBounds:
    e_tau1: float
    e_tau1_lb: float
    e_tau2: float
    e_tau2_lb: float
    p1_hat: float
    p2_hat: float
    p_e: float
    p_e_from_interval: bool
    phase2_entropy_drop: float
    phase2_entropy_bound: float


@dataclass(frozen=True)
class OperatingPoint:
    r_hat: float
    p_hat: float
    eta_hat: float
    p1_hat: float
    p2_hat: float
    exponent_hat: float
    rate_gap: float
    exponent_gap: float


def _sent_letters(code: TwoPhaseCode, transcript: Transcript) -> tuple[np.ndarray, np.ndarray]:
    """Letter every message would have sent at each step (tau x M) and the received outputs."""
    letters, outputs = [], []
    for rnd in transcript.rounds:
        letters.append(code.codebook.T)
        phase2 = np.repeat(code.reject_word[:, np.newaxis], code.m, axis=1)
        phase2[:, rnd.decision] = code.accept_word
        letters.append(phase2)
        outputs += [np.asarray(rnd.y1), np.asarray(rnd.y2)]
    return np.vstack(letters), np.concatenate(outputs)


def posterior_path(code: TwoPhaseCode, dmc: Dmc, transcript: Transcript) -> np.ndarray:
    """Log posterior over messages after each received symbol, rows n = 0..tau."""
    letters, outputs = _sent_letters(code, transcript)
    with np.errstate(divide="ignore"):
        step = np.log(dmc.transition[letters, outputs[:, np.newaxis]])
    log_w = np.vstack([np.zeros(code.m), np.cumsum(step, axis=0)]) - math.log(code.m)
    dead = np.flatnonzero(np.all(np.isneginf(log_w), axis=1))
    if dead.size:
        raise TranscriptMismatch(f"output at step {int(dead[0])} is impossible under every message")
    if np.isneginf(log_w[-1, transcript.message]):
        raise TranscriptMismatch(f"transcript is impossible under its own message {transcript.message}")
    return log_w - logsumexp(log_w, axis=1, keepdims=True)


def _entropy(log_post: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row entropies computed around the most likely message so tiny entropies keep their precision."""
    post = np.exp(log_post)
    rows = np.arange(log_post.shape[0])
    top = np.argmax(log_post, axis=1)
    others = post.copy()
    others[rows, top] = 0.0
    rest = others.sum(axis=1)
    log_top = np.log1p(-np.minimum(rest, 1.0))
    h = -np.exp(log_top) * log_top - xlogy(others, others).sum(axis=1)
    return np.maximum(h, 0.0), top, rest


def posterior_trace(
    code: TwoPhaseCode,
    dmc: Dmc,
    transcript: Transcript,
    d: np.ndarray | None = None,
    threshold: float = ENTROPY_THRESHOLD,
) -> EntropyTrace:
    """Entropy, energy ledger and stopping times of one transmission.

    Args:
        code (TwoPhaseCode): code the transcript was produced with
        dmc (Dmc): channel the transcript was produced on
        transcript (Transcript): simulator transcript of one message
        d (np.ndarray | None): letter divergences D_k, computed from the channel when omitted
        threshold (float): entropy level in nats that ends the first converse phase

    Returns:
        EntropyTrace: per-step entropies h[0..tau] with energies and stopping times
    """
    if d is None:
        d = letter_divergences(dmc).d
    log_post = posterior_path(code, dmc, transcript)
    post = np.exp(log_post)
    h, top, rest = _entropy(log_post)

    letters, _ = _sent_letters(code, transcript)
    tau = letters.shape[0]
    per_message = np.vstack([np.zeros(code.m), np.cumsum(dmc.costs[letters], axis=0)])
    expected_energy = (post * per_message).sum(axis=1)
    s = per_message[:, transcript.message]
    with np.errstate(invalid="ignore"):
        weighted = np.where(post[:-1] > 0, post[:-1] * d[letters], 0.0)
    expected_divergence = weighted.sum(axis=1)

    below = np.flatnonzero(h <= threshold)
    tau1 = int(min(below[0], tau)) if below.size else tau
    decoded = transcript.decoded
    if decoded == top[-1]:
        posterior_error = float(rest[-1])
    else:
        posterior_error = float(1.0 - post[-1, decoded])
    return EntropyTrace(
        h=h,
        s=s,
        expected_energy=expected_energy,
        expected_divergence=expected_divergence,
        tau=tau,
        tau1=tau1,
        message_correct=decoded == transcript.message,
        m=code.m,
        posterior_error=posterior_error,
        threshold=threshold,
    )


def traces_from_result(
    code: TwoPhaseCode, dmc: Dmc, result: SimResult, threshold: float = ENTROPY_THRESHOLD
) -> list[EntropyTrace]:
    if result.transcripts is None:
        raise ValueError("simulation was run without keep_traces")
    d = letter_divergences(dmc).d
    return [posterior_trace(code, dmc, t, d, threshold) for t in result.transcripts]


def fano_bound(p_e: float, m: int, exact: bool = False) -> float:
    """Upper bound on the expected posterior entropy at decoding for error probability p_e.

    With ``exact`` the tighter h(p_e) + p_e ln(m - 1) is returned instead of
    p_e (ln m - ln p_e + 1).
    """
    if not 0 <= p_e <= 1:
        raise ValueError(f"error probability must lie in [0, 1], got {p_e}")
    if exact:
        binary = -xlogy(p_e, p_e) - xlogy(1 - p_e, 1 - p_e)
        return float(binary + p_e * math.log(m - 1))
    return float(p_e * math.log(m) - xlogy(p_e, p_e) + p_e)


def theorem3_bound(caps: CapacityCurve, m: int, p: float, p_e: float) -> float:
    """Lower bound (ln M - fano(P_e)) / C(P) on the expected decoding time, clamped at 0."""
    c_p = caps.value(p)
    if c_p <= 0:
        return math.inf
    return max((math.log(m) - fano_bound(p_e, m)) / c_p, 0.0)


def _error_estimate(traces: list[EntropyTrace]) -> tuple[float, bool]:
    """Empirical P_e, or the Wilson upper limit when no error was observed."""
    errors = sum(not t.message_correct for t in traces)
    if errors:
        return errors / len(traces), False
    return wilson_interval(0, len(traces))[1], True


def phase_bounds(
    traces: list[EntropyTrace],
    divs: DivergenceCurve | None,
    caps: CapacityCurve,
    f_bound: float,
) -> PhaseBounds:
    """Expected-time lower bounds for the two converse phases at the empirical phase costs."""
    if not traces:
        raise ValueError("need at least one trace")
    m = traces[0].m
    log_m = math.log(m)
    tau = np.array([t.tau for t in traces], dtype=np.float64)
    tau1 = np.array([t.tau1 for t in traces], dtype=np.float64)
    s_tau = np.array([t.s[t.tau] for t in traces])
    s_tau1 = np.array([t.s[t.tau1] for t in traces])
    p_e, from_interval = _error_estimate(traces)
    fano = fano_bound(p_e, m)

    p1_hat = float(s_tau1.sum() / tau1.sum()) if tau1.sum() > 0 else 0.0
    c1 = caps.value(p1_hat)
    e_tau1_lb = max((log_m * (1 - fano) - 1) / c1, 0.0) if c1 > 0 else math.inf

    phase2 = tau - tau1
    vacuous = phase2.sum() <= 0 or divs is None or not math.isfinite(f_bound)
    p2_hat = float((s_tau - s_tau1).sum() / phase2.sum()) if phase2.sum() > 0 else math.nan
    if vacuous:
        e_tau2_lb = math.nan
        drop, bound = math.nan, math.nan
    else:
        d2 = divs.value(p2_hat)
        numerator = -math.log(p_e) - f_bound - math.log(log_m - math.log(p_e) + 1)
        e_tau2_lb = numerator / d2 if d2 > 0 else math.inf
        with np.errstate(divide="ignore"):
            drops = np.array([math.log(t.h[t.tau1]) - math.log(t.h[t.tau]) for t in traces])
        drop = float(drops.mean())
        bound = d2 * float(phase2.mean())
    return PhaseBounds(
        e_tau1=float(tau1.mean()),
        e_tau1_lb=e_tau1_lb,
        e_tau2=float(phase2.mean()),
        e_tau2_lb=e_tau2_lb,
        p1_hat=p1_hat,
        p2_hat=p2_hat,
        p_e=p_e,
        p_e_from_interval=from_interval,
        phase2_entropy_drop=drop,
        phase2_entropy_bound=bound,
    )


def phase_bound_checks(
    traces: list[EntropyTrace], divs: DivergenceCurve | None, caps: CapacityCurve, f_bound: float
) -> list[CheckResult]:
    bounds = phase_bounds(traces, divs, caps, f_bound)
    details = asdict(bounds)
    tau1 = np.array([t.tau1 for t in traces], dtype=np.float64)
    phase2 = np.array([t.tau - t.tau1 for t in traces], dtype=np.float64)
    se1 = _se(tau1)
    results = [
        CheckResult(
            "phase1_time",
            PASS if bounds.e_tau1 + 3 * se1 >= bounds.e_tau1_lb else FAIL,
            bounds.e_tau1 + 3 * se1 - bounds.e_tau1_lb,
            details,
        )
    ]
    if math.isnan(bounds.e_tau2_lb):
        results.append(CheckResult("phase2_time", VACUOUS, math.nan, details))
        results.append(CheckResult("phase2_entropy_drop", VACUOUS, math.nan, details))
        return results
    se2 = _se(phase2)
    margin2 = bounds.e_tau2 + 3 * se2 - bounds.e_tau2_lb
    status2 = PASS if margin2 >= 0 else FAIL
    if bounds.p_e_from_interval:
        details["note"] = "no decoding errors observed; P_e taken at the Wilson upper limit"
    results.append(CheckResult("phase2_time", status2, margin2, details))
    with np.errstate(divide="ignore", invalid="ignore"):
        drops = np.array([math.log(t.h[t.tau1]) - math.log(t.h[t.tau]) for t in traces])
    drop_margin = bounds.phase2_entropy_bound - bounds.phase2_entropy_drop + 3 * _se(drops)
    results.append(CheckResult("phase2_entropy_drop", PASS if drop_margin >= 0 else FAIL, drop_margin, details))
    return results


def _se(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(values.size))


def _binned_means(keys: np.ndarray, values: np.ndarray) -> list[tuple[float, float, int]]:
    """(mean, standard error, count) of ``values`` within quantile bins of ``keys``."""
    edges = np.unique(np.quantile(keys, np.linspace(0, 1, N_BINS + 1)))
    which = np.clip(np.searchsorted(edges, keys, side="right") - 1, 0, max(len(edges) - 2, 0))
    out = []
    for b in np.unique(which):
        chunk = values[which == b]
        if chunk.size >= MIN_BIN:
            out.append((float(chunk.mean()), _se(chunk), int(chunk.size)))
    if not out and values.size:
        out.append((float(values.mean()), _se(values), int(values.size)))
    return out


def _drift_check(name: str, keys: np.ndarray, increments: list[np.ndarray]) -> CheckResult:
    """Pass when, for the least favourable multiplier, no bin mean falls below -3 SE."""
    worst = math.inf
    per_choice = []
    for inc in increments:
        bins = _binned_means(keys, inc)
        margin = min(mean + 3 * se for mean, se, _ in bins) if bins else math.inf
        per_choice.append([{"mean": mean, "se": se, "n": n} for mean, se, n in bins])
        worst = min(worst, margin)
    return CheckResult(name, PASS if worst >= -1e-12 else FAIL, worst, {"bins": per_choice})


def _multipliers(interval: tuple[float, float]) -> list[float]:
    return sorted({g for g in interval if math.isfinite(g)}) or [0.0]


def check_submartingales(
    traces: list[EntropyTrace], caps: CapacityCurve, divs: DivergenceCurve | None, p: float
) -> list[CheckResult]:
    """Binned drift tests of the entropy/energy processes built on C(P) and on D(P).

    The D-based test is skipped when ``divs`` is None (channels with a zero
    transition). Both supergradient endpoints are tried at a breakpoint and the
    less favourable one decides.
    """
    c_p = caps.value(p)
    gammas_c = _multipliers(caps.gamma_interval(p))
    keys, dh, de = [], [], []
    dlog, dlog_keys = [], []
    for t in traces:
        n = t.tau
        keys.append(t.h[:n])
        dh.append(np.diff(t.h))
        de.append(np.diff(t.expected_energy))
        if divs is not None:
            with np.errstate(divide="ignore"):
                log_h = np.log(t.h)
            dlog.append(np.diff(log_h))
            dlog_keys.append(t.h[:n])
    keys = np.concatenate(keys)
    dh = np.concatenate(dh)
    de = np.concatenate(de)

    v_increments = [dh + c_p + g * (de - p) for g in gammas_c]
    results = [_drift_check("submartingale_V", keys, v_increments)]

    v_end = [np.array([t.h[t.tau] + t.tau * c_p + g * (t.expected_energy[t.tau] - t.tau * p) for t in traces]) for g in gammas_c]
    log_m = math.log(traces[0].m)
    margin = min(float(v.mean()) + 3 * _se(v) - log_m for v in v_end)
    results.append(CheckResult("telescoping_V", PASS if margin >= -1e-12 else FAIL, margin))

    if divs is None:
        results.append(CheckResult("submartingale_W", VACUOUS, math.nan, {"reason": "infinite D_k"}))
        return results
    d_p = divs.value(p)
    right, left = divs.slopes_at(p, snap=1e-12)
    gammas_d = _multipliers((right, left))
    dlog = np.concatenate(dlog)
    finite = np.isfinite(dlog)
    w_increments = [(dlog + d_p + g * (de - p))[finite] for g in gammas_d]
    results.append(_drift_check("submartingale_W", np.concatenate(dlog_keys)[finite], w_increments))
    return results


def check_log_entropy_drop(traces: list[EntropyTrace]) -> CheckResult:
    """Binned check that the expected one-step drop of ln H is at most the expected letter divergence."""
    keys, excess = [], []
    for t in traces:
        with np.errstate(divide="ignore", invalid="ignore"):
            drop = np.log(t.h[:-1]) - np.log(t.h[1:])
        ok = np.isfinite(drop) & np.isfinite(t.expected_divergence)
        keys.append(t.h[:-1][ok])
        excess.append((t.expected_divergence - drop)[ok])
    return _drift_check("log_entropy_drop", np.concatenate(keys), [np.concatenate(excess)])


def check_lemma11(traces: list[EntropyTrace], f_bound: float) -> CheckResult:
    """Pathwise: every one-step drop of ln H is at most F, and ln H at tau1 is at least -F.

    Raises:
        PathwiseViolation: on the first offending trace and step
    """
    steps = 0
    worst = math.inf
    for index, t in enumerate(traces):
        positive = t.h > 0
        with np.errstate(divide="ignore"):
            log_h = np.log(t.h)
        valid = positive[:-1] & positive[1:]
        drops = (log_h[:-1] - log_h[1:])[valid]
        steps += int(valid.sum())
        if drops.size:
            slack = f_bound - float(drops.max())
            worst = min(worst, slack)
            if slack < -PATHWISE_SLACK:
                step = int(np.flatnonzero(valid)[np.argmax(drops)])
                raise PathwiseViolation(
                    f"trace {index} step {step}: ln H dropped by {drops.max():.6g} > F = {f_bound:.6g}",
                    trace_index=index,
                    step=step,
                )
        if 1 <= t.tau1 and t.h[t.tau1 - 1] > t.threshold and t.h[t.tau1] > 0:
            if log_h[t.tau1] < -f_bound - PATHWISE_SLACK:
                raise PathwiseViolation(
                    f"trace {index}: ln H at tau1 is {log_h[t.tau1]:.6g} < -F",
                    trace_index=index,
                    step=t.tau1,
                )
    return CheckResult("pathwise_drop", PASS, worst, {"steps": steps, "f_bound": f_bound})


def check_fano(traces: list[EntropyTrace]) -> CheckResult:
    """Mean entropy at decoding against the Fano bound at the estimated error probability."""
    m = traces[0].m
    h_tau = np.array([t.h[t.tau] for t in traces])
    errors = sum(not t.message_correct for t in traces)
    p_e_hat = errors / len(traces)
    p_e_posterior = float(np.mean([t.posterior_error for t in traces]))
    p_e = min(max(p_e_hat, p_e_posterior), 1.0)
    bound = fano_bound(p_e, m)
    margin = bound + 3 * _se(h_tau) - float(h_tau.mean())
    details = {"mean_entropy": float(h_tau.mean()), "p_e_hat": p_e_hat, "p_e_posterior": p_e_posterior}
    return CheckResult("fano", PASS if margin >= -1e-12 else FAIL, margin, details)


def check_decoding_time(traces: list[EntropyTrace], caps: CapacityCurve) -> CheckResult:
    """Measured mean decoding time against the rate converse at the measured power."""
    m = traces[0].m
    tau = np.array([t.tau for t in traces], dtype=np.float64)
    energy = np.array([t.s[t.tau] for t in traces])
    p_hat = float(energy.sum() / tau.sum())
    errors = sum(not t.message_correct for t in traces)
    p_e = max(errors / len(traces), float(np.mean([t.posterior_error for t in traces])))
    bound = theorem3_bound(caps, m, p_hat, min(p_e, 1.0))
    margin = float(tau.mean()) + 3 * _se(tau) - bound
    return CheckResult(
        "decoding_time",
        PASS if margin >= 0 else FAIL,
        margin,
        {"tau_bar": float(tau.mean()), "bound": bound, "p_hat": p_hat},
    )


def theorem4_bound(rel: ReliabilityPoint) -> float:
    """Asymptotic ceiling on -ln P_e / tau_bar at the point's rate and power."""
    return rel.exponent


def check_exponent(result: SimResult, bound: float, slack_fraction: float = 0.15) -> CheckResult:
    """Measured exponent against the converse ceiling; exceeding it is reported, never failed."""
    if result.errors:
        p_e, flagged = result.p_e_hat, False
    else:
        p_e, flagged = result.ci_high, True
    measured = -math.log(p_e) / result.tau_bar
    margin = bound * (1 + slack_fraction) - measured
    details = {"measured_exponent": measured, "bound": bound, "p_e_from_interval": flagged}
    return CheckResult("exponent", PASS if margin >= 0 else ASYMPTOTIC, margin, details)


def exponent_interval(result: SimResult) -> tuple[float, float]:
    """Range of -ln P_e / tau_bar over the Wilson interval of the error rate; the top is inf without errors."""
    low = -math.log(result.ci_high) / result.tau_bar if result.ci_high > 0 else math.inf
    high = -math.log(result.ci_low) / result.tau_bar if result.ci_low > 0 else math.inf
    return low, high


def check_exponent_trend(runs: list[tuple[int, SimResult]]) -> CheckResult:
    """Measured exponent over increasing block lengths.

    Fails when a longer block's exponent interval lies wholly below the
    interval of the next shorter one.
    """
    intervals = [(ell, *exponent_interval(result)) for ell, result in sorted(runs, key=lambda run: run[0])]
    margin = math.inf
    for (_, low, _), (_, _, high) in zip(intervals, intervals[1:]):
        margin = min(margin, high - low)
    details = {"intervals": [{"ell": ell, "low": low, "high": high} for ell, low, high in intervals]}
    return CheckResult("exponent_trend", PASS if margin >= 0 else FAIL, margin, details)


def empirical_operating_point(
    traces: list[EntropyTrace], caps: CapacityCurve, divs: DivergenceCurve | None
) -> OperatingPoint:
    """Rate, power, phase split and exponent measured on the traces, with both asymptotic gaps."""
    m = traces[0].m
    tau = np.array([t.tau for t in traces], dtype=np.float64)
    tau1 = np.array([t.tau1 for t in traces], dtype=np.float64)
    s_tau = np.array([t.s[t.tau] for t in traces])
    s_tau1 = np.array([t.s[t.tau1] for t in traces])
    tau_bar = float(tau.mean())
    p_e, _ = _error_estimate(traces)

    r_hat = math.log(m) / tau_bar
    eta_hat = float(tau1.mean()) / tau_bar
    p1_hat = float(s_tau1.sum() / tau1.sum()) if tau1.sum() > 0 else 0.0
    phase2 = tau - tau1
    p2_hat = float((s_tau - s_tau1).sum() / phase2.sum()) if phase2.sum() > 0 else 0.0
    exponent_hat = -math.log(p_e) / tau_bar
    d2 = divs.value(p2_hat) if divs is not None else math.inf
    return OperatingPoint(
        r_hat=r_hat,
        p_hat=float(s_tau.sum() / tau.sum()),
        eta_hat=eta_hat,
        p1_hat=p1_hat,
        p2_hat=p2_hat,
        exponent_hat=exponent_hat,
        rate_gap=eta_hat * caps.value(p1_hat) - r_hat,
        exponent_gap=(1 - eta_hat) * d2 - exponent_hat,
    )


def operating_point_check(point: OperatingPoint) -> CheckResult:
    margin = min(point.rate_gap, point.exponent_gap)
    return CheckResult("operating_point", PASS if margin >= 0 else ASYMPTOTIC, margin, asdict(point))


def zero_error_energy_check(result: SimResult, code: TwoPhaseCode, rho_max: float) -> CheckResult:
    """Mean energy per round of the zero-error scheme against ell1 P + rho_max ceil(ln ell)."""
    bound = code.ell1 * code.p + rho_max * code.ell2
    margin = bound - result.energy_per_round
    return CheckResult(
        "zero_error_energy",
        PASS if margin >= -1e-9 else FAIL,
        margin,
        {"energy_per_round": result.energy_per_round, "bound": bound},
    )


def report_to_dict(checks: list[CheckResult]) -> dict:
    status = FAIL if any(c.status == FAIL for c in checks) else PASS
    return {
        "status": status,
        "checks": [
            {"name": c.name, "status": c.status, "margin": c.margin, "details": c.details} for c in checks
        ],
    }
