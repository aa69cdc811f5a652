import logging
import math

import numpy as np
import pandas as pd

from commands import EXIT_CHECK_FAILED, EXIT_OK, say
from services.channel_core import example1, example2
from services.load_curves import get_capacity_curve, get_divergence_curve
from services.load_data import payload_to_json, write_frame, write_output
from services.reliability import classify_regime, reliability, reliability_at_capacity, tangent_intercept_check
from utils.config import RunConfig
from utils.provenance import provenance_info

logger = logging.getLogger(__name__)

EXAMPLE2_POWERS = (0.5, 1.0, 2.5, 5.0)
# powers at which every optimum must sit in exactly one regime
STRICT_POWERS = (0.5, 2.5)
RATE_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
REGIME_TOL = 1e-5


def _binary_entropy(a: float) -> float:
    return -a * math.log(a) - (1 - a) * math.log(1 - a)


def _row(check: str, expected: float, computed: float, tol: float) -> dict:
    ok = abs(expected - computed) <= tol
    return {"check": check, "expected": expected, "computed": computed, "tol": tol, "status": "pass" if ok else "fail"}


def example1_checks(alpha: float, settings) -> list[dict]:
    """Closed forms for the BSC-with-noisy-free-letter channel."""
    dmc = example1(alpha)
    caps = get_capacity_curve(dmc, settings=settings)
    divs = get_divergence_curve(dmc)
    c_bsc = math.log(2) - _binary_entropy(alpha)
    d0 = 0.5 * math.log(1 / (4 * alpha * (1 - alpha)))
    d1 = (1 - 2 * alpha) * math.log((1 - alpha) / alpha)

    rows = [_row(f"ex1 C({p:.1f})", p * c_bsc, caps.value(p), 1e-5) for p in np.arange(1, 10) / 10]
    rows.append(_row("ex1 beta", 1.0, caps.beta, 1e-4))
    rows.append(_row("ex1 D(0)", d0, divs.value(0.0), 1e-9))
    rows.append(_row("ex1 D(1)", d1, divs.value(1.0), 1e-9))
    for p in (0.25, 0.5, 0.75, 1.0):
        for frac in (0.2, 0.4, 0.6, 0.8, 0.95):
            r = frac * p * c_bsc
            eta = r / c_bsc
            closed = (1 - eta) * d0 + (p - eta) * (d1 - d0)
            rows.append(_row(f"ex1 E(r={r:.4f}, p={p})", closed, reliability(caps, divs, r, p, settings).exponent, 1e-5))
    rows.append(_row("ex1 E at capacity, p=0.5", 0.5 * d0, reliability_at_capacity(caps, divs, 0.5, settings), 1e-4))
    return rows


def example2_regimes(settings) -> tuple[list[dict], pd.DataFrame]:
    """Regime of every optimum on a rate sweep at each power, with the segment structure checks."""
    dmc = example2()
    caps = get_capacity_curve(dmc, settings=settings)
    divs = get_divergence_curve(dmc)
    c_breaks = (1.0, 4.0)
    d_break = float(divs.p[1])
    rows = [
        _row("ex2 C knot 1", c_breaks[0], float(caps.p[np.argmin(np.abs(caps.p - c_breaks[0]))]), REGIME_TOL),
        _row("ex2 P*", c_breaks[1], caps.p_star, REGIME_TOL),
        _row("ex2 beta", 1.0, caps.beta, 1e-4),
    ]
    table = []
    for p in EXAMPLE2_POWERS:
        c_p = caps.value(p)
        previous = None
        for frac in RATE_FRACTIONS:
            point = reliability(caps, divs, frac * c_p, p, settings)
            labels = classify_regime(point, c_breaks, d_break, REGIME_TOL)
            regime = "".join(labels) or "-"
            table.append({"p": p, "r": point.r, "p1": point.p1, "p2": point.p2, "exponent": point.exponent, "regime": regime})
            if p in STRICT_POWERS:
                rows.append(_row(f"ex2 single regime (r={point.r:.4f}, p={p})", 1, len(labels), 0))
                if previous is not None and previous[0] == regime:
                    # within one regime the constant phase cost must not move
                    held = (point.p2, previous[1].p2) if regime == "B" else (point.p1, previous[1].p1)
                    rows.append(_row(f"ex2 segment {regime} constant (r={point.r:.4f}, p={p})", held[1], held[0], REGIME_TOL))
                if regime == "B":
                    tangent = tangent_intercept_check(caps, divs, point)
                    if tangent.interior:
                        rows.append(_row(f"ex2 tangents meet (r={point.r:.4f}, p={p})", 1, int(tangent.overlap), 0))
            previous = (regime, point)
    return rows, pd.DataFrame(table)


def cmd_verify_examples(config: RunConfig) -> int:
    """Recompute the worked examples and print a pass/fail table."""
    rows = example1_checks(config.alpha, config.solver)
    regime_rows, regimes = example2_regimes(config.solver)
    rows.extend(regime_rows)
    checks = pd.DataFrame(rows)

    provenance = provenance_info(example1(config.alpha), config)
    if config.format == "json":
        payload = {"checks": checks.to_dict(orient="records"), "regimes": regimes.to_dict(orient="records")}
        write_output(payload_to_json(payload, provenance), config.out)
    elif config.out is not None:
        write_frame(checks, provenance, config.out)

    with pd.option_context("display.max_rows", None, "display.width", 160):
        say(config, checks.to_string(index=False))
        say(config, regimes.to_string(index=False))
    failed = int((checks["status"] == "fail").sum())
    logger.info("%d of %d example checks failed", failed, len(checks))
    return EXIT_CHECK_FAILED if failed else EXIT_OK
