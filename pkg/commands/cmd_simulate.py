import logging
import math

import pandas as pd

from commands import EXIT_CHECK_FAILED, EXIT_OK, say
from services.channel_core import Dmc, is_zero_error_capable, worst_llr_bound
from services.converse import (
    FAIL,
    PASS,
    CheckResult,
    check_decoding_time,
    check_exponent,
    check_fano,
    check_lemma11,
    check_log_entropy_drop,
    check_submartingales,
    empirical_operating_point,
    operating_point_check,
    phase_bound_checks,
    report_to_dict,
    theorem4_bound,
    traces_from_result,
    zero_error_energy_check,
)
from services.errors import ConfigError, PathwiseViolation, RateOutOfRange
from services.load_curves import get_capacity_curve, get_divergence_curve
from services.load_data import load_channel, payload_to_json, write_frame, write_output
from services.reliability import ReliabilityPoint, reliability
from services.yi_simulator import (
    SimResult,
    TwoPhaseCode,
    build_code,
    build_zero_error_code,
    energy_rate_bound,
    phase2_error_probs,
    rounds_geometric_test,
    simulate_trials,
    simulate_zero_error,
)
from utils.config import RunConfig
from utils.provenance import provenance_info

logger = logging.getLogger(__name__)


def _code_summary(code: TwoPhaseCode) -> dict:
    return {
        "m": code.m,
        "ell1": code.ell1,
        "ell2": code.ell2,
        "eta": code.eta,
        "p1": code.p1,
        "p2": code.p2,
        "llr_threshold": code.llr_threshold,
        "zero_error": code.zero_error,
    }


def _exponent_bound(caps, divs, result: SimResult, code: TwoPhaseCode, nominal: ReliabilityPoint) -> float:
    """E at the measured rate and power when that point is solvable, else at the nominal one."""
    r_hat = math.log(code.m) / result.tau_bar
    try:
        return theorem4_bound(reliability(caps, divs, r_hat, result.energy_rate))
    except RateOutOfRange:
        logger.info("measured point (r=%.6g, p=%.6g) outside the solvable range", r_hat, result.energy_rate)
        return theorem4_bound(nominal)


def _converse_report(
    code: TwoPhaseCode, dmc: Dmc, result: SimResult, caps, divs, nominal: ReliabilityPoint | None
) -> list[CheckResult]:
    traces = traces_from_result(code, dmc, result)
    f_bound = worst_llr_bound(dmc)
    try:
        checks = [check_lemma11(traces, f_bound)]
    except PathwiseViolation as exc:
        checks = [
            CheckResult(
                "pathwise_drop", FAIL, math.nan, {"trace": exc.trace_index, "step": exc.step, "message": str(exc)}
            )
        ]
    checks.append(check_fano(traces))
    checks.append(check_decoding_time(traces, caps))
    checks.extend(phase_bound_checks(traces, divs, caps, f_bound))
    checks.extend(check_submartingales(traces, caps, divs, code.p))
    if divs is not None:
        checks.append(check_log_entropy_drop(traces))
        checks.append(operating_point_check(empirical_operating_point(traces, caps, divs)))
    if nominal is not None:
        checks.append(check_exponent(result, _exponent_bound(caps, divs, result, code, nominal)))
    if code.zero_error:
        checks.append(zero_error_energy_check(result, code, dmc.rho_max))
    else:
        energy = energy_rate_bound(code, dmc, result)
        checks.append(
            CheckResult(
                "energy_rate",
                PASS if energy.holds else FAIL,
                energy.bound + energy.slack - energy.energy_rate,
                {"energy_rate": energy.energy_rate, "bound": energy.bound},
            )
        )
    return checks


def cmd_simulate(config: RunConfig) -> int:
    """Build a two-phase code for (r, P), simulate it and optionally verify the converse bounds."""
    if config.power is None or config.rate is None or config.ell is None:
        raise ConfigError("simulate needs --power, --rate and --ell")
    dmc = load_channel(config.channel)
    caps = get_capacity_curve(dmc, settings=config.solver)
    p, r = config.power, config.rate

    if is_zero_error_capable(dmc):
        divs, nominal = None, None
        code = build_zero_error_code(dmc, caps, r, p, config.ell, config.seed, config.m_cap)
        result = simulate_zero_error(
            dmc,
            caps,
            r,
            p,
            config.ell,
            config.trials,
            config.seed,
            keep_traces=config.verify,
            threads=config.threads,
            code=code,
        )
    else:
        divs = get_divergence_curve(dmc)
        nominal = reliability(caps, divs, r, p, config.solver)
        eta = config.eta if config.eta is not None else nominal.eta_opt
        code = build_code(dmc, caps, divs, r, p, eta, config.ell, config.seed, config.kappa, config.m_cap)
        result = simulate_trials(
            code, dmc, config.trials, config.seed, keep_traces=config.verify, threads=config.threads
        )

    phase2 = phase2_error_probs(code, dmc)
    payload = {
        "code": _code_summary(code),
        "result": result.to_dict(),
        "phase2": {"p_ra": phase2.p_ra, "p_ar": phase2.p_ar, "p_ra_bound": phase2.p_ra_bound, "exact": phase2.exact},
        "rounds_geometric_pvalue": rounds_geometric_test(result),
    }
    if nominal is not None:
        payload["reliability"] = nominal.to_dict()

    status = EXIT_OK
    if config.verify:
        report = report_to_dict(_converse_report(code, dmc, result, caps, divs, nominal))
        payload["converse"] = report
        if report["status"] == FAIL:
            status = EXIT_CHECK_FAILED

    provenance = provenance_info(dmc, config)
    if config.format == "json":
        write_output(payload_to_json(payload, provenance), config.out)
    else:
        row = {**payload["code"], **payload["result"]}
        row["rounds_histogram"] = " ".join(str(n) for n in result.rounds_histogram)
        row["p_ra"], row["p_ar"] = phase2.p_ra, phase2.p_ar
        if config.verify:
            for check in payload["converse"]["checks"]:
                row[f"check_{check['name']}"] = check["status"]
        write_frame(pd.DataFrame([row]), provenance, config.out)

    say(
        config,
        f"M = {code.m}: {result.errors}/{result.trials} errors, "
        f"P_e in [{result.ci_low:.3g}, {result.ci_high:.3g}], tau_bar = {result.tau_bar:.6g}, "
        f"energy rate = {result.energy_rate:.6g}",
    )
    return status
