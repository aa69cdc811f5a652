import dataclasses
import math

import numpy as np
import pytest

from conftest import C_BSC, binary_entropy
from services.channel_core import make_dmc, worst_llr_bound
from services.converse import (
    ASYMPTOTIC,
    FAIL,
    PASS,
    VACUOUS,
    CheckResult,
    EntropyTrace,
    check_decoding_time,
    check_exponent,
    check_exponent_trend,
    check_fano,
    check_lemma11,
    check_log_entropy_drop,
    check_submartingales,
    empirical_operating_point,
    exponent_interval,
    fano_bound,
    operating_point_check,
    phase_bound_checks,
    posterior_path,
    posterior_trace,
    report_to_dict,
    theorem3_bound,
    traces_from_result,
    zero_error_energy_check,
)
from services.errors import PathwiseViolation, TranscriptMismatch
from services.reliability import reliability
from services.yi_simulator import (
    Round,
    SimResult,
    Transcript,
    TwoPhaseCode,
    build_code,
    build_zero_error_code,
    simulate_trials,
    simulate_zero_error,
)

RATE = C_BSC / 4
POWER = 0.5


def plain_code(codebook, accept, reject, marker=None) -> TwoPhaseCode:
    codebook = np.asarray(codebook)
    return TwoPhaseCode(
        ell1=codebook.shape[1],
        ell2=len(accept),
        codebook=codebook,
        accept_word=np.asarray(accept),
        reject_word=np.asarray(reject),
        llr_threshold=math.nan if marker is not None else 0.0,
        r=0.1,
        p=0.5,
        eta=0.5,
        p1=0.5,
        p2=0.5,
        marker_output=marker,
    )


def synthetic_trace(h, energy, m: int = 4) -> EntropyTrace:
    h = np.asarray(h, dtype=np.float64)
    energy = np.asarray(energy, dtype=np.float64)
    tau = len(h) - 1
    return EntropyTrace(
        h=h,
        s=energy,
        expected_energy=energy,
        expected_divergence=np.zeros(tau),
        tau=tau,
        tau1=tau,
        message_correct=True,
        m=m,
    )


@pytest.fixture(scope="module")
def identity():
    return make_dmc([[1.0, 0.0], [0.0, 1.0]], [0.0, 1.0])


@pytest.fixture(scope="module")
def noiseless_code():
    return plain_code([[0, 0], [0, 1], [1, 0], [1, 1]], [1], [0], marker=1)


@pytest.fixture(scope="module")
def noiseless_transcript():
    return Transcript(2, (Round(np.array([1, 0]), 2, np.array([1]), True),))


@pytest.fixture(scope="module")
def ex1_sim(ex1, ex1_caps, ex1_divs):
    point = reliability(ex1_caps, ex1_divs, RATE, POWER)
    code = build_code(ex1, ex1_caps, ex1_divs, RATE, POWER, point.eta_opt, 32, seed=4)
    result = simulate_trials(code, ex1, 1500, seed=8, keep_traces=True, threads=1)
    return code, result, traces_from_result(code, ex1, result)


class TestPosteriorTrace:
    def test_noiseless_entropy_path(self, identity, noiseless_code, noiseless_transcript):
        trace = posterior_trace(noiseless_code, identity, noiseless_transcript, d=np.zeros(2))
        np.testing.assert_allclose(trace.h, [math.log(4), math.log(2), 0.0, 0.0], atol=1e-15)
        assert trace.tau == 3
        assert trace.tau1 == 1
        np.testing.assert_array_equal(trace.s, [0, 1, 1, 2])
        np.testing.assert_allclose(trace.expected_energy, [0, 1, 1, 2])
        assert trace.message_correct
        assert trace.posterior_error == 0.0

    def test_posterior_rows_normalized(self, identity, noiseless_code, noiseless_transcript):
        log_post = posterior_path(noiseless_code, identity, noiseless_transcript)
        np.testing.assert_allclose(np.exp(log_post).sum(axis=1), 1.0)
        assert log_post[-1, 2] == 0.0

    def test_two_message_bsc(self, bsc_channel):
        code = plain_code([[0], [1]], [0], [1])
        transcript = Transcript(0, (Round(np.array([0]), 0, np.array([0]), True),))
        trace = posterior_trace(code, bsc_channel, transcript)
        assert trace.h[0] == pytest.approx(math.log(2))
        assert trace.h[1] == pytest.approx(binary_entropy(0.1))

    def test_impossible_for_own_message(self, identity, noiseless_code):
        transcript = Transcript(0, (Round(np.array([1, 0]), 2, np.array([1]), True),))
        with pytest.raises(TranscriptMismatch):
            posterior_path(noiseless_code, identity, transcript)

    def test_needs_transcripts(self, ex1, ex1_sim):
        code, result, _ = ex1_sim
        bare = dataclasses.replace(result, transcripts=None)
        with pytest.raises(ValueError):
            traces_from_result(code, ex1, bare)


class TestBounds:
    @pytest.mark.parametrize("m", [2, 16, 1000])
    def test_fano_values(self, m):
        assert fano_bound(0.0, m) == 0.0
        assert fano_bound(1 / m, m) == pytest.approx((2 * math.log(m) + 1) / m)
        assert fano_bound(1.0, m) == pytest.approx(math.log(m) + 1)

    def test_fano_exact(self):
        assert fano_bound(0.5, 2, exact=True) == pytest.approx(math.log(2))
        assert fano_bound(0.5, 2, exact=True) <= fano_bound(0.5, 2)

    def test_fano_rejects_probability(self):
        with pytest.raises(ValueError):
            fano_bound(1.5, 4)

    def test_theorem3(self, ex1_caps):
        assert theorem3_bound(ex1_caps, 2, 0.5, 0.0) == pytest.approx(math.log(2) / (0.5 * C_BSC), rel=1e-4)
        assert theorem3_bound(ex1_caps, 2, 0.5, 1.0) == 0.0


class TestPathwise:
    def test_simulated_traces(self, ex1, ex1_sim):
        _, _, traces = ex1_sim
        check = check_lemma11(traces, worst_llr_bound(ex1))
        assert check.status == PASS
        assert check.margin >= -1e-9
        assert check.details["steps"] > 0

    def test_large_drop_raises(self):
        trace = synthetic_trace([math.log(4), 1e-6], [0.0, 0.0])
        with pytest.raises(PathwiseViolation) as info:
            check_lemma11([trace], 1.0)
        assert info.value.trace_index == 0
        assert info.value.step == 0

    def test_trace_keeps_its_threshold(self, identity, noiseless_code, noiseless_transcript):
        trace = posterior_trace(noiseless_code, identity, noiseless_transcript, threshold=0.2)
        assert trace.threshold == 0.2
        assert trace.tau1 == 2

    def test_tau1_floor_follows_the_trace_threshold(self):
        h = [math.log(4), 0.5, 0.3, 0.05]
        trace = synthetic_trace(h, [0.0, 0.0, 0.0, 0.0])
        assert check_lemma11([trace], 2.0).status == PASS
        with pytest.raises(PathwiseViolation) as info:
            check_lemma11([dataclasses.replace(trace, threshold=0.1)], 2.0)
        assert info.value.step == 3


class TestSubmartingales:
    def test_flat_entropy_passes(self, ex1_caps):
        n = np.arange(51)
        traces = [synthetic_trace(np.full(51, 5.0), POWER * n) for _ in range(50)]
        checks = check_submartingales(traces, ex1_caps, None, POWER)
        status = {c.name: c.status for c in checks}
        assert status == {"submartingale_V": PASS, "telescoping_V": PASS, "submartingale_W": VACUOUS}
        assert checks[0].margin == pytest.approx(0.5 * C_BSC, abs=1e-5)

    def test_steady_drop_fails(self, ex1_caps):
        n = np.arange(51)
        traces = [synthetic_trace(60.0 - n, POWER * n) for _ in range(50)]
        check = check_submartingales(traces, ex1_caps, None, POWER)[0]
        assert check.status == FAIL
        assert check.margin == pytest.approx(0.5 * C_BSC - 1.0, abs=1e-5)

    def test_simulated_traces(self, ex1_caps, ex1_divs, ex1_sim):
        _, result, traces = ex1_sim
        checks = check_submartingales(traces, ex1_caps, ex1_divs, result.energy_rate)
        assert [c.name for c in checks] == ["submartingale_V", "telescoping_V", "submartingale_W"]
        assert all(c.status == PASS for c in checks)

    def test_log_entropy_drop(self, ex1_sim):
        _, _, traces = ex1_sim
        assert check_log_entropy_drop(traces).status == PASS


class TestSimulatedChecks:
    def test_fano(self, ex1_sim):
        _, _, traces = ex1_sim
        check = check_fano(traces)
        assert check.status == PASS
        assert check.details["p_e_posterior"] >= 0.0

    def test_theorem3(self, ex1_caps, ex1_sim):
        _, result, traces = ex1_sim
        check = check_decoding_time(traces, ex1_caps)
        assert check.status == PASS
        assert check.details["tau_bar"] == pytest.approx(result.tau_bar)
        assert check.details["p_hat"] == pytest.approx(result.energy_rate)

    def test_phase_bounds(self, ex1, ex1_caps, ex1_divs, ex1_sim):
        _, _, traces = ex1_sim
        checks = phase_bound_checks(traces, ex1_divs, ex1_caps, worst_llr_bound(ex1))
        assert [c.name for c in checks] == ["phase1_time", "phase2_time", "phase2_entropy_drop"]
        assert checks[0].status == PASS

    def test_phase_bounds_without_divergence(self, ex1, ex1_caps, ex1_sim):
        _, _, traces = ex1_sim
        checks = phase_bound_checks(traces, None, ex1_caps, worst_llr_bound(ex1))
        assert [c.status for c in checks[1:]] == [VACUOUS, VACUOUS]

    def test_operating_point(self, ex1_caps, ex1_divs, ex1_sim):
        code, result, traces = ex1_sim
        point = empirical_operating_point(traces, ex1_caps, ex1_divs)
        assert point.r_hat == pytest.approx(math.log(code.m) / result.tau_bar)
        assert point.p_hat == pytest.approx(result.energy_rate)
        assert 0 < point.eta_hat <= 1
        assert operating_point_check(point).status in (PASS, ASYMPTOTIC)


class TestExponentCheck:
    @staticmethod
    def result(errors: int) -> SimResult:
        return SimResult(
            trials=100,
            errors=errors,
            p_e_hat=errors / 100,
            ci_low=0.0,
            ci_high=0.037,
            tau_bar=10.0,
            energy_rate=0.5,
            energy_se=0.0,
            mean_energy=5.0,
            energy_per_round=5.0,
            rounds_histogram=(100,),
            tentative_errors=errors,
            seed=0,
        )

    def test_within_ceiling(self):
        check = check_exponent(self.result(1), bound=1.0)
        assert check.status == PASS
        assert check.details["measured_exponent"] == pytest.approx(math.log(100) / 10)

    def test_above_ceiling_is_only_noted(self):
        check = check_exponent(self.result(1), bound=0.1)
        assert check.status == ASYMPTOTIC
        assert check.margin < 0

    def test_no_errors_uses_interval(self):
        check = check_exponent(self.result(0), bound=1.0)
        assert check.details["p_e_from_interval"]
        assert check.details["measured_exponent"] == pytest.approx(-math.log(0.037) / 10)

    @staticmethod
    def interval_result(ci_low: float, ci_high: float, tau_bar: float) -> SimResult:
        return dataclasses.replace(TestExponentCheck.result(0), ci_low=ci_low, ci_high=ci_high, tau_bar=tau_bar)

    def test_interval(self):
        low, high = exponent_interval(self.interval_result(0.01, 0.04, 10.0))
        assert low == pytest.approx(-math.log(0.04) / 10)
        assert high == pytest.approx(-math.log(0.01) / 10)
        assert exponent_interval(self.interval_result(0.0, 0.04, 10.0))[1] == math.inf

    def test_trend_overlapping_intervals_pass(self):
        runs = [(32, self.interval_result(0.0, 0.001, 20.0)), (16, self.interval_result(0.01, 0.04, 10.0))]
        check = check_exponent_trend(runs)
        assert check.status == PASS
        assert [row["ell"] for row in check.details["intervals"]] == [16, 32]

    def test_trend_drop_fails(self):
        runs = [(16, self.interval_result(0.01, 0.04, 10.0)), (32, self.interval_result(0.2, 0.3, 10.0))]
        check = check_exponent_trend(runs)
        assert check.status == FAIL
        assert check.margin == pytest.approx(-math.log(0.2) / 10 + math.log(0.04) / 10)


def test_zero_error_energy(zch, zch_caps):
    code = build_zero_error_code(zch, zch_caps, 0.2, POWER, 24, seed=1)
    result = simulate_trials(code, zch, 300, seed=3, threads=1)
    check = zero_error_energy_check(result, code, zch.rho_max)
    assert check.status == PASS
    assert check.details["bound"] == pytest.approx(20 * POWER + 4)


def test_report_status():
    ok = CheckResult("a", PASS, 1.0)
    noted = CheckResult("b", ASYMPTOTIC, -1.0)
    bad = CheckResult("c", FAIL, -1.0)
    assert report_to_dict([ok, noted])["status"] == PASS
    report = report_to_dict([ok, bad])
    assert report["status"] == FAIL
    assert [c["name"] for c in report["checks"]] == ["a", "c"]


@pytest.mark.slow
class TestFullScale:
    @pytest.fixture(scope="class")
    def ex1_large(self, ex1, ex1_caps, ex1_divs):
        point = reliability(ex1_caps, ex1_divs, RATE, POWER)
        code = build_code(ex1, ex1_caps, ex1_divs, RATE, POWER, point.eta_opt, 32, seed=4)
        result = simulate_trials(code, ex1, 100_000, seed=21, keep_traces=True)
        return code, result, traces_from_result(code, ex1, result)

    def test_pathwise_over_a_million_steps(self, ex1, ex1_large):
        _, _, traces = ex1_large
        check = check_lemma11(traces, worst_llr_bound(ex1))
        assert check.status == PASS
        assert check.details["steps"] >= 1_000_000

    def test_submartingales(self, ex1_caps, ex1_divs, ex1_large):
        _, result, traces = ex1_large
        checks = check_submartingales(traces, ex1_caps, ex1_divs, result.energy_rate)
        assert all(c.status == PASS for c in checks)

    def test_exponent_grows_with_block_length(self, ex1, ex1_caps, ex1_divs):
        point = reliability(ex1_caps, ex1_divs, RATE, POWER)
        runs = []
        for ell in (16, 32, 64):
            code = build_code(ex1, ex1_caps, ex1_divs, RATE, POWER, point.eta_opt, ell, seed=ell)
            result = simulate_trials(code, ex1, 100_000, seed=ell + 1)
            r_hat = math.log(code.m) / result.tau_bar
            ceiling = reliability(ex1_caps, ex1_divs, r_hat, result.energy_rate).exponent
            assert check_exponent(result, ceiling).status == PASS
            runs.append((ell, result))
        assert check_exponent_trend(runs).status == PASS

    def test_zero_error_million_trials(self, zch, zch_caps):
        code = build_zero_error_code(zch, zch_caps, 0.2, POWER, 24, seed=1)
        result = simulate_zero_error(zch, zch_caps, 0.2, POWER, 24, 1_000_000, seed=5, code=code)
        assert result.errors == 0
        assert zero_error_energy_check(result, code, zch.rho_max).status == PASS
