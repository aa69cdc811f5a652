from types import SimpleNamespace

import numpy as np
import pytest

import services.reliability as reliability_module
from conftest import C_BSC, D0, D1, random_channel
from services.errors import InfeasibleSplit, RateOutOfRange
from services.load_curves import get_capacity_curve, get_divergence_curve
from services.reliability import (
    ReliabilityPoint,
    classify_regime,
    exponent_at,
    exponent_for_split,
    feasible_interval,
    golden_section_max,
    points_frame,
    reliability,
    reliability_at_capacity,
    reliability_curve,
    tangent_intercept_check,
)


def closed_form(r: float, p: float) -> float:
    eta = r / C_BSC
    return (1 - eta) * D0 + (p - eta) * (D1 - D0)


def eta_scan(caps, divs, r: float, p: float, n: int = 10_001) -> float:
    lo, hi = feasible_interval(caps, r, p)
    return max(exponent_for_split(caps, divs, r, p, float(e))[2] for e in np.linspace(lo, hi, n))


class TestGoldenSection:
    def test_finds_peak(self):
        x, value = golden_section_max(lambda t: -((t - 0.3) ** 2), 0.0, 1.0, 1e-10)
        assert x == pytest.approx(0.3, abs=1e-8)
        assert value == pytest.approx(0.0, abs=1e-15)

    def test_degenerate_bracket(self):
        x, _ = golden_section_max(lambda t: t, 0.5, 0.5, 1e-10)
        assert x == 0.5


class TestExample1:
    @pytest.mark.parametrize("p", [0.2, 0.4, 0.6, 0.8, 1.0])
    @pytest.mark.parametrize("frac", [0.2, 0.4, 0.6, 0.8])
    def test_closed_form(self, ex1_caps, ex1_divs, p, frac):
        r = frac * p * C_BSC
        point = reliability(ex1_caps, ex1_divs, r, p)
        assert point.exponent == pytest.approx(closed_form(r, p), abs=1e-5)
        # phase 1 runs at full cost, phase 2 spends what is left
        assert point.p1 == pytest.approx(1.0, abs=1e-5)
        assert point.eta_opt == pytest.approx(r / C_BSC, abs=1e-6)

    def test_limit_at_capacity(self, ex1_caps, ex1_divs):
        assert reliability_at_capacity(ex1_caps, ex1_divs, 0.5) == pytest.approx(0.5 * D0, abs=1e-4)

    def test_limit_uses_every_solve(self, ex1_caps, monkeypatch):
        c_p = ex1_caps.value(0.5)

        def quadratic(caps, divs, r, p, settings):
            delta = c_p - r
            return SimpleNamespace(exponent=1.0 + 40.0 * delta + 900.0 * delta**2)

        monkeypatch.setattr(reliability_module, "CAPACITY_DELTAS", (0.1, 0.05, 0.02))
        monkeypatch.setattr(reliability_module, "reliability", quadratic)
        assert reliability_at_capacity(ex1_caps, None, 0.5) == pytest.approx(1.0, abs=1e-9)

    def test_small_rate_approaches_divergence(self, ex1_caps, ex1_divs):
        point = reliability(ex1_caps, ex1_divs, 1e-4, 0.5)
        assert point.exponent == pytest.approx(ex1_divs.value(0.5), abs=2e-3)

    def test_rate_out_of_range(self, ex1_caps, ex1_divs):
        with pytest.raises(RateOutOfRange) as info:
            reliability(ex1_caps, ex1_divs, 0.2, 0.5)
        assert info.value.limit == pytest.approx(0.5 * C_BSC, abs=1e-6)
        with pytest.raises(RateOutOfRange):
            reliability(ex1_caps, ex1_divs, 0.0, 0.5)

    def test_split_outside_interval(self, ex1_caps, ex1_divs):
        lo, _ = feasible_interval(ex1_caps, 0.1, 0.5)
        with pytest.raises(InfeasibleSplit):
            exponent_at(ex1_caps, ex1_divs, 0.1, 0.5, 0.5 * lo)
        with pytest.raises(InfeasibleSplit):
            exponent_for_split(ex1_caps, ex1_divs, 0.1, 0.5, 0.0)

    def test_exponent_vanishes_at_eta_one(self, ex1_caps, ex1_divs):
        assert exponent_at(ex1_caps, ex1_divs, 0.1, 0.5, 1.0) == 0.0

    def test_curve(self, ex1_caps, ex1_divs):
        rates = np.linspace(0.02, 0.16, 8)
        points = reliability_curve(ex1_caps, ex1_divs, 0.5, rates)
        exponents = [pt.exponent for pt in points]
        assert np.all(np.diff(exponents) < 0)
        frame = points_frame(points)
        assert list(frame.columns) == ["r", "exponent", "eta_opt", "p1", "p2"]
        np.testing.assert_allclose(frame["r"], rates)

    def test_curve_rejects_bad_grid(self, ex1_caps, ex1_divs):
        with pytest.raises(RateOutOfRange):
            reliability_curve(ex1_caps, ex1_divs, 0.5, [])
        with pytest.raises(RateOutOfRange):
            reliability_curve(ex1_caps, ex1_divs, 0.5, [0.1, 0.3])


class TestExample2Regimes:
    BREAKS = ((1.0, 4.0), 1.0)

    @pytest.mark.parametrize("frac", np.linspace(0.05, 0.95, 15))
    def test_low_power_regime_a(self, ex2_caps, ex2_divs, frac):
        point = reliability(ex2_caps, ex2_divs, frac * ex2_caps.value(0.5), 0.5)
        assert classify_regime(point, *self.BREAKS) == ("A",)

    @pytest.mark.parametrize("frac", [0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.6])
    def test_high_power_low_rate_regime_c(self, ex2_caps, ex2_divs, frac):
        point = reliability(ex2_caps, ex2_divs, frac * ex2_caps.value(2.5), 2.5)
        assert classify_regime(point, *self.BREAKS) == ("C",)
        assert point.p1 == pytest.approx(4.0, abs=1e-5)

    @pytest.mark.parametrize("frac", [0.72, 0.78, 0.84, 0.9, 0.95])
    def test_high_power_high_rate_regime_b(self, ex2_caps, ex2_divs, frac):
        point = reliability(ex2_caps, ex2_divs, frac * ex2_caps.value(2.5), 2.5)
        assert classify_regime(point, *self.BREAKS) == ("B",)
        assert point.p2 == pytest.approx(1.0, abs=1e-5)

    def test_tangents_meet_at_interior_optimum(self, ex2_caps, ex2_divs):
        point = reliability(ex2_caps, ex2_divs, 0.8 * ex2_caps.value(2.5), 2.5)
        report = tangent_intercept_check(ex2_caps, ex2_divs, point)
        assert report.interior
        assert report.overlap

    @pytest.mark.parametrize("r, p", [(0.1, 0.5), (0.25, 0.5), (0.2, 2.5), (0.6, 2.5), (0.8, 2.5), (0.5, 5.0)])
    def test_grid_oracle(self, ex2_caps, ex2_divs, r, p):
        point = reliability(ex2_caps, ex2_divs, r, p)
        assert point.exponent >= eta_scan(ex2_caps, ex2_divs, r, p) - 1e-8

    def test_concave_in_eta(self, ex2_caps, ex2_divs):
        rng = np.random.default_rng(7)
        r, p = 0.4, 2.5
        lo, hi = feasible_interval(ex2_caps, r, p)
        for _ in range(1000):
            a, b = rng.uniform(lo, hi, size=2)
            lam = rng.uniform()
            mid = lam * a + (1 - lam) * b
            left = exponent_at(ex2_caps, ex2_divs, r, p, a)
            right = exponent_at(ex2_caps, ex2_divs, r, p, b)
            assert exponent_at(ex2_caps, ex2_divs, r, p, mid) >= lam * left + (1 - lam) * right - 1e-9


class TestStructure:
    def test_power_accounting(self, ex2_caps, ex2_divs):
        for p in (0.5, 1.0, 2.5, 5.0):
            for frac in (0.1, 0.4, 0.7, 0.95):
                point = reliability(ex2_caps, ex2_divs, frac * ex2_caps.value(p), p)
                spent = point.eta_opt * point.p1 + (1 - point.eta_opt) * point.p2
                assert spent == pytest.approx(p, abs=1e-8)

    def test_non_decreasing_in_power(self, ex2_caps, ex2_divs):
        r = 0.2
        powers = np.linspace(0.4, 6.0, 57)
        exponents = [reliability(ex2_caps, ex2_divs, r, float(p)).exponent for p in powers]
        assert np.all(np.diff(exponents) >= -1e-8)

    def test_jointly_concave(self, ex2_caps, ex2_divs):
        rng = np.random.default_rng(11)

        def draw():
            p = float(rng.uniform(0.3, 5.5))
            r = float(rng.uniform(0.05, 0.95) * ex2_caps.value(p))
            lo, hi = feasible_interval(ex2_caps, r, p)
            eta = float(rng.uniform(lo + 0.01 * (hi - lo), hi - 0.01 * (hi - lo)))
            return np.array([r, p, eta])

        for _ in range(300):
            a, b = draw(), draw()
            lam = float(rng.uniform())
            mid = lam * a + (1 - lam) * b
            left = exponent_at(ex2_caps, ex2_divs, *a)
            right = exponent_at(ex2_caps, ex2_divs, *b)
            assert exponent_at(ex2_caps, ex2_divs, *mid) >= lam * left + (1 - lam) * right - 1e-8


class TestClassifyRegime:
    @staticmethod
    def point(p1, p2):
        return ReliabilityPoint(r=0.1, p=1.0, eta_star=0.1, interval=(0.1, 1.0), eta_opt=0.5, p1=p1, p2=p2, exponent=1.0)

    @pytest.mark.parametrize(
        "p1, p2, expected",
        [(1.0, 0.5, ("A",)), (2.0, 1.0, ("B",)), (4.0, 3.0, ("C",)), (1.0, 1.0, ()), (2.0, 2.0, ())],
    )
    def test_labels(self, p1, p2, expected):
        assert classify_regime(self.point(p1, p2), (1.0, 4.0), 1.0) == expected


@pytest.mark.slow
class TestRandomChannels:
    @pytest.mark.parametrize("seed", range(50))
    def test_grid_oracle(self, seed):
        rng = np.random.default_rng(seed)
        dmc = random_channel(rng)
        caps = get_capacity_curve(dmc)
        divs = get_divergence_curve(dmc)
        p = float(rng.uniform(0.2, 1.5) * dmc.rho_max)
        c_p = caps.value(p)
        r = float(rng.uniform(0.1, 0.9) * c_p)
        point = reliability(caps, divs, r, p)
        assert point.exponent >= eta_scan(caps, divs, r, p) - 1e-8
