import math

import numpy as np
import pytest

from hddm.errors import DomainError, SpecError
from hddm.schedules import (
    Schedule,
    ScheduleKind,
    alpha_sigma,
    is_variance_preserving,
    kind_from_tag,
    schedule_derivatives,
    to_discrete_index,
)

LINEAR = Schedule.linear()
COSINE = Schedule.cosine()


class TestAlphaSigma:
    def test_linear_direct(self):
        assert alpha_sigma(LINEAR, 0.3) == pytest.approx((0.7, 0.3), abs=1e-15)

    def test_cosine_boundary(self):
        a, s = alpha_sigma(COSINE, 0.0)
        assert a == pytest.approx(1.0, abs=1e-12)
        assert s == pytest.approx(0.0, abs=1e-12)

    def test_cosine_midpoint(self):
        # cos(pi/4) = sin(pi/4), evaluated independently with a scalar calculator
        a, s = alpha_sigma(COSINE, 0.5)
        assert a == pytest.approx(0.7071067811865476, abs=1e-12)
        assert s == pytest.approx(0.7071067811865476, abs=1e-12)

    def test_cosine_variance_preserving_grid(self):
        t = np.linspace(0.0, 1.0, 1001)
        a, s = alpha_sigma(COSINE, t)
        assert np.max(np.abs(a * a + s * s - 1.0)) < 1e-12

    @pytest.mark.parametrize("sched", [LINEAR, COSINE])
    def test_boundaries_and_monotonicity(self, sched):
        t = np.linspace(0.0, 1.0, 513)
        a, s = alpha_sigma(sched, t)
        assert abs(a[0] - 1.0) < 1e-12 and abs(s[0]) < 1e-12
        assert np.all(np.diff(a) <= 1e-15)
        assert np.all(np.diff(s) >= -1e-15)

    @pytest.mark.parametrize("bad", [-0.1, 1.1, float("nan")])
    def test_domain_error(self, bad):
        with pytest.raises(DomainError):
            alpha_sigma(LINEAR, bad)

    def test_array_round_trip(self):
        t = np.array([0.0, 0.25, 1.0])
        a, s = alpha_sigma(LINEAR, t)
        assert isinstance(a, np.ndarray)
        np.testing.assert_allclose(a, 1.0 - t)
        np.testing.assert_allclose(s, t)


class TestDerivatives:
    def test_linear_exact(self):
        for t in (0.0, 0.3, 0.5, 1.0):
            assert schedule_derivatives(LINEAR, t) == (-1.0, 1.0)

    def test_cosine_midpoint(self):
        # analytic: -(pi/2) sin(pi/4), +(pi/2) cos(pi/4), differentiated by hand
        da, ds = schedule_derivatives(COSINE, 0.5)
        assert da == pytest.approx(-1.1107207345395915, abs=1e-6)
        assert ds == pytest.approx(1.1107207345395915, abs=1e-6)

    def test_cosine_left_boundary(self):
        da, ds = schedule_derivatives(COSINE, 0.0)
        assert da == pytest.approx(0.0, abs=1e-4)
        assert ds == pytest.approx(math.pi / 2.0, abs=1e-4)

    def test_cosine_matches_analytic_interior(self):
        t = np.linspace(0.01, 0.99, 99)
        da, ds = schedule_derivatives(COSINE, t)
        da_true = -(math.pi / 2.0) * np.sin(math.pi / 2.0 * t)
        ds_true = (math.pi / 2.0) * np.cos(math.pi / 2.0 * t)
        assert np.max(np.abs(da - da_true)) < 1e-6
        assert np.max(np.abs(ds - ds_true)) < 1e-6

    def test_right_boundary_one_sided(self):
        da, ds = schedule_derivatives(COSINE, 1.0)
        assert da == pytest.approx(-math.pi / 2.0, abs=1e-4)
        assert ds == pytest.approx(0.0, abs=1e-4)


class TestDiscreteIndex:
    def test_endpoints(self):
        assert to_discrete_index(0.0) == 0
        assert to_discrete_index(1.0) == 999

    def test_half_away_from_zero(self):
        # 999 * 0.5 = 499.5 rounds up, not to even
        assert to_discrete_index(0.5) == 500
        assert to_discrete_index(498.5 / 999.0) == 499

    def test_monotone_on_dense_grid(self):
        t = np.linspace(0.0, 1.0, 10_000)
        idx = to_discrete_index(t)
        assert np.all(np.diff(idx) >= 0)
        assert idx[0] == 0 and idx[-1] == 999


class TestVpGeneric:
    def _tabulated_cosine(self, n=2001):
        t = np.linspace(0.0, 1.0, n)
        return Schedule.vp_generic(t, np.cos(math.pi / 2 * t), np.sin(math.pi / 2 * t))

    def test_interpolation_tracks_table(self):
        sched = self._tabulated_cosine()
        t = np.linspace(0.0, 1.0, 317)
        a, s = alpha_sigma(sched, t)
        ac, sc = alpha_sigma(COSINE, t)
        assert np.max(np.abs(a - ac)) < 1e-6
        assert np.max(np.abs(s - sc)) < 1e-6

    def test_derivatives_finite_difference(self):
        sched = self._tabulated_cosine()
        da, ds = schedule_derivatives(sched, 0.5)
        assert da == pytest.approx(-1.1107207345395915, abs=1e-3)
        assert ds == pytest.approx(1.1107207345395915, abs=1e-3)

    def test_vp_check_at_knots(self):
        sched = self._tabulated_cosine()
        assert is_variance_preserving(sched, sched.knots_t)
        assert is_variance_preserving(LINEAR, 0.5) is False

    def test_rejects_bad_tables(self):
        with pytest.raises(SpecError):
            Schedule.vp_generic([0.0, 1.0], [0.9, 0.0], [0.0, 1.0])  # alpha(0) != 1
        with pytest.raises(SpecError):
            Schedule.vp_generic([0.0, 0.5], [1.0, 0.5], [0.0, 0.5])  # ends before 1
        with pytest.raises(SpecError):
            Schedule.vp_generic([0.0, 0.5, 1.0], [1.0, 0.5, 0.8], [0.0, 0.5, 1.0])


def test_checkpoint_tags_are_stable():
    assert ScheduleKind.LINEAR.tag == 0
    assert ScheduleKind.COSINE.tag == 1
    assert ScheduleKind.VP_GENERIC.tag == 2
    for kind in ScheduleKind:
        assert kind_from_tag(kind.tag) is kind
    with pytest.raises(SpecError):
        kind_from_tag(7)
