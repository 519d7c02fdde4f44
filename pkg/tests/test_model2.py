import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adaptive_kb import mc
from adaptive_kb.model import TimeGrid
from adaptive_kb.model2 import (curve_F, filter_sensitivities, fisher_matrix, golden_section, identifiability_g,
                                inverse_2x2, limit_sensitivities, mde_theta2, mme_theta1, mme_window,
                                one_step_process, one_step_recurrent, preliminary_pair)
from adaptive_kb.riccati import kb_filter
from adaptive_kb.sde import simulate

from conftest import joint_spec


class TestGoldenSection:
    def test_vectorized_quadratics(self):
        centers = np.array([0.1, -0.7, 0.33])
        x = golden_section(lambda z: (z - centers) ** 2, np.full(3, -1.0), np.full(3, 1.0))
        assert np.max(np.abs(x - centers)) < 1e-8

    @given(st.floats(-0.9, 0.9))
    def test_unimodal(self, c):
        x = golden_section(lambda z: np.abs(z - c) ** 1.5, np.array([-1.0]), np.array([1.0]))
        assert abs(x[0] - c) < 1e-7


class TestMME:
    def test_noiseless_ratio(self):
        grid = TimeGrid(1.0, 2**14)
        eps = 1e-3
        spec = joint_spec(eps=0.0, theta=(1.5, 0.5))
        X = simulate(spec, grid, 0).X
        k = mme_window(eps, grid)
        te = grid.t[k]
        expected = 1.5 * math.expm1(0.5 * te) / (0.5 * te)
        assert mme_theta1(X, spec, grid, eps)[0] == pytest.approx(expected, rel=1e-4)

    def test_zero_path_clamped(self, grid1k):
        spec = joint_spec()
        assert mme_theta1(np.zeros(grid1k.N + 1), spec, grid1k) == 0.1 + 1e-9


class TestCurve:
    def test_exponential_integral(self):
        grid = TimeGrid(1.0, 2048)
        spec = joint_spec()
        F = curve_F(spec, 0.5, grid)
        assert np.max(np.abs(F - np.expm1(0.5 * grid.t) / 0.5)) < 1e-6
        assert F[-1] == pytest.approx(2 * (math.exp(0.5) - 1), abs=1e-6)
        assert F[-1] == pytest.approx(1.2974, abs=1e-4)

    def test_zero_parameter(self, grid1k):
        assert np.allclose(curve_F(joint_spec(), 0.0, grid1k), grid1k.t, atol=1e-14)

    def test_batch(self, grid1k):
        F = curve_F(joint_spec(), np.array([0.0, 0.5]), grid1k)
        assert F.shape == (2, grid1k.N + 1)


class TestIdentifiability:
    def test_positive(self, grid1k):
        spec = joint_spec(bounds=((0.1, 10.0), (0.1, 1.0)))
        g = identifiability_g(spec, 0.5, 0.1, 1.0, grid1k)
        assert g.ok and g.value > 0
        assert min(abs(g.argmin - 0.4), abs(g.argmin - 0.6)) < 1e-9

    def test_endpoint_only(self, grid1k):
        spec = joint_spec(bounds=((0.1, 10.0), (0.1, 1.0)))
        g = identifiability_g(spec, 0.5, 0.5, 1.0, grid1k)
        assert g.argmin == pytest.approx(1.0)
        F = curve_F(spec, np.array([0.5, 1.0]), grid1k)
        direct = np.sum((F[1] - F[0]) ** 2 * grid1k.dt) - 0.5 * grid1k.dt * (F[1, -1] - F[0, -1]) ** 2
        assert g.value == pytest.approx(direct, rel=1e-12)


class TestMDE:
    def test_exact_curve(self):
        grid = TimeGrid(1.25, 4096)
        spec = joint_spec()
        X = 2.5 * curve_F(spec, 0.37, grid)
        res = mde_theta2(X, 2.5, spec, grid, 0.625)
        assert abs(res.theta2[0] - 0.37) < 1e-7
        assert not res.flat[0]

    def test_noiseless_euler_path(self):
        grid = TimeGrid(1.25, 2**14)
        spec = joint_spec(eps=0.0, theta=(2.5, 0.37), b=0.0)
        X = simulate(spec, grid, 0).X
        assert abs(mde_theta2(X, 2.5, spec, grid, 0.625).theta2[0] - 0.37) < 1e-3

    def test_flat_flag(self, grid1k):
        spec = joint_spec()
        res = mde_theta2(np.zeros(grid1k.N + 1), 0.0, spec, grid1k, 0.5)
        assert res.flat[0]

    @pytest.mark.slow
    def test_consistency_exceedance(self):
        out = mc.run_replicates("model2_prelim", mc.MODEL2_CONFIG, 1e-3, 12345, 2000)
        assert np.mean(out["theta2"] >= 0.05) < 0.01


class TestInverse:
    @given(st.floats(0.1, 5), st.floats(0.1, 5), st.floats(-0.9, 0.9))
    def test_matches_linalg(self, a, d, rho):
        I = np.array([[a, rho * math.sqrt(a * d)], [rho * math.sqrt(a * d), d]])
        inv, ok = inverse_2x2(I)
        assert ok and np.allclose(inv, np.linalg.inv(I), rtol=1e-10)

    def test_singular(self):
        inv, ok = inverse_2x2(np.array([[1.0, 1.0], [1.0, 1.0]]))
        assert not ok and np.all(np.isnan(inv))


class TestSensitivities:
    def test_first_is_transition(self, grid1k):
        spec = joint_spec(eps=0.05, drift=(0.2, 1.0, 0.3))
        X = simulate(spec, grid1k, 1).X
        s = filter_sensitivities(spec, (2.0, 0.1), X, grid1k)
        assert np.array_equal(s.dm1[0], s.riccati.phi0)

    def test_second_matches_difference(self):
        grid = TimeGrid(1.25, 4096)
        spec = joint_spec(eps=0.05, drift=(0.2, 1.0, 0.3))
        X = simulate(spec, grid, 2).X
        h = 1e-4
        s = filter_sensitivities(spec, (2.0, 0.1), X, grid)
        up = kb_filter(spec, X, grid, (2.0, 0.1 + h)).m
        dn = kb_filter(spec, X, grid, (2.0, 0.1 - h)).m
        assert np.max(np.abs(s.dm2 - (up - dn) / (2 * h))) < 1e-5
        u1 = kb_filter(spec, X, grid, (2.0 + h, 0.1)).m
        d1 = kb_filter(spec, X, grid, (2.0 - h, 0.1)).m
        assert np.max(np.abs(s.dm1 - (u1 - d1) / (2 * h))) < 1e-5

    def test_parameter_free_drift(self, grid1k):
        spec = joint_spec(drift=(0.4, 0.0))
        X = simulate(spec, grid1k, 3).X
        s = filter_sensitivities(spec, (2.0, 0.1), X, grid1k)
        assert np.all(s.dm2 == 0.0)
        lim = limit_sensitivities(spec, (2.0, 0.1), (2.0, 0.1), grid1k)
        assert np.all(lim.dy2 == 0.0)
        assert np.allclose(lim.dy1, s.riccati.phi0)

    def test_limit_close_to_filter_at_small_noise(self):
        grid = TimeGrid(1.25, 2**14)
        spec = joint_spec(eps=1e-3, theta=(2.5, 0.3))
        X = simulate(spec, grid, 4).X
        s = filter_sensitivities(spec, spec.theta, X, grid)
        lim = limit_sensitivities(spec, spec.theta, spec.theta, grid)
        k = grid.index(0.625)
        assert np.max(np.abs(s.dm2[0, k:] - lim.dy2[k:])) < 1e-2


class TestFisherMatrix:
    def test_zero_at_tau_and_rank_one_without_drift_parameter(self, grid1k):
        I = fisher_matrix(joint_spec(), (2.5, 0.0), 0.5, grid1k).matrix
        assert np.all(I[0] == 0.0)
        I0 = fisher_matrix(joint_spec(drift=(0.3, 0.0)), (2.5, 0.0), 0.5, grid1k).matrix
        assert np.all(I0[..., 1, :] == 0.0) and np.all(I0[..., :, 1] == 0.0)

    @given(st.floats(0.2, 5.0), st.floats(-0.9, 0.9), st.floats(0.1, 0.9))
    def test_symmetric_cauchy_schwarz(self, th1, th2, tau):
        grid = TimeGrid(1.0, 256)
        I = fisher_matrix(joint_spec(drift=(0.1, 1.0, -0.4)), (th1, th2), tau, grid).matrix
        assert np.array_equal(I[..., 0, 1], I[..., 1, 0])
        assert np.all(I[..., 0, 1] ** 2 <= I[..., 0, 0] * I[..., 1, 1] * (1 + 1e-12) + 1e-300)


class TestOneStep:
    def test_fixed_point_at_truth(self):
        grid = TimeGrid(1.25, 4096)
        spec = joint_spec(eps=0.0, theta=(2.5, 0.2))
        X = simulate(spec, grid, 0).X
        one = one_step_process(spec, X, (np.array([2.5]), np.array([0.2])), 0.625, grid)
        ok = one.valid[0]
        assert np.max(np.abs(one.values[0, ok] - [2.5, 0.2])) < 50 * grid.dt

    def test_interval_starts_at_tau(self, grid1k):
        spec = joint_spec(eps=0.01, theta=(2.5, 0.2))
        grid = TimeGrid(1.25, 1024)
        X = simulate(spec, grid, 1).X
        pp = preliminary_pair(X, spec, grid, 0.625)
        one = one_step_process(spec, X, (pp.theta1, pp.theta2), 0.625, grid)
        assert one.t[0] == pytest.approx(0.625)
        assert not one.valid[0, 0]
        assert np.array_equal(one.values[0, 0], [pp.theta1[0], pp.theta2[0]])

    def test_recurrent_matches_integral(self):
        grid = TimeGrid(1.25, 2**16)
        spec = joint_spec(eps=0.01, theta=(2.5, 0.2))
        X = simulate(spec, grid, 2).X
        prelim = (np.array([2.45]), np.array([0.25]))
        integral = one_step_process(spec, X, prelim, 0.625, grid, sensitivity="limit")
        start, rec = one_step_recurrent(spec, X, prelim, 0.625, grid)
        ref = integral.raw[0, start - integral.start:]
        assert np.max(np.abs(rec[0] - ref)) < 1e-3
