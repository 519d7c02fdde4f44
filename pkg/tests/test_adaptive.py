from dataclasses import replace

import numpy as np
import pytest

from adaptive_kb import mc, model1, model2, model3
from adaptive_kb.adaptive import adaptive_filter_i, adaptive_filter_ii, adaptive_filter_iii, error_process
from adaptive_kb.model import ModelError, TimeGrid
from adaptive_kb.riccati import kb_filter, riccati_trace
from adaptive_kb.sde import simulate

from conftest import det_spec, joint_spec, random_spec


def model2_run(spec, X, grid, tau):
    pp = model2.preliminary_pair(X, spec, grid, tau)
    return model2.one_step_process(spec, X, (pp.theta1, pp.theta2), tau, grid)


class TestModelI:
    def test_error_identity(self):
        grid = TimeGrid(1.0, 4096)
        spec = det_spec(eps=0.01)
        X = simulate(spec, grid, 1, range(4)).X
        q = model1.quantities(spec, grid)
        rec = model1.mle_recurrent(spec, X, grid, 0.25, q)
        ad = adaptive_filter_i(spec, X, grid, rec, q)
        err = error_process(ad, model1.oracle_filter(spec, X, grid, 1.0, q), 0.01)
        rhs = (rec.values - 1.0) / 0.01 * q.riccati.phi0[rec.start:]
        assert np.max(np.abs(err.values - rhs)) < 1e-10

    def test_noiseless(self):
        grid = TimeGrid(1.0, 4096)
        spec = det_spec(eps=0.0, theta=0.8)
        X = simulate(spec, grid, 0).X
        q = model1.quantities(spec, grid)
        ad = adaptive_filter_i(spec, X, grid, model1.mle_recurrent(spec, X, grid, 0.25, q), q)
        m = model1.oracle_filter(spec, X, grid, 0.8, q).m[0, ad.start:]
        assert np.max(np.abs(ad.m[0] - m)) < 10 * grid.dt

    def test_grid_mismatch(self):
        spec = det_spec()
        g1, g2 = TimeGrid(1.0, 512), TimeGrid(1.0, 256)
        X = simulate(spec, g1, 0).X
        rec = model1.mle_recurrent(spec, X, g1, 0.25)
        with pytest.raises(ModelError):
            adaptive_filter_i(spec, X[:, ::2], g2, rec)


class TestModelII:
    def test_plug_in_truth(self):
        grid = TimeGrid(1.25, 4096)
        spec = joint_spec(eps=0.01, theta=(2.5, 0.2))
        X = simulate(spec, grid, 2).X
        one = model2_run(spec, X, grid, 0.625)
        one = replace(one, values=np.broadcast_to(np.array([2.5, 0.2]), one.values.shape).copy())
        ad = adaptive_filter_ii(spec, X, grid, one)
        orc = kb_filter(spec, X, grid)
        assert ad.t[0] == pytest.approx(0.9375)
        assert np.max(np.abs(ad.m - orc.m[:, ad.start:])) < 1e-8
        gam = riccati_trace(spec, grid).gamma[ad.start:]
        assert np.max(np.abs(ad.gamma[0] - gam)) < 1e-10

    def test_tau_star_must_exceed_tau(self, grid1k):
        spec = joint_spec(eps=0.05)
        grid = TimeGrid(1.25, 1024)
        X = simulate(spec, grid, 0).X
        with pytest.raises(ModelError):
            adaptive_filter_ii(spec, X, grid, model2_run(spec, X, grid, 0.625), tau_star=0.5)

    @pytest.mark.slow
    def test_error_order_eps(self):
        out = {}
        for eps in (0.02, 0.01):
            spec = mc.model2_spec(mc.MODEL2_CONFIG, eps)
            grid = TimeGrid(1.25, mc.grid_points(eps))
            errs, dg = [], []
            for lo in range(0, 1000, 100):
                p = simulate(spec, grid, 12345, range(lo, lo + 100))
                one = model2_run(spec, p.X, grid, 0.625)
                ad = adaptive_filter_ii(spec, p.X, grid, one)
                err = error_process(ad, kb_filter(spec, p.X, grid), eps)
                errs.append(err.terminal)
                dg.append(np.max(np.abs(ad.gamma - riccati_trace(spec, grid).gamma[ad.start:]), axis=-1) / eps)
            out[eps] = (np.var(np.concatenate(errs)), np.median(np.concatenate(dg)))
        v1, v2 = out[0.02][0], out[0.01][0]
        assert 0.5 < v1 / v2 < 2.0
        assert 0.5 < out[0.02][1] / out[0.01][1] < 2.0


class TestModelIII:
    def test_plug_in_truth(self):
        grid = TimeGrid(1.0, 4096)
        # the filter uses the large-d Riccati limit, exact up to O(1/d^2)
        spec = random_spec(eps=0.01, theta=1.0, d2=900.0)
        X = simulate(spec, grid, 3, range(3)).X
        one = model3.one_step_iii(spec, X, grid, 0.5)
        one = replace(one, values=np.ones_like(one.values))
        ad = adaptive_filter_iii(spec, X, grid, one)
        orc = kb_filter(spec, X, grid)
        assert ad.t[0] == pytest.approx(0.75)
        assert np.max(np.abs(ad.m - orc.m[:, ad.start:])) < 1e-8

    def test_start_before_trace_rejected(self, grid1k):
        spec = random_spec(eps=0.05)
        X = simulate(spec, grid1k, 0).X
        with pytest.raises(ModelError):
            adaptive_filter_iii(spec, X, grid1k, model3.one_step_iii(spec, X, grid1k, 0.5), tau_start=0.25)


@pytest.mark.parametrize("kind", ["det_init", "joint", "random_init"])
def test_causal(kind):
    """Changing the observation after node j leaves the adaptive filter up to j unchanged."""
    if kind == "det_init":
        spec, grid, tau = det_spec(eps=0.05), TimeGrid(1.0, 1024), 0.25
    elif kind == "joint":
        spec, grid, tau = joint_spec(eps=0.05), TimeGrid(1.25, 1024), 0.625
    else:
        spec, grid, tau = random_spec(eps=0.05), TimeGrid(1.0, 1024), 0.5
    X = simulate(spec, grid, 9).X
    Z = X.copy()
    j = 900
    Z[:, j + 1:] += 0.3 * np.sin(np.arange(grid.N - j))

    def run(path):
        if kind == "det_init":
            return adaptive_filter_i(spec, path, grid, model1.mle_recurrent(spec, path, grid, tau))
        if kind == "joint":
            return adaptive_filter_ii(spec, path, grid, model2_run(spec, path, grid, tau))
        return adaptive_filter_iii(spec, path, grid, model3.one_step_iii(spec, path, grid, tau))

    a, b = run(X), run(Z)
    n = j - a.start
    assert np.array_equal(a.m[..., : n + 1], b.m[..., : n + 1])
    assert not np.array_equal(a.m[..., -1], b.m[..., -1])


class TestErrorProcess:
    def test_summaries(self, grid1k):
        spec = det_spec(eps=0.05)
        X = simulate(spec, grid1k, 1, range(2)).X
        q = model1.quantities(spec, grid1k)
        ad = adaptive_filter_i(spec, X, grid1k, model1.mle_recurrent(spec, X, grid1k, 0.25, q), q)
        orc = model1.oracle_filter(spec, X, grid1k, 1.0, q)
        e1 = error_process(ad, orc, 0.05)
        e2 = error_process(ad, orc.m, 0.05)
        assert np.array_equal(e1.values, e2.values)
        assert np.array_equal(e1.terminal, e1.values[:, -1])
        assert np.array_equal(e1.sup, np.max(np.abs(e1.values), axis=-1))
        v = e1.values
        assert np.all(e1.l2 <= e1.sup * np.sqrt(grid1k.T - e1.t[0]) * (1 + 1e-12))

    def test_rejects(self, grid1k):
        spec = det_spec(eps=0.05)
        X = simulate(spec, grid1k, 1).X
        q = model1.quantities(spec, grid1k)
        ad = adaptive_filter_i(spec, X, grid1k, model1.mle_recurrent(spec, X, grid1k, 0.25, q), q)
        with pytest.raises(ModelError):
            error_process(ad, np.zeros(10), 0.05)
        with pytest.raises(ModelError):
            error_process(ad, model1.oracle_filter(spec, X, grid1k, 1.0, q), 0.0)
