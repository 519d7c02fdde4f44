import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adaptive_kb import mc
from adaptive_kb.model import ModelError


class TestRateFit:
    @given(st.floats(0.2, 1.5), st.floats(-2.0, 2.0))
    def test_exact_power_law(self, p, c):
        eps = 10.0 ** -np.arange(1.0, 3.01, 0.5)
        fit = mc.rate_fit(eps, np.exp(c) * eps**p)
        assert fit.slope == pytest.approx(p, abs=1e-10)
        assert fit.intercept == pytest.approx(c, abs=1e-9)
        assert fit.ci_low <= p + 1e-9 and fit.ci_high >= p - 1e-9

    def test_noisy_band_covers(self):
        rng = np.random.default_rng(4)
        eps = 10.0 ** -np.arange(1.0, 3.01, 0.25)
        fit = mc.rate_fit(eps, eps ** (2 / 3) * np.exp(0.05 * rng.standard_normal(eps.size)))
        assert fit.ci_low < 2 / 3 < fit.ci_high

    @pytest.mark.parametrize("eps,s", [
        ([0.1, 0.01, 0.001], [1, 2, 3]),
        ([0.1, 0.05, 0.02, 0.01], [1, 2, 3, 4]),
        ([0.1, 0.03, 0.01, 0.001], [1, 0, 3, 4]),
        ([0.1, 0.03, 0.01, 0.001], [1, np.nan, 3, 4]),
    ])
    def test_rejects(self, eps, s):
        with pytest.raises(ModelError):
            mc.rate_fit(eps, s)


class TestNormality:
    def test_normal_passes(self):
        x = np.random.default_rng(1).normal(0, 2.0, 3000)
        r = mc.normality_check(x, 4.0)
        assert r.passed and not r.heavy_tail
        assert r.variance_ratio == pytest.approx(1.0, abs=0.1)

    def test_wrong_variance_fails(self):
        x = np.random.default_rng(1).normal(0, 2.0, 3000)
        assert not mc.normality_check(x, 1.0).passed

    def test_cauchy_flagged(self):
        x = np.random.default_rng(2).standard_cauchy(3000)
        r = mc.normality_check(x, 1.0)
        assert r.heavy_tail and not r.passed and "heavy" in r.note

    def test_tail_ratio_normal_near_one(self):
        assert mc.tail_ratio(np.random.default_rng(3).standard_normal(20000)) == pytest.approx(1.0, abs=0.03)
        assert mc.tail_ratio(np.zeros(10)) == float("inf")

    def test_rejects(self):
        with pytest.raises(ModelError, match="non-finite"):
            mc.normality_check(np.r_[np.zeros(200), np.nan], 1.0)
        with pytest.raises(ModelError, match="at least"):
            mc.normality_check(np.zeros(50), 1.0)
        with pytest.raises(ModelError):
            mc.normality_check(np.ones(200), 0.0)

    def test_variance_interval_covers(self):
        x = np.random.default_rng(5).normal(0, 3.0, 2000)
        lo, hi = mc.variance_interval(x)
        assert lo < 9.0 < hi


@pytest.mark.parametrize("eps,n", [(0.1, 2**14), (1e-3, 2**14), (1e-4, 80000), (3e-4, 26667)])
def test_grid_points(eps, n):
    assert mc.grid_points(eps) == n


def test_run_replicates_worker_invariant():
    a = mc.run_replicates("model1", mc.MODEL1_CONFIG, 0.05, 99, 250, workers=1)
    b = mc.run_replicates("model1", mc.MODEL1_CONFIG, 0.05, 99, 250, workers=2)
    assert set(a) == {"mle", "adaptive"}
    for k in a:
        assert a[k].shape == (250,)
        assert a[k].tobytes() == b[k].tobytes()


def test_run_replicates_prefix_stable():
    """Replicate i depends only on (seed, i), not on M."""
    a = mc.run_replicates("model1", mc.MODEL1_CONFIG, 0.05, 7, 150)
    b = mc.run_replicates("model1", mc.MODEL1_CONFIG, 0.05, 7, 120)
    assert np.array_equal(a["mle"][:120], b["mle"])


@pytest.mark.slow
def test_model1_mle_unbiased():
    r = mc.run_replicates("model1", mc.MODEL1_CONFIG, 0.01, 2024, 1000)
    z = r["mle"]
    assert abs(z.mean()) < 3 * z.std(ddof=1) / np.sqrt(z.size)


class TestPlan:
    def test_unknown_check(self):
        with pytest.raises(ModelError, match="unknown checks: nope"):
            mc.ExperimentPlan(("calibration", "nope")).validate()

    @pytest.mark.parametrize("kw", [
        dict(checks=()), dict(checks=("calibration",), replicates=50),
        dict(checks=("calibration",), eps=0.0), dict(checks=("calibration",), eps_list=(0.01, 0.1)),
        dict(checks=("calibration",), workers=0), dict(checks=("calibration",), target_scale=-1.0),
        dict(checks=("calibration",), master_seed=-1),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ModelError):
            mc.ExperimentPlan(**kw).validate()

    def test_non_distributional_small_m_ok(self):
        mc.ExperimentPlan(("riccati_closed_forms",), replicates=10).validate()

    def test_acceptance_names_registered(self):
        assert all(c in mc.CHECKS for c in mc.ACCEPTANCE)


class TestReport:
    def test_calibration_and_designed_failure(self, tmp_path):
        ok = mc.run_experiment(mc.ExperimentPlan(("calibration", "heavy_tail_detection")))
        assert ok.passed
        bad = mc.run_experiment(mc.ExperimentPlan(("calibration",), target_scale=2.0))
        assert not bad.passed
        assert bad.summary_lines()[0].startswith("FAIL calibration")

    def test_write_byte_identical(self, tmp_path):
        plan = mc.ExperimentPlan(("calibration", "riccati_closed_forms"))
        p1 = mc.run_experiment(plan).write(tmp_path / "a")
        p2 = mc.run_experiment(plan).write(tmp_path / "b")
        assert [p.name for p in p1] == [p.name for p in p2]
        for x, y in zip(p1, p2):
            assert x.read_bytes() == y.read_bytes()
        doc = json.loads(p1[0].read_text())
        assert doc["passed"] is True and "timing" not in doc
        assert doc["fingerprint"]["master_seed"] == 12345

    def test_to_json_has_timing(self):
        r = mc.run_experiment(mc.ExperimentPlan(("calibration",)))
        assert set(json.loads(r.to_json())["timing"]) == {"calibration"}

    def test_seed_changes_content(self):
        a = mc.run_experiment(mc.ExperimentPlan(("calibration",)))
        b = mc.run_experiment(replace(mc.ExperimentPlan(("calibration",)), master_seed=1))
        assert a.content_bytes() != b.content_bytes()

    def test_table_csv(self):
        s = mc.table_csv({"header": ["a", "b"], "rows": [[0.1, "x"], [np.float64(2.5), 3]]})
        assert s == "a,b\n0.1,x\n2.5,3\n"

    def test_determinism_check(self):
        assert mc.determinism_check(mc.ExperimentPlan(("calibration", "riccati_closed_forms")))
