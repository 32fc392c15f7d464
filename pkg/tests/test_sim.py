import json
from dataclasses import replace

import numpy as np
import pytest

from geostack.kernel import MaternParams
from geostack.sim import METHODS, SIM1, SIM2, SimConfig, generate, run_study
from geostack.stacking import CandidateGrid


class TestConfig:
    def test_presets(self):
        assert SIM1.beta_true == (1.0, 2.0)
        assert (SIM1.kernel_true.phi, SIM1.kernel_true.nu) == (7.0, 1.0)
        assert (SIM1.sigma2_true, SIM1.tau2_true) == (1.0, 1.0)
        assert (SIM2.kernel_true.phi, SIM2.kernel_true.nu) == (20.0, 0.5)
        assert SIM2.tau2_true == 0.3
        assert SIM2.delta2_true == pytest.approx(0.3)

    def test_validation(self):
        with pytest.raises(ValueError):
            SimConfig(n=10, n_holdout=10)
        with pytest.raises(ValueError):
            SimConfig(tau2_true=0.0)
        with pytest.raises(ValueError):
            SimConfig(d=3)


class TestGenerate:
    def test_model_identity_and_split(self):
        rep = generate(replace(SIM1, n=80, n_holdout=20), 0)
        ds = rep.dataset
        assert ds.coords.shape == (80, 2) and np.all((ds.coords >= 0) & (ds.coords <= 1))
        np.testing.assert_array_equal(ds.X[:, 0], 1.0)
        eps = ds.y - ds.X @ np.array(SIM1.beta_true) - rep.z_true
        assert abs(eps.std() - 1.0) < 0.3
        assert rep.holdout.sum() == 20
        assert rep.train.n + rep.test.n == 80

    def test_bit_identical_regeneration(self):
        a, b = generate(SIM2, 3), generate(SIM2, 3)
        np.testing.assert_array_equal(a.dataset.y, b.dataset.y)
        np.testing.assert_array_equal(a.holdout, b.holdout)
        c = generate(SIM2, 4)
        assert not np.array_equal(a.dataset.y, c.dataset.y)

    def test_latent_variance(self):
        cfg = replace(SIM1, n=50, n_holdout=0, sigma2_true=2.0)
        z = np.concatenate([generate(cfg, i).z_true for i in range(200)])
        assert z.var() == pytest.approx(2.0, rel=0.1)

    def test_latent_correlation_exponential(self):
        # pairs at distance 0.1 in 1-D; correlation exp(-0.7)
        cfg = SimConfig(n=2, n_holdout=0, d=1, beta_true=(), sigma2_true=1.0, tau2_true=1.0,
                        kernel_true=MaternParams(7.0, 0.5))
        rng = np.random.default_rng(0)
        from geostack.kernel import build_corr_matrix
        L = build_corr_matrix(cfg.kernel_true, np.array([0.0, 0.1])).chol
        z = (L @ rng.standard_normal((2, 20000))).T
        assert np.corrcoef(z.T)[0, 1] == pytest.approx(np.exp(-0.7), abs=0.02)

    def test_no_trend(self):
        cfg = SimConfig(n=30, n_holdout=0, beta_true=(), replicates=1)
        rep = generate(cfg, 0)
        assert rep.dataset.p == 0
        eps = rep.dataset.y - rep.z_true
        assert abs(eps.mean()) < 1.0


class TestStudy:
    def test_smoke(self, tmp_path):
        cfg = replace(SIM2, n=60, n_holdout=15, replicates=1)
        grid = CandidateGrid((7.0, 20.0), (0.5, 1.0), (0.3, 1.0))
        res = run_study(cfg, grid, K=5)
        assert [r["method"] for r in res.rows] == list(METHODS)
        for r in res.rows:
            assert np.isfinite([r["mspe"], r["msez"], r["mlpd"]]).all()
        res.to_csv(tmp_path / "rows.csv")
        res.to_json(tmp_path / "summary.json")
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["replicates"] == 1
        assert set(summary["stack_means"]) == {"mspe", "msez", "mlpd", "nonzero"}
        assert (tmp_path / "rows.csv").read_text().splitlines()[0].startswith("replicate,method")

    def test_threads_identical(self):
        cfg = replace(SIM2, n=50, n_holdout=10, replicates=2)
        grid = CandidateGrid((7.0, 20.0), (0.5,), (0.3, 1.0))
        a = run_study(cfg, grid, K=4, threads=1)
        b = run_study(cfg, grid, K=4, threads=2)
        assert len(a.rows) == len(b.rows)
        for ra, rb in zip(a.rows, b.rows):
            assert ra.keys() == rb.keys()
            for k in ra:
                assert ra[k] == rb[k] or (ra[k] != ra[k] and rb[k] != rb[k]), k

    def test_error_carries_replicate(self):
        cfg = replace(SIM2, n=30, n_holdout=5, replicates=1)
        with pytest.raises(RuntimeError, match="replicate 0"):
            run_study(cfg, CandidateGrid((7.0,), (0.5,), (0.3,)), K=40)
