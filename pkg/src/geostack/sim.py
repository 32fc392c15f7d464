"""Synthetic spatial data and the replicated stacking study."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .conjugate import PriorSpec, SpatialDataset
from .kernel import MaternParams, build_corr_matrix
from .predict import MetricReport, StackedModel, evaluate, fit_candidates
from .serialize import write_csv, write_json
from .stacking import (
    DEFAULT_GRID,
    CandidateGrid,
    StackingWeights,
    assign_folds,
    build_cv_table,
    solve_weights_densities,
    solve_weights_means,
)

__all__ = [
    "SimConfig",
    "SimReplicate",
    "StudyResult",
    "SIM1",
    "SIM2",
    "generate",
    "run_study",
    "METHODS",
]

log = logging.getLogger(__name__)

METHODS = ("stack_means", "stack_densities", "M0")


@dataclass(frozen=True)
class SimConfig:
    """Truth and size of a simulation.

    ``beta_true`` includes the intercept; the design is an intercept plus
    ``len(beta_true) - 1`` standard-normal covariates. An empty
    ``beta_true`` gives the no-trend model ``y = z + eps``.
    """

    n: int = 200
    n_holdout: int = 50
    d: int = 2
    beta_true: tuple = (1.0, 2.0)
    sigma2_true: float = 1.0
    tau2_true: float = 1.0
    kernel_true: MaternParams = MaternParams(7.0, 1.0)
    replicates: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError("d must be 1 or 2")
        if not 0 <= self.n_holdout < self.n:
            raise ValueError("need 0 <= n_holdout < n")
        if self.sigma2_true <= 0 or self.tau2_true <= 0:
            raise ValueError("variances must be positive")
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))

    @property
    def p(self) -> int:
        return len(self.beta_true)

    @property
    def delta2_true(self) -> float:
        return self.tau2_true / self.sigma2_true


SIM1 = SimConfig(beta_true=(1.0, 2.0), sigma2_true=1.0, tau2_true=1.0,
                 kernel_true=MaternParams(7.0, 1.0))
SIM2 = SimConfig(beta_true=(1.0, 2.0), sigma2_true=1.0, tau2_true=0.3,
                 kernel_true=MaternParams(20.0, 0.5))


@dataclass(frozen=True, eq=False)
class SimReplicate:
    dataset: SpatialDataset
    z_true: np.ndarray
    holdout: np.ndarray  # boolean mask

    @property
    def train(self) -> SpatialDataset:
        return self.dataset.subset(np.flatnonzero(~self.holdout))

    @property
    def test(self) -> SpatialDataset:
        return self.dataset.subset(np.flatnonzero(self.holdout))


def generate(config: SimConfig, replicate_index: int = 0) -> SimReplicate:
    """Draw one dataset: uniform locations on ``[0, 1]^d``, ``z ~ N(0, sigma2 R)``,
    ``y = X beta + z + eps`` with ``eps ~ N(0, tau2)``, and a random holdout."""
    rng = np.random.default_rng([config.seed, replicate_index])
    n = config.n
    coords = rng.uniform(size=(n, config.d))
    p = config.p
    X = np.ones((n, p))
    if p > 1:
        X[:, 1:] = rng.standard_normal((n, p - 1))
    corr = build_corr_matrix(config.kernel_true, coords)
    z = np.sqrt(config.sigma2_true) * (corr.chol @ rng.standard_normal(n))
    eps = np.sqrt(config.tau2_true) * rng.standard_normal(n)
    y = X @ np.asarray(config.beta_true) + z + eps
    holdout = np.zeros(n, dtype=bool)
    holdout[rng.choice(n, size=config.n_holdout, replace=False)] = True
    return SimReplicate(SpatialDataset(coords, X, y), z, holdout)


@dataclass
class StudyResult:
    """Per-replicate rows (one per method) and aggregate summary."""

    rows: list = field(default_factory=list)

    def metric(self, method: str, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows if r["method"] == method], dtype=float)

    def summary(self) -> dict:
        out = {}
        for method in METHODS:
            entry = {}
            for name in ("mspe", "msez", "mlpd", "nonzero"):
                v = self.metric(method, name)
                if v.size == 0:
                    continue
                entry[name] = {
                    "median": float(np.median(v)),
                    "mean": float(np.mean(v)),
                    "q025": float(np.quantile(v, 0.025)),
                    "q975": float(np.quantile(v, 0.975)),
                }
            out[method] = entry
        out["replicates"] = len({r["replicate"] for r in self.rows})
        return out

    def to_csv(self, path):
        return write_csv(self.rows, path)

    def to_json(self, path):
        return write_json(self.summary(), path)


def _row(i, method, report: MetricReport, weights: StackingWeights):
    return {
        "replicate": i,
        "method": method,
        "mspe": report.mspe,
        "msez": report.msez,
        "mlpd": report.mlpd,
        "nonzero": weights.nonzero(1e-3),
        "iterations": weights.iterations,
        "converged": int(weights.converged),
        "objective": weights.objective,
    }


def run_replicate(config: SimConfig, i: int, grid: CandidateGrid, prior: PriorSpec,
                  K: int = 10, threads: int = 1) -> list[dict]:
    rep = generate(config, i)
    train, test = rep.train, rep.test
    z_all = np.concatenate([rep.z_true[~rep.holdout], rep.z_true[rep.holdout]])
    folds = assign_folds(train.n, K, seed=[config.seed, i, 1])
    cv = build_cv_table(train, prior, grid, folds, threads=threads)
    w_means = solve_weights_means(train.y, cv.yhat)
    w_dens = solve_weights_densities(cv.lp)
    needed = np.flatnonzero((w_means.w > 0) | (w_dens.w > 0))
    fits = fit_candidates(train, prior, grid, threads=threads, only=needed)
    rows = []
    for method, w in (("stack_means", w_means), ("stack_densities", w_dens)):
        report = evaluate(StackedModel(w, fits, grid), test, z_true=z_all)
        rows.append(_row(i, method, report, w))

    kt = config.kernel_true
    grid0 = CandidateGrid((kt.phi,), (kt.nu,), (config.delta2_true,))
    w0 = StackingWeights(np.ones(1), float("nan"), "fixed", 0, True)
    model0 = StackedModel(w0, fit_candidates(train, prior, grid0), grid0)
    rows.append(_row(i, "M0", evaluate(model0, test, z_true=z_all), w0))
    return rows


def run_study(config: SimConfig, grid: CandidateGrid = DEFAULT_GRID, prior: PriorSpec | None = None,
              K: int = 10, threads: int = 1) -> StudyResult:
    """Replicate the stacking comparison ``config.replicates`` times.

    Each replicate scores stacking of means, stacking of predictive
    densities and the conjugate model at the true hyper-parameters (M0) on
    the held-out points; MSEZ is taken over all ``n`` generated locations.
    """
    prior = PriorSpec.default(config.p) if prior is None else prior

    def one(i):
        try:
            rows = run_replicate(config, i, grid, prior, K)
        except Exception as exc:
            raise RuntimeError(f"replicate {i} failed: {exc}") from exc
        log.info("replicate %d/%d done", i + 1, config.replicates)
        return rows

    result = StudyResult()
    if threads > 1:
        # each replicate owns its RNG stream, so order of completion is irrelevant
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for rows in pool.map(one, range(config.replicates)):
                result.rows.extend(rows)
    else:
        for i in range(config.replicates):
            result.rows.extend(one(i))
    return result


def with_overrides(config: SimConfig, **kw) -> SimConfig:
    return replace(config, **kw)
