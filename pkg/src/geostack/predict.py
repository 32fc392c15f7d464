"""Stacked predictions from full-data candidate fits, and held-out metrics."""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .conjugate import ConjugateFit, PriorSpec, SpatialDataset, fit, lppd_from_moments, predict
from .kernel import MaternParams, as_locations, factorize_corr, matern_corr, pairwise_distances
from .stacking import CandidateGrid, StackingWeights

__all__ = [
    "StackedModel",
    "MetricReport",
    "fit_candidates",
    "stack",
    "stacked_mean",
    "stacked_latent_mean",
    "stacked_log_density",
    "evaluate",
]


def fit_candidates(data: SpatialDataset, prior: PriorSpec, grid: CandidateGrid, *,
                   threads: int = 1, only=None) -> list[ConjugateFit | None]:
    """Fit every candidate of ``grid`` on all of ``data`` (grid order).

    ``only`` restricts fitting to a set of candidate indices; the others are
    left as ``None``.
    """
    dist = pairwise_distances(data.coords)
    nd = len(grid.delta2)
    fits: list[ConjugateFit | None] = [None] * grid.size
    wanted = set(range(grid.size)) if only is None else set(int(g) for g in only)

    def run(i, phi, nu):
        idx = [i * nd + j for j in range(nd) if i * nd + j in wanted]
        if not idx:
            return
        kernel = MaternParams(phi, nu)
        R = matern_corr(kernel, dist)
        np.fill_diagonal(R, 1.0)
        corr = factorize_corr(R)
        for g in idx:
            fits[g] = fit(data, prior.with_delta2(grid.delta2[g - i * nd]), kernel, corr=corr)

    pairs = list(enumerate(itertools.product(grid.phi, grid.nu)))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for fut in [pool.submit(run, i, phi, nu) for i, (phi, nu) in pairs]:
                fut.result()
    else:
        for i, (phi, nu) in pairs:
            run(i, phi, nu)
    return fits


@dataclass(frozen=True, eq=False)
class StackedModel:
    """Candidate fits on the full data combined with stacking weights."""

    weights: StackingWeights
    fits: list
    grid: CandidateGrid

    def __post_init__(self):
        if len(self.fits) != self.grid.size or self.weights.w.shape[0] != self.grid.size:
            raise ValueError("fits, weights and grid must index the same candidates")
        for g in self.active:
            if self.fits[g] is None:
                raise ValueError(f"candidate {g} has positive weight but no fit")

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.weights.w > 0)

    def predictions(self, chi_new, X_new):
        return {int(g): predict(self.fits[g], chi_new, X_new) for g in self.active}

    def __repr__(self):
        terms = ", ".join(f"{self.grid.candidates[g]}: {self.weights.w[g]:.4g}"
                          for g in self.active)
        return f"StackedModel({self.weights.solver}, {{{terms}}})"


def stack(data: SpatialDataset, prior: PriorSpec, grid: CandidateGrid,
          weights: StackingWeights, fits=None, threads: int = 1) -> StackedModel:
    """Build a :class:`StackedModel`, fitting only the candidates it needs."""
    if fits is None:
        fits = fit_candidates(data, prior, grid, threads=threads,
                              only=np.flatnonzero(weights.w > 0))
    return StackedModel(weights=weights, fits=fits, grid=grid)


def stacked_mean(model: StackedModel, chi_new, X_new) -> np.ndarray:
    """Weighted average of the candidates' predictive means of y."""
    preds = model.predictions(chi_new, X_new)
    w = model.weights.w
    return sum(w[g] * pr.mean for g, pr in preds.items())


def stacked_latent_mean(model: StackedModel, chi_new, X_new=None) -> np.ndarray:
    """Weighted average of the candidates' posterior means of z."""
    chi_new = as_locations(chi_new)
    if X_new is None:
        # the latent mean does not depend on the covariates
        X_new = np.zeros((chi_new.shape[0], model.fits[model.active[0]].p))
    preds = model.predictions(chi_new, X_new)
    w = model.weights.w
    return sum(w[g] * pr.latent_mean for g, pr in preds.items())


def stacked_log_density(model: StackedModel, chi_new, X_new, y_new) -> np.ndarray:
    """``log sum_g w_g p_g(y | data)`` at each new point, via log-sum-exp."""
    preds = model.predictions(chi_new, X_new)
    y = np.atleast_1d(np.asarray(y_new, dtype=float))
    active = list(preds)
    lps = np.stack([lppd_from_moments(y, preds[g].mean, preds[g].scale,
                                      preds[g].a_star, preds[g].b_star) for g in active])
    return logsumexp(lps, axis=0, b=model.weights.w[active][:, None])


@dataclass(frozen=True, eq=False)
class MetricReport:
    """Held-out MSPE and MLPD, plus MSEZ when the true latent field is known."""

    mspe: float
    msez: float
    mlpd: float
    per_point: dict = field(repr=False, default_factory=dict)

    def as_dict(self) -> dict:
        return {"mspe": self.mspe, "msez": self.msez, "mlpd": self.mlpd}


def evaluate(model: StackedModel, holdout: SpatialDataset, z_true=None, z_coords=None,
             z_X=None) -> MetricReport:
    """Score a stacked model on held-out data.

    MSPE and MLPD are averages over the held-out rows. MSEZ averages the
    squared error of the stacked latent mean against ``z_true`` at
    ``z_coords``; by default those are the model's training locations
    followed by the held-out locations. Without ``z_true`` MSEZ is NaN.

    Raises
    ------
    ValueError
        If ``z_coords`` is given without ``z_true`` or lengths disagree.
    """
    if holdout.n == 0:
        raise ValueError("holdout set is empty")
    preds = model.predictions(holdout.coords, holdout.X)
    w = model.weights.w
    yhat = sum(w[g] * pr.mean for g, pr in preds.items())
    lpd = stacked_log_density(model, holdout.coords, holdout.X, holdout.y)
    per_point = {"yhat": yhat, "y": holdout.y, "lpd": lpd}
    msez = float("nan")
    if z_true is None:
        if z_coords is not None:
            raise ValueError("MSEZ requested (z_coords given) without the true latent values")
    else:
        z_true = np.asarray(z_true, dtype=float)
        if z_coords is None:
            train_coords = model.fits[model.active[0]].coords
            z_coords = np.vstack([train_coords, holdout.coords])
        z_coords = as_locations(z_coords)
        if z_coords.shape[0] != z_true.shape[0]:
            raise ValueError("z_true and z_coords have different lengths")
        zhat = stacked_latent_mean(model, z_coords, z_X)
        msez = float(np.mean((zhat - z_true) ** 2))
        per_point["zhat"] = zhat
    return MetricReport(
        mspe=float(np.mean((yhat - holdout.y) ** 2)),
        msez=msez,
        mlpd=float(np.mean(lpd)),
        per_point=per_point,
    )
