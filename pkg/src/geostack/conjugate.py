"""Exact conjugate posterior for the spatial regression with fixed (phi, nu, delta2).

The model is

    y | beta, z, sigma2 ~ N(X beta + z, delta2 sigma2 I)
    z | sigma2          ~ N(0, sigma2 R)
    beta | sigma2       ~ N(mu_beta, sigma2 V_beta)
    sigma2              ~ IG(a_sigma, b_sigma)

Stacking ``gamma = (beta, z)`` turns it into a conjugate linear regression.
``fit`` forms the precision ``M*^{-1}`` of ``gamma`` block by block, takes one
Cholesky factor ``L`` of it and reads everything else off triangular solves:
``u = L^{-1} m*``, ``gamma_hat = L^{-T} u`` and
``b* = b_sigma + (y'y / delta2 + mu' V^{-1} mu - u'u) / 2``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.special import logsumexp

from .kernel import (
    CorrMatrix,
    MaternParams,
    as_locations,
    build_corr_matrix,
    build_cross_corr,
)

__all__ = [
    "PriorSpec",
    "SpatialDataset",
    "ConjugateFit",
    "Prediction",
    "PosteriorSamples",
    "fit",
    "posterior_sigma2",
    "inverse_gamma_moments",
    "sample_posterior",
    "predict",
    "lppd",
    "lppd_from_moments",
    "lppd_monte_carlo",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Normal-inverse-gamma prior constants and the fixed ratio ``delta2 = tau2 / sigma2``."""

    mu_beta: np.ndarray
    V_beta: np.ndarray
    a_sigma: float = 2.0
    b_sigma: float = 2.0
    delta2: float = 1.0
    _V_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu_beta, dtype=float))
        V = np.asarray(self.V_beta, dtype=float).reshape(mu.size, mu.size)
        if not np.allclose(V, V.T):
            raise ValueError("V_beta must be symmetric")
        for name in ("a_sigma", "b_sigma", "delta2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v}")
        if mu.size:
            try:
                LV = np.linalg.cholesky(V)
            except np.linalg.LinAlgError:
                raise ValueError("V_beta must be positive definite") from None
            Linv = solve_triangular(LV, np.eye(mu.size), lower=True)
            V_inv = Linv.T @ Linv
        else:
            V_inv = np.zeros((0, 0))
        object.__setattr__(self, "mu_beta", mu)
        object.__setattr__(self, "V_beta", V)
        object.__setattr__(self, "_V_inv", V_inv)
        for name in ("a_sigma", "b_sigma", "delta2"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def default(cls, p: int, delta2: float = 1.0) -> "PriorSpec":
        """Zero-mean ``N(0, 4 I)`` prior on beta and ``IG(2, 2)`` on sigma2."""
        return cls(np.zeros(p), 4.0 * np.eye(p), 2.0, 2.0, delta2)

    @property
    def p(self) -> int:
        return self.mu_beta.size

    @property
    def V_beta_inv(self) -> np.ndarray:
        return self._V_inv

    def with_delta2(self, delta2: float) -> "PriorSpec":
        return replace(self, delta2=delta2)


@dataclass(frozen=True, eq=False)
class SpatialDataset:
    """Locations ``coords`` (n, d), design ``X`` (n, p) and outcomes ``y`` (n,)."""

    coords: np.ndarray
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        s = as_locations(self.coords)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] != s.shape[0] or y.shape[0] != s.shape[0]:
            raise ValueError(
                f"row counts disagree: coords {s.shape[0]}, X {X.shape}, y {y.shape[0]}"
            )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("X and y must be finite")
        if X.shape[1] and np.linalg.matrix_rank(X) < X.shape[1]:
            warnings.warn("design matrix X is not of full column rank", RuntimeWarning,
                          stacklevel=3)
        object.__setattr__(self, "coords", s)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "SpatialDataset":
        idx = np.asarray(idx)
        return SpatialDataset(self.coords[idx], self.X[idx], self.y[idx])


@dataclass(frozen=True, eq=False)
class ConjugateFit:
    """Posterior ``IG(sigma2 | a*, b*) x N(gamma | gamma_hat, sigma2 M*)``.

    ``chol`` is the lower Cholesky factor of ``M*^{-1}``; ``M*`` itself is
    never formed except by :meth:`Mstar` (for diagnostics).
    """

    a_star: float
    b_star: float
    gamma_hat: np.ndarray
    chol: np.ndarray
    u: np.ndarray
    kernel: MaternParams
    delta2: float
    corr: CorrMatrix
    coords: np.ndarray
    p: int

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def beta_hat(self) -> np.ndarray:
        return self.gamma_hat[: self.p]

    @property
    def z_hat(self) -> np.ndarray:
        return self.gamma_hat[self.p:]

    @property
    def dof(self) -> float:
        return 2.0 * self.a_star

    def Mstar(self) -> np.ndarray:
        Linv = solve_triangular(self.chol, np.eye(self.chol.shape[0]), lower=True)
        return Linv.T @ Linv


def fit(data: SpatialDataset, prior: PriorSpec, kernel: MaternParams, *,
        corr: CorrMatrix | None = None, allow_duplicates: bool = False) -> ConjugateFit:
    """Exact posterior of ``(beta, z, sigma2)`` for one candidate model.

    Parameters
    ----------
    data : SpatialDataset
    prior : PriorSpec
        Carries ``delta2``.
    kernel : MaternParams
    corr : CorrMatrix, optional
        Pre-factored ``R`` for ``data.coords``. Lets callers share one
        factorisation across several ``delta2`` values.
    allow_duplicates : bool
        Passed to :func:`build_corr_matrix` when ``corr`` is not given.

    Raises
    ------
    ValueError
        On dimension mismatch between data and prior.
    numpy.linalg.LinAlgError
        If the block precision cannot be factored.
    """
    n, p = data.n, data.p
    if prior.p != p:
        raise ValueError(f"prior has {prior.p} regression coefficients, X has {p} columns")
    if corr is None:
        corr = build_corr_matrix(kernel, data.coords, allow_duplicates=allow_duplicates)
    elif corr.n != n:
        raise ValueError("correlation factor does not match the number of observations")

    X, y = data.X, data.y
    inv_d2 = 1.0 / prior.delta2
    Vinv = prior.V_beta_inv

    prec = np.empty((p + n, p + n))
    prec[:p, :p] = inv_d2 * (X.T @ X) + Vinv
    prec[:p, p:] = inv_d2 * X.T
    prec[p:, :p] = inv_d2 * X
    prec[p:, p:] = corr.inverse()
    prec[p:, p:][np.diag_indices(n)] += inv_d2

    try:
        L = cholesky(prec, lower=True)
    except LinAlgError as exc:
        raise LinAlgError(f"posterior precision is not positive definite: {exc}") from None

    Vinv_mu = Vinv @ prior.mu_beta
    m = np.concatenate([Vinv_mu + inv_d2 * (X.T @ y), inv_d2 * y])
    u = solve_triangular(L, m, lower=True)
    b_star = prior.b_sigma + 0.5 * (inv_d2 * (y @ y) + prior.mu_beta @ Vinv_mu - u @ u)
    gamma_hat = solve_triangular(L, u, lower=True, trans="T")
    return ConjugateFit(
        a_star=prior.a_sigma + 0.5 * n,
        b_star=float(b_star),
        gamma_hat=gamma_hat,
        chol=L,
        u=u,
        kernel=kernel,
        delta2=prior.delta2,
        corr=corr,
        coords=data.coords,
        p=p,
    )


def inverse_gamma_moments(a: float, b: float) -> tuple[float, float]:
    """Mean and variance of ``IG(a, b)``; the variance needs ``a > 2``."""
    if a <= 2:
        raise ValueError(f"inverse-gamma variance undefined for shape a = {a} <= 2")
    return b / (a - 1.0), b * b / ((a - 1.0) ** 2 * (a - 2.0))


def posterior_sigma2(fit: ConjugateFit) -> tuple[float, float]:
    """Posterior mean and variance of sigma2."""
    return inverse_gamma_moments(fit.a_star, fit.b_star)


@dataclass(frozen=True, eq=False)
class PosteriorSamples:
    sigma2: np.ndarray  # (count,)
    gamma: np.ndarray   # (count, p + n)


def sample_posterior(fit: ConjugateFit, count: int, seed=None) -> PosteriorSamples:
    """Exact joint draws: ``sigma2 ~ IG(a*, b*)``, then ``gamma = gamma_hat + L^{-T} v``
    with ``v ~ N(0, sigma2 I)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    sigma2 = 1.0 / rng.gamma(shape=fit.a_star, scale=1.0 / fit.b_star, size=count)
    v = rng.standard_normal((fit.gamma_hat.size, count)) * np.sqrt(sigma2)
    gamma = fit.gamma_hat[:, None] + solve_triangular(fit.chol, v, lower=True, trans="T")
    return PosteriorSamples(sigma2=sigma2, gamma=gamma.T)


@dataclass(frozen=True, eq=False)
class Prediction:
    """Point-wise posterior predictive of ``y`` at new locations.

    Each ``y(s)`` is Student-t with ``dof`` degrees of freedom, location
    ``mean`` and squared scale ``(b*/a*) * scale``; conditionally on sigma2 it
    is ``N(mean, sigma2 * scale)``.
    """

    mean: np.ndarray
    latent_mean: np.ndarray
    scale: np.ndarray
    dof: float
    a_star: float
    b_star: float
    h: np.ndarray = field(repr=False)
    joint_location: np.ndarray | None = field(default=None, repr=False)
    joint_scale: np.ndarray | None = field(default=None, repr=False)

    @property
    def variance(self) -> np.ndarray:
        if self.a_star <= 1:
            raise ValueError("predictive variance undefined for a* <= 1")
        return self.b_star / (self.a_star - 1.0) * self.scale


def _as_design(X_new, m: int, p: int) -> np.ndarray:
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim == 1:
        X_new = X_new.reshape(m, -1) if X_new.size == m * p else X_new[None, :]
    if X_new.shape != (m, p):
        raise ValueError(f"X_new must have shape ({m}, {p}), got {X_new.shape}")
    return X_new


def predict(fit: ConjugateFit, chi_new, X_new, *, cross: np.ndarray | None = None,
            full: bool = False) -> Prediction:
    """Posterior predictive at ``chi_new``.

    With ``h_s = [x(s), J_s' R^{-1}]`` the latent mean is ``J' R^{-1} z_hat``,
    the outcome mean ``h_s gamma_hat`` and the scale
    ``V_s = h_s M* h_s' + delta2``.

    With ``full=True`` the joint law of ``(z_new, y_new)`` is attached:
    location ``W gamma_hat`` and scale matrix ``W M* W' + M2`` where
    ``W = [[0, J'R^{-1}], [X_new, J'R^{-1}]]``,
    ``M1 = R(chi_new) - J'R^{-1}J`` and
    ``M2 = [[M1, M1], [M1, M1 + delta2 I]]`` (z block first).

    Parameters
    ----------
    cross : ndarray, optional
        Pre-computed ``J`` of shape (n, m).
    """
    chi_new = as_locations(chi_new)
    m = chi_new.shape[0]
    X_new = _as_design(X_new, m, fit.p)
    J = build_cross_corr(fit.kernel, fit.coords, chi_new) if cross is None else cross
    if J.shape != (fit.n, m):
        raise ValueError(f"cross-correlation must have shape ({fit.n}, {m})")
    A = fit.corr.solve(J)                                  # R^{-1} J, (n, m)
    latent = A.T @ fit.z_hat
    H = np.hstack([X_new, A.T])                            # rows h_s
    C = solve_triangular(fit.chol, H.T, lower=True)        # L^{-1} h_s'
    scale = np.einsum("ij,ij->j", C, C) + fit.delta2
    joint_loc = joint_scale = None
    if full:
        W = np.vstack([np.hstack([np.zeros((m, fit.p)), A.T]), H])
        CW = solve_triangular(fit.chol, W.T, lower=True)
        Rnew = build_corr_matrix(fit.kernel, chi_new, allow_duplicates=True, factor=False)
        M1 = Rnew - J.T @ A
        M1 = 0.5 * (M1 + M1.T)
        M2 = np.block([[M1, M1], [M1, M1 + fit.delta2 * np.eye(m)]])
        joint_loc = W @ fit.gamma_hat
        joint_scale = CW.T @ CW + M2
    return Prediction(
        mean=H @ fit.gamma_hat,
        latent_mean=latent,
        scale=scale,
        dof=fit.dof,
        a_star=fit.a_star,
        b_star=fit.b_star,
        h=H,
        joint_location=joint_loc,
        joint_scale=joint_scale,
    )


def lppd_from_moments(y, mean, scale, a_star: float, b_star: float):
    """Closed-form log predictive density of ``y`` under the
    ``N(mean, sigma2 scale) x IG(sigma2 | a*, b*)`` mixture."""
    y = np.asarray(y, dtype=float)
    r2 = (y - mean) ** 2
    return (
        -0.5 * (_LOG_2PI + np.log(scale))
        + a_star * math.log(b_star)
        - (a_star + 0.5) * np.log(b_star + r2 / (2.0 * scale))
        + math.lgamma(a_star + 0.5)
        - math.lgamma(a_star)
    )


def lppd(fit: ConjugateFit, chi_new, X_new, y_new, *, cross=None):
    """Log point-wise predictive density at each new location."""
    pred = predict(fit, chi_new, X_new, cross=cross)
    return lppd_from_moments(y_new, pred.mean, pred.scale, fit.a_star, fit.b_star)


def lppd_monte_carlo(fit: ConjugateFit, chi_new, X_new, y_new, draws: int, seed=None, *,
                     cross=None):
    """Monte-Carlo log predictive density.

    Averages ``N(y | h_s gamma_j, delta2 sigma2_j)`` over ``draws`` exact
    posterior draws and returns the log of the average.
    """
    pred = predict(fit, chi_new, X_new, cross=cross)
    samples = sample_posterior(fit, draws, seed)
    yhat = pred.h @ samples.gamma.T                        # (m, draws)
    var = fit.delta2 * samples.sigma2
    y = np.atleast_1d(np.asarray(y_new, dtype=float))
    logp = -0.5 * (_LOG_2PI + np.log(var)) - 0.5 * (y[:, None] - yhat) ** 2 / var
    return logsumexp(logp, axis=1) - math.log(draws)
