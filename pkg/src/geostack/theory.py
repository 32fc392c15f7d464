"""Finite-sample diagnostics for the infill behaviour of the conjugate model.

These are dense verification instruments rather than production code
paths; everything here is capped at ``n <= DENSE_CAP`` locations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .conjugate import PriorSpec, SpatialDataset, fit
from .kernel import MaternParams, as_locations, build_corr_matrix, build_cross_corr
from .serialize import write_csv

__all__ = [
    "DENSE_CAP",
    "ProjectionDiag",
    "E2Diag",
    "augmented_design",
    "projection_diagnostics",
    "e2_profile",
    "e2_bracket",
    "sigma2_posterior_trace",
    "blp_error_1d",
    "projection_curve",
    "e2_curve",
    "write_curve",
]

DENSE_CAP = 1000


def _check_cap(n: int, cap: int):
    if n > cap:
        raise ValueError(f"n={n} exceeds the dense diagnostic cap of {cap}")


@dataclass(frozen=True)
class ProjectionDiag:
    """Traces of the projector and posterior-covariance blocks."""

    n: int
    tr_H22_over_n: float
    tr_U11: float
    tr_B11: float
    tr_C: float
    tr_D: float
    tr_H: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("n", "tr_H22_over_n", "tr_U11", "tr_B11", "tr_C", "tr_D", "tr_H")}


def augmented_design(X, R_chol, V_beta, delta2):
    """Whitened design of the augmented regression.

    Rows are the scaled data block ``[X/δ, I/δ]``, the prior block
    ``[L_β⁻¹, 0]`` with ``V_β = L_β L_βᵀ``, and the latent block
    ``[0, L_φ]``. We take ``L_φ = L⁻¹`` for the lower Cholesky factor
    ``R = L Lᵀ``, which satisfies ``L_φᵀ L_φ = R⁻¹``.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    d = np.sqrt(delta2)
    L_beta_inv = linalg.solve_triangular(linalg.cholesky(V_beta, lower=True),
                                         np.eye(p), lower=True) if p else np.zeros((0, 0))
    L_phi = linalg.solve_triangular(R_chol, np.eye(n), lower=True)
    top = np.hstack([X / d, np.eye(n) / d])
    mid = np.hstack([L_beta_inv, np.zeros((p, n))])
    bot = np.hstack([np.zeros((n, p)), L_phi])
    return np.vstack([top, mid, bot])


def projection_diagnostics(data: SpatialDataset, prior: PriorSpec, kernel: MaternParams, *,
                           cap: int = DENSE_CAP, return_matrices: bool = False):
    """tr(H₂₂)/n and the trace conditions on the posterior of β.

    ``H`` is the orthogonal projector onto the columns of the augmented
    design; ``H₂₂`` is its trailing ``n x n`` (latent) block. With
    ``U = (X†ᵀX†)⁻¹`` the remaining traces are of ``U₁₁``,
    ``B₁₁`` for ``B = U [[XᵀX, Xᵀ], [X, I]] U``, ``C = U₁₁ V_β⁻¹ U₁₁`` and
    ``D = U₁₂ R⁻¹ U₁₂ᵀ``, without any variance prefactor.

    Raises
    ------
    ValueError
        If ``n`` exceeds ``cap``.
    numpy.linalg.LinAlgError
        If the augmented design is numerically rank deficient.
    """
    n, p = data.n, data.p
    _check_cap(n, cap)
    corr = build_corr_matrix(kernel, data.coords)
    Xd = augmented_design(data.X, corr.chol, prior.V_beta, prior.delta2)
    Q, Rq = linalg.qr(Xd, mode="economic")
    diag = np.abs(np.diag(Rq))
    if diag.min() <= 1e-12 * diag.max():
        raise np.linalg.LinAlgError("augmented design is rank deficient")
    Rq_inv = linalg.solve_triangular(Rq, np.eye(n + p))
    U = Rq_inv @ Rq_inv.T
    U11, U12 = U[:p, :p], U[:p, p:]
    XtX = data.X.T @ data.X
    S = np.block([[XtX, data.X.T], [data.X, np.eye(n)]])
    B = U @ S @ U
    C = U11 @ prior.V_beta_inv @ U11
    D = U12 @ corr.inverse() @ U12.T
    Q2 = Q[n + p:]
    out = ProjectionDiag(
        n=n,
        tr_H22_over_n=float(np.sum(Q2 * Q2)) / n,
        tr_U11=float(np.trace(U11)),
        tr_B11=float(np.trace(B[:p, :p])),
        tr_C=float(np.trace(C)),
        tr_D=float(np.trace(D)),
        tr_H=float(np.sum(Q * Q)),
    )
    if return_matrices:
        return out, {"Xd": Xd, "H": Q @ Q.T, "U": U}
    return out


@dataclass(frozen=True, eq=False)
class E2Diag:
    """Leave-one-location-out E₂ values and their spread."""

    values: np.ndarray

    @property
    def q025(self) -> float:
        return float(np.quantile(self.values, 0.025))

    @property
    def median(self) -> float:
        return float(np.median(self.values))

    @property
    def q975(self) -> float:
        return float(np.quantile(self.values, 0.975))


def e2_bracket(R, J, delta2: float) -> float:
    """``1 + Jᵀ{(I + δ⁻²R)⁻¹ - I} R⁻¹ J`` evaluated literally with explicit inverses."""
    R = np.atleast_2d(R)
    J = np.atleast_1d(J)
    m = R.shape[0]
    A_inv = np.linalg.inv(np.eye(m) + R / delta2)
    R_inv = np.linalg.inv(R)
    return float(1.0 + J @ (A_inv - np.eye(m)) @ R_inv @ J)


def e2_profile(chi, kernel: MaternParams, delta2: float = 1.0, tau2: float = 1.0, *,
               cap: int = DENSE_CAP) -> E2Diag:
    """E₂ at every location, predicting it from the remaining ``n - 1``.

    Since ``(I + δ⁻²R)⁻¹ - I = -(δ²I + R)⁻¹ R``, the bracket collapses to
    ``1 - Jᵀ(R + δ²I)⁻¹J``, and for all points at once this is
    ``1/[(R_full + δ²I)⁻¹]_ii - δ²`` (a Schur complement). One Cholesky of
    the full ``n x n`` system therefore gives every value.
    """
    chi = as_locations(chi)
    n = chi.shape[0]
    if n < 2:
        raise ValueError("need at least two locations")
    _check_cap(n, cap)
    if delta2 <= 0 or tau2 < 0:
        raise ValueError("delta2 must be positive and tau2 non-negative")
    R = build_corr_matrix(kernel, chi, factor=False)
    A = R + delta2 * np.eye(n)
    try:
        cf = linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("R + delta2 I is not positive definite") from exc
    A_inv_diag = np.diag(linalg.cho_solve(cf, np.eye(n)))
    bracket = 1.0 / A_inv_diag - delta2
    # the bracket is a conditional variance; clip rounding below zero
    values = tau2 / delta2 * np.maximum(bracket, 0.0)
    return E2Diag(values)


def sigma2_posterior_trace(chi, y, kernel: MaternParams, delta2: float, ns, *,
                           a_sigma: float = 2.0, b_sigma: float = 2.0) -> list[dict]:
    """Posterior mean of σ² under the no-trend model, on nested prefixes.

    For each ``n`` in ``ns`` the model ``y = z + ε`` is fitted to the first
    ``n`` observations and ``b*/(a* - 1)`` is recorded.
    """
    chi = as_locations(chi)
    y = np.asarray(y, dtype=float)
    prior = PriorSpec(np.zeros(0), np.zeros((0, 0)), a_sigma, b_sigma, delta2)
    rows = []
    for n in ns:
        n = int(n)
        if n > chi.shape[0]:
            raise ValueError(f"requested n={n} but only {chi.shape[0]} observations")
        data = SpatialDataset(chi[:n], np.zeros((n, 0)), y[:n])
        f = fit(data, prior, kernel)
        rows.append({"n": n, "phi": kernel.phi, "nu": kernel.nu, "delta2": delta2,
                     "post_mean": f.b_star / (f.a_star - 1.0)})
    return rows


def blp_error_1d(n: int, kernel_true: MaternParams, sigma2_true: float, tau2_true: float,
                 kernel_fit: MaternParams, delta2_fit: float, *,
                 include_target: bool = False) -> float:
    """Mean squared error of a (possibly misspecified) BLP of ``z(0)``.

    Observations sit on ``{i/n : -n <= i <= n}``, by default without the
    origin itself. With fitted weights ``k = (R_f + δ_f² I)⁻¹ J_f`` the
    error under the true law is
    ``σ₀² - 2 σ₀² kᵀJ₀ + kᵀ(σ₀² R₀ + τ₀² I)k``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if delta2_fit < 0 or tau2_true < 0 or sigma2_true <= 0:
        raise ValueError("invalid variance")
    i = np.arange(-n, n + 1)
    if not include_target:
        i = i[i != 0]
    chi = (i / n)[:, None]
    origin = np.zeros((1, 1))
    R_f = build_corr_matrix(kernel_fit, chi, factor=False)
    J_f = build_cross_corr(kernel_fit, chi, origin)[:, 0]
    R_0 = build_corr_matrix(kernel_true, chi, factor=False)
    J_0 = build_cross_corr(kernel_true, chi, origin)[:, 0]
    try:
        k = linalg.solve(R_f + delta2_fit * np.eye(len(i)), J_f, assume_a="pos")
    except (linalg.LinAlgError, ValueError) as exc:
        raise np.linalg.LinAlgError("fitted BLP system is singular") from exc
    e = (sigma2_true - 2.0 * sigma2_true * k @ J_0
         + k @ (sigma2_true * R_0 + tau2_true * np.eye(len(i))) @ k)
    return float(max(e, 0.0))


def projection_curve(ns, seeds, kernel: MaternParams, delta2: float = 1.0, *, d: int = 2,
                     intercept: bool = True, prior: PriorSpec | None = None) -> list[dict]:
    """tr(H₂₂)/n and the β traces for uniform locations, one row per (n, seed)."""
    rows = []
    for seed in seeds:
        for n in ns:
            rng = np.random.default_rng([int(seed), int(n)])
            coords = rng.uniform(size=(n, d))
            X = rng.standard_normal((n, 2))
            if intercept:
                X[:, 0] = 1.0
            pr = PriorSpec.default(2, delta2) if prior is None else prior
            diag = projection_diagnostics(SpatialDataset(coords, X, np.zeros(n)), pr, kernel)
            rows.append({"seed": int(seed), **diag.as_dict()})
    return rows


def e2_curve(ns, kernel: MaternParams, *, delta2: float = 1.0, tau2: float = 1.0,
             d: int = 1, seed: int = 0) -> list[dict]:
    """E₂ quantiles on nested uniform designs (each larger set extends the last)."""
    ns = sorted(int(n) for n in ns)
    chi = np.random.default_rng(seed).uniform(size=(ns[-1], d))
    rows = []
    for n in ns:
        diag = e2_profile(chi[:n], kernel, delta2, tau2)
        rows.append({"n": n, "q025": diag.q025, "median": diag.median, "q975": diag.q975})
    return rows


def write_curve(rows: list[dict], path):
    """CSV with one row per statistic value, for external plotting."""
    return write_csv(rows, path)
