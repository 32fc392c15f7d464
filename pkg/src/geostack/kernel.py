"""Matérn correlation, correlation matrices and their Cholesky factors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky
from scipy.spatial.distance import cdist, pdist, squareform

from .special import HALF_INTEGER_ORDERS, bessel_k

__all__ = [
    "MaternParams",
    "CorrMatrix",
    "DuplicateLocationError",
    "NotPositiveDefiniteError",
    "as_locations",
    "matern_corr",
    "build_corr_matrix",
    "build_cross_corr",
    "factorize_corr",
    "JITTER_START",
    "JITTER_MAX",
]

JITTER_START = 1e-10
JITTER_MAX = 1e-6

# below this scaled distance the correlation is 1 to double precision
_TINY_ARG = 1e-50


class DuplicateLocationError(ValueError):
    """Raised when a location set contains coincident points."""


class NotPositiveDefiniteError(LinAlgError):
    """Raised when a correlation matrix stays indefinite after max jitter."""


@dataclass(frozen=True)
class MaternParams:
    """Matérn hyper-parameters: decay ``phi`` (inverse range) and smoothness ``nu``."""

    phi: float
    nu: float

    def __post_init__(self):
        for name in ("phi", "nu"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v}")
        object.__setattr__(self, "phi", float(self.phi))
        object.__setattr__(self, "nu", float(self.nu))


def as_locations(coords) -> np.ndarray:
    """Coerce coordinates to a finite ``(n, d)`` float array.

    One-dimensional input is read as ``n`` points on a line.
    """
    s = np.asarray(coords, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.ndim != 2 or s.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n, d) coordinate array, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("coordinates must be finite")
    return s


def has_duplicates(coords) -> bool:
    s = as_locations(coords)
    return len(np.unique(s, axis=0)) < len(s)


def _corr_from_scaled(x: np.ndarray, nu: float) -> np.ndarray:
    out = np.ones_like(x)
    pos = x >= _TINY_ARG
    xp = x[pos]
    if nu == 0.5:
        out[pos] = np.exp(-xp)
    elif nu == 1.5:
        out[pos] = (1.0 + xp) * np.exp(-xp)
    elif nu == 2.5:
        out[pos] = (1.0 + xp + xp * xp / 3.0) * np.exp(-xp)
    elif xp.size:
        # log-space normalisation keeps large-nu cases finite
        log_norm = math.lgamma(nu) + (nu - 1.0) * math.log(2.0)
        k = bessel_k(nu, xp)
        with np.errstate(divide="ignore"):
            out[pos] = np.exp(nu * np.log(xp) + np.log(k) - log_norm)
    return out


def matern_corr(params: MaternParams, dist):
    """Matérn correlation at distance(s) ``dist``.

    .. math::
        R(d) = \\frac{(\\phi d)^\\nu}{\\Gamma(\\nu) 2^{\\nu-1}} K_\\nu(\\phi d),
        \\qquad R(0) = 1.

    ``nu`` in {1/2, 3/2, 5/2} takes the exponential-polynomial closed form.
    """
    d = np.asarray(dist, dtype=float)
    if np.any(~np.isfinite(d)) or np.any(d < 0):
        raise ValueError("distances must be finite and non-negative")
    out = _corr_from_scaled(np.atleast_1d(params.phi * d), params.nu)
    return out.reshape(d.shape)[()] if d.ndim == 0 else out.reshape(d.shape)


def _matern_general(params: MaternParams, dist) -> np.ndarray:
    """Matérn through the Bessel route even for half-integer ``nu`` (test hook)."""
    from .special import bessel_k_general

    x = np.atleast_1d(params.phi * np.asarray(dist, dtype=float))
    out = np.ones_like(x)
    pos = x >= _TINY_ARG
    nu = params.nu
    out[pos] = x[pos] ** nu * bessel_k_general(nu, x[pos]) / (math.gamma(nu) * 2.0 ** (nu - 1.0))
    return out


@dataclass
class CorrMatrix:
    """A correlation matrix with its (possibly jittered) lower Cholesky factor.

    ``values`` is never modified; ``chol`` factors ``values + jitter * I``.
    ``rank_deficient`` is set whenever jitter was needed.
    """

    values: np.ndarray
    chol: np.ndarray
    jitter: float = 0.0
    _inverse: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def rank_deficient(self) -> bool:
        return self.jitter > 0.0

    def solve(self, b):
        """Return ``R^{-1} b`` using the factor."""
        return cho_solve((self.chol, True), b)

    def inverse(self) -> np.ndarray:
        """Explicit ``R^{-1}`` (symmetrised), cached after first use."""
        if self._inverse is None:
            inv = self.solve(np.eye(self.n))
            self._inverse = 0.5 * (inv + inv.T)
        return self._inverse

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))


def factorize_corr(values: np.ndarray) -> CorrMatrix:
    """Cholesky-factor a correlation matrix under the jitter policy.

    Tries the plain matrix first; on failure adds ``1e-10`` to the
    diagonal and escalates by factors of ten up to ``1e-6``.

    Raises
    ------
    NotPositiveDefiniteError
        If the factorisation still fails at the largest jitter.
    """
    values = np.asarray(values, dtype=float)
    jitter = 0.0
    eye = np.eye(values.shape[0])
    while True:
        try:
            chol = cholesky(values + jitter * eye, lower=True, check_finite=True)
            return CorrMatrix(values=values, chol=chol, jitter=jitter)
        except LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise NotPositiveDefiniteError(
                    f"correlation matrix not positive definite after jitter {JITTER_MAX:g}"
                ) from None


def pairwise_distances(coords) -> np.ndarray:
    s = as_locations(coords)
    if s.shape[0] == 1:
        return np.zeros((1, 1))
    return squareform(pdist(s))


def build_corr_matrix(params: MaternParams, chi, *, allow_duplicates: bool = False,
                      factor: bool = True):
    """Correlation matrix ``R_phi(chi)`` for a location set.

    Parameters
    ----------
    params : MaternParams
    chi : array_like, shape (n, d) or (n,)
    allow_duplicates : bool
        Coincident points make ``R`` singular; they are rejected unless this
        flag is set, in which case the jitter policy makes ``R`` factorable.
    factor : bool
        If False return the bare ``(n, n)`` array.

    Returns
    -------
    CorrMatrix or ndarray
    """
    s = as_locations(chi)
    if not allow_duplicates and has_duplicates(s):
        raise DuplicateLocationError(
            "location set has coincident points; pass allow_duplicates=True to accept "
            "them (they are then handled through diagonal jitter)"
        )
    d = pairwise_distances(s)
    R = matern_corr(params, d)
    np.fill_diagonal(R, 1.0)
    if not factor:
        return R
    return factorize_corr(R)


def build_cross_corr(params: MaternParams, chi, chi_new) -> np.ndarray:
    """Cross-correlation ``J`` with ``J[i, j] = R(|s_i - s_new_j|)``, shape (n, m)."""
    s = as_locations(chi)
    t = as_locations(chi_new)
    if s.shape[1] != t.shape[1]:
        raise ValueError("location sets have different dimensions")
    return matern_corr(params, cdist(s, t))
