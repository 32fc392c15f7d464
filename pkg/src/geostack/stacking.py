"""K-fold evaluation of a hyper-parameter grid and the two stacking weight solvers."""

from __future__ import annotations

import itertools
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .conjugate import PriorSpec, SpatialDataset, fit, lppd_from_moments, lppd_monte_carlo, predict
from .kernel import (
    DuplicateLocationError,
    MaternParams,
    factorize_corr,
    has_duplicates,
    matern_corr,
    pairwise_distances,
)

__all__ = [
    "CandidateGrid",
    "FoldAssignment",
    "CvTable",
    "StackingWeights",
    "CandidateFitError",
    "StackingConvergenceWarning",
    "DEFAULT_GRID",
    "assign_folds",
    "build_cv_table",
    "solve_weights_means",
    "solve_weights_densities",
]

ZERO_WEIGHT = 1e-9


class CandidateFitError(RuntimeError):
    """A candidate fit failed inside cross-validation."""

    def __init__(self, candidate: int, fold: int, cause: Exception):
        super().__init__(f"candidate {candidate}, fold {fold}: {cause}")
        self.candidate = candidate
        self.fold = fold


class StackingConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class CandidateGrid:
    """Cartesian grid of ``(phi, nu, delta2)``; phi varies slowest, delta2 fastest."""

    phi: tuple
    nu: tuple
    delta2: tuple

    def __post_init__(self):
        for name in ("phi", "nu", "delta2"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise ValueError(f"grid list '{name}' is empty")
            if any(not (np.isfinite(v) and v > 0) for v in vals):
                raise ValueError(f"grid list '{name}' must contain positive finite values")
            if len(set(vals)) != len(vals):
                raise ValueError(f"grid list '{name}' has duplicate values")
            object.__setattr__(self, name, vals)

    @property
    def candidates(self) -> list[tuple[float, float, float]]:
        return list(itertools.product(self.phi, self.nu, self.delta2))

    @property
    def size(self) -> int:
        return len(self.phi) * len(self.nu) * len(self.delta2)

    def __len__(self):
        return self.size

    def index(self, phi: float, nu: float, delta2: float) -> int:
        i, j, k = self.phi.index(phi), self.nu.index(nu), self.delta2.index(delta2)
        return (i * len(self.nu) + j) * len(self.delta2) + k


DEFAULT_GRID = CandidateGrid(phi=(3, 14, 25, 36), nu=(0.5, 1, 1.5, 1.75),
                             delta2=(0.1, 0.5, 1, 2))


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """``fold_of[i]`` in ``0 .. K-1`` is the fold holding observation ``i``."""

    K: int
    fold_of: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        f = np.asarray(self.fold_of, dtype=int)
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if f.min() < 0 or f.max() >= self.K or len(np.unique(f)) != self.K:
            raise ValueError("every fold must be non-empty and indices in [0, K)")
        object.__setattr__(self, "fold_of", f)

    def test_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def train_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)


def assign_folds(n: int, K: int, seed=None) -> FoldAssignment:
    """Random partition of ``range(n)`` into ``K`` folds of near-equal size."""
    if K < 2:
        raise ValueError("K must be >= 2")
    if K > n:
        raise ValueError(f"cannot split {n} observations into {K} non-empty folds")
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[perm] = np.arange(n) % K
    return FoldAssignment(K=K, fold_of=fold_of, seed=seed)


@dataclass(frozen=True, eq=False)
class CvTable:
    """Out-of-fold predictions, one column per candidate.

    ``yhat`` predictive means of y, ``zhat`` latent means, ``lp`` log
    predictive densities; all (n, G).
    """

    yhat: np.ndarray
    lp: np.ndarray
    zhat: np.ndarray
    grid: CandidateGrid
    folds: FoldAssignment


def build_cv_table(data: SpatialDataset, prior_base: PriorSpec, grid: CandidateGrid,
                   folds: FoldAssignment, *, threads: int = 1, mc_draws: int = 0,
                   seed=None, allow_duplicates: bool = False) -> CvTable:
    """Fill the out-of-fold table for every candidate in ``grid``.

    For each ``(phi, nu)`` and fold ``k`` the correlation factor of the
    training block is computed once and shared over the ``delta2`` values.
    ``lp`` uses the closed-form density unless ``mc_draws > 0``, in which
    case the Monte-Carlo estimator is used with a stream seeded by
    ``(seed, candidate, fold)``.
    """
    n = data.n
    if folds.fold_of.shape[0] != n:
        raise ValueError("fold assignment does not match the dataset size")
    if not allow_duplicates and has_duplicates(data.coords):
        raise DuplicateLocationError("dataset has coincident locations")
    G = grid.size
    yhat = np.empty((n, G))
    lp = np.empty((n, G))
    zhat = np.empty((n, G))
    dist = pairwise_distances(data.coords)
    nd = len(grid.delta2)
    base_seed = 0 if seed is None else int(seed)

    def run_fold(kernel, R_full, g0, k):
        te = folds.test_index(k)
        tr = folds.train_index(k)
        train = data.subset(tr)
        try:
            corr = factorize_corr(R_full[np.ix_(tr, tr)])
        except Exception as exc:
            raise CandidateFitError(g0, k, exc) from exc
        cross = R_full[np.ix_(tr, te)]
        for j, d2 in enumerate(grid.delta2):
            g = g0 + j
            try:
                f = fit(train, prior_base.with_delta2(d2), kernel, corr=corr)
                pred = predict(f, data.coords[te], data.X[te], cross=cross)
                if mc_draws:
                    lp[te, g] = lppd_monte_carlo(f, data.coords[te], data.X[te], data.y[te],
                                                 mc_draws, seed=[base_seed, g, k], cross=cross)
                else:
                    lp[te, g] = lppd_from_moments(data.y[te], pred.mean, pred.scale,
                                                  f.a_star, f.b_star)
            except CandidateFitError:
                raise
            except Exception as exc:
                raise CandidateFitError(g, k, exc) from exc
            yhat[te, g] = pred.mean
            zhat[te, g] = pred.latent_mean

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for i, (phi, nu) in enumerate(itertools.product(grid.phi, grid.nu)):
            kernel = MaternParams(phi, nu)
            R_full = matern_corr(kernel, dist)
            np.fill_diagonal(R_full, 1.0)
            g0 = i * nd
            if pool is None:
                for k in range(folds.K):
                    run_fold(kernel, R_full, g0, k)
            else:
                for fut in [pool.submit(run_fold, kernel, R_full, g0, k) for k in range(folds.K)]:
                    fut.result()
    finally:
        if pool is not None:
            pool.shutdown()
    if not np.all(np.isfinite(lp)):
        raise FloatingPointError("non-finite log predictive density in the CV table")
    return CvTable(yhat=yhat, lp=lp, zhat=zhat, grid=grid, folds=folds)


@dataclass(frozen=True, eq=False)
class StackingWeights:
    """Simplex weights over the candidates plus solver diagnostics.

    ``objective`` is the residual sum of squares for ``solver == "means"``
    and the mean log score for ``solver == "densities"``.
    """

    w: np.ndarray
    objective: float
    solver: str
    iterations: int
    converged: bool
    history: np.ndarray | None = field(default=None, repr=False)

    def nonzero(self, threshold: float = 1e-3) -> int:
        return int(np.sum(self.w > threshold))


def _finalize(w: np.ndarray) -> np.ndarray:
    w = np.where(w < ZERO_WEIGHT, 0.0, w)
    return w / w.sum()


# ---------------------------------------------------------------- stacking of means

def _sum_constrained_lstsq(Yf: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Minimise ``|y - Yf v|`` subject to ``sum(v) = 1``.

    The last column is eliminated: with ``y~ = y - Y_last`` and
    ``Y~ = Y[:, :-1] - Y_last`` the problem is an unconstrained least squares
    in the remaining coordinates (minimum-norm solution when rank-deficient).
    """
    m = Yf.shape[1]
    if m == 1:
        return np.ones(1)
    last = Yf[:, -1]
    t = np.linalg.lstsq(Yf[:, :-1] - last[:, None], y - last, rcond=None)[0]
    return np.append(t, 1.0 - t.sum())


def solve_weights_means(y, yhat, nonneg: bool = True, max_iter: int | None = None
                        ) -> StackingWeights:
    """Stacking of means: ``argmin_w |y - yhat w|^2`` with ``sum(w) = 1``.

    With ``nonneg`` (default) also ``w >= 0``, solved by a primal active-set
    method started from the best simplex vertex; each working-set
    subproblem is the reduced least squares of :func:`_sum_constrained_lstsq`.
    """
    y = np.asarray(y, dtype=float)
    Y = np.asarray(yhat, dtype=float)
    if Y.ndim != 2 or Y.shape[0] != y.shape[0] or Y.shape[1] < 1:
        raise ValueError("yhat must be (n, G) with G >= 1 and match y")
    n, G = Y.shape

    def objective(w):
        r = y - Y @ w
        return float(r @ r)

    if not nonneg:
        w = _sum_constrained_lstsq(Y, y)
        return StackingWeights(w, objective(w), "means", 1, True)

    resid = y[:, None] - Y
    g0 = int(np.argmin(np.einsum("ij,ij->j", resid, resid)))
    w = np.zeros(G)
    w[g0] = 1.0
    free = [g0]
    max_iter = max_iter or 10 * G + 100
    scale = max(1.0, float(np.abs(Y).max()) ** 2 * n)
    tol = 1e-12 * scale
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        v = _sum_constrained_lstsq(Y[:, free], y)
        if np.all(v >= 0):
            w[:] = 0.0
            w[free] = v
            grad = Y.T @ (Y @ w - y)
            level = float(np.mean(grad[free]))
            outside = np.setdiff1d(np.arange(G), free)
            if outside.size == 0:
                converged = True
                break
            j = outside[np.argmin(grad[outside])]
            if grad[j] >= level - tol:
                converged = True
                break
            free.append(int(j))
        else:
            # step towards v until the first weight hits zero
            wf = w[free]
            neg = np.flatnonzero(v < 0)
            ratios = wf[neg] / (wf[neg] - v[neg])
            alpha = float(np.min(ratios))
            wf = wf + alpha * (v - wf)
            wf[neg[np.argmin(ratios)]] = 0.0
            keep = wf > 1e-15
            w[:] = 0.0
            w[np.asarray(free)[keep]] = wf[keep]
            w /= w.sum()
            free = [f for f, kp in zip(free, keep) if kp]
    if not converged:
        warnings.warn(f"means solver stopped after {max_iter} iterations",
                      StackingConvergenceWarning, stacklevel=2)
    w = _finalize(w)
    return StackingWeights(w, objective(w), "means", it, converged)


# ------------------------------------------------------ stacking of predictive densities

def _density_objective(P, w, shift):
    return float(np.mean(np.log(P @ w)) + shift)


def _newton_polish(P, w, f_cur, shift, *, kkt_tol: float = 1e-8, max_steps: int = 100):
    """Active-set Newton ascent on the simplex, started from ``w``.

    The working set is the support of ``w``. Each step solves the
    equality-constrained Newton system on it, takes the largest feasible
    step (a blocking weight is set exactly to zero and leaves the set) and
    backtracks until the objective increases. When no step improves, the
    candidate outside the set with the largest KKT violation
    ``grad_j - 1`` is admitted. The result never has a lower objective
    than ``w``.
    """
    n, G = P.shape
    w = w.copy()
    f = f_cur
    S = list(np.flatnonzero(w > 0))
    for _ in range(max_steps):
        r = P @ w
        grad = P.T @ (1.0 / r) / n
        outside = np.setdiff1d(np.arange(G), S)
        Ps = P[:, S] / r[:, None]
        m = len(S)
        kkt = np.zeros((m + 1, m + 1))
        kkt[:m, :m] = Ps.T @ Ps / n
        kkt[:m, m] = 1.0
        kkt[m, :m] = 1.0
        d = np.linalg.lstsq(kkt, np.append(grad[S], 0.0), rcond=None)[0][:m]
        ws = w[S]
        neg = d < 0
        alpha_max = float(np.min(-ws[neg] / d[neg])) if neg.any() else np.inf
        alpha = min(1.0, alpha_max)
        moved = False
        for _ in range(40):
            if alpha <= 0:
                break
            trial = w.copy()
            trial[S] = np.maximum(ws + alpha * d, 0.0)
            if alpha == alpha_max:
                trial[np.asarray(S)[neg][np.argmin(-ws[neg] / d[neg])]] = 0.0
            trial /= trial.sum()
            f_new = _density_objective(P, trial, shift)
            if f_new > f:
                moved = True
                w, f = trial, f_new
                break
            alpha *= 0.5
        S = [g for g in S if w[g] > 0]
        if moved:
            continue
        # no ascent on the working set: admit the worst KKT violator, if any
        if outside.size == 0:
            break
        j = outside[np.argmax(grad[outside])]
        if grad[j] - 1.0 <= kkt_tol:
            break
        # a small transfer of mass towards j is an ascent direction
        eps = min(1e-3, 0.5 * (grad[j] - 1.0))
        trial = (1.0 - eps) * w
        trial[j] = eps
        f_new = _density_objective(P, trial, shift)
        if f_new <= f:
            break
        w, f = trial, f_new
        S.append(int(j))
    return w, f


def solve_weights_densities(lp, *, tol: float = 1e-10, kkt_tol: float = 1e-8,
                            max_iter: int = 100000, polish_every: int = 25
                            ) -> StackingWeights:
    """Stacking of predictive densities: maximise
    ``mean_i log(sum_g w_g exp(lp[i, g]))`` over the probability simplex.

    Multiplicative (EM) updates ``w_g <- w_g * mean_i p_ig / (p_i . w)`` from
    uniform weights, each of which cannot decrease the objective; every
    ``polish_every`` iterations an active-set Newton ascent
    (:func:`_newton_polish`) takes over from the current iterate, which
    zeroes weights exactly and typically finishes the solve. Densities are
    exponentiated after subtracting each row's maximum.
    """
    lp = np.asarray(lp, dtype=float)
    if lp.ndim != 2 or lp.shape[1] < 1:
        raise ValueError("lp must be an (n, G) matrix")
    if not np.all(np.isfinite(lp)):
        raise ValueError("lp must be finite")
    n, G = lp.shape
    rowmax = lp.max(axis=1)
    P = np.exp(lp - rowmax[:, None])
    shift = float(np.mean(rowmax))

    w = np.full(G, 1.0 / G)
    f = _density_objective(P, w, shift)
    history = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r = P @ w
        grad = P.T @ (1.0 / r) / n
        kkt = max(float(np.max(w * np.abs(grad - 1.0))), float(np.max(grad - 1.0)))
        w_new = w * grad
        w_new /= w_new.sum()
        f_new = _density_objective(P, w_new, shift)
        if f_new < f - 1e-12 * max(1.0, abs(f)):
            raise AssertionError("EM update decreased the log score")
        if polish_every and it % polish_every == 0:
            w_new, f_new = _newton_polish(P, w_new, f_new, shift, kkt_tol=kkt_tol)
        improvement = f_new - f
        w, f = w_new, f_new
        history.append(f)
        if improvement < tol and kkt < kkt_tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"density solver stopped after {max_iter} iterations",
                      StackingConvergenceWarning, stacklevel=2)
    w = _finalize(w)
    return StackingWeights(w, _density_objective(P, w, shift), "densities", it, converged,
                           history=np.asarray(history))
