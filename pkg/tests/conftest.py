import numpy as np
import pytest
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from geostack.conjugate import PriorSpec, SpatialDataset


def matern_scipy(phi, nu, d):
    """Independent Matérn correlation through scipy's K_nu."""
    d = np.asarray(d, dtype=float)
    x = phi * d
    with np.errstate(invalid="ignore", divide="ignore"):
        out = x ** nu / (gamma_fn(nu) * 2 ** (nu - 1)) * kv(nu, x)
    return np.where(d == 0, 1.0, out)


def dense_posterior(coords, X, y, prior, phi, nu):
    """Posterior of the stacked regression from explicit inverses.

    ``X* = [[X, I], [I_p, 0], [0, I_n]]``, ``V* = diag(δ²I, V_β, R)`` and
    ``y* = (y, μ_β, 0)``.
    """
    n, p = X.shape
    diff = coords[:, None, :] - coords[None, :, :]
    R = matern_scipy(phi, nu, np.sqrt((diff ** 2).sum(-1)))
    Xs = np.block([
        [X, np.eye(n)],
        [np.eye(p), np.zeros((p, n))],
        [np.zeros((n, p)), np.eye(n)],
    ])
    Vs = np.zeros((2 * n + p, 2 * n + p))
    Vs[:n, :n] = prior.delta2 * np.eye(n)
    Vs[n:n + p, n:n + p] = prior.V_beta
    Vs[n + p:, n + p:] = R
    ys = np.concatenate([y, prior.mu_beta, np.zeros(n)])
    Vinv = np.linalg.inv(Vs)
    M = np.linalg.inv(Xs.T @ Vinv @ Xs)
    m = Xs.T @ Vinv @ ys
    gamma_hat = M @ m
    b = prior.b_sigma + 0.5 * (ys @ Vinv @ ys - m @ M @ m)
    return {"a": prior.a_sigma + n / 2, "b": b, "gamma": gamma_hat, "M": M, "R": R}


def random_instance(rng, n=None, p=None, d=2):
    n = int(rng.integers(5, 51)) if n is None else n
    p = int(rng.integers(1, 4)) if p is None else p
    coords = rng.uniform(size=(n, d))
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    y = X @ rng.normal(size=p) + rng.standard_normal(n)
    A = rng.standard_normal((p, p))
    prior = PriorSpec(rng.normal(size=p), A @ A.T + p * np.eye(p),
                      a_sigma=rng.uniform(1.5, 4), b_sigma=rng.uniform(0.5, 4),
                      delta2=rng.choice([0.1, 0.5, 1.0, 2.0]))
    phi = rng.choice([3.0, 7.0, 14.0])
    nu = rng.choice([0.5, 1.0, 1.5, 1.75])
    return SpatialDataset(coords, X, y), prior, phi, nu


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_data(rng):
    n = 40
    coords = rng.uniform(size=(n, 2))
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = X @ np.array([1.0, 2.0]) + rng.standard_normal(n)
    return SpatialDataset(coords, X, y)
