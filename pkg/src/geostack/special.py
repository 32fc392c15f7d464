"""Modified Bessel function of the second kind for real order.

``bessel_k`` evaluates :math:`K_\\nu(x)` for a scalar order and an array of
positive arguments. The order is split as ``nu = mu + m`` with
``|mu| <= 1/2``; :math:`K_\\mu` and :math:`K_{\\mu+1}` come from Temme's
series for ``x < 2`` and from Steed's continued fraction (CF2) otherwise,
and forward recurrence in the order lifts them to ``nu`` (forward
recurrence is stable for ``K``). Half-integer orders up to 5/2 use the
closed forms.
"""

import math

import numpy as np

__all__ = ["bessel_k", "bessel_k_general", "HALF_INTEGER_ORDERS"]

_EPS = 1e-16
_MAXITER = 10000
_SERIES_SWITCH = 2.0

# Taylor coefficients of 1/Gamma(z) about 0 (c_1 .. c_28).
_RGAMMA_COEF = np.array([
    1.0,
    0.57721566490153286061,
    -0.65587807152025388108,
    -0.042002635034095235529,
    0.1665386113822914895,
    -0.042197734555544336748,
    -0.0096219715278769735621,
    0.0072189432466630995424,
    -0.0011651675918590651121,
    -0.00021524167411495097282,
    0.00012805028238811618615,
    -0.000020134854780788238656,
    -1.2504934821426706573e-6,
    1.1330272319816958824e-6,
    -2.0563384169776071035e-7,
    6.1160951044814158179e-9,
    5.0020076444692229301e-9,
    -1.1812745704870201446e-9,
    1.0434267116911005105e-10,
    7.782263439905071254e-12,
    -3.6968056186422057082e-12,
    5.100370287454475979e-13,
    -2.0583260535665067832e-14,
    -5.3481225394230179824e-15,
    1.2267786282382607902e-15,
    -1.1812593016974587695e-16,
    1.1866922547516003326e-18,
    1.4123806553180317816e-18,
])

HALF_INTEGER_ORDERS = (0.5, 1.5, 2.5)


def _temme_gammas(mu):
    """Return (gam1, gam2, 1/Gamma(1+mu), 1/Gamma(1-mu)) for |mu| <= 1/2.

    gam1 = (1/Gamma(1-mu) - 1/Gamma(1+mu)) / (2 mu) is evaluated from the
    series directly so that it stays accurate as mu -> 0.
    """
    k = np.arange(1, len(_RGAMMA_COEF) + 1)
    c = _RGAMMA_COEF
    # 1/Gamma(1+z) = sum_{k>=1} c_k z^(k-1)
    even = k % 2 == 0
    gam1 = -float(np.sum(c[even] * mu ** (k[even] - 2)))
    gam2 = float(np.sum(c[~even] * mu ** (k[~even] - 1)))
    gampl = gam2 - mu * gam1
    gammi = gam2 + mu * gam1
    return gam1, gam2, gampl, gammi


def _k_small(mu, x):
    """Temme series for K_mu(x), K_{mu+1}(x) with |mu| <= 1/2, x < 2."""
    x2 = 0.5 * x
    pimu = math.pi * mu
    fact = 1.0 if abs(pimu) < _EPS else pimu / math.sin(pimu)
    d = -np.log(x2)
    e = mu * d
    small = np.abs(e) < _EPS
    fact2 = np.where(small, 1.0, np.sinh(e) / np.where(small, 1.0, e))
    gam1, gam2, gampl, gammi = _temme_gammas(mu)
    ff = fact * (gam1 * np.cosh(e) + gam2 * fact2 * d)
    total = ff.copy()
    ee = np.exp(e)
    p = 0.5 * ee / gampl
    q = 0.5 / (ee * gammi)
    c = np.ones_like(x)
    dd = x2 * x2
    total1 = p.copy()
    active = np.ones(x.shape, dtype=bool)
    for i in range(1, _MAXITER):
        ff = (i * ff + p + q) / (i * i - mu * mu)
        c = c * dd / i
        p = p / (i - mu)
        q = q / (i + mu)
        delta = c * ff
        total = np.where(active, total + delta, total)
        delta1 = c * (p - i * ff)
        total1 = np.where(active, total1 + delta1, total1)
        active &= np.abs(delta) >= np.abs(total) * _EPS
        if not active.any():
            break
    else:
        raise ArithmeticError("Temme series for K_nu did not converge")
    return total, total1 * (2.0 / x)


def _k_large(mu, x):
    """Steed's CF2 for K_mu(x), K_{mu+1}(x) with |mu| <= 1/2, x >= 2."""
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = d.copy()
    delh = d.copy()
    q1 = np.zeros_like(x)
    q2 = np.ones_like(x)
    a1 = 0.25 - mu * mu
    q = np.full_like(x, a1)
    c = np.full_like(x, a1)
    a = -a1
    s = 1.0 + q * delh
    active = np.ones(x.shape, dtype=bool)
    for i in range(2, _MAXITER):
        a -= 2 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1 = q2
        q2 = qnew
        q = q + c * qnew
        b = b + 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h = np.where(active, h + delh, h)
        dels = q * delh
        s = np.where(active, s + dels, s)
        active &= np.abs(dels / s) >= _EPS
        if not active.any():
            break
    else:
        raise ArithmeticError("continued fraction for K_nu did not converge")
    h = a1 * h
    kmu = np.sqrt(math.pi / (2.0 * x)) * np.exp(-x) / s
    k1 = kmu * (mu + x + 0.5 - h) / x
    return kmu, k1


def _check(nu, x):
    if not np.isfinite(nu) or nu < 0:
        raise ValueError(f"order must be a finite non-negative number, got {nu}")
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("bessel_k requires finite x > 0")
    return x


def bessel_k_general(nu, x):
    """K_nu(x) through the Temme/CF2 route, with no closed-form shortcut."""
    x = _check(nu, x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    m = int(nu + 0.5)
    mu = nu - m
    kmu = np.empty_like(x)
    k1 = np.empty_like(x)
    lo = x < _SERIES_SWITCH
    if lo.any():
        kmu[lo], k1[lo] = _k_small(mu, x[lo])
    if (~lo).any():
        kmu[~lo], k1[~lo] = _k_large(mu, x[~lo])
    with np.errstate(over="ignore"):
        for i in range(1, m + 1):
            kmu, k1 = k1, (mu + i) * (2.0 / x) * k1 + kmu
    if np.any(~np.isfinite(kmu)):
        raise OverflowError(f"K_{nu}(x) overflows for the smallest x supplied")
    return kmu[0] if scalar else kmu


def _k_half_integer(nu, x):
    base = np.sqrt(math.pi / (2.0 * x)) * np.exp(-x)
    if nu == 0.5:
        return base
    if nu == 1.5:
        return base * (1.0 + 1.0 / x)
    return base * (1.0 + 3.0 / x + 3.0 / (x * x))


def bessel_k(nu, x):
    """Modified Bessel function of the second kind, :math:`K_\\nu(x)`.

    Parameters
    ----------
    nu : float
        Order, ``nu >= 0``.
    x : float or array_like
        Arguments, all strictly positive.

    Returns
    -------
    float or ndarray
        :math:`K_\\nu(x)`, same shape as ``x``.

    Raises
    ------
    ValueError
        If ``x <= 0`` anywhere or ``nu`` is negative.
    OverflowError
        If the result is not representable (tiny ``x`` with large ``nu``).
    """
    nu = float(nu)
    if nu in HALF_INTEGER_ORDERS:
        x = _check(nu, x)
        with np.errstate(over="ignore"):
            out = _k_half_integer(nu, x)
        if np.any(~np.isfinite(out)):
            raise OverflowError(f"K_{nu}(x) overflows for the smallest x supplied")
        return out[()] if out.ndim == 0 else out
    return bessel_k_general(nu, x)
