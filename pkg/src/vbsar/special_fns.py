"""
Log-scale modified Bessel functions of the second kind and the
generalized inverse Gaussian (giG) moments built from them.

Shrinkage hyperparameter updates need ratios such as
:math:`K_{p+1}(\\sqrt{\\chi}) / K_p(\\sqrt{\\chi})` where the order ``p`` can be
several hundred in magnitude, so :math:`K_\\nu` itself overflows or underflows
in double precision. Everything here is evaluated as :math:`\\log K_\\nu(x)`:

- ``|nu| <= 50``: Temme's series (``x <= 2``) or Steed's continued fraction
  (``x > 2``) for a base order ``mu`` in ``[-1/2, 1/2]``, then the upward
  recurrence :math:`K_{\\nu+1} = K_{\\nu-1} + (2\\nu/x) K_\\nu` carried in ratio
  form.
- ``|nu| > 50``: the uniform (Debye) asymptotic expansion in ``nu``.

Functions are vectorized over the argument; the order is a scalar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial

from .exceptions import DomainError, NumericalError

__all__ = [
    "GigMoments",
    "IgReciprocalMoments",
    "log_bessel_k",
    "bessel_k_ratio",
    "gig_moments",
    "gig_moment",
    "ig_reciprocal_moments",
]

DEBYE_MIN_ORDER = 50.0
_EPS = 1e-16
_MAX_CF_ITER = 100_000

# Taylor coefficients of 1/Gamma(1+z) about z = 0.
_RGAMMA1P = np.array([
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
    -2.2987456844353702066e-19,
])


def _debye_polynomials(n_terms):
    # u_{k+1}(t) = t^2 (1 - t^2) u_k'(t) / 2 + (1/8) int_0^t (1 - 5 s^2) u_k(s) ds
    t = Polynomial([0.0, 1.0])
    polys = [Polynomial([1.0])]
    for _ in range(n_terms - 1):
        u = polys[-1]
        polys.append(0.5 * t**2 * (1 - t**2) * u.deriv()
                     + 0.125 * (Polynomial([1.0, 0.0, -5.0]) * u).integ())
    return polys


def _debye_matrix(n_terms):
    polys = _debye_polynomials(n_terms)
    width = max(len(u.coef) for u in polys)
    out = np.zeros((n_terms, width))
    for k, u in enumerate(polys):
        out[k, :len(u.coef)] = u.coef
    return out


# row k holds the ascending power coefficients of u_k(t)
_DEBYE_U = _debye_matrix(14)


@dataclass(frozen=True)
class GigMoments:
    """First two raw moments of giG(p, 1, chi).

    Fields are floats for scalar ``chi`` and arrays for vector ``chi``.
    """

    mean: float | np.ndarray
    second_moment: float | np.ndarray

    @property
    def variance(self):
        return np.maximum(self.second_moment - np.square(self.mean), 0.0)


@dataclass(frozen=True)
class IgReciprocalMoments:
    """``E[1/psi]`` and ``E[psi]`` when ``1/psi`` is inverse Gaussian IG(rho, 1)."""

    mean_reciprocal: float | np.ndarray
    mean: float | np.ndarray


def _gamma_pair(mu):
    """Temme's gamma auxiliaries: (gam1, gam2, 1/Gamma(1+mu), 1/Gamma(1-mu))."""
    odd = _RGAMMA1P[1::2]
    even = _RGAMMA1P[0::2]
    mu2 = mu * mu
    # 1/G(1-mu) - 1/G(1+mu) = -2 * sum_odd c_k mu^k
    gam1 = -np.polyval(odd[::-1], mu2)
    gam2 = np.polyval(even[::-1], mu2)
    gampl = gam2 - mu * gam1
    gammi = gam2 + mu * gam1
    return gam1, gam2, gampl, gammi


def _temme(mu, x):
    """log K_mu(x) and K_{mu+1}(x)/K_mu(x) for |mu| <= 1/2 and 0 < x <= 2."""
    x2 = 0.5 * x
    pimu = math.pi * mu
    fact = 1.0 if abs(pimu) < _EPS else pimu / math.sin(pimu)
    d = -np.log(x2)
    e = mu * d
    small = np.abs(e) < 1e-8
    safe_e = np.where(small, 1.0, e)
    fact2 = np.where(small, 1.0 + e * e / 6.0, np.sinh(safe_e) / safe_e)
    gam1, gam2, gampl, gammi = _gamma_pair(mu)
    ff = fact * (gam1 * np.cosh(e) + gam2 * fact2 * d)
    total = ff.copy()
    ee = np.exp(e)
    p = 0.5 * ee / gampl
    q = 0.5 / (ee * gammi)
    c = np.ones_like(x)
    dd = x2 * x2
    sum1 = p.copy()
    for i in range(1, _MAX_CF_ITER):
        ff = (i * ff + p + q) / (i * i - mu * mu)
        c = c * dd / i
        p = p / (i - mu)
        q = q / (i + mu)
        delta = c * ff
        total += delta
        sum1 += c * (p - i * ff)
        if np.all(np.abs(delta) < np.abs(total) * _EPS):
            break
    else:  # pragma: no cover
        raise NumericalError("Temme series for K_mu did not converge")
    ratio = sum1 * (2.0 / x) / total
    return np.log(total), ratio


def _steed(mu, x):
    """log K_mu(x) and K_{mu+1}(x)/K_mu(x) for |mu| <= 1/2 and x > 2."""
    n = x.size
    log_k = np.empty(n)
    ratio = np.empty(n)
    a1 = 0.25 - mu * mu
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = d.copy()
    delh = d.copy()
    q1 = np.zeros(n)
    q2 = np.ones(n)
    q = np.full(n, a1)
    s = 1.0 + q * delh
    a = -a1
    c = a1
    active = np.arange(n)
    for i in range(1, _MAX_CF_ITER):
        a -= 2 * i
        c = -a * c / (i + 1.0)
        qnew = (q1 - b * q2) / a
        q1 = q2
        q2 = qnew
        q = q + c * qnew
        b = b + 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h = h + delh
        dels = q * delh
        s = s + dels
        done = np.abs(dels) < np.abs(s) * _EPS
        if np.any(done):
            idx = active[done]
            xs = x[idx]
            log_k[idx] = 0.5 * np.log(math.pi / (2.0 * xs)) - xs - np.log(s[done])
            ratio[idx] = (mu + xs + 0.5 - a1 * h[done]) / xs
            keep = ~done
            active = active[keep]
            if active.size == 0:
                break
            b, d, h, delh = b[keep], d[keep], h[keep], delh[keep]
            q1, q2, q, s = q1[keep], q2[keep], q[keep], s[keep]
    else:  # pragma: no cover
        raise NumericalError("continued fraction for K_mu did not converge")
    return log_k, ratio


def _log_k_recurrence(nu, x):
    nl = int(round(nu))
    mu = nu - nl
    log_k = np.empty_like(x)
    ratio = np.empty_like(x)
    if abs(mu) == 0.5:
        # K_{1/2}(x) = sqrt(pi / (2x)) exp(-x) and K_{3/2} / K_{1/2} = 1 + 1/x
        log_k[:] = 0.5 * np.log(math.pi / (2.0 * x)) - x
        ratio[:] = 1.0 + 1.0 / x if mu > 0 else 1.0
    else:
        lo = x <= 2.0
        if np.any(lo):
            log_k[lo], ratio[lo] = _temme(mu, x[lo])
        if np.any(~lo):
            log_k[~lo], ratio[~lo] = _steed(mu, x[~lo])
    for k in range(nl):
        log_k += np.log(ratio)
        ratio = 1.0 / ratio + 2.0 * (mu + k + 1) / x
    return log_k


def _log_k_debye(nu, x):
    z = x / nu
    root = np.sqrt(1.0 + z * z)
    t = 1.0 / root
    eta = root - np.arcsinh(1.0 / z)
    n_terms, width = _DEBYE_U.shape
    weights = (-1.0 / nu) ** np.arange(n_terms)
    series = np.power.outer(t, np.arange(width)) @ (weights @ _DEBYE_U)
    return (0.5 * math.log(math.pi / (2.0 * nu)) - nu * eta
            - 0.5 * np.log(root) + np.log(series))


def _check_argument(x):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise DomainError("Bessel K argument must be finite and > 0")
    return arr


def log_bessel_k(order, x):
    """Natural log of the modified Bessel function of the second kind.

    Parameters
    ----------
    order : float
        Real order ``nu``; ``K_{-nu} = K_nu`` is applied internally.
    x : float or array_like
        Positive argument.

    Returns
    -------
    float or ndarray
        ``log K_nu(x)``, same shape as ``x``.

    Raises
    ------
    DomainError
        If any argument is not strictly positive or the order is not finite.
    """
    if not math.isfinite(order):
        raise DomainError("Bessel K order must be finite")
    arr = _check_argument(x)
    flat = np.atleast_1d(arr).ravel().astype(float)
    nu = abs(float(order))
    if nu > DEBYE_MIN_ORDER:
        out = _log_k_debye(nu, flat)
    else:
        out = _log_k_recurrence(nu, flat)
    if arr.ndim == 0:
        return float(out[0])
    return out.reshape(arr.shape)


def bessel_k_ratio(order_num, order_den, x):
    """``K_{order_num}(x) / K_{order_den}(x)`` evaluated through log space."""
    return np.exp(log_bessel_k(order_num, x) - log_bessel_k(order_den, x))


def _check_chi(chi):
    arr = np.asarray(chi, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise DomainError("giG chi parameter must be finite and > 0")
    return arr


def gig_moments(order, chi):
    """Mean and second moment of giG(order, 1, chi).

    The density is proportional to ``x**(order - 1) * exp(-(x + chi/x) / 2)``,
    giving ``E[X] = sqrt(chi) K_{p+1}(sqrt(chi)) / K_p(sqrt(chi))`` and
    ``E[X^2] = chi K_{p+2}(sqrt(chi)) / K_p(sqrt(chi))``.
    """
    chi = _check_chi(chi)
    root = np.sqrt(chi)
    lk0 = log_bessel_k(order, root)
    lk1 = log_bessel_k(order + 1.0, root)
    lk2 = log_bessel_k(order + 2.0, root)
    mean = root * np.exp(lk1 - lk0)
    second = np.maximum(chi * np.exp(lk2 - lk0), mean * mean)
    if chi.ndim == 0:
        return GigMoments(float(mean), float(second))
    return GigMoments(mean, second)


def gig_moment(order, chi, power):
    """Raw moment ``E[X**power]`` of giG(order, 1, chi); ``power`` may be negative."""
    chi = _check_chi(chi)
    root = np.sqrt(chi)
    out = np.exp(0.5 * power * np.log(chi)
                 + log_bessel_k(order + power, root) - log_bessel_k(order, root))
    return float(out) if chi.ndim == 0 else out


def ig_reciprocal_moments(rho):
    """Moments of ``psi`` when ``1/psi ~ IG(rho, 1)``: ``E[1/psi] = rho``, ``E[psi] = 1 + 1/rho``."""
    arr = np.asarray(rho, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise DomainError("inverse Gaussian mean rho must be finite and > 0")
    if arr.ndim == 0:
        return IgReciprocalMoments(float(arr), 1.0 + 1.0 / float(arr))
    return IgReciprocalMoments(arr.copy(), 1.0 + 1.0 / arr)
