"""
Second-stage variational Bayes for one structural equation,

    y_i = Yhat_{/i} Lambda_i' + X_i beta_i + u_i,

where ``Yhat_{/i}`` are first-stage fitted values. The stacked coefficient
``theta = (Lambda_i, beta_i)`` carries a Dirichlet-Laplace prior and the
noise precision a Gamma prior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dl_prior import PRIOR_MODES, dl_init, dl_prior_precision, dl_signal, dl_update
from .exceptions import ConfigError, InputError, NumericalError
from .stage1 import _spd_solve_and_inverse

__all__ = ["Stage2Config", "Stage2Result", "update_theta", "update_sigma", "stage2_fit"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Stage2Config:
    """``nu`` and ``s_tilde`` are the shape and rate of the Gamma prior on the noise precision."""

    concentration_a_tilde: float = 0.5
    nu: float = 0.01
    s_tilde: float = 0.01
    tol: float = 1e-6
    max_iter: int = 10_000
    prior_mode: str = "mean"
    ridge_penalty: float = 1e-3

    def __post_init__(self):
        for name in ("concentration_a_tilde", "nu", "s_tilde", "tol", "ridge_penalty"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ConfigError(f"stage2.{name} must be > 0, got {value!r}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ConfigError(f"stage2.max_iter must be a positive integer, got {self.max_iter!r}")
        if self.prior_mode not in PRIOR_MODES:
            raise ConfigError(f"stage2.prior_mode must be one of {PRIOR_MODES}")


@dataclass
class Stage2Result:
    theta_bar: np.ndarray
    theta_cov: np.ndarray
    sigma2_inv_shape: float
    sigma2_inv_rate: float
    iterations: int
    converged: bool
    final_change: float

    @property
    def sigma2_inv_mean(self) -> float:
        return self.sigma2_inv_shape / self.sigma2_inv_rate

    @property
    def sigma2_mean(self) -> float:
        """Mean of the implied inverse-Gamma for the noise variance (needs shape > 1)."""
        return self.sigma2_inv_rate / (self.sigma2_inv_shape - 1.0)


def update_theta(y_i, Z, sigma2_inv_mean, prior_precision, ZtZ=None, Zty=None):
    """Return ``(theta_bar, theta_cov)`` for the current noise precision and prior."""
    if ZtZ is None:
        ZtZ = Z.T @ Z
    if Zty is None:
        Zty = Z.T @ y_i
    precision_matrix = sigma2_inv_mean * ZtZ
    precision_matrix[np.diag_indices_from(precision_matrix)] += prior_precision
    return _spd_solve_and_inverse(precision_matrix, sigma2_inv_mean * Zty,
                                  "second-stage coefficient precision")


def update_sigma(y_i, Z, theta_bar, theta_cov, config: Stage2Config, ZtZ=None):
    """Gamma posterior ``(shape, rate)`` of the noise precision."""
    if ZtZ is None:
        ZtZ = Z.T @ Z
    resid = y_i - Z @ theta_bar
    shape = 0.5 * y_i.shape[0] + config.nu
    rate = 0.5 * (resid @ resid + np.sum(ZtZ * theta_cov)) + config.s_tilde
    return shape, rate


def stage2_fit(y_i, Y_hat_minus_i, X_i, config: Stage2Config = Stage2Config()) -> Stage2Result:
    """Fit one structural equation; ``theta`` is ordered as fitted columns then own exogenous columns."""
    y = np.asarray(y_i, dtype=float).ravel()
    Yh = np.asarray(Y_hat_minus_i, dtype=float)
    Xi = np.asarray(X_i, dtype=float)
    if Yh.ndim == 1:
        Yh = Yh[:, None]
    if Xi.ndim == 1:
        Xi = Xi[:, None]
    T = y.shape[0]
    if T < 2:
        raise InputError("need at least two observations")
    if Yh.shape[0] != T or Xi.shape[0] != T:
        raise InputError(f"design has {Yh.shape[0]} and {Xi.shape[0]} rows, response has {T}")
    Z = np.hstack([Yh, Xi])
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(Z))):
        raise InputError("non-finite values in second-stage inputs")
    k = Z.shape[1]
    ZtZ = Z.T @ Z
    Zty = Z.T @ y

    theta, theta_cov = update_theta(y, Z, 1.0, np.full(k, config.ridge_penalty), ZtZ, Zty)
    shape, rate = update_sigma(y, Z, theta, theta_cov, config, ZtZ)
    theta_cov = theta_cov / (shape / rate)
    dl = dl_update(dl_init(k, config.concentration_a_tilde), dl_signal(theta, np.diag(theta_cov)))

    converged = False
    change = np.inf
    it = 0
    for it in range(1, config.max_iter + 1):
        prior = dl_prior_precision(dl, config.prior_mode)
        theta_new, theta_cov = update_theta(y, Z, shape / rate, prior, ZtZ, Zty)
        shape, rate = update_sigma(y, Z, theta_new, theta_cov, config, ZtZ)
        dl = dl_update(dl, dl_signal(theta_new, np.diag(theta_cov)))
        change = float(np.max(np.abs(theta_new - theta)))
        theta = theta_new
        if not np.isfinite(change):
            raise NumericalError(f"second-stage iterate became non-finite at iteration {it}")
        if change < config.tol:
            converged = True
            break
    if not converged:
        logger.warning("second stage stopped at max_iter=%d with change %.3e", config.max_iter, change)
    return Stage2Result(theta_bar=theta, theta_cov=theta_cov, sigma2_inv_shape=shape,
                        sigma2_inv_rate=rate, iterations=it, converged=converged, final_change=change)
