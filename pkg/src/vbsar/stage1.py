"""
First-stage variational Bayes: reduced-form multivariate regression
``Y = X Upsilon + E`` with Dirichlet-Laplace shrinkage on ``vec(Upsilon)``
and a D-L-regularized sparse precision matrix for the rows of ``E``.

The precision matrix is updated one column at a time in the block
coordinate style of Wang (2012): column ``j`` is treated as the last column,
its diagonal is reparameterized as a Schur complement ``b1`` and its
off-diagonal part ``b2`` receives a Gaussian update.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.linalg import lapack

from .dl_prior import PRIOR_MODES, DLState, dl_init, dl_prior_precision, dl_signal, dl_update
from .exceptions import ConfigError, InputError, NumericalError

__all__ = [
    "Stage1Config",
    "PrecisionState",
    "Stage1Result",
    "update_gamma",
    "block_traces",
    "update_precision_column",
    "init_precision",
    "stage1_fit",
]

logger = logging.getLogger(__name__)

OFFDIAG_TRACE_MODES = ("diagonal_block", "cross_block")
OFFDIAG_VARIANCE_MODES = ("average", "latest")
H_CLAMP = (1e-12, 1e12)
RANK_UPDATE_MIN_DIM = 50


@dataclass(frozen=True)
class Stage1Config:
    """Hyperparameters and stopping rule of the first-stage fit.

    ``diag_rate`` is the exponential prior rate on the diagonal precision
    elements. ``offdiag_trace`` selects which block of the coefficient
    covariance corrects the off-diagonal cross-products: the diagonal block of
    the partner equation (``"diagonal_block"``) or the cross-covariance block
    (``"cross_block"``). ``offdiag_variance`` sets the posterior variance of
    an off-diagonal element in its D-L signal: the mean of the two column
    updates that touch it (``"average"``) or the later one in the cycle
    (``"latest"``), which makes the fixed point depend on column order.
    """

    concentration_a: float = 0.5
    concentration_a_omega: float = 0.5
    diag_rate: float = 1.0
    tol: float = 1e-6
    max_iter: int = 10_000
    prior_mode: str = "mean"
    offdiag_trace: str = "cross_block"
    offdiag_variance: str = "average"
    ridge_penalty: float = 1e-3

    def __post_init__(self):
        for name in ("concentration_a", "concentration_a_omega", "diag_rate", "tol", "ridge_penalty"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ConfigError(f"stage1.{name} must be > 0, got {value!r}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ConfigError(f"stage1.max_iter must be a positive integer, got {self.max_iter!r}")
        if self.prior_mode not in PRIOR_MODES:
            raise ConfigError(f"stage1.prior_mode must be one of {PRIOR_MODES}")
        if self.offdiag_trace not in OFFDIAG_TRACE_MODES:
            raise ConfigError(f"stage1.offdiag_trace must be one of {OFFDIAG_TRACE_MODES}")
        if self.offdiag_variance not in OFFDIAG_VARIANCE_MODES:
            raise ConfigError(f"stage1.offdiag_variance must be one of {OFFDIAG_VARIANCE_MODES}")


@dataclass(frozen=True)
class PrecisionState:
    """Mean precision matrix of the reduced-form errors and its shrinkage state.

    Attributes
    ----------
    omega_bar : (n, n) ndarray
        Posterior mean of the precision matrix.
    offdiag_dl : DLState or None
        D-L state over the strict upper triangle (row-major order of
        ``np.triu_indices(n, 1)``); ``None`` when ``n == 1``.
    offdiag_var : (n, n) ndarray
        Column ``j`` holds the posterior variances of ``omega[:, j]`` from the
        most recent update of column ``j``; entry ``(k, j)`` and ``(j, k)``
        are the two estimates for the same element.
    b2_covariances : list
        Most recent posterior covariance of the off-diagonal block, per column.
    """

    omega_bar: np.ndarray
    offdiag_dl: Optional[DLState]
    offdiag_var: np.ndarray
    b2_covariances: list = field(default_factory=list)
    sigma_bar: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.omega_bar.shape[0]


@dataclass
class Stage1Result:
    gamma_bar: np.ndarray
    gamma_cov: np.ndarray
    precision: PrecisionState
    fitted: np.ndarray
    iterations: int
    converged: bool
    final_change: float

    @property
    def coefficients(self) -> np.ndarray:
        """Reduced-form coefficient matrix, shape ``(p, n)``."""
        p = self.gamma_bar.size // self.fitted.shape[1]
        return self.gamma_bar.reshape(p, -1, order="F")


def _cholesky(a, what):
    c, info = lapack.dpotrf(a, lower=0, clean=1)
    if info != 0:
        with np.errstate(all="ignore"):
            cond = np.linalg.cond(a)
        raise NumericalError(f"{what} is not positive definite (condition number {cond:.3e})")
    return c


def _spd_inverse(c):
    # c comes from dpotrf(clean=1), so the strict lower triangle of inv is zero
    inv, info = lapack.dpotri(c, lower=0)
    if info != 0:  # pragma: no cover
        raise NumericalError("inverse from Cholesky factor failed")
    diag = np.diag(inv).copy()
    inv += inv.T
    inv[np.diag_indices_from(inv)] = diag
    return inv


def _spd_solve_and_inverse(a, b, what):
    c = _cholesky(a, what)
    x, info = lapack.dpotrs(c, b, lower=0)
    if info != 0:  # pragma: no cover
        raise NumericalError(f"solve against {what} failed")
    return x, _spd_inverse(c)


def update_gamma(Y_minus_i, X, omega_bar, prior_precision, XtX=None, XtY=None):
    """Gaussian update of ``gamma = vec(Upsilon)``.

    Returns ``(gamma_bar, gamma_cov)`` with
    ``gamma_cov = (diag(prior_precision) + omega_bar kron X'X)^-1`` and
    ``gamma_bar = gamma_cov vec(X' Y omega_bar)``.
    """
    if XtX is None:
        XtX = X.T @ X
    if XtY is None:
        XtY = X.T @ Y_minus_i
    precision_matrix = np.kron(omega_bar, XtX)
    precision_matrix[np.diag_indices_from(precision_matrix)] += prior_precision
    rhs = (XtY @ omega_bar).ravel(order="F")
    return _spd_solve_and_inverse(precision_matrix, rhs, "first-stage coefficient precision")


def block_traces(XtX, gamma_cov, n):
    """``T[a, b] = tr(X'X V_ab)`` for the ``p x p`` blocks ``V_ab`` of ``gamma_cov``."""
    p = XtX.shape[0]
    blocks = gamma_cov.reshape(n, p, n, p)
    return np.einsum("ajbk,kj->ab", blocks, XtX)


def init_precision(n: int, concentration_a_omega: float) -> PrecisionState:
    """Identity precision with a fresh off-diagonal D-L state."""
    dl = dl_init(n * (n - 1) // 2, concentration_a_omega) if n >= 2 else None
    return PrecisionState(
        omega_bar=np.eye(n),
        offdiag_dl=dl,
        offdiag_var=np.zeros((n, n)),
        b2_covariances=[None] * n,
        sigma_bar=np.eye(n),
    )


def _offdiag_prior_precision(precision: PrecisionState, mode: str) -> np.ndarray:
    n = precision.n
    out = np.zeros((n, n))
    if precision.offdiag_dl is not None:
        iu = np.triu_indices(n, 1)
        out[iu] = dl_prior_precision(precision.offdiag_dl, mode)
        out = out + out.T
    return np.clip(out, H_CLAMP[0], H_CLAMP[1])


def update_precision_column(precision: PrecisionState, S, X, gamma_cov, column: int,
                            config: Stage1Config, traces=None, offdiag_precision=None) -> PrecisionState:
    """Update column ``column`` (and its mirrored row) of the mean precision matrix.

    Parameters
    ----------
    precision : PrecisionState
    S : (n, n) ndarray
        Residual cross-product ``E'E`` at the current coefficient mean.
    X : (T, p) ndarray
        Pooled design; supplies ``T`` and ``X'X`` for the trace corrections.
    gamma_cov : (n p, n p) ndarray
        Current coefficient covariance.
    column : int
    config : Stage1Config
    traces, offdiag_precision : ndarray, optional
        Precomputed :func:`block_traces` and clamped off-diagonal prior
        precisions; recomputed when omitted.
    """
    n = precision.n
    j = int(column)
    if not 0 <= j < n:
        raise InputError(f"column {column} out of range for n={n}")
    T = X.shape[0]
    if traces is None:
        traces = block_traces(X.T @ X, gamma_cov, n)
    if offdiag_precision is None:
        offdiag_precision = _offdiag_prior_precision(precision, config.prior_mode)

    omega = precision.omega_bar.copy()
    sbar_nn = 0.5 * (S[j, j] + traces[j, j] + config.diag_rate)
    b1 = 0.5 * T / sbar_nn
    if n == 1:
        omega[0, 0] = b1
        return replace(precision, omega_bar=omega, sigma_bar=np.array([[1.0 / b1]]))

    idx = np.delete(np.arange(n), j)
    if config.offdiag_trace == "diagonal_block":
        trace_vec = np.diag(traces)[idx]
    else:
        trace_vec = traces[idx, j]
    sbar_vec = S[idx, j] + trace_vec

    sigma = precision.sigma_bar
    if n > RANK_UPDATE_MIN_DIM and sigma is not None:
        s_col = sigma[idx, j]
        o_inv = sigma[np.ix_(idx, idx)] - np.outer(s_col, s_col) / sigma[j, j]
    else:
        c_sub = _cholesky(omega[np.ix_(idx, idx)], "precision sub-block")
        o_inv = _spd_inverse(c_sub)

    c_prec = 2.0 * sbar_nn * o_inv
    c_prec[np.diag_indices_from(c_prec)] += offdiag_precision[idx, j]
    b2_neg, C = _spd_solve_and_inverse(c_prec, sbar_vec, "precision column covariance")
    b2 = -b2_neg
    o_inv_b2 = o_inv @ b2

    omega[idx, j] = b2
    omega[j, idx] = b2
    omega[j, j] = b1 + b2 @ o_inv_b2

    offdiag_var = precision.offdiag_var.copy()
    c_diag = np.diag(C)
    offdiag_var[idx, j] = c_diag
    covs = list(precision.b2_covariances)
    covs[j] = C

    new_sigma = None
    if n > RANK_UPDATE_MIN_DIM:
        new_sigma = np.empty((n, n))
        new_sigma[np.ix_(idx, idx)] = o_inv + np.outer(o_inv_b2, o_inv_b2) / b1
        new_sigma[idx, j] = -o_inv_b2 / b1
        new_sigma[j, idx] = -o_inv_b2 / b1
        new_sigma[j, j] = 1.0 / b1
    return replace(precision, omega_bar=omega, offdiag_var=offdiag_var,
                   b2_covariances=covs, sigma_bar=new_sigma)


def offdiag_signal(precision: PrecisionState, mode: str = "average") -> np.ndarray:
    """D-L signal of the strict upper triangle of the precision matrix.

    In an ascending cycle the upper-triangle entry ``(k, j)``, ``k < j``,
    comes from column ``j``, the later of the two updates.
    """
    iu = np.triu_indices(precision.n, 1)
    var = precision.offdiag_var
    if mode == "latest":
        v = var[iu]
    else:
        v = 0.5 * (var[iu] + var.T[iu])
    return dl_signal(precision.omega_bar[iu], v)


def _validate_inputs(Y, X):
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.ndim != 2 or X.ndim != 2:
        raise InputError("Y and X must be two-dimensional")
    if Y.shape[0] != X.shape[0]:
        raise InputError(f"Y has {Y.shape[0]} rows but X has {X.shape[0]}")
    if Y.shape[0] < 2:
        raise InputError("need at least two observations")
    if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(X))):
        raise InputError("non-finite values in first-stage inputs")
    if np.any(np.all(X == 0.0, axis=0)):
        raise InputError("X has an identically zero column")
    return Y, X


def stage1_fit(Y_minus_i, X, config: Stage1Config = Stage1Config(),
               callback: Optional[Callable] = None) -> Stage1Result:
    """Fit the reduced form by coordinate-ascent VB until parameters stop moving.

    Each iteration runs the coefficient update, refreshes residual
    cross-products, cycles through every precision column in ascending order
    and finally updates both D-L states. Iteration stops when the largest
    absolute change in ``gamma_bar`` and ``omega_bar`` falls below
    ``config.tol``.

    ``callback(iteration, gamma_bar, gamma_cov, precision)`` is invoked after
    each iteration, mainly for diagnostics and tests.
    """
    Y, X = _validate_inputs(Y_minus_i, X)
    T, n = Y.shape
    p = X.shape[1]
    XtX = X.T @ X
    XtY = X.T @ Y

    precision = init_precision(n, config.concentration_a_omega)
    gamma, gamma_cov = update_gamma(Y, X, precision.omega_bar,
                                    np.full(n * p, config.ridge_penalty), XtX, XtY)
    gamma_dl = dl_update(dl_init(n * p, config.concentration_a),
                         dl_signal(gamma, np.diag(gamma_cov)))

    converged = False
    change = np.inf
    it = 0
    for it in range(1, config.max_iter + 1):
        omega_prev = precision.omega_bar
        prior = dl_prior_precision(gamma_dl, config.prior_mode)
        gamma_new, gamma_cov = update_gamma(Y, X, omega_prev, prior, XtX, XtY)
        resid = Y - X @ gamma_new.reshape(p, n, order="F")
        S = resid.T @ resid
        traces = block_traces(XtX, gamma_cov, n)
        offdiag_precision = _offdiag_prior_precision(precision, config.prior_mode)
        if n > RANK_UPDATE_MIN_DIM:
            c = _cholesky(precision.omega_bar, "precision matrix")
            precision = replace(precision, sigma_bar=_spd_inverse(c))
        for j in range(n):
            precision = update_precision_column(precision, S, X, gamma_cov, j, config,
                                                traces=traces, offdiag_precision=offdiag_precision)
        gamma_dl = dl_update(gamma_dl, dl_signal(gamma_new, np.diag(gamma_cov)))
        if precision.offdiag_dl is not None:
            precision = replace(precision,
                                offdiag_dl=dl_update(precision.offdiag_dl,
                                                    offdiag_signal(precision, config.offdiag_variance)))

        change = max(float(np.max(np.abs(gamma_new - gamma))),
                     float(np.max(np.abs(precision.omega_bar - omega_prev))))
        gamma = gamma_new
        if not (np.isfinite(change) and np.all(np.isfinite(precision.omega_bar))):
            raise NumericalError(f"first-stage iterate became non-finite at iteration {it}")
        if callback is not None:
            callback(it, gamma, gamma_cov, precision)
        if change < config.tol:
            converged = True
            break

    if not converged:
        logger.warning("first stage stopped at max_iter=%d with change %.3e", config.max_iter, change)
    fitted = X @ gamma.reshape(p, n, order="F")
    return Stage1Result(gamma_bar=gamma, gamma_cov=gamma_cov, precision=precision,
                        fitted=fitted, iterations=it, converged=converged, final_change=change)
