"""
Dirichlet-Laplace shrinkage: variational hyperparameter updates.

A coefficient vector ``b`` of length ``d`` carries the hierarchy::

    b_j ~ N(0, psi_j * phi_j**2 * tau**2)
    psi_j ~ Exp(1/2),  phi ~ Dir(a, ..., a),  tau ~ Gamma(d * a, 1/2)

The same update serves first-stage reduced-form coefficients, the
off-diagonal elements of the first-stage precision matrix and the
second-stage structural coefficients. Only the posterior first and second
moments of ``b`` enter, through the signal ``sqrt(mean_j**2 + var_j)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import ConfigError, DegenerateSignalError, InputError
from .special_fns import gig_moment, gig_moments, ig_reciprocal_moments

__all__ = [
    "DLState",
    "SIGNAL_FLOOR",
    "dl_init",
    "dl_signal",
    "dl_update",
    "dl_prior_precision",
]

SIGNAL_FLOOR = 1e-12
PRIOR_MODES = ("mean", "reciprocal")


@dataclass(frozen=True)
class DLState:
    """Posterior moments of the D-L hyperparameters for one coefficient vector.

    ``phi_inv2_bar`` and ``tau_inv2_bar`` are the reciprocal moments
    ``E[phi^-2]`` and ``E[tau^-2]``, used only by the ``"reciprocal"`` prior
    precision mode.
    """

    concentration: float
    phi_bar: np.ndarray
    phi2_bar: np.ndarray
    psi_bar: np.ndarray
    psi_inv_bar: np.ndarray
    tau_bar: float
    tau2_bar: float
    phi_inv2_bar: np.ndarray
    tau_inv2_bar: float

    @property
    def dim(self) -> int:
        return self.phi_bar.shape[0]


def dl_init(dim: int, concentration: float) -> DLState:
    """Starting state: uniform ``phi``, unit ``psi`` and ``tau``."""
    if int(dim) != dim or dim < 1:
        raise ConfigError(f"D-L dimension must be a positive integer, got {dim!r}")
    if not np.isfinite(concentration) or concentration <= 0:
        raise ConfigError(f"D-L concentration must be > 0, got {concentration!r}")
    d = int(dim)
    return DLState(
        concentration=float(concentration),
        phi_bar=np.full(d, 1.0 / d),
        phi2_bar=np.full(d, 1.0 / d**2),
        psi_bar=np.ones(d),
        psi_inv_bar=np.ones(d),
        tau_bar=1.0,
        tau2_bar=1.0,
        phi_inv2_bar=np.full(d, float(d) ** 2),
        tau_inv2_bar=1.0,
    )


def dl_signal(mean, variance) -> np.ndarray:
    """Composite signal ``sqrt(mean**2 + variance)`` of each regularized coefficient."""
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    return np.sqrt(mean * mean + np.maximum(variance, 0.0))


def dl_update(state: DLState, signal) -> DLState:
    """One pass of the tau, psi, phi updates given the current coefficient signal.

    The order matters: ``tau`` uses the incoming ``phi``, ``psi`` uses the
    new ``tau`` moments with the incoming ``phi``, and ``phi`` depends on the
    signal alone.

    Raises
    ------
    DegenerateSignalError
        If every signal entry is zero.
    """
    s = np.asarray(signal, dtype=float)
    if s.shape != (state.dim,):
        raise InputError(f"signal has shape {s.shape}, expected ({state.dim},)")
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise InputError("signal entries must be finite and nonnegative")
    if not np.any(s > 0):
        raise DegenerateSignalError("all-zero D-L signal")
    s = np.maximum(s, SIGNAL_FLOOR)
    d = state.dim
    a = state.concentration

    # global scale
    tau_order = d * a - d
    chi = float(np.sum(2.0 * s / state.phi_bar))
    tau = gig_moments(tau_order, chi)
    tau_inv2 = gig_moment(tau_order, chi, -2.0)

    # local scales
    rho = np.sqrt(state.phi2_bar * tau.second_moment) / s
    psi = ig_reciprocal_moments(rho)

    # Dirichlet weights via normalized giG(a - 1, 1, 2 s) variables
    varpi = 2.0 * s
    xi = gig_moments(a - 1.0, varpi)
    xi_total = float(np.sum(xi.mean))
    phi = xi.mean / xi_total
    phi2 = phi * phi + xi.variance / xi_total**2
    phi_inv2 = xi_total**2 * gig_moment(a - 1.0, varpi, -2.0)

    return replace(
        state,
        phi_bar=phi,
        phi2_bar=phi2,
        psi_bar=np.asarray(psi.mean),
        psi_inv_bar=np.asarray(psi.mean_reciprocal),
        tau_bar=float(tau.mean),
        tau2_bar=float(tau.second_moment),
        phi_inv2_bar=np.asarray(phi_inv2),
        tau_inv2_bar=float(tau_inv2),
    )


def dl_prior_precision(state: DLState, mode: str = "mean") -> np.ndarray:
    """Diagonal prior precision implied by the current D-L moments.

    ``mode="mean"`` inverts the product of means, ``1 / (psi * phi^2 * tau^2)``.
    ``mode="reciprocal"`` multiplies reciprocal moments,
    ``E[1/psi] E[phi^-2] E[tau^-2]``.
    """
    if mode == "mean":
        return 1.0 / (state.psi_bar * state.phi2_bar * state.tau2_bar)
    if mode == "reciprocal":
        return state.psi_inv_bar * state.phi_inv2_bar * state.tau_inv2_bar
    raise ConfigError(f"unknown prior precision mode {mode!r}; expected one of {PRIOR_MODES}")
