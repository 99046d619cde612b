"""
Two-stage estimation of an unrestricted panel SAR model,

    y_t = Lambda y_t + X_t beta_tilde + u_t,

equation by equation: a reduced-form first stage supplies fitted values of
the other units' outcomes, and a shrinkage regression of each unit's outcome
on those fitted values and its own exogenous block gives one row of Lambda.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .exceptions import InputError, NumericalError
from .stage1 import Stage1Config, stage1_fit
from .stage2 import Stage2Config, Stage2Result, stage2_fit

__all__ = [
    "PanelData",
    "EstimatorConfig",
    "StabilityDiagnostics",
    "EquationLog",
    "SarEstimate",
    "pooled_design",
    "estimate_sar",
    "check_stability",
]

logger = logging.getLogger(__name__)


@dataclass
class PanelData:
    """Endogenous outcomes with per-unit exogenous blocks.

    Parameters
    ----------
    Y : (T, N) array_like
    X_blocks : list of (T, m_i) array_like
        Regressors of unit ``i``'s equation besides the spatial lag.
    unit_labels, time_labels : sequence of str, optional
    exog_names : list of list of str, optional
        Column names of each block; defaults to ``x0, x1, ...``.
    endogenous_columns : list of list of int, optional
        Positions inside each block that hold contemporaneous endogenous
        regressors. They are replaced by first-stage fitted values and are
        left out of the pooled instrument set.
    instruments : (T, q) array_like, optional
        Extra exogenous columns used only in the first stage.
    """

    Y: np.ndarray
    X_blocks: List[np.ndarray]
    unit_labels: Optional[Sequence[str]] = None
    time_labels: Optional[Sequence[str]] = None
    exog_names: Optional[List[List[str]]] = None
    endogenous_columns: Optional[List[List[int]]] = None
    instruments: Optional[np.ndarray] = None

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim != 2:
            raise InputError(f"Y must be a T x N matrix, got shape {Y.shape}")
        T, N = Y.shape
        if N < 2:
            raise InputError("a spatial panel needs at least two units")
        if len(self.X_blocks) != N:
            raise InputError(f"{len(self.X_blocks)} exogenous blocks for {N} units")
        blocks = []
        for i, b in enumerate(self.X_blocks):
            b = np.asarray(b, dtype=float)
            if b.ndim == 1:
                b = b[:, None]
            if b.ndim != 2 or b.shape[0] != T:
                raise InputError(f"exogenous block {i} has shape {b.shape}, expected ({T}, m)")
            blocks.append(b)
        if not np.all(np.isfinite(Y)) or not all(np.all(np.isfinite(b)) for b in blocks):
            raise InputError("panel contains non-finite entries")
        self.Y = Y
        self.X_blocks = blocks
        self.unit_labels = [str(u) for u in (self.unit_labels or [f"u{i}" for i in range(N)])]
        self.time_labels = [str(t) for t in (self.time_labels or [str(t) for t in range(T)])]
        if len(self.unit_labels) != N or len(set(self.unit_labels)) != N:
            raise InputError("unit labels must be N distinct strings")
        if len(self.time_labels) != T:
            raise InputError("need one time label per row")
        if self.exog_names is None:
            self.exog_names = [[f"x{k}" for k in range(b.shape[1])] for b in blocks]
        if [len(n) for n in self.exog_names] != [b.shape[1] for b in blocks]:
            raise InputError("exog_names do not match block widths")
        if self.endogenous_columns is None:
            self.endogenous_columns = [[] for _ in blocks]
        if len(self.endogenous_columns) != N:
            raise InputError("endogenous_columns needs one entry per unit")
        for i, cols in enumerate(self.endogenous_columns):
            if any(not 0 <= c < blocks[i].shape[1] for c in cols):
                raise InputError(f"endogenous column index out of range in block {i}")
        if self.instruments is not None:
            inst = np.asarray(self.instruments, dtype=float)
            if inst.ndim == 1:
                inst = inst[:, None]
            if inst.shape[0] != T or not np.all(np.isfinite(inst)):
                raise InputError("instruments must be finite with T rows")
            self.instruments = inst

    @property
    def T(self) -> int:
        return self.Y.shape[0]

    @property
    def N(self) -> int:
        return self.Y.shape[1]

    def window(self, start: int, stop: int) -> "PanelData":
        """Rows ``start:stop`` as a new panel."""
        return PanelData(
            Y=self.Y[start:stop], X_blocks=[b[start:stop] for b in self.X_blocks],
            unit_labels=self.unit_labels, time_labels=self.time_labels[start:stop],
            exog_names=self.exog_names, endogenous_columns=self.endogenous_columns,
            instruments=None if self.instruments is None else self.instruments[start:stop],
        )


@dataclass(frozen=True)
class EstimatorConfig:
    """``workers`` is the width of the thread pool over equations; ``seed`` is
    recorded for provenance (the estimator itself is deterministic)."""

    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    shared_first_stage: bool = False
    seed: int = 0
    workers: int = 1


@dataclass(frozen=True)
class StabilityDiagnostics:
    stable: bool
    spectral_radius: float


@dataclass(frozen=True)
class EquationLog:
    """Convergence record of one equation (first stage then second stage)."""

    unit: str
    stage1_iterations: int
    stage1_converged: bool
    stage1_change: float
    stage2_iterations: int
    stage2_converged: bool
    stage2_change: float

    @property
    def converged(self) -> bool:
        return self.stage1_converged and self.stage2_converged


@dataclass
class SarEstimate:
    """Posterior point estimates of the spillover matrix and exogenous coefficients.

    ``beta_tilde`` concatenates ``beta_by_unit`` in unit order.
    """

    lambda_: np.ndarray
    beta_by_unit: List[np.ndarray]
    sigma2: np.ndarray
    per_equation: List[Stage2Result]
    logs: List[EquationLog]
    diagnostics: StabilityDiagnostics
    unit_labels: List[str]
    exog_names: List[List[str]]

    @property
    def beta_tilde(self) -> np.ndarray:
        return np.concatenate(self.beta_by_unit)

    @property
    def converged(self) -> bool:
        return all(log.converged for log in self.logs)


def check_stability(lambda_) -> StabilityDiagnostics:
    """Spectral radius of ``Lambda``; the system is flagged stable when it is below one."""
    L = np.asarray(lambda_, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise InputError(f"Lambda must be square, got shape {L.shape}")
    try:
        eig = np.linalg.eigvals(L)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise NumericalError(f"eigenvalue computation failed: {exc}") from exc
    radius = float(np.max(np.abs(eig))) if eig.size else 0.0
    return StabilityDiagnostics(stable=radius < 1.0, spectral_radius=radius)


def pooled_design(panel: PanelData) -> np.ndarray:
    """First-stage design: every exogenous column of every block plus extra
    instruments, with endogenous columns removed and exact duplicates
    (e.g. repeated intercepts) kept once."""
    cols = []
    for b, endog in zip(panel.X_blocks, panel.endogenous_columns):
        keep = [k for k in range(b.shape[1]) if k not in endog]
        cols.append(b[:, keep])
    if panel.instruments is not None:
        cols.append(panel.instruments)
    X = np.hstack(cols)
    _, first = np.unique(X, axis=1, return_index=True)
    X = X[:, np.sort(first)]
    if X.shape[1] == 0:
        raise InputError("no exogenous columns available for the first stage")
    return X


def _endogenous_targets(panel: PanelData):
    """Stacked endogenous regressor columns and their (unit, position) owners."""
    cols, owners = [], []
    for i, (b, endog) in enumerate(zip(panel.X_blocks, panel.endogenous_columns)):
        for k in endog:
            cols.append(b[:, k])
            owners.append((i, k))
    return (np.column_stack(cols) if cols else np.empty((panel.T, 0))), owners


def _fit_equation(i, panel, X, config, shared):
    N = panel.N
    others = [j for j in range(N) if j != i]
    block = panel.X_blocks[i].copy()
    endog = panel.endogenous_columns[i]
    if shared is not None:
        fitted_all, endog_fitted, s1 = shared
        Yhat = fitted_all[:, others]
        for k in endog:
            block[:, k] = endog_fitted[(i, k)]
    else:
        dep = panel.Y[:, others]
        if endog:
            dep = np.hstack([dep, block[:, endog]])
        s1 = stage1_fit(dep, X, config.stage1)
        Yhat = s1.fitted[:, :N - 1]
        for pos, k in enumerate(endog):
            block[:, k] = s1.fitted[:, N - 1 + pos]
    s2 = stage2_fit(panel.Y[:, i], Yhat, block, config.stage2)
    log = EquationLog(unit=panel.unit_labels[i], stage1_iterations=s1.iterations,
                      stage1_converged=s1.converged, stage1_change=float(s1.final_change),
                      stage2_iterations=s2.iterations, stage2_converged=s2.converged,
                      stage2_change=float(s2.final_change))
    return s2, log


def estimate_sar(panel: PanelData, config: EstimatorConfig = EstimatorConfig()) -> SarEstimate:
    """Run both stages for every equation and assemble the spillover matrix.

    With ``config.shared_first_stage`` the reduced form of all ``N`` outcomes
    (plus any endogenous regressors) is fitted once and column ``i`` is
    dropped for equation ``i``; otherwise each equation gets its own first
    stage on ``Y_{/i}``.

    Raises
    ------
    NumericalError
        If any equation produces non-finite iterates; the message names it.
    """
    N = panel.N
    X = pooled_design(panel)
    shared = None
    if config.shared_first_stage:
        endog_cols, owners = _endogenous_targets(panel)
        try:
            s1 = stage1_fit(np.hstack([panel.Y, endog_cols]), X, config.stage1)
        except NumericalError as exc:
            raise NumericalError(f"shared first stage: {exc}") from exc
        endog_fitted = {o: s1.fitted[:, N + k] for k, o in enumerate(owners)}
        shared = (s1.fitted[:, :N], endog_fitted, s1)

    def run(i):
        try:
            return _fit_equation(i, panel, X, config, shared)
        except NumericalError as exc:
            raise NumericalError(f"equation {panel.unit_labels[i]}: {exc}") from exc

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run, range(N)))
    else:
        results = [run(i) for i in range(N)]

    lam = np.zeros((N, N))
    betas, sigma2, fits, logs = [], np.empty(N), [], []
    for i, (s2, log) in enumerate(results):
        others = [j for j in range(N) if j != i]
        lam[i, others] = s2.theta_bar[:N - 1]
        betas.append(s2.theta_bar[N - 1:].copy())
        sigma2[i] = s2.sigma2_mean
        fits.append(s2)
        logs.append(log)
        if not log.converged:
            logger.warning("equation %s did not converge", log.unit)
    diagnostics = check_stability(lam)
    if not diagnostics.stable:
        logger.warning("estimated Lambda has spectral radius %.4f >= 1", diagnostics.spectral_radius)
    return SarEstimate(lambda_=lam, beta_by_unit=betas, sigma2=sigma2, per_equation=fits,
                       logs=logs, diagnostics=diagnostics, unit_labels=list(panel.unit_labels),
                       exog_names=[list(n) for n in panel.exog_names])
