"""
Simultaneous two-variable spatial system (a rate-like and a spread-like
outcome per unit), its impulse responses and cumulative spillovers, rolling
re-estimation and group averages of estimated spatial weights.

The structural system is

    B z_t = L z_{t-1} + A x_t + e_t,   z_t = (rate_t, spread_t),

with ``B = [[I - W_rate, -C12], [-C22, I - W_spread]]`` and
``L = diag(C17, C27)``, where the ``C`` blocks are diagonal matrices of
per-unit coupling and own-lag coefficients.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .exceptions import InputError, NumericalError
from .model import EstimatorConfig, PanelData, SarEstimate, estimate_sar

__all__ = [
    "CouplingSpec",
    "SimultaneousSystem",
    "SystemPanel",
    "WindowResult",
    "assemble_system",
    "impulse_response",
    "cumulative_spillover",
    "group_weight_average",
    "build_system_panel",
    "rolling_estimate",
    "spillover_rows",
    "weight_average_rows",
    "write_tidy_csv",
    "simulate_system",
]

logger = logging.getLogger(__name__)

VARIABLES = ("rate", "spread")
SINGULAR_COND = 1e12


@dataclass(frozen=True)
class CouplingSpec:
    """Names of the exogenous-block columns holding the cross-variable and own-lag regressors.

    ``rate_on_spread`` is the contemporaneous spread regressor of each rate
    equation, ``rate_lag`` its own lag, and likewise for the spread equations.
    """

    rate_on_spread: str = "spread"
    rate_lag: str = "rate_lag"
    spread_on_rate: str = "rate"
    spread_lag: str = "spread_lag"


@dataclass
class SimultaneousSystem:
    """Contemporaneous matrix ``B``, lag matrix and exogenous coefficients.

    ``exog_coef`` has one row per equation (rates then spreads) and one
    column per entry of ``exog_labels``; ``unit_groups`` maps group names to
    unit indices.
    """

    contemporaneous: np.ndarray
    lag: np.ndarray
    exog_coef: np.ndarray
    exog_labels: List[str]
    unit_labels: List[str]
    unit_groups: Dict[str, List[int]] = field(default_factory=dict)
    condition_number: float = 1.0

    @property
    def N(self) -> int:
        return self.contemporaneous.shape[0] // 2

    @property
    def singular(self) -> bool:
        return not np.isfinite(self.condition_number) or self.condition_number > SINGULAR_COND

    def offset(self, variable: str) -> int:
        if variable not in VARIABLES:
            raise InputError(f"variable must be one of {VARIABLES}, got {variable!r}")
        return 0 if variable == "rate" else self.N


def _column(estimate: SarEstimate, name: str) -> np.ndarray:
    out = np.empty(len(estimate.beta_by_unit))
    for i, (beta, names) in enumerate(zip(estimate.beta_by_unit, estimate.exog_names)):
        if name not in names:
            raise InputError(f"unit {estimate.unit_labels[i]} has no regressor named {name!r}")
        out[i] = beta[names.index(name)]
    return out


def assemble_system(rate_estimate: SarEstimate, spread_estimate: SarEstimate,
                    coupling: CouplingSpec = CouplingSpec(),
                    unit_groups: Optional[Dict[str, Sequence[int]]] = None) -> SimultaneousSystem:
    """Lay out ``B``, the lag matrix and ``A`` from the two equation sets."""
    N = rate_estimate.lambda_.shape[0]
    if spread_estimate.lambda_.shape != (N, N):
        raise InputError("rate and spread estimates cover different numbers of units")
    if list(rate_estimate.unit_labels) != list(spread_estimate.unit_labels):
        raise InputError("rate and spread estimates have different unit labels")
    c12 = _column(rate_estimate, coupling.rate_on_spread)
    c17 = _column(rate_estimate, coupling.rate_lag)
    c22 = _column(spread_estimate, coupling.spread_on_rate)
    c27 = _column(spread_estimate, coupling.spread_lag)
    I = np.eye(N)
    B = np.block([[I - rate_estimate.lambda_, -np.diag(c12)],
                  [-np.diag(c22), I - spread_estimate.lambda_]])
    lag = np.block([[np.diag(c17), np.zeros((N, N))], [np.zeros((N, N)), np.diag(c27)]])

    # remaining regressors of each equation, one column per (equation, name)
    labels, entries = [], []
    for var, est, skip in (("rate", rate_estimate, (coupling.rate_on_spread, coupling.rate_lag)),
                           ("spread", spread_estimate, (coupling.spread_on_rate, coupling.spread_lag))):
        base = 0 if var == "rate" else N
        for i, (beta, names) in enumerate(zip(est.beta_by_unit, est.exog_names)):
            for k, name in enumerate(names):
                if name in skip:
                    continue
                labels.append(f"{est.unit_labels[i]}__{var}__{name}")
                entries.append((base + i, beta[k]))
    A = np.zeros((2 * N, len(labels)))
    for col, (row, value) in enumerate(entries):
        A[row, col] = value

    with np.errstate(all="ignore"):
        cond = float(np.linalg.cond(B))
    system = SimultaneousSystem(contemporaneous=B, lag=lag, exog_coef=A, exog_labels=labels,
                                unit_labels=list(rate_estimate.unit_labels),
                                unit_groups={k: list(v) for k, v in (unit_groups or {}).items()},
                                condition_number=cond)
    if system.singular:
        logger.warning("contemporaneous matrix is singular (condition number %.3e)", cond)
    return system


def impulse_response(system: SimultaneousSystem, shock, horizon: int) -> np.ndarray:
    """Responses to a one-off disturbance ``shock`` with exogenous variables held fixed.

    Row ``h`` is ``(B^-1 L)^h B^-1 shock``; the result has ``horizon + 1`` rows.
    """
    B = system.contemporaneous
    shock = np.asarray(shock, dtype=float)
    if shock.shape != (B.shape[0],):
        raise InputError(f"shock has shape {shock.shape}, expected ({B.shape[0]},)")
    if int(horizon) != horizon or horizon < 0:
        raise InputError(f"horizon must be a nonnegative integer, got {horizon!r}")
    if system.singular:
        raise NumericalError(f"contemporaneous matrix is singular (condition number {system.condition_number:.3e})")
    lu = lu_factor(B)
    out = np.empty((int(horizon) + 1, B.shape[0]))
    out[0] = lu_solve(lu, shock)
    for h in range(1, int(horizon) + 1):
        out[h] = lu_solve(lu, system.lag @ out[h - 1])
    return out


def cumulative_spillover(system: SimultaneousSystem, sources, target: int, variable: str = "rate",
                         horizon: int = 60, response_variable: Optional[str] = None) -> float:
    """Mean over ``sources`` of the target's summed response (h = 0..horizon) to a unit shock.

    ``variable`` is the shocked variable and ``response_variable`` (default:
    the same) the one read off at ``target``. The target itself is always
    dropped from the source set.
    """
    sources = [int(s) for s in sources if int(s) != int(target)]
    if not sources:
        raise InputError("source set is empty after excluding the target")
    N = system.N
    if not 0 <= target < N or any(not 0 <= s < N for s in sources):
        raise InputError("unit index out of range")
    shock_off = system.offset(variable)
    resp_off = system.offset(response_variable or variable)
    total = 0.0
    for s in sources:
        e = np.zeros(2 * N)
        e[shock_off + s] = 1.0
        total += float(np.sum(impulse_response(system, e, horizon)[:, resp_off + target]))
    return total / len(sources)


def group_weight_average(W_row, group, threshold: float = 0.01) -> Tuple[float, bool]:
    """Mean of the entries of ``W_row`` in ``group`` whose magnitude exceeds ``threshold``.

    Returns ``(value, is_empty)``; ``value`` is 0.0 when nothing survives.
    Negative weights are kept.
    """
    W_row = np.asarray(W_row, dtype=float)
    idx = np.asarray(list(group), dtype=int)
    if idx.size == 0:
        raise InputError("group is empty")
    vals = W_row[idx]
    keep = np.abs(vals) > threshold
    if not np.any(keep):
        return 0.0, True
    return float(np.mean(vals[keep])), False


@dataclass
class SystemPanel:
    """A rate panel and a spread panel over the same units and periods."""

    rate: PanelData
    spread: PanelData
    coupling: CouplingSpec = CouplingSpec()

    @property
    def T(self) -> int:
        return self.rate.T

    def window(self, start: int, stop: int) -> "SystemPanel":
        return SystemPanel(self.rate.window(start, stop), self.spread.window(start, stop), self.coupling)


def _exog_only(panel: PanelData, endogenous_name: str) -> np.ndarray:
    cols = [b[:, [k for k, n in enumerate(names) if n != endogenous_name]]
            for b, names in zip(panel.X_blocks, panel.exog_names)]
    return np.hstack(cols)


def build_system_panel(rate: PanelData, spread: PanelData,
                       coupling: CouplingSpec = CouplingSpec()) -> SystemPanel:
    """Mark the contemporaneous cross-variable columns as endogenous and give
    each equation set the other set's exogenous columns as extra instruments."""
    if rate.T != spread.T or rate.N != spread.N:
        raise InputError("rate and spread panels must share T and N")
    if list(rate.unit_labels) != list(spread.unit_labels):
        raise InputError("rate and spread panels must share unit labels")

    def endog(panel, name):
        cols = []
        for i, names in enumerate(panel.exog_names):
            if name not in names:
                raise InputError(f"unit {panel.unit_labels[i]} lacks regressor {name!r}")
            cols.append([names.index(name)])
        return cols

    r = PanelData(Y=rate.Y, X_blocks=rate.X_blocks, unit_labels=rate.unit_labels,
                  time_labels=rate.time_labels, exog_names=rate.exog_names,
                  endogenous_columns=endog(rate, coupling.rate_on_spread),
                  instruments=_exog_only(spread, coupling.spread_on_rate))
    s = PanelData(Y=spread.Y, X_blocks=spread.X_blocks, unit_labels=spread.unit_labels,
                  time_labels=spread.time_labels, exog_names=spread.exog_names,
                  endogenous_columns=endog(spread, coupling.spread_on_rate),
                  instruments=_exog_only(rate, coupling.rate_on_spread))
    return SystemPanel(r, s, coupling)


@dataclass
class WindowResult:
    window_start: str
    rate: SarEstimate
    spread: SarEstimate


def rolling_estimate(panel: SystemPanel, window: int = 24,
                     config: EstimatorConfig = EstimatorConfig()) -> List[WindowResult]:
    """Re-estimate both equation sets on every run of ``window`` consecutive periods.

    Windows are dispatched to ``config.workers`` threads; each window's
    equations then run serially.
    """
    T = panel.T
    if int(window) != window or window < 2:
        raise InputError(f"window must be an integer >= 2, got {window!r}")
    if window > T:
        raise InputError(f"window {window} exceeds sample length {T}")
    window = int(window)
    inner = EstimatorConfig(stage1=config.stage1, stage2=config.stage2,
                            shared_first_stage=config.shared_first_stage, seed=config.seed, workers=1)

    def run(start):
        sub = panel.window(start, start + window)
        return WindowResult(window_start=sub.rate.time_labels[0],
                            rate=estimate_sar(sub.rate, inner),
                            spread=estimate_sar(sub.spread, inner))

    starts = range(T - window + 1)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(run, starts))
    return [run(s) for s in starts]


def spillover_rows(window_start: str, system: SimultaneousSystem, horizon: int = 60) -> List[tuple]:
    """Tidy ``(window_start, target, source_group, variable, value)`` rows of
    group-average cumulative spillovers; a group left empty after dropping
    the target is skipped."""
    rows = []
    for target in range(system.N):
        for group, members in system.unit_groups.items():
            sources = [m for m in members if m != target]
            if not sources:
                continue
            for var in VARIABLES:
                value = cumulative_spillover(system, sources, target, var, horizon)
                rows.append((window_start, system.unit_labels[target], group, var, value))
    return rows


def weight_average_rows(window_start: str, rate: SarEstimate, spread: SarEstimate,
                        groups: Dict[str, Sequence[int]], threshold: float = 0.01) -> List[tuple]:
    """Tidy rows of group-average estimated weights, own unit excluded; an
    empty selection is written as value 0 with ``empty = 1``."""
    rows = []
    for var, est in (("rate", rate), ("spread", spread)):
        for target in range(est.lambda_.shape[0]):
            for group, members in groups.items():
                sources = [m for m in members if m != target]
                if not sources:
                    continue
                value, empty = group_weight_average(est.lambda_[target], sources, threshold)
                rows.append((window_start, est.unit_labels[target], group, var, value, int(empty)))
    return rows


def write_tidy_csv(rows, path, extra_columns: Sequence[str] = ()) -> None:
    header = ["window_start", "target", "source_group", "variable", "value", *extra_columns]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([*row[:4], f"{row[4]:.17g}", *row[5:]])


def simulate_system(N: int, T: int, rate_spatial: float = 0.3, spread_spatial: float = 0.3,
                    coupling: Tuple[float, float] = (0.2, 0.2), lag: Tuple[float, float] = (0.5, 0.5),
                    beta: Tuple[float, float] = (1.0, 1.0), noise_scale: float = 0.1,
                    seed=0, burn_in: int = 50) -> Tuple[SystemPanel, SimultaneousSystem]:
    """Draw a stable ring-coupled rate/spread system and return it with its truth.

    Each equation has one unit-specific exogenous regressor ``x``; the
    blocks are named ``spread, rate_lag, x`` for rates and
    ``rate, spread_lag, x`` for spreads.
    """
    from .simulate import make_ring_weights, replication_rng

    rng = seed if isinstance(seed, np.random.Generator) else replication_rng(seed)
    W = make_ring_weights(N)
    I = np.eye(N)
    B = np.block([[I - rate_spatial * W, -coupling[0] * I], [-coupling[1] * I, I - spread_spatial * W]])
    L = np.block([[lag[0] * I, np.zeros((N, N))], [np.zeros((N, N)), lag[1] * I]])
    total = T + 1 + burn_in
    x = rng.standard_normal((total, 2 * N))
    e = noise_scale * rng.standard_normal((total, 2 * N))
    gain = np.repeat(np.asarray(beta, dtype=float), N)
    lu = lu_factor(B)
    z = np.zeros((total, 2 * N))
    for t in range(1, total):
        z[t] = lu_solve(lu, L @ z[t - 1] + gain * x[t] + e[t])
    z, zl, x = z[burn_in + 1:], z[burn_in:-1], x[burn_in + 1:]
    labels = [f"u{i + 1}" for i in range(N)]
    rate = PanelData(Y=z[:, :N], X_blocks=[np.column_stack([z[:, N + i], zl[:, i], x[:, i]]) for i in range(N)],
                     unit_labels=labels, exog_names=[["spread", "rate_lag", "x"]] * N)
    spread = PanelData(Y=z[:, N:], X_blocks=[np.column_stack([z[:, i], zl[:, N + i], x[:, N + i]]) for i in range(N)],
                       unit_labels=labels, exog_names=[["rate", "spread_lag", "x"]] * N)
    A = np.diag(gain)
    truth = SimultaneousSystem(contemporaneous=B, lag=L, exog_coef=A,
                               exog_labels=[f"{u}__{v}__x" for v in VARIABLES for u in labels],
                               unit_labels=labels, condition_number=float(np.linalg.cond(B)))
    return build_system_panel(rate, spread), truth
