"""
Monte Carlo data-generating processes for panel SAR models and a
replication harness that summarizes recovery of Lambda and beta.

Every replication draws from its own counter-based stream
``Philox(SeedSequence([seed, r]))``, so results do not depend on how
replications are scheduled.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .exceptions import ConfigError, HarnessError, NumericalError
from .model import EstimatorConfig, PanelData, estimate_sar

__all__ = [
    "make_ring_weights",
    "replication_rng",
    "TruthRecord",
    "SimulatedPanel",
    "Model2Params",
    "DGPSpec",
    "simulate_model1",
    "simulate_model2",
    "simulate",
    "MCSummary",
    "run_monte_carlo",
    "corner_report",
    "write_summary_csv",
    "write_beta_csv",
]

logger = logging.getLogger(__name__)


def make_ring_weights(N: int) -> np.ndarray:
    """Row-normalized ring adjacency: each unit neighbours the one ahead and the one behind."""
    if int(N) != N or N < 3:
        raise ConfigError(f"a ring needs at least 3 units, got N={N!r}")
    N = int(N)
    W = np.zeros((N, N))
    idx = np.arange(N)
    W[idx, (idx + 1) % N] = 0.5
    W[idx, (idx - 1) % N] = 0.5
    return W


def replication_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, *stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return replication_rng(0 if seed is None else seed)


@dataclass
class TruthRecord:
    lambda_true: np.ndarray
    beta_true: np.ndarray
    noise_scale: np.ndarray


@dataclass
class SimulatedPanel:
    panel: PanelData
    truth: TruthRecord
    X: np.ndarray
    U: np.ndarray


def _solve_system(A, X, U, beta):
    """Rows ``y_t = (I - A)^{-1} (beta * x_t + u_t)``."""
    N = A.shape[0]
    M = np.eye(N) - A
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e12:
        raise ConfigError(f"I - Lambda is singular (condition number {cond:.3e})")
    rhs = X * beta + U
    return lu_solve(lu_factor(M), rhs.T).T


def _to_panel(Y, X):
    N = Y.shape[1]
    return PanelData(Y=Y, X_blocks=[X[:, [i]] for i in range(N)],
                     unit_labels=[f"u{i + 1}" for i in range(N)],
                     exog_names=[["x"] for _ in range(N)])


def simulate_model1(N: int, T: int, lambda_coef: float = 0.6, beta: float = 0.9,
                    noise_scale: float = 0.1, seed=0, weights=None) -> SimulatedPanel:
    """``y_t = lambda W y_t + beta x_t + u_t`` with ring ``W`` and Gaussian draws.

    ``weights`` overrides the ring with any row-normalized matrix.
    """
    W = make_ring_weights(N) if weights is None else np.asarray(weights, dtype=float)
    if abs(lambda_coef) >= 1:
        raise ConfigError(f"|lambda_coef| must be < 1, got {lambda_coef!r}")
    if T < 2:
        raise ConfigError(f"T must be at least 2, got {T!r}")
    rng = _as_rng(seed)
    X = rng.standard_normal((T, N))
    U = noise_scale * rng.standard_normal((T, N))
    A = lambda_coef * W
    Y = _solve_system(A, X, U, beta)
    truth = TruthRecord(lambda_true=A, beta_true=np.full(N, float(beta)),
                        noise_scale=np.full(N, float(noise_scale)))
    return SimulatedPanel(panel=_to_panel(Y, X), truth=truth, X=X, U=U)


@dataclass(frozen=True)
class Model2Params:
    """Coefficients of the two-group system.

    Group 1 is the first ``N/2`` units. ``own_spatial`` multiplies each
    group's own ring, ``cross_direct`` the counterpart unit in the other
    group and ``cross_spatial`` the other group's ring.
    """

    own_spatial: tuple = (0.6, 0.6)
    cross_direct: tuple = (0.5, 0.5)
    cross_spatial: tuple = (0.4, 0.4)
    beta: tuple = (0.9, 0.9)
    noise_scale: tuple = (0.1, 0.1)

    def stacked_lambda(self, N: int) -> np.ndarray:
        if N % 2 or N < 6:
            raise ConfigError(f"model 2 needs an even N >= 6, got {N!r}")
        h = N // 2
        W1 = make_ring_weights(h)
        W2 = make_ring_weights(h)
        I = np.eye(h)
        return np.block([
            [self.own_spatial[0] * W1, self.cross_direct[0] * I + self.cross_spatial[0] * W2],
            [self.cross_direct[1] * I + self.cross_spatial[1] * W1, self.own_spatial[1] * W2],
        ])


def simulate_model2(N: int, T: int, params: Model2Params = Model2Params(), seed=0) -> SimulatedPanel:
    """Two groups of ``N/2`` units with within-group rings and cross-group coupling."""
    if T < 2:
        raise ConfigError(f"T must be at least 2, got {T!r}")
    A = params.stacked_lambda(N)
    h = N // 2
    rng = _as_rng(seed)
    X = rng.standard_normal((T, N))
    scale = np.repeat(np.asarray(params.noise_scale, dtype=float), h)
    U = scale * rng.standard_normal((T, N))
    beta = np.repeat(np.asarray(params.beta, dtype=float), h)
    Y = _solve_system(A, X, U, beta)
    truth = TruthRecord(lambda_true=A, beta_true=beta, noise_scale=scale)
    return SimulatedPanel(panel=_to_panel(Y, X), truth=truth, X=X, U=U)


@dataclass(frozen=True)
class DGPSpec:
    """Which model to simulate and at what size; ``model`` is ``"model1"`` or ``"model2"``."""

    model: str = "model1"
    N: int = 30
    T: int = 80
    lambda_coef: float = 0.6
    beta: float = 0.9
    noise_scale: float = 0.1
    params: Model2Params = field(default_factory=Model2Params)

    def __post_init__(self):
        if self.model not in ("model1", "model2"):
            raise ConfigError(f"unknown model {self.model!r}")
        if int(self.N) != self.N or self.N < 3:
            raise ConfigError(f"N must be an integer >= 3, got {self.N!r}")
        if int(self.T) != self.T or self.T < 2:
            raise ConfigError(f"T must be an integer >= 2, got {self.T!r}")


def simulate(spec: DGPSpec, seed) -> SimulatedPanel:
    if spec.model == "model1":
        return simulate_model1(spec.N, spec.T, spec.lambda_coef, spec.beta, spec.noise_scale, seed)
    return simulate_model2(spec.N, spec.T, spec.params, seed)


@dataclass
class MCSummary:
    """Entrywise Monte Carlo moments over successful replications.

    ``lambda_draws`` and ``beta_draws`` keep every successful replication in
    index order; ``nonconverged`` counts replications that finished with at
    least one equation short of the tolerance (they are still included).
    """

    lambda_mean: np.ndarray
    lambda_sd: np.ndarray
    beta_mean: np.ndarray
    beta_sd: np.ndarray
    replications: int
    failures: int
    nonconverged: int
    mean_runtime_seconds: float
    lambda_true: np.ndarray
    beta_true: np.ndarray
    lambda_draws: np.ndarray
    beta_draws: np.ndarray
    failed_indices: List[int] = field(default_factory=list)


def _one_replication(spec, config, seed, r):
    sim = simulate(spec, replication_rng(seed, r))
    start = time.perf_counter()
    try:
        est = estimate_sar(sim.panel, config)
    except NumericalError as exc:
        logger.warning("replication %d failed: %s", r, exc)
        return None, time.perf_counter() - start, sim.truth
    elapsed = time.perf_counter() - start
    if not (np.all(np.isfinite(est.lambda_)) and np.all(np.isfinite(est.beta_tilde))):
        return None, elapsed, sim.truth
    return (est.lambda_, est.beta_tilde, est.converged), elapsed, sim.truth


def run_monte_carlo(spec: DGPSpec, config: EstimatorConfig, replications: int, seed: int = 0,
                    workers: int = 1, progress=None) -> MCSummary:
    """Simulate and estimate ``replications`` times and summarize.

    ``progress(r, elapsed)`` is called as replications finish, in index order.

    Raises
    ------
    HarnessError
        If every replication fails.
    """
    if int(replications) != replications or replications < 1:
        raise ConfigError(f"replications must be a positive integer, got {replications!r}")
    replications = int(replications)

    def job(r):
        out = _one_replication(spec, config, seed, r)
        if progress is not None:
            progress(r, out[1])
        return out

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(replications)))
    else:
        results = [job(r) for r in range(replications)]

    lam, beta, failed, nonconv, times = [], [], [], 0, []
    for r, (res, elapsed, _) in enumerate(results):
        times.append(elapsed)
        if res is None:
            failed.append(r)
            continue
        lam.append(res[0])
        beta.append(res[1])
        nonconv += not res[2]
    if not lam:
        raise HarnessError(f"all {replications} replications failed")
    lam = np.stack(lam)
    beta = np.stack(beta)
    ddof = 1 if lam.shape[0] > 1 else 0
    truth = results[0][2]
    return MCSummary(
        lambda_mean=lam.mean(axis=0), lambda_sd=lam.std(axis=0, ddof=ddof),
        beta_mean=beta.mean(axis=0), beta_sd=beta.std(axis=0, ddof=ddof),
        replications=replications, failures=len(failed), nonconverged=nonconv,
        mean_runtime_seconds=float(np.mean(times)),
        lambda_true=truth.lambda_true, beta_true=truth.beta_true,
        lambda_draws=lam, beta_draws=beta, failed_indices=failed,
    )


def _fmt_pair(m, s):
    return f"{m:5.2f} ({s:.2f})"


def corner_report(summary: MCSummary, corner_size: int = 5) -> str:
    """Mean (sd) pairs for the four ``corner_size`` blocks of Lambda and the
    first and last ``corner_size`` entries of beta."""
    N = summary.lambda_mean.shape[0]
    k = int(corner_size)
    if k < 1 or k > N // 2:
        raise ConfigError(f"corner_size must be in [1, {N // 2}], got {corner_size!r}")
    head = np.arange(k)
    tail = np.arange(N - k, N)
    corners = [("top-left", head, head), ("top-right", head, tail),
               ("bottom-left", tail, head), ("bottom-right", tail, tail)]
    lines = [f"Lambda: mean (sd) over {summary.replications - summary.failures} replications"]
    for name, rows, cols in corners:
        lines.append(f"[{name}] rows {rows[0] + 1}-{rows[-1] + 1}, cols {cols[0] + 1}-{cols[-1] + 1}")
        for i in rows:
            lines.append("  ".join(_fmt_pair(summary.lambda_mean[i, j], summary.lambda_sd[i, j]) for j in cols))
    P = summary.beta_mean.shape[0]
    kb = min(k, P)
    lines.append("beta: mean (sd)")
    for name, idx in (("first", np.arange(kb)), ("last", np.arange(P - kb, P))):
        lines.append(f"[{name}] " + "  ".join(_fmt_pair(summary.beta_mean[i], summary.beta_sd[i]) for i in idx))
    lines.append(f"failures: {summary.failures}  non-converged: {summary.nonconverged}")
    return "\n".join(lines)


def write_summary_csv(summary: MCSummary, path) -> None:
    """One row per Lambda entry: ``i, j, mean, sd`` (1-based indices, 17 significant digits)."""
    N = summary.lambda_mean.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "mean", "sd"])
        for i in range(N):
            for j in range(N):
                w.writerow([i + 1, j + 1, f"{summary.lambda_mean[i, j]:.17g}", f"{summary.lambda_sd[i, j]:.17g}"])


def write_beta_csv(summary: MCSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "mean", "sd"])
        for k in range(summary.beta_mean.shape[0]):
            w.writerow([k + 1, f"{summary.beta_mean[k]:.17g}", f"{summary.beta_sd[k]:.17g}"])
