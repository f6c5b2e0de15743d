"""Numerical checks of the variance-reduction results and the AR convergence ablation.

* M-dependent processes and the finite-T variance of their sample mean;
* variance of forking-sequences ensembles built from M-dependent forecast errors;
* a linear AR model trained with the median loss on growing FCD samples.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .decoder import ForecastGrid
from .errors import DivergenceError, DomainError
from .inference import EnsembleSpec, ensemble
from .panel import FrequencyMeta, TimeSeriesPanel, synthesize_panel
from .training import LossTrajectory

# ---------------------------------------------------------------------------
# M-dependent processes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MDependentProcess:
    """Equal-weight moving average of order ``M`` over iid Gaussian innovations.

    With ``normalize`` the weights are ``1/sqrt(M+1)`` so the marginal
    variance is ``innovation_std**2``; otherwise the weights are 1.
    Samples are ``P``-dimensional with independent coordinates.
    """

    M: int
    P: int = 1
    innovation_std: float = 1.0
    seed: int = 0
    normalize: bool = True

    def __post_init__(self):
        if self.M < 0 or self.P < 1 or self.innovation_std <= 0:
            raise ValueError("need M >= 0, P >= 1 and a positive innovation std")

    @property
    def weight(self) -> float:
        return 1.0 / math.sqrt(self.M + 1) if self.normalize else 1.0

    def autocovariance(self, b: int) -> float:
        b = abs(int(b))
        if b > self.M:
            return 0.0
        return self.weight ** 2 * self.innovation_std ** 2 * (self.M + 1 - b)


def gen_mdependent(proc: MDependentProcess, T: int, rng: Optional[np.random.Generator] = None,
                   P: Optional[int] = None) -> np.ndarray:
    """(T, P) sample path; ``rng`` defaults to one seeded from ``proc.seed``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(proc.seed) if rng is None else rng
    P = proc.P if P is None else P
    e = rng.normal(0.0, proc.innovation_std, size=(T + proc.M, P))
    c = np.concatenate([np.zeros((1, P)), np.cumsum(e, axis=0)])
    return proc.weight * (c[proc.M + 1:] - c[:T])


def lemma_variance(proc: MDependentProcess, T: int) -> float:
    """Exact per-coordinate variance of the mean of ``T`` consecutive samples:
    ``(1/T) sum_{|b| < T} (1 - |b|/T) gamma(b)``."""
    K = min(proc.M, T - 1)
    return sum((1.0 - abs(b) / T) * proc.autocovariance(b) for b in range(-K, K + 1)) / T


def mean_estimator_variance(proc: MDependentProcess, T_grid: Sequence[int], reps: int):
    """Empirical variance of the T-sample mean, one independent path per rep.

    Each rep draws a path of length ``max(T_grid)`` and reads its prefix
    means; variances are pooled over the ``P`` coordinates.
    Returns a list of ``(T, variance)``.
    """
    if reps < 50:
        raise ValueError("reps must be >= 50")
    T_grid = [int(t) for t in T_grid]
    rng = np.random.default_rng(proc.seed)
    Tmax = max(T_grid)
    idx = np.asarray(T_grid)
    means = np.empty((reps, len(T_grid), proc.P))
    for r in range(reps):
        x = gen_mdependent(proc, Tmax, rng)
        means[r] = np.cumsum(x, axis=0)[idx - 1] / idx[:, None]
    var = means.var(axis=0, ddof=1).mean(axis=-1)
    return list(zip(T_grid, var.tolist()))


def loglog_slope(pairs) -> float:
    """Least-squares slope of ``log y`` on ``log x``."""
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 3:
        raise ValueError("need at least three (x, y) pairs")
    if np.any(arr <= 0):
        raise DomainError("log-log fit needs strictly positive x and y")
    return float(np.polyfit(np.log(arr[:, 0]), np.log(arr[:, 1]), 1)[0])


def forecast_variance_decay(ensemble_sizes: Sequence[int], M: int, reps: int, seed: int = 0,
                            H: Optional[int] = None, innovation_std: float = 1.0):
    """Variance of moving-average ensembles of unbiased, M-dependent forecasts.

    Forecasts are ``y + e`` where, for each target date, the errors of the
    forecasts issued at successive FCDs form an M-dependent sequence.  A grid
    with ``H = max(ensemble_sizes)`` horizons is ensembled with a moving
    average of window ``n`` and the one-step cells with a full member set are
    read out.  Returns a list of ``(n, variance)``.
    """
    if reps < 100:
        raise ValueError("reps must be >= 100")
    sizes = [int(n) for n in ensemble_sizes]
    H = max(sizes) if H is None else H
    if min(sizes) < 1 or max(sizes) > H:
        raise ValueError("ensemble sizes must lie in [1, H]")
    T = 2 * H
    n_targets = T + H
    proc = MDependentProcess(M, P=reps * n_targets, innovation_std=innovation_std, seed=seed)
    # noise[t, r, tau]: error of the FCD-t forecast of target tau in rep r
    noise = gen_mdependent(proc, T).reshape(T, reps, n_targets)
    t = np.arange(T)[:, None]
    h = np.arange(H)[None, :]
    vals = noise[t, :, t + h + 1]  # (T, H, reps)
    vals = np.moveaxis(vals, -1, 0)[..., None]
    grid = ForecastGrid(vals, (0.5,))
    out = []
    for n in sizes:
        ens = ensemble(grid, EnsembleSpec("moving_average", n)).values[:, H - 1:, 0, 0]
        out.append((n, float(ens.var(ddof=1, axis=0).mean())))
    return out


def ensemble_variance(proc: MDependentProcess, n: int) -> float:
    """Analytic variance of the mean of ``n`` consecutive M-dependent members."""
    return lemma_variance(proc, n)


# ---------------------------------------------------------------------------
# Linear AR convergence ablation
# ---------------------------------------------------------------------------


@dataclass
class ARModelSpec:
    """``yhat_{t+1} = c + theta_0 y_t + ... + theta_p y_{t-p}``."""

    p: int
    c: float = 0.0
    theta: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.p < 0:
            raise ValueError("AR order must be nonnegative")
        self.theta = np.zeros(self.p + 1) if self.theta is None else np.asarray(self.theta, np.float64)
        if self.theta.shape != (self.p + 1,) or not np.all(np.isfinite(self.theta)) or not math.isfinite(self.c):
            raise ValueError("AR parameters must be p+1 finite coefficients")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([[self.c], self.theta])

    def predict(self, design: np.ndarray) -> np.ndarray:
        return design @ self.vector


def ar_design(y: np.ndarray, p: int):
    """Design ``[1, y_{t-1}, ..., y_{t-1-p}]`` and target ``y_t`` for every
    ``t`` of the series; lags before the start are zero."""
    y = np.asarray(y, dtype=np.float64)
    T = len(y)
    X = np.ones((T, p + 2))
    padded = np.concatenate([np.zeros(p + 1), y])
    for i in range(p + 1):
        X[:, i + 1] = padded[p - i:p - i + T]
    return X, y


@dataclass(frozen=True)
class AblationConfig:
    window_sample_sizes: tuple = (2, 14, 27, 40, 53, 66, 80, 93, 106, 119, 132)
    learning_rates: tuple = (0.001, 0.005, 0.01, 0.05)
    max_steps: int = 15000
    lr_decay: float = 0.1
    lr_step: int = 1000
    batch_size: int = 1
    seed: int = 1
    quantile: float = 0.5
    ar_order: int = 12

    def lr_at(self, lr0: float, step: int) -> float:
        return lr0 * self.lr_decay ** (step // self.lr_step)


def ablation_panel(n_series: int = 50, length: int = 132, seed: int = 1, noise_std: float = 2.0) -> TimeSeriesPanel:
    """Synthetic monthly-style stand-in with seasonality 12."""
    return synthesize_panel(n_series, length, 12, noise_std, seed, FrequencyMeta("Monthly", 12, 18))


def _scaled_designs(panel: TimeSeriesPanel, p: int):
    Xs, ys = [], []
    for s in panel:
        v = s.values
        sd = v.std()
        X, y = ar_design((v - v.mean()) / (sd if sd > 0 else 1.0), p)
        Xs.append(X)
        ys.append(y)
    lengths = {len(y) for y in ys}
    if len(lengths) != 1:
        raise ValueError("the ablation expects equal-length series")
    return np.stack(Xs), np.stack(ys)


def _median_grad(X, y, w, q):
    r = y - X @ w
    g = np.where(r > 0, -q, np.where(r < 0, 1.0 - q, 0.0))
    return X.T @ g / len(y)


def _panel_loss(X, y, w, q):
    r = y - np.einsum("btk,k->bt", X, w)
    return float(np.maximum(q * r, (q - 1.0) * r).mean())


def train_ar(X, y, sample_size: int, lr0: float, cfg: AblationConfig, rng: np.random.Generator):
    """SGD on the quantile loss of ``sample_size`` FCDs of ``batch_size`` random
    series per step.  The trajectory holds the full-panel loss after each step."""
    B, N, k = X.shape
    if not 1 <= sample_size <= N:
        raise ValueError(f"sample size must lie in [1, {N}]")
    w = np.zeros(k)
    traj = LossTrajectory()
    q = cfg.quantile
    for step in range(cfg.max_steps):
        lr = cfg.lr_at(lr0, step)
        g = np.zeros(k)
        for b in rng.integers(0, B, size=cfg.batch_size):
            idx = rng.choice(N, size=sample_size, replace=False) if sample_size < N else np.arange(N)
            g += _median_grad(X[b, idx], y[b, idx], w, q)
        g /= cfg.batch_size
        w = w - lr * g
        loss = _panel_loss(X, y, w, q)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", traj)
        traj.append(step, loss, lr, float(np.linalg.norm(g)))
    return w, traj


def ar_convergence_ablation(cfg: AblationConfig, data: TimeSeriesPanel, sample_sizes=None, learning_rates=None):
    """Train one AR model per (sample size, lr) cell.

    Returns ``{(n, lr): LossTrajectory}``; a diverging cell maps to the
    :class:`DivergenceError` it raised and the rest of the grid still runs.
    Each cell's RNG is seeded from ``(cfg.seed, cell index)``.
    """
    sizes = cfg.window_sample_sizes if sample_sizes is None else sample_sizes
    lrs = cfg.learning_rates if learning_rates is None else learning_rates
    X, y = _scaled_designs(data, cfg.ar_order)
    out = {}
    cell = 0
    for lr in lrs:
        for n in sizes:
            rng = np.random.default_rng([cfg.seed, cell])
            cell += 1
            try:
                out[(n, lr)] = train_ar(X, y, min(n, X.shape[1]), lr, cfg, rng)[1]
            except DivergenceError as exc:
                out[(n, lr)] = exc
    return out


def steps_to_fraction(traj: LossTrajectory, factor: float = 1.1) -> int:
    """First step whose loss is within ``factor`` of the final loss."""
    loss = np.asarray(traj.loss)
    return int(traj.step[int(np.argmax(loss <= factor * loss[-1]))])


def frozen_gradient_variance(data: TimeSeriesPanel, sample_sizes: Sequence[int], cfg: AblationConfig = AblationConfig(),
                             w=None, draws: int = 2000, seed: int = 0):
    """Variance of the sampled-FCD gradient at a fixed parameter point.

    For every series, ``draws`` FCD subsets of each size are drawn without
    replacement; the per-series trace variance around the full-FCD gradient
    is averaged over series.  Returns ``(n, variance)`` pairs.
    """
    X, y = _scaled_designs(data, cfg.ar_order)
    B, N, k = X.shape
    w = np.zeros(k) if w is None else np.asarray(w, dtype=np.float64)
    q = cfg.quantile
    rng = np.random.default_rng(seed)
    out = []
    for n in sample_sizes:
        acc = 0.0
        for b in range(B):
            r = y[b] - X[b] @ w
            per = X[b] * np.where(r > 0, -q, np.where(r < 0, 1.0 - q, 0.0))[:, None]  # (N, k)
            full = per.mean(axis=0)
            sel = np.argsort(rng.random((draws, N)), axis=1)[:, :n]
            est = per[sel].mean(axis=1)
            acc += ((est - full) ** 2).sum(axis=1).mean()
        out.append((int(n), acc / B))
    return out


def fcd_count_gradient_variance(sizes: Sequence[int], reps: int = 2000, phi: float = 0.5, p: int = 2,
                                w=None, seed: int = 0, quantile: float = 0.5):
    """Variance of the full-FCD gradient as the number of FCDs grows.

    Each rep draws a fresh stationary AR(1) series; the median-loss gradient
    of a frozen AR(``p``) model is averaged over its first ``n`` FCDs.  Trace
    variances across reps are returned as ``(n, variance)`` pairs.
    """
    sizes = [int(n) for n in sizes]
    if reps < 50 or min(sizes) < 1:
        raise ValueError("need reps >= 50 and positive sizes")
    rng = np.random.default_rng(seed)
    N, burn = max(sizes), 200
    e = rng.normal(size=(reps, N + p + 1 + burn))
    y = np.zeros_like(e)
    for t in range(1, e.shape[1]):
        y[:, t] = phi * y[:, t - 1] + e[:, t]
    y = y[:, burn:]
    w = np.zeros(p + 2) if w is None else np.asarray(w, dtype=np.float64)
    idx = np.asarray(sizes) - 1
    sums = np.empty((reps, len(sizes), p + 2))
    for r in range(reps):
        X, target = ar_design(y[r], p)
        X, target = X[p + 1:], target[p + 1:]
        res = target - X @ w
        g = X * np.where(res > 0, -quantile, np.where(res < 0, 1.0 - quantile, 0.0))[:, None]
        sums[r] = np.cumsum(g, axis=0)[idx]
    means = sums / np.asarray(sizes)[None, :, None]
    return list(zip(sizes, means.var(axis=0, ddof=1).sum(axis=-1).tolist()))


def without_replacement_variance(per_fcd: np.ndarray, n: int) -> float:
    """Exact trace variance of the mean of ``n`` rows drawn without replacement."""
    N = per_fcd.shape[0]
    s2 = ((per_fcd - per_fcd.mean(axis=0)) ** 2).sum() / (N - 1)
    return float(s2 / n * (N - n) / N)


# ---------------------------------------------------------------------------
# CSV outputs
# ---------------------------------------------------------------------------


def write_pairs_csv(pairs, header, path, extra=None) -> None:
    """Rows of ``pairs``; ``extra`` prepends fixed leading columns (e.g. M)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for lead, rows in (extra or [((), pairs)]):
            for x, v in rows:
                w.writerow(list(lead) + [x, repr(float(v))])


def write_ablation_csv(results: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_size", "lr", "step", "loss"])
        for (n, lr), traj in results.items():
            if isinstance(traj, Exception):
                traj = traj.trajectory or LossTrajectory()
            for s, l in zip(traj.step, traj.loss):
                w.writerow([n, repr(lr), s, repr(l)])
