"""Model estimation under the forking-sequences and window-sampling schemes.

Forking-sequences (``fs``) encodes each sampled series once and averages the
quantile loss over every masked (FCD, horizon) cell of the train segment.
Window-sampling (``ws``) draws individual forecast creation dates, encodes
the window of length ``L`` that ends at each of them, and averages the loss
of those windows only.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .decoder import DecoderSpec, ForecastGrid
from .encoders import UNBOUNDED, EncoderSpec, receptive_field
from .errors import DivergenceError, EmptyLossError, SamplerError, SeriesTooShort
from .model import MQForecaster
from .panel import SplitSpec, TimeSeriesPanel, standard_scale, temporal_split

logger = logging.getLogger(__name__)

SCHEMES = ("fs", "ws")


@dataclass(frozen=True)
class TrainConfig:
    scheme: str
    encoder: EncoderSpec
    decoder: DecoderSpec
    batch_size: int = 8
    lr0: float = 0.001
    max_steps: int = 30000
    lr_decay: float = 0.1
    lr_step: int = 10000
    window_length: Optional[int] = None
    seed: int = 0
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if min(self.batch_size, self.max_steps, self.lr_step) < 1 or self.lr0 <= 0:
            raise ValueError("batch_size, max_steps, lr_step and lr0 must be positive")

    @property
    def L(self) -> int:
        """Window length for window-sampling: ``max(receptive field, 2H)``,
        or ``2H`` for encoders whose receptive field is unbounded."""
        if self.window_length is not None:
            return self.window_length
        rf = receptive_field(self.encoder)
        two_h = 2 * self.decoder.H
        return two_h if rf is UNBOUNDED else max(int(rf), two_h)


@dataclass
class LossTrajectory:
    step: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)

    def append(self, step, loss, lr, grad_norm):
        if self.step and step <= self.step[-1]:
            raise ValueError("trajectory steps must be strictly increasing")
        self.step.append(int(step))
        self.loss.append(float(loss))
        self.lr.append(float(lr))
        self.grad_norm.append(float(grad_norm))

    def __len__(self):
        return len(self.step)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr", "grad_norm"])
            for row in zip(self.step, self.loss, self.lr, self.grad_norm):
                w.writerow([row[0]] + [repr(v) for v in row[1:]])


@dataclass
class PreparedPanel:
    """Panel restricted to splittable series, standard scaled on train segments."""

    raw: TimeSeriesPanel
    scaled: TimeSeriesPanel
    splits: list
    scale: list

    @property
    def H(self):
        return self.raw.horizon


def prepare_panel(panel: TimeSeriesPanel) -> PreparedPanel:
    """Split and scale; series too short for a split are dropped with a warning."""
    keep, splits = [], []
    for s in panel:
        try:
            splits.append(temporal_split(len(s), panel.horizon))
            keep.append(s)
        except SeriesTooShort:
            panel.report.append((s.id, "dropped", f"length {len(s)} < {3 * panel.horizon + 1}"))
    if len(keep) < len(panel):
        logger.warning("dropped %d series too short to split", len(panel) - len(keep))
    raw = TimeSeriesPanel(keep, panel.frequency, panel.report)
    scaled, scale = standard_scale(raw, splits)
    return PreparedPanel(raw, scaled, splits, scale)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def pinball(y: float, yhat: float, q: float) -> float:
    """Quantile loss of a single forecast."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile must lie in (0, 1)")
    d = y - yhat
    return max(q * d, (q - 1.0) * d)


def fs_loss(pred, targets, mask, quantiles):
    """Mean quantile loss over masked (b, t, h) cells and all quantiles.

    ``pred`` is a (B, T, H, Q) Tensor (result is a Tensor) or an array /
    :class:`ForecastGrid` (result is a float).  ``mask`` broadcasts against
    (B, T, H).
    """
    as_float = not isinstance(pred, Tensor)
    if isinstance(pred, ForecastGrid):
        pred = pred.values
    pred_t = ad.as_tensor(pred)
    targets = np.asarray(targets, dtype=np.float64)
    q = np.asarray(quantiles, dtype=np.float64)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), pred_t.shape[:-1])
    if not m.any():
        raise EmptyLossError("loss mask selects no (b, t, h) terms")
    y = np.where(m, targets, 0.0)[..., None]
    loss = ad.masked_mean(ad.pinball_elem(y, pred_t, q), m[..., None])
    return loss.item() if as_float else loss


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Step-decay schedule ``lr0 * decay ** floor(step / lr_step)``."""
    return cfg.lr0 * cfg.lr_decay ** (step // cfg.lr_step)


# ---------------------------------------------------------------------------
# Batch construction
# ---------------------------------------------------------------------------


def fs_batch(prep: PreparedPanel, idx, H: int):
    """Left-padded train segments of series ``idx`` with targets and mask.

    Returns ``x`` (B, T, 1), ``targets`` (B, T, H), ``mask`` (B, T, H) and the
    static covariates (or None).  Row ``t`` is FCD ``t+1`` after padding.
    """
    ends = [prep.splits[i].train_end for i in idx]
    T = max(ends)
    B = len(idx)
    x = np.zeros((B, T, 1))
    y = np.zeros((B, T, H))
    m = np.zeros((B, T, H), dtype=bool)
    for r, i in enumerate(idx):
        v = prep.scaled.series[i].values[: ends[r]]
        off = T - ends[r]
        x[r, off:, 0] = v
        for h in range(1, H + 1):
            # FCD position p (0-based within the series) targets value p + h.
            n = ends[r] - h
            if n <= 0:
                continue
            y[r, off:off + n, h - 1] = v[h:]
            m[r, off:off + n, h - 1] = True
    return x, y, m, _static(prep, idx)


def _static(prep, idx):
    st = [prep.scaled.series[i].static_covariate for i in idx]
    if any(s is None for s in st):
        return None
    return np.stack([np.asarray(s, dtype=np.float64) for s in st])


def valid_ws_fcds(split: SplitSpec, L: int, H: int) -> np.ndarray:
    """FCDs ``t >= L`` whose whole horizon stays inside the train segment."""
    return np.arange(L, split.train_end - H + 1)


def ws_sample(prep: PreparedPanel, L: int, batch_size: int, rng: np.random.Generator, H: Optional[int] = None):
    """Draw ``batch_size`` (series, FCD) pairs uniformly from all valid pairs.

    Returns ``(windows (B, L, 1), targets (B, H), pairs, static)``; each
    window is the contiguous slice ending at its FCD.
    """
    H = prep.H if H is None else H
    counts = np.array([len(valid_ws_fcds(sp, L, H)) for sp in prep.splits])
    total = int(counts.sum())
    if total == 0:
        raise SamplerError(f"no series has a valid FCD for window length {L} and horizon {H}")
    draws = rng.integers(0, total, size=batch_size)
    cum = np.cumsum(counts)
    windows = np.zeros((batch_size, L, 1))
    targets = np.zeros((batch_size, H))
    pairs = []
    for r, k in enumerate(draws):
        b = int(np.searchsorted(cum, k, side="right"))
        t = int(valid_ws_fcds(prep.splits[b], L, H)[k - (cum[b] - counts[b])])
        v = prep.scaled.series[b].values
        windows[r, :, 0] = v[t - L:t]
        targets[r] = v[t:t + H]
        pairs.append((b, t))
    return windows, targets, pairs, _static(prep, [b for b, _ in pairs])


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------


class SGD:
    def __init__(self, params: ParamStore):
        self.params = params

    def step(self, lr: float) -> None:
        for p in self.params.values():
            p.data -= lr * p.grad


class Adam:
    def __init__(self, params: ParamStore, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * p.grad
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * p.grad ** 2
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def step_loss(model: MQForecaster, prep: PreparedPanel, cfg: TrainConfig, rng: np.random.Generator):
    """Loss of one training step's batch under ``cfg.scheme``."""
    H, quantiles = model.H, model.quantiles
    if cfg.scheme == "fs":
        B = min(cfg.batch_size, len(prep.scaled))
        idx = np.sort(rng.choice(len(prep.scaled), size=B, replace=False))
        x, y, m, st = fs_batch(prep, idx, H)
        pred = model.forward_full(x, st, training=True, rng=rng)
        return fs_loss(pred, y, m, quantiles)
    windows, targets, _, st = ws_sample(prep, cfg.L, cfg.batch_size, rng, H)
    pred = model.forward_windows(windows, st, training=True, rng=rng)
    return fs_loss(ad.reshape(pred, (pred.shape[0], 1, H, len(quantiles))), targets[:, None, :],
                   True, quantiles)


def train(prep: PreparedPanel, cfg: TrainConfig, model: Optional[MQForecaster] = None,
          callback=None):
    """Fit a model; returns ``(model, trajectory)``.

    Deterministic given ``cfg.seed``.  A non-finite loss raises
    :class:`DivergenceError` carrying the trajectory so far.
    """
    if model is None:
        d_static = 0
        st = prep.scaled.series[0].static_covariate if len(prep.scaled) else None
        if st is not None:
            d_static = len(np.atleast_1d(st))
        model = MQForecaster.build(cfg.encoder, cfg.decoder, seed=cfg.seed, d_static=d_static)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(model.params) if cfg.optimizer == "adam" else SGD(model.params)
    traj = LossTrajectory()
    for step in range(cfg.max_steps):
        lr = lr_at(step, cfg)
        model.params.zero_grad()
        loss = step_loss(model, prep, cfg, rng)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at step {step}", traj)
        ad.backward(loss, model.params)
        gnorm = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in model.params.values())))
        traj.append(step, value, lr, gnorm)
        if not math.isfinite(gnorm):
            raise DivergenceError(f"non-finite gradient at step {step}", traj)
        opt.step(lr)
        if callback is not None:
            callback(step, model, traj)
    return model, traj


def full_fcd_gradient(model: MQForecaster, prep: PreparedPanel, series: int, mask=None) -> np.ndarray:
    """Flat gradient of the forking-sequences loss of one series."""
    x, y, m, st = fs_batch(prep, [series], model.H)
    if mask is not None:
        m = m & np.asarray(mask, dtype=bool)
    model.params.zero_grad()
    ad.backward(fs_loss(model.forward_full(x, st), y, m, model.quantiles), model.params)
    return model.params.flat_grad()


def window_gradient(model: MQForecaster, prep: PreparedPanel, pairs, L: int) -> np.ndarray:
    """Flat gradient of the window-sampling loss over explicit (series, FCD) pairs."""
    H = model.H
    windows = np.zeros((len(pairs), L, 1))
    targets = np.zeros((len(pairs), H))
    for r, (b, t) in enumerate(pairs):
        v = prep.scaled.series[b].values
        windows[r, :, 0] = v[t - L:t]
        targets[r] = v[t:t + H]
    model.params.zero_grad()
    pred = model.forward_windows(windows)
    loss = fs_loss(ad.reshape(pred, (len(pairs), 1, H, len(model.quantiles))), targets[:, None, :],
                   True, model.quantiles)
    ad.backward(loss, model.params)
    return model.params.flat_grad()
