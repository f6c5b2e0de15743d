"""End-to-end helpers shared by the command line and the acceptance suite."""

from __future__ import annotations

from typing import Optional

from .decoder import DecoderSpec
from .encoders import EncoderSpec
from .inference import EnsembleSpec, cross_val_forecast, ensemble, targets_for
from .metrics import evaluate_grid
from .model import MQForecaster
from .panel import FREQUENCIES, TimeSeriesPanel, load_long_panel, synthesize_panel
from .training import PreparedPanel, TrainConfig, train


def load_panel(data: str, frequency: str = "Monthly", n_series: int = 100, length: int = 180,
               noise_std: float = 4.0, data_seed: int = 0) -> TimeSeriesPanel:
    """CSV panel, or a synthetic one when ``data == "synthetic"``."""
    meta = FREQUENCIES[frequency]
    if data == "synthetic":
        return synthesize_panel(n_series, length, meta.seasonality, noise_std, data_seed, meta)
    return load_long_panel(data, meta)


def make_config(scheme: str, family: str, H: int, hidden: int = 32, steps: int = 3000,
                batch_size: int = 8, lr: float = 0.001, lr_step: int = 10000, lr_decay: float = 0.1,
                window_length: Optional[int] = None, optimizer: str = "sgd", seed: int = 0,
                quantiles=None) -> TrainConfig:
    enc = EncoderSpec.default(family, H, hidden=hidden)
    dec = DecoderSpec(H) if quantiles is None else DecoderSpec(H, quantiles=tuple(quantiles))
    return TrainConfig(scheme, enc, dec, batch_size=batch_size, lr0=lr, max_steps=steps, lr_decay=lr_decay,
                       lr_step=lr_step, window_length=window_length, seed=seed, optimizer=optimizer)


def holdout_forecasts(model: MQForecaster, prep: PreparedPanel, scheme: str = "fs"):
    """Unscaled test-phase grid with aligned raw targets and mask."""
    grid = cross_val_forecast(model, prep, scheme, "test").unscaled()
    y, m = targets_for(grid, prep)
    return grid, y, m


def evaluate_model(model: MQForecaster, prep: PreparedPanel, spec: Optional[EnsembleSpec] = EnsembleSpec()):
    """Test metrics of the raw and (optionally) ensembled forecasts.

    Returns ``{"raw": {metric: (value, n_terms)}, "ensembled": {...}}``.
    """
    grid, y, m = holdout_forecasts(model, prep)
    out = {"raw": evaluate_grid(y, grid, m)}
    if spec is not None:
        out["ensembled"] = evaluate_grid(y, ensemble(grid, spec), m)
    return out


def run_seed(prep: PreparedPanel, cfg: TrainConfig, spec: Optional[EnsembleSpec] = EnsembleSpec()):
    model, traj = train(prep, cfg)
    return model, traj, evaluate_model(model, prep, spec)
