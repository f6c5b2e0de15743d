"""Temporal cross-validation forecasts and forking-sequences ensembling.

``cross_val_forecast`` issues forecasts at every FCD of a contiguous range
under one of three schemes:

* ``fs``: one encoder pass per series, decoded at every FCD;
* ``ws_restricted``: one encoder pass per FCD over the trailing ``L`` values;
* ``ws_full``: one encoder pass per FCD over the whole prefix.

``ensemble`` then averages, for each target date, the forecasts issued for
it from earlier FCDs at longer horizons.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .decoder import ForecastGrid
from .errors import ShapeError
from .model import MQForecaster
from .panel import TimeSeriesPanel
from .training import PreparedPanel

SCHEMES = ("fs", "ws_restricted", "ws_full")
METHODS = ("moving_average", "moving_median", "cumulative_average")


# ---------------------------------------------------------------------------
# Available sets and ensembling
# ---------------------------------------------------------------------------


@dataclass
class AvailableSet:
    target_date: int
    min_horizon: int
    members: list = field(default_factory=list)

    def __len__(self):
        return len(self.members)


def available_set(tau: int, eta: int, T: int, H: int) -> AvailableSet:
    """All ``(t, h)`` with ``t + h = tau``, ``h >= eta``, ``1 <= t <= T``, ``1 <= h <= H``."""
    if not 1 <= eta <= H:
        raise ValueError(f"min horizon must lie in [1, {H}], got {eta}")
    lo = max(1, tau - H)
    hi = min(T, tau - eta)
    return AvailableSet(tau, eta, [(t, tau - t) for t in range(lo, hi + 1)])


@dataclass(frozen=True)
class EnsembleSpec:
    """``window`` counts the most recent FCDs used by the rolling methods;
    ``None`` means the grid horizon H.  The cumulative method is unbounded."""

    method: str = "moving_average"
    window: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown ensemble method {self.method!r}; choose from {METHODS}")
        if self.window is not None and self.window < 1:
            raise ValueError("ensemble window must be >= 1")

    def span(self, H: int) -> int:
        """Number of lags that can contribute; more than H adds no members."""
        if self.method == "cumulative_average" or self.window is None:
            return H
        return min(self.window, H)


def ensemble_members(values: np.ndarray, span: int) -> np.ndarray:
    """Stack of lagged member forecasts, NaN where a member is unavailable.

    Entry ``[k, b, t, h]`` is the forecast issued at FCD ``t - k`` for horizon
    ``h + k``, i.e. for the same target date as cell ``(t, h)``.
    """
    B, T, H = values.shape[:3]
    out = np.full((span,) + values.shape, np.nan)
    for k in range(span):
        if k >= T or k >= H:
            break
        out[k, :, k:, : H - k] = values[:, : T - k, k:]
    return out


def ensemble(grid: ForecastGrid, spec: EnsembleSpec = EnsembleSpec(), min_horizon: int = 1) -> ForecastGrid:
    """Ensembled grid; cell ``(t, h)`` holds the aggregate for target ``t + h``.

    Members come only from FCDs inside the grid.  Cells with ``h <
    min_horizon`` are passed through unchanged.
    """
    if not 1 <= min_horizon <= grid.H:
        raise ValueError(f"min_horizon must lie in [1, {grid.H}]")
    stack = ensemble_members(grid.values, spec.span(grid.H))
    if spec.method == "moving_median":
        agg = np.nanmedian(stack, axis=0)
    else:
        # shifted mean: exact on constant members, where sum/count may round
        ref = stack[0]
        agg = ref + np.nanmean(stack - ref, axis=0)
    out = grid.values.copy()
    out[:, :, min_horizon - 1:] = agg[:, :, min_horizon - 1:]
    return grid.replace_values(out)


def write_ensemble_metadata(spec: EnsembleSpec, min_horizon: int, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"ensemble": asdict(spec), "min_horizon": min_horizon}, fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# Cross-validation forecasts
# ---------------------------------------------------------------------------


def _resolve(panel):
    if isinstance(panel, PreparedPanel):
        return panel.scaled, panel.splits, panel.scale
    if isinstance(panel, TimeSeriesPanel):
        return panel, None, None
    raise TypeError("panel must be a TimeSeriesPanel or PreparedPanel")


def _fcd_bounds(series, splits, fcd_range):
    """Per-series inclusive 1-based FCD bounds."""
    if isinstance(fcd_range, str):
        if splits is None:
            raise ValueError("phase-named FCD ranges need a prepared panel")
        bounds = [sp.fcd_range(fcd_range) for sp in splits]
    else:
        bounds = [tuple(fcd_range)] * len(series)
    n = {hi - lo + 1 for lo, hi in bounds}
    if len(n) != 1 or n.pop() < 1:
        raise ShapeError("every series needs the same, nonempty number of FCDs")
    for s, (lo, hi) in zip(series, bounds):
        if lo < 1 or hi > len(s):
            raise ShapeError(f"FCD range [{lo}, {hi}] outside series {s.id!r} of length {len(s)}")
    return bounds


def _static_rows(series, rows):
    st = [series[i].static_covariate for i in rows]
    if any(s is None for s in st):
        return None
    return np.stack([np.atleast_1d(np.asarray(s, dtype=np.float64)) for s in st])


def cross_val_forecast(model: MQForecaster, panel: Union[TimeSeriesPanel, PreparedPanel], scheme: str,
                       fcd_range, L: Optional[int] = None) -> ForecastGrid:
    """Forecasts at every FCD of ``fcd_range`` (an inclusive 1-based ``(lo, hi)``
    pair, or a phase name resolved per series from the panel's splits).

    FCD ``t`` conditions on observations ``1..t``.  The returned grid lives in
    the panel's units and carries the scale parameters of a prepared panel.
    Encoder invocations are counted under ``encoder_calls``.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    if scheme == "ws_restricted" and (L is None or L < 1):
        raise ValueError("ws_restricted needs a positive window length L")
    pnl, splits, scale = _resolve(panel)
    series = pnl.series
    bounds = _fcd_bounds(series, splits, fcd_range)
    n_fcd = bounds[0][1] - bounds[0][0] + 1
    B, H, Q = len(series), model.H, len(model.quantiles)
    out = np.empty((B, n_fcd, H, Q))
    with ad.no_grad():
        if scheme == "fs":
            # batch series whose encoded prefix has equal length (no padding)
            groups = {}
            for i, (lo, hi) in enumerate(bounds):
                groups.setdefault(hi, []).append(i)
            for hi, rows in groups.items():
                x = np.stack([series[i].values[:hi] for i in rows])[..., None]
                ad.count("encoder_calls", len(rows))
                pred = model.forward_full(x, _static_rows(series, rows)).data
                for r, i in enumerate(rows):
                    lo = bounds[i][0]
                    out[i] = pred[r, lo - 1:hi]
        else:
            for j in range(n_fcd):
                # series grouped by window length so each batch is exact
                groups = {}
                for i, (lo, _) in enumerate(bounds):
                    t = lo + j
                    start = 0 if scheme == "ws_full" else max(0, t - L)
                    groups.setdefault(t - start, []).append((i, start, t))
                for items in groups.values():
                    w = np.stack([series[i].values[s:t] for i, s, t in items])[..., None]
                    rows = [i for i, _, _ in items]
                    ad.count("encoder_calls", len(rows))
                    pred = model.forward_windows(w, _static_rows(series, rows)).data
                    out[rows, j] = pred
    offsets = np.array([lo - 1 for lo, _ in bounds])
    return ForecastGrid(out, tuple(model.quantiles), int(offsets[0]), pnl.ids, offsets, scale)


def targets_for(grid: ForecastGrid, panel: Union[TimeSeriesPanel, PreparedPanel], scaled: bool = False):
    """Observed targets aligned with ``grid`` and a mask of in-series cells.

    Returns ``(targets (B, T, H), mask (B, T, H))``; cells whose target date
    lies past the end of the series are masked out and hold 0.
    """
    pnl, _, _ = _resolve(panel)
    if isinstance(panel, PreparedPanel) and not scaled:
        pnl = panel.raw
    y = np.zeros(grid.values.shape[:3])
    m = np.zeros(grid.values.shape[:3], dtype=bool)
    for b, s in enumerate(pnl.series):
        fcds = grid.fcds(b)
        for h in range(1, grid.H + 1):
            idx = fcds + h
            ok = idx <= len(s)
            y[b, ok, h - 1] = s.values[idx[ok] - 1]
            m[b, ok, h - 1] = True
    return y, m


# ---------------------------------------------------------------------------
# Analytic cost model
# ---------------------------------------------------------------------------

_FAMILY_KIND = {"cnn": "conv", "conv": "conv", "rnn": "rnn", "lstm": "rnn",
                "transformer": "attention", "attention": "attention", "mlp": "mlp"}

# (exponent of T, exponent of L) per scheme and encoder kind, as tabulated
# for temporal cross-validation inference.
COMPLEXITY_TABLE = {
    ("fs", "conv"): (1, 0), ("fs", "rnn"): (1, 0), ("fs", "attention"): (2, 0), ("fs", "mlp"): (1, 1),
    ("ws_restricted", "conv"): (1, 1), ("ws_restricted", "rnn"): (1, 1),
    ("ws_restricted", "attention"): (2, 1), ("ws_restricted", "mlp"): (1, 1),
    ("ws_full", "conv"): (2, 0), ("ws_full", "rnn"): (2, 0), ("ws_full", "attention"): (3, 0),
    ("ws_full", "mlp"): (2, 0),
}


def table_order(scheme: str, family: str) -> tuple:
    try:
        return COMPLEXITY_TABLE[(scheme, _FAMILY_KIND[family])]
    except KeyError:
        raise ValueError(f"no complexity entry for ({scheme!r}, {family!r})") from None


def analytic_op_count(scheme: str, family: str, T: int, L: int = 1) -> int:
    """Leading-order operation count ``T**a * L**b`` (unit constant)."""
    a, b = table_order(scheme, family)
    return int(T) ** a * int(L) ** b
