"""Forecast evaluation metrics: sCRPS, sQPC, MAE and the aggregate quantile loss."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .decoder import ForecastGrid
from .errors import UndefinedMetricError


def _values_and_quantiles(grid, quantiles):
    if isinstance(grid, ForecastGrid):
        return grid.values, np.asarray(grid.quantiles, dtype=np.float64)
    if quantiles is None:
        raise ValueError("quantiles are required when passing a raw array")
    return np.asarray(grid, dtype=np.float64), np.asarray(quantiles, dtype=np.float64)


def _pinball(y, yhat, q):
    d = y - yhat
    return np.maximum(q * d, (q - 1.0) * d)


def crps_from_quantiles(y: float, yhat_q, quantiles) -> float:
    """Quantile-average CRPS approximation ``(2/|Q|) sum_q pinball(y, yhat_q, q)``."""
    q = np.asarray(quantiles, dtype=np.float64)
    if np.any(np.diff(q) <= 0):
        raise ValueError("quantiles must be strictly increasing")
    return float(2.0 * _pinball(float(y), np.asarray(yhat_q, dtype=np.float64), q).mean())


def crps_cells(targets, grid, quantiles=None) -> np.ndarray:
    """Per-cell CRPS approximation over a (B, T, H) target array."""
    vals, q = _values_and_quantiles(grid, quantiles)
    y = np.asarray(targets, dtype=np.float64)[..., None]
    return 2.0 * _pinball(y, vals, q).mean(axis=-1)


def scrps(targets, grid, mask=None, quantiles=None) -> float:
    """Summed CRPS over masked cells divided by the summed absolute targets."""
    vals, q = _values_and_quantiles(grid, quantiles)
    y = np.asarray(targets, dtype=np.float64)
    m = np.ones(y.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, bool), y.shape)
    denom = np.abs(y[m]).sum()
    if not denom > 0:
        raise UndefinedMetricError("sCRPS is undefined when all masked targets are zero")
    return float(crps_cells(y, vals, q)[m].sum() / denom)


def sqpc(grid, q: float = 0.5, quantiles=None, literal: bool = False) -> float:
    """Symmetric quantile percentage change between consecutive FCDs.

    Compares the forecast from FCD ``t+1`` at horizon ``h`` with the one from
    FCD ``t`` at horizon ``h+1`` (same target date).  The sum is scaled by
    ``200/N`` with ``N`` the number of compared pairs, or by ``200/(B T H)``
    when ``literal`` is set.  Pairs whose values are both zero contribute 0.
    """
    if isinstance(grid, ForecastGrid):
        yq = grid.at_quantile(q)
    else:
        vals, qs = _values_and_quantiles(grid, quantiles)
        idx = int(np.argmin(np.abs(qs - q)))
        if abs(qs[idx] - q) > 1e-9:
            raise KeyError(f"quantile {q} not in grid")
        yq = vals[..., idx]
    B, T, H = yq.shape
    if T < 2 or H < 2:
        raise UndefinedMetricError("sQPC needs at least two FCDs and two horizons")
    new = yq[:, 1:, :-1]
    old = yq[:, :-1, 1:]
    num = np.abs(new - old)
    den = np.abs(new) + np.abs(old)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    n = B * T * H if literal else terms.size
    return float(200.0 * terms.sum() / n)


def mae(targets, grid, mask=None) -> float:
    """Mean absolute error of the median forecast (or of a (B, T, H) point grid)."""
    yhat = grid.at_quantile(0.5) if isinstance(grid, ForecastGrid) else np.asarray(grid, np.float64)
    y = np.asarray(targets, dtype=np.float64)
    m = np.ones(y.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, bool), y.shape)
    if not m.any():
        raise UndefinedMetricError("MAE needs at least one masked term")
    return float(np.abs(y - yhat)[m].mean())


def quantile_loss(targets, grid, mask=None, quantiles=None) -> float:
    """Mean pinball loss over masked cells and all quantiles."""
    vals, q = _values_and_quantiles(grid, quantiles)
    y = np.asarray(targets, dtype=np.float64)
    m = np.ones(y.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, bool), y.shape)
    if not m.any():
        raise UndefinedMetricError("quantile loss needs at least one masked term")
    return float(_pinball(y[..., None], vals, q).mean(axis=-1)[m].mean())


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_HEADER = ["dataset", "frequency", "model", "scheme", "metric", "mean", "stderr"]
SEED_HEADER = ["dataset", "frequency", "model", "scheme", "metric", "seed", "value", "n_terms"]


@dataclass
class EvalReport:
    """Per-seed metric values, summarised as mean and standard error."""

    per_seed: list = field(default_factory=list)

    def add(self, dataset, frequency, model, scheme, metric, seed, value, n_terms):
        if n_terms <= 0:
            raise UndefinedMetricError(f"{metric} reported with no terms")
        if value < 0:
            raise ValueError(f"{metric} must be nonnegative, got {value}")
        self.per_seed.append(dict(dataset=dataset, frequency=frequency, model=model, scheme=scheme,
                                  metric=metric, seed=seed, value=float(value), n_terms=int(n_terms)))

    def summary(self) -> list:
        """Rows keyed by (dataset, frequency, model, scheme, metric); stderr is
        ``None`` for a single seed."""
        groups = {}
        for r in self.per_seed:
            key = tuple(r[k] for k in REPORT_HEADER[:5])
            groups.setdefault(key, []).append(r["value"])
        rows = []
        for key, vals in groups.items():
            v = np.asarray(vals)
            se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else None
            rows.append(dict(zip(REPORT_HEADER[:5], key), mean=float(v.mean()), stderr=se))
        return rows

    def mean(self, model, scheme, metric) -> float:
        for r in self.summary():
            if (r["model"], r["scheme"], r["metric"]) == (model, scheme, metric):
                return r["mean"]
        raise KeyError((model, scheme, metric))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_HEADER)
            for r in self.summary():
                w.writerow([r[k] for k in REPORT_HEADER[:5]]
                           + [repr(r["mean"]), "" if r["stderr"] is None else repr(r["stderr"])])

    def seeds_to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(SEED_HEADER)
            for r in self.per_seed:
                w.writerow([r[k] for k in SEED_HEADER[:6]] + [repr(r["value"]), r["n_terms"]])


def evaluate_grid(targets, grid: ForecastGrid, mask) -> dict:
    """sCRPS, sQPC (median) and MAE for one grid, with term counts."""
    m = np.broadcast_to(np.asarray(mask, bool), grid.values.shape[:3])
    return {
        "scrps": (scrps(targets, grid, m), int(m.sum())),
        "sqpc": (sqpc(grid, 0.5), grid.B * (grid.T - 1) * (grid.H - 1)),
        "mae": (mae(targets, grid, m), int(m.sum())),
    }
