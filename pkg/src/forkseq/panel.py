"""Panel time-series data: loading, synthesis, temporal splits, scaling, masks.

Indices follow the 1-based inclusive convention used throughout the package:
a series of length ``T`` has observations ``1..T`` and a forecast created at
date ``t`` predicts targets ``t+1 .. t+H``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import DuplicateError, FormatError, ParseError, SeriesTooShort

logger = logging.getLogger(__name__)

PHASES = ("train", "validation", "test")


@dataclass(frozen=True)
class FrequencyMeta:
    name: str
    seasonality: int
    horizon: int

    def __post_init__(self):
        if self.seasonality < 1 or self.horizon < 1:
            raise ValueError("seasonality and horizon must be positive")


# (seasonality, horizon) per competition frequency.
FREQUENCIES = {
    "Monthly": FrequencyMeta("Monthly", 12, 18),
    "Quarterly": FrequencyMeta("Quarterly", 4, 8),
    "Yearly": FrequencyMeta("Yearly", 1, 6),
    "Other": FrequencyMeta("Other", 4, 8),
    "Hourly": FrequencyMeta("Hourly", 24, 48),
    "Daily": FrequencyMeta("Daily", 1, 14),
    "Weekly": FrequencyMeta("Weekly", 1, 13),
}


@dataclass
class SeriesRecord:
    id: str
    values: np.ndarray
    static_covariate: Optional[np.ndarray] = None
    # Future-known covariates are not used by the univariate datasets; the slot
    # is kept so the feature triple (past, future, static) stays explicit.
    future_covariates: Optional[np.ndarray] = None
    ds: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.values)


@dataclass
class TimeSeriesPanel:
    series: list
    frequency: FrequencyMeta
    report: list = field(default_factory=list)

    def __post_init__(self):
        ids = [s.id for s in self.series]
        if len(set(ids)) != len(ids):
            raise DuplicateError("series ids must be unique within a panel")
        for s in self.series:
            s.values = np.asarray(s.values, dtype=np.float64)
            if not np.all(np.isfinite(s.values)):
                raise ParseError(f"series {s.id!r} contains non-finite values")

    def __len__(self):
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    @property
    def ids(self):
        return [s.id for s in self.series]

    @property
    def horizon(self):
        return self.frequency.horizon

    def lengths(self):
        return np.array([len(s) for s in self.series])


@dataclass(frozen=True)
class SplitSpec:
    """Inclusive 1-based boundaries: train ``1..train_end``,
    validation ``train_end+1..val_end``, test ``val_end+1..series_end``."""

    train_end: int
    val_end: int
    series_end: int
    H: int

    def phase_range(self, phase: str) -> tuple[int, int]:
        """Inclusive range of observation indices belonging to ``phase``."""
        if phase == "train":
            return 1, self.train_end
        if phase == "validation":
            return self.train_end + 1, self.val_end
        if phase == "test":
            return self.val_end + 1, self.series_end
        raise ValueError(f"unknown phase {phase!r}")

    def fcd_range(self, phase: str) -> tuple[int, int]:
        """Inclusive range of forecast creation dates scored in ``phase``.

        Train uses every date up to ``train_end``; validation is a single
        origin at ``train_end`` covering the validation span; test uses the
        ``H`` dates ``val_end+1 .. series_end-H``, each with a full window.
        """
        if phase == "train":
            return 1, self.train_end
        if phase == "validation":
            return self.train_end, self.val_end - self.H
        if phase == "test":
            return self.val_end + 1, self.series_end - self.H
        raise ValueError(f"unknown phase {phase!r}")

    def target_limit(self, phase: str) -> int:
        """Last observation index a target of ``phase`` may point to."""
        return self.phase_range(phase)[1]


@dataclass(frozen=True)
class ScaleParams:
    mean: float
    std: float

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


# ---------------------------------------------------------------------------
# Loading and writing
# ---------------------------------------------------------------------------


def _parse_ds(col: pd.Series) -> pd.Series:
    as_num = pd.to_numeric(col, errors="coerce")
    if as_num.notna().all():
        return as_num
    try:
        return pd.to_datetime(col, format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise ParseError(f"ds column is neither integer index nor ISO-8601 date: {exc}") from exc


def load_long_panel(path, meta: FrequencyMeta, min_length: Optional[int] = None) -> TimeSeriesPanel:
    """Read a long-format ``unique_id,ds,y`` CSV into a panel.

    Series shorter than ``min_length`` (default ``2H+1``) are dropped and listed in ``panel.report`` as
    ``(unique_id, status, reason)`` rows.
    """
    try:
        df = pd.read_csv(path, dtype={"unique_id": str}, keep_default_na=False, float_precision="round_trip")
    except pd.errors.EmptyDataError as exc:
        raise FormatError(f"{path}: empty file") from exc
    missing = {"unique_id", "ds", "y"} - set(df.columns)
    if missing:
        raise FormatError(f"{path}: missing column(s) {sorted(missing)}")
    y = pd.to_numeric(df["y"], errors="coerce")
    bad = y.isna() | ~np.isfinite(y.fillna(0.0))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError(f"{path}: non-numeric y {df['y'].iloc[row]!r} at data row {row + 1}")
    df = df.assign(y=y.astype(float), ds=_parse_ds(df["ds"].astype(str)))
    dup = df.duplicated(["unique_id", "ds"])
    if dup.any():
        r = df[dup].iloc[0]
        raise DuplicateError(f"{path}: duplicate timestamp {r['ds']} for series {r['unique_id']!r}")
    df = df.sort_values(["unique_id", "ds"], kind="stable")
    min_length = 2 * meta.horizon + 1 if min_length is None else min_length
    series, report = [], []
    for uid, grp in df.groupby("unique_id", sort=False):
        vals = grp["y"].to_numpy(dtype=float)
        if len(vals) < min_length:
            report.append((uid, "dropped", f"length {len(vals)} < {min_length}"))
            continue
        series.append(SeriesRecord(uid, vals, ds=grp["ds"].to_numpy()))
        report.append((uid, "loaded", ""))
    n_dropped = sum(1 for r in report if r[1] == "dropped")
    if n_dropped:
        logger.warning("dropped %d series shorter than %d", n_dropped, min_length)
    return TimeSeriesPanel(series, meta, report)


def _fmt_ds(v):
    if isinstance(v, (np.datetime64, pd.Timestamp)):
        return pd.Timestamp(v).date().isoformat() if pd.Timestamp(v) == pd.Timestamp(v).normalize() \
            else pd.Timestamp(v).isoformat()
    if isinstance(v, (float, np.floating)) and float(v).is_integer():
        return str(int(v))
    return str(v)


def write_long_panel(panel: TimeSeriesPanel, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["unique_id", "ds", "y"])
        for s in panel:
            ds = s.ds if s.ds is not None else np.arange(1, len(s) + 1)
            for d, v in zip(ds, s.values):
                w.writerow([s.id, _fmt_ds(d), repr(float(v))])


def write_load_report(panel: TimeSeriesPanel, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["unique_id", "status", "reason"])
        w.writerows(panel.report)


# ---------------------------------------------------------------------------
# Splits, masks, scaling
# ---------------------------------------------------------------------------


def temporal_split(T: int, H: int) -> SplitSpec:
    """Train ``[1..T-3H]``, validation ``[T-3H+1..T-2H]``, test ``[T-2H+1..T]``."""
    if H < 1:
        raise ValueError("H must be positive")
    if T < 3 * H + 1:
        raise SeriesTooShort(f"series of length {T} cannot be split with H={H} (need >= {3 * H + 1})")
    return SplitSpec(train_end=T - 3 * H, val_end=T - 2 * H, series_end=T, H=H)


def build_target_mask(split: SplitSpec, T: int, H: int, phase: str) -> np.ndarray:
    """Boolean grid ``mask[t-1, h-1]`` over FCDs ``t=1..T`` and horizons ``h=1..H``.

    True iff ``t`` is in the phase's FCD range and the target ``t+h`` stays
    within the phase (never reaching a later phase).
    """
    lo, hi = split.fcd_range(phase)
    limit = split.target_limit(phase)
    t = np.arange(1, T + 1)[:, None]
    h = np.arange(1, H + 1)[None, :]
    return (t >= lo) & (t <= hi) & (t + h <= limit) & (t + h <= T)


def standard_scale(panel: TimeSeriesPanel, splits: Sequence[SplitSpec]):
    """Standardise each series with mean/std of its train segment.

    Population std is used, clamped to ``max(std, 1e-8 |mean| + 1e-8)``; a
    constant train segment gets std 1.
    """
    if isinstance(splits, SplitSpec):
        splits = [splits] * len(panel)
    out, params = [], []
    for s, sp in zip(panel, splits):
        train = s.values[: sp.train_end]
        if len(train) == 0:
            raise ValueError(f"series {s.id!r} has an empty train segment")
        mean = float(train.mean())
        std = float(train.std())
        if std == 0.0:
            std = 1.0
        std = max(std, 1e-8 * abs(mean) + 1e-8)
        sc = ScaleParams(mean, std)
        params.append(sc)
        out.append(replace(s, values=sc.transform(s.values)))
    return TimeSeriesPanel(out, panel.frequency, list(panel.report)), params


def unscale_panel(panel: TimeSeriesPanel, params: Sequence[ScaleParams]) -> TimeSeriesPanel:
    out = [replace(s, values=p.inverse(s.values)) for s, p in zip(panel, params)]
    return TimeSeriesPanel(out, panel.frequency, list(panel.report))


def split_panel(panel: TimeSeriesPanel) -> list[SplitSpec]:
    return [temporal_split(len(s), panel.horizon) for s in panel]


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def synthesize_panel(n_series: int, length: int, seasonality: int, noise_std: float, seed: int,
                     meta: Optional[FrequencyMeta] = None) -> TimeSeriesPanel:
    """Trend + sinusoidal seasonality + Gaussian noise, one draw of shape
    parameters per series.  Fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    series = []
    for i in range(n_series):
        level = rng.uniform(50.0, 150.0)
        slope = rng.uniform(-0.2, 0.4)
        amp = rng.uniform(5.0, 20.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        signal = level + slope * t
        if seasonality > 1:
            signal = signal + amp * np.sin(2 * np.pi * t / seasonality + phase)
        noise = rng.normal(0.0, noise_std, size=length) if noise_std > 0 else 0.0
        series.append(SeriesRecord(f"S{i:04d}", signal + noise, ds=np.arange(1, length + 1)))
    if meta is None:
        meta = FrequencyMeta("Synthetic", max(seasonality, 1), max(1, (length - 1) // 3))
    return TimeSeriesPanel(series, meta)
