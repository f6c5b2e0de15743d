"""Scaling benchmark of cross-validation inference under the three schemes.

Every measurement pairs median wall-clock time with exact per-primitive
work counters; exponents are fitted on log-log scales.
"""

from __future__ import annotations

import csv
import json
import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .decoder import DecoderSpec
from .encoders import UNBOUNDED, EncoderSpec, receptive_field
from .errors import ContractError
from .inference import cross_val_forecast, table_order
from .model import MQForecaster
from .panel import FrequencyMeta, SeriesRecord, TimeSeriesPanel
from .theory import loglog_slope

# categories that measure encoder work (call counts are bookkeeping)
WORK_CATEGORIES = ("affine", "conv", "recurrent", "lstm", "attention", "window", "encoder_input")

BENCH_HEADER = ["family", "scheme", "T", "median_seconds", "op_count"]


@dataclass
class BenchRow:
    T: int
    repetitions: int
    median_seconds: float
    op_count: int
    counts: dict


@dataclass
class BenchResult:
    family: str
    scheme: str
    L: Optional[int]
    rows: list = field(default_factory=list)

    @property
    def T(self):
        return [r.T for r in self.rows]


def bench_model(family: str, H: int = 18, hidden: int = 48, seed: int = 0) -> MQForecaster:
    """Encoder at its default depth with a single-quantile decoder."""
    enc = EncoderSpec.default(family, H, hidden=hidden, dropout=0.0)
    dec = DecoderSpec(H, agnostic_dim=16, specific_dim=4, quantiles=(0.5,))
    return MQForecaster.build(enc, dec, seed=seed)


def default_window(model: MQForecaster) -> int:
    rf = receptive_field(model.encoder)
    return 2 * model.H if rf is UNBOUNDED else max(int(rf), 2 * model.H)


def _panel(T: int, seed: int, H: int) -> TimeSeriesPanel:
    values = np.random.default_rng(seed).normal(size=T)
    return TimeSeriesPanel([SeriesRecord("bench", values)], FrequencyMeta("bench", 1, H))


def check_equivalence(model: MQForecaster, scheme: str, T: int, L: Optional[int], seed: int = 0,
                      tol: float = 1e-12) -> float:
    """Max |FS - scheme| over FCDs where the schemes must agree; raises
    ContractError beyond ``tol``.  Returns NaN when no FCD qualifies."""
    family = model.encoder.family
    if scheme == "fs" or family not in ("rnn", "lstm", "cnn"):
        return float("nan")
    rf = receptive_field(model.encoder)
    if scheme == "ws_restricted" and (family != "cnn" or L < rf):
        return float("nan")
    start = 1 if family in ("rnn", "lstm") else int(rf)
    if scheme == "ws_restricted":
        start = max(start, L)
    if start > T:
        return float("nan")
    p = _panel(T, seed, model.H)
    a = cross_val_forecast(model, p, "fs", (start, T)).values
    b = cross_val_forecast(model, p, scheme, (start, T), L=L).values
    err = float(np.abs(a - b).max())
    if err > tol:
        raise ContractError(f"{family}/{scheme} disagrees with FS by {err:.3e}")
    return err


def run_scaling_bench(family: str, scheme: str, T_grid: Sequence[int], reps: int = 3, seed: int = 0,
                      hidden: int = 48, L: Optional[int] = None, H: int = 18, timed: bool = True,
                      verify: bool = True) -> BenchResult:
    """Forecast every FCD of one random series of each length in ``T_grid``.

    A counted warm-up run precedes ``reps`` timed runs (median reported).
    BLAS and OpenMP pools are held at one thread.  With ``timed=False`` only
    the counted run happens and times are NaN.
    """
    T_grid = [int(t) for t in T_grid]
    if len(T_grid) < 4 or any(b <= a for a, b in zip(T_grid, T_grid[1:])):
        raise ValueError("T_grid must be strictly increasing with at least 4 points")
    model = bench_model(family, H, hidden, seed)
    if scheme == "ws_restricted" and L is None:
        L = default_window(model)
    res = BenchResult(family, scheme, L)
    with threadpool_limits(limits=1):
        if verify:
            check_equivalence(model, scheme, min(T_grid), L, seed)
        for T in T_grid:
            p = _panel(T, seed, H)
            with ad.counting() as counter:
                cross_val_forecast(model, p, scheme, (1, T), L=L)
            times = []
            for _ in range(reps if timed else 0):
                t0 = time.perf_counter()
                cross_val_forecast(model, p, scheme, (1, T), L=L)
                times.append(time.perf_counter() - t0)
            counts = {k: v for k, v in counter.counts.items()}
            work = sum(counts.get(k, 0) for k in WORK_CATEGORIES)
            med = statistics.median(times) if times else float("nan")
            res.rows.append(BenchRow(T, len(times), med, int(work), counts))
    return res


def fit_exponent(result: BenchResult, use: str = "time"):
    """Log-log slope and r-squared of median time (or op count) against T."""
    x = np.asarray(result.T, dtype=np.float64)
    if use == "time":
        y = np.asarray([r.median_seconds for r in result.rows], dtype=np.float64)
    else:
        y = np.asarray([r.op_count for r in result.rows], dtype=np.float64)
    if len(x) < 4:
        raise ValueError("need at least 4 T points")
    slope = loglog_slope(np.column_stack([x, y]))
    lx, ly = np.log(x), np.log(y)
    pred = np.polyval(np.polyfit(lx, ly, 1), lx)
    ss_tot = ((ly - ly.mean()) ** 2).sum()
    r2 = 1.0 - ((ly - pred) ** 2).sum() / ss_tot if ss_tot > 0 else 1.0
    return slope, float(r2)


def counter_exponent(result: BenchResult) -> float:
    """Exponent of the fastest-growing work category (the leading-order term)."""
    best = -np.inf
    for cat in WORK_CATEGORIES:
        vals = [r.counts.get(cat, 0) for r in result.rows]
        if min(vals) <= 0:
            continue
        best = max(best, loglog_slope(list(zip(result.T, vals))))
    return float(best)


def expected_exponent(family: str, scheme: str) -> int:
    """Order in T from the tabulated complexity (L held fixed)."""
    return table_order(scheme, family)[0]


def write_bench_csv(results: Sequence[BenchResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_HEADER)
        for res in results:
            for r in res.rows:
                w.writerow([res.family, res.scheme, r.T, repr(r.median_seconds), r.op_count])


def machine_metadata() -> dict:
    cpu = platform.processor() or ""
    try:
        with open("/proc/cpuinfo", encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    clock = time.get_clock_info("perf_counter")
    return {
        "cpu_model": cpu,
        "machine": platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "clock_source": f"perf_counter ({clock.implementation}, resolution {clock.resolution})",
        "threads": 1,
    }


def write_machine_metadata(path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(machine_metadata(), fh, indent=1, sort_keys=True)
