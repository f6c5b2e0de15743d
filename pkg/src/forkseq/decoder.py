"""Multi-quantile decoder and the forecast grid exchange type.

The decoder turns one hidden row into an (H, Q) block of quantile forecasts.
A horizon-agnostic trunk produces a shared context of ``agnostic_dim`` units
plus one ``specific_dim`` context per horizon; a local head shared across
horizons maps ``[shared context, horizon context]`` to the Q quantiles.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ShapeError

DEFAULT_QUANTILES = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass(frozen=True)
class DecoderSpec:
    H: int
    agnostic_dim: int = 100
    specific_dim: int = 20
    quantiles: tuple = DEFAULT_QUANTILES

    def __post_init__(self):
        q = np.asarray(self.quantiles, dtype=float)
        if len(q) == 0 or np.any(q <= 0) or np.any(q >= 1) or np.any(np.diff(q) <= 0):
            raise ValueError("quantiles must be strictly increasing values in (0, 1)")
        if self.H < 1 or self.agnostic_dim < 1 or self.specific_dim < 1:
            raise ValueError("decoder dimensions must be positive")

    @property
    def Q(self) -> int:
        return len(self.quantiles)


def init_decoder(spec: DecoderSpec, store: ParamStore, d_hidden: int, d_static: int = 0,
                 prefix: str = "dec") -> None:
    width = spec.agnostic_dim + spec.H * spec.specific_dim
    store.create(f"{prefix}.trunk.W", (d_hidden + d_static, width))
    store.create(f"{prefix}.trunk.b", (width,), init="zeros")
    store.create(f"{prefix}.head.Wa", (spec.agnostic_dim, spec.Q),
                 fan_in=spec.agnostic_dim + spec.specific_dim)
    store.create(f"{prefix}.head.Ws", (spec.specific_dim, spec.Q),
                 fan_in=spec.agnostic_dim + spec.specific_dim)
    store.create(f"{prefix}.head.b", (spec.Q,), init="zeros")


def _decode(spec: DecoderSpec, P: ParamStore, h, static=None, prefix="dec") -> Tensor:
    h = ad.as_tensor(h)
    W = P[f"{prefix}.trunk.W"]
    if static is not None:
        static = np.asarray(static, dtype=np.float64)
        tile = np.broadcast_to(static, h.shape[:-1] + static.shape[-1:])
        h = ad.concat([h, Tensor(np.array(tile))], axis=-1)
    if h.shape[-1] != W.shape[0]:
        raise ShapeError(f"decoder trunk expects width {W.shape[0]}, got {h.shape[-1]}")
    lead = h.shape[:-1]
    g = ad.relu(ad.affine(h, W, P[f"{prefix}.trunk.b"], rowwise=True))
    A = spec.agnostic_dim
    shared = ad.getitem(g, (Ellipsis, slice(0, A)))
    local = ad.reshape(ad.getitem(g, (Ellipsis, slice(A, None))), lead + (spec.H, spec.specific_dim))
    out_shared = ad.reshape(ad.affine(shared, P[f"{prefix}.head.Wa"], rowwise=True), lead + (1, spec.Q))
    out_local = ad.affine(local, P[f"{prefix}.head.Ws"], P[f"{prefix}.head.b"], rowwise=True)
    return ad.add(out_local, out_shared)


def decode(spec: DecoderSpec, params: ParamStore, h_t, static=None, prefix: str = "dec") -> Tensor:
    """Quantile forecasts of shape (H, Q) for one hidden row."""
    h_t = ad.as_tensor(h_t)
    if h_t.ndim != 1:
        raise ShapeError(f"decode expects one hidden row, got shape {h_t.shape}")
    out = _decode(spec, params, ad.reshape(h_t, (1, h_t.shape[0])), static, prefix)
    return ad.reshape(out, (spec.H, spec.Q))


def decode_all(spec: DecoderSpec, params: ParamStore, hs, static=None, prefix: str = "dec") -> Tensor:
    """Forecasts for every row of ``hs``: (T, d) -> (1, T, H, Q); (B, T, d) -> (B, T, H, Q)."""
    hs = ad.as_tensor(hs)
    if hs.ndim == 2:
        hs = ad.reshape(hs, (1,) + hs.shape)
    if hs.ndim != 3:
        raise ShapeError(f"decode_all expects (B, T, d) hidden states, got {hs.shape}")
    if static is not None:
        static = np.asarray(static, dtype=np.float64)
        if static.ndim == 2:
            static = static[:, None, :]
    return _decode(spec, params, hs, static, prefix)


# ---------------------------------------------------------------------------
# Forecast grid
# ---------------------------------------------------------------------------


@dataclass
class ForecastGrid:
    """Dense (B, T, H, Q) forecasts.

    Grid position ``t`` (0-based) is the forecast creation date
    ``fcd_offset + t + 1`` of its series (1-based), so ``fcd_offset`` is the
    number of observations preceding the first grid FCD.
    """

    values: np.ndarray
    quantiles: tuple
    fcd_offset: int = 0
    ids: Optional[list] = None
    fcd_offsets: Optional[np.ndarray] = None
    scale: Optional[list] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4:
            raise ShapeError(f"ForecastGrid values must be (B, T, H, Q), got {self.values.shape}")
        if self.values.shape[3] != len(self.quantiles):
            raise ShapeError("quantile axis does not match the quantile list")
        if self.ids is None:
            self.ids = [str(i) for i in range(self.B)]
        if self.fcd_offsets is None:
            self.fcd_offsets = np.full(self.B, self.fcd_offset, dtype=int)

    @property
    def B(self):
        return self.values.shape[0]

    @property
    def T(self):
        return self.values.shape[1]

    @property
    def H(self):
        return self.values.shape[2]

    @property
    def Q(self):
        return self.values.shape[3]

    def quantile_index(self, q: float) -> int:
        for i, v in enumerate(self.quantiles):
            if abs(v - q) < 1e-9:
                return i
        raise KeyError(f"quantile {q} not in grid {self.quantiles}")

    def at_quantile(self, q: float) -> np.ndarray:
        return self.values[..., self.quantile_index(q)]

    def fcds(self, b: int = 0) -> np.ndarray:
        return self.fcd_offsets[b] + 1 + np.arange(self.T)

    def replace_values(self, values) -> "ForecastGrid":
        return ForecastGrid(np.asarray(values), self.quantiles, self.fcd_offset, list(self.ids),
                            self.fcd_offsets.copy(), self.scale)

    def unscaled(self) -> "ForecastGrid":
        """Grid mapped back to target units with its attached scale params."""
        if self.scale is None:
            return self
        vals = np.stack([p.inverse(v) for p, v in zip(self.scale, self.values)])
        return ForecastGrid(vals, self.quantiles, self.fcd_offset, list(self.ids), self.fcd_offsets.copy())


def write_grid_csv(grid: ForecastGrid, path) -> None:
    """Long CSV ``unique_id,fcd,h,q,yhat`` ordered by series, fcd, h, q."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["unique_id", "fcd", "h", "q", "yhat"])
        for b in range(grid.B):
            fcds = grid.fcds(b)
            for t in range(grid.T):
                for h in range(grid.H):
                    for qi, q in enumerate(grid.quantiles):
                        w.writerow([grid.ids[b], int(fcds[t]), h + 1, repr(float(q)),
                                    repr(float(grid.values[b, t, h, qi]))])


def read_grid_csv(path) -> ForecastGrid:
    import pandas as pd

    df = pd.read_csv(path, dtype={"unique_id": str}, float_precision="round_trip")
    ids = list(dict.fromkeys(df["unique_id"]))
    quantiles = tuple(sorted(df["q"].unique()))
    H = int(df["h"].max())
    vals, offsets = [], []
    for uid in ids:
        sub = df[df["unique_id"] == uid].sort_values(["fcd", "h", "q"])
        fcds = np.sort(sub["fcd"].unique())
        arr = sub["yhat"].to_numpy().reshape(len(fcds), H, len(quantiles))
        vals.append(arr)
        offsets.append(int(fcds[0]) - 1)
    return ForecastGrid(np.stack(vals), quantiles, offsets[0], ids, np.array(offsets))
