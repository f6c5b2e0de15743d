"""Causal sequence encoders with a full-sequence path and a window path.

Every encoder maps an input sequence ``x`` of shape (T, d_in), or a batch
(B, T, d_in), to one hidden row per position.  Row ``t`` only depends on
``x[..t]``, which is what lets forking-sequences decode every forecast
creation date from a single pass.  The window path encodes a window and
keeps the hidden state of its final position.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ShapeError

FAMILIES = ("mlp", "rnn", "lstm", "cnn", "transformer")
UNBOUNDED = math.inf


@dataclass(frozen=True)
class EncoderSpec:
    family: str
    d_in: int = 1
    hidden: int = 128
    n_layers: int = 3
    # MLP: length of the causal input window (2H).
    input_window: int = 36
    # RNN/LSTM: one tuple of dilations per stacked layer.
    rnn_dilations: tuple = ((1, 2), (4, 8))
    # CNN
    kernel_size: int = 2
    conv_dilations: tuple = (1, 2, 4, 8, 16, 32)
    # Transformer
    patch_lengths: tuple = (2, 6, 8)
    n_heads: int = 4
    attention_dilations: tuple = (1, 2, 4)
    dropout: float = 0.1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown encoder family {self.family!r}; choose from {FAMILIES}")
        dil = list(self.conv_dilations) + [d for grp in self.rnn_dilations for d in grp] \
            + list(self.attention_dilations)
        if any(d < 1 for d in dil):
            raise ValueError("dilations must be strictly positive")
        if self.family == "transformer" and self.hidden % self.n_heads:
            raise ValueError("hidden size must be divisible by the number of heads")

    @classmethod
    def default(cls, family: str, H: int = 18, **overrides) -> "EncoderSpec":
        """Per-family defaults; MLP consumes a causal window of ``2H`` values."""
        n_layers = {"mlp": 3, "rnn": 2, "lstm": 2, "cnn": 6, "transformer": 3}[family]
        kw = dict(family=family, n_layers=n_layers, input_window=2 * H)
        kw.update(overrides)
        if family == "cnn" and "n_layers" not in overrides:
            kw["n_layers"] = len(kw.get("conv_dilations", cls.conv_dilations))
        if family in ("rnn", "lstm") and "n_layers" not in overrides:
            kw["n_layers"] = len(kw.get("rnn_dilations", cls.rnn_dilations))
        if family == "transformer" and "attention_dilations" not in overrides:
            kw["attention_dilations"] = tuple(2 ** i for i in range(kw["n_layers"]))
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


def receptive_field(spec: EncoderSpec):
    """Number of trailing inputs that can reach a hidden row, or ``UNBOUNDED``."""
    if spec.family == "cnn":
        return 1 + (spec.kernel_size - 1) * sum(spec.conv_dilations)
    if spec.family == "mlp":
        return spec.input_window
    return UNBOUNDED


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def init_encoder(spec: EncoderSpec, store: ParamStore, prefix: str = "enc") -> None:
    f, d, H = spec.family, spec.d_in, spec.hidden
    if f == "mlp":
        fan = spec.input_window * d
        for i in range(spec.n_layers):
            store.create(f"{prefix}.mlp{i}.W", (fan if i == 0 else H, H))
            store.create(f"{prefix}.mlp{i}.b", (H,), init="zeros")
    elif f == "cnn":
        for i, _ in enumerate(spec.conv_dilations):
            cin = d if i == 0 else H
            store.create(f"{prefix}.conv{i}.K", (spec.kernel_size, cin, H),
                         fan_in=spec.kernel_size * cin)
            store.create(f"{prefix}.conv{i}.b", (H,), init="zeros")
    elif f in ("rnn", "lstm"):
        gates = 4 if f == "lstm" else 1
        cell = 0
        for s, group in enumerate(spec.rnn_dilations):
            for _ in group:
                cin = d if cell == 0 else H
                store.create(f"{prefix}.cell{cell}.Wx", (cin, gates * H), fan_in=cin + H)
                store.create(f"{prefix}.cell{cell}.U", (H, gates * H), fan_in=cin + H)
                b = store.create(f"{prefix}.cell{cell}.b", (gates * H,), init="zeros")
                if f == "lstm":
                    b.data[H:2 * H] = 1.0  # forget-gate bias
                cell += 1
    elif f == "transformer":
        for j, p in enumerate(spec.patch_lengths):
            store.create(f"{prefix}.patch{j}.W", (p * d, H))
            store.create(f"{prefix}.patch{j}.b", (H,), init="zeros")
        store.create(f"{prefix}.mix.W", (len(spec.patch_lengths) * H, H))
        store.create(f"{prefix}.mix.b", (H,), init="zeros")
        for i in range(spec.n_layers):
            for nm in ("q", "k", "v", "o"):
                store.create(f"{prefix}.att{i}.{nm}", (H, H))
            store.create(f"{prefix}.ff{i}.W1", (H, H))
            store.create(f"{prefix}.ff{i}.b1", (H,), init="zeros")
            store.create(f"{prefix}.ff{i}.W2", (H, H))
            store.create(f"{prefix}.ff{i}.b2", (H,), init="zeros")


def param_count(spec: EncoderSpec) -> int:
    store = ParamStore(0)
    init_encoder(spec, store)
    return store.n_params()


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _mlp(spec, P, x, prefix):
    h = ad.causal_windows(x, spec.input_window)
    for i in range(spec.n_layers):
        h = ad.relu(ad.affine(h, P[f"{prefix}.mlp{i}.W"], P[f"{prefix}.mlp{i}.b"]))
    return h


def _cnn(spec, P, x, prefix):
    h = None
    for i, dil in enumerate(spec.conv_dilations):
        inp = x if i == 0 else h
        z = ad.relu(ad.dilated_causal_conv1d(inp, P[f"{prefix}.conv{i}.K"], dil, P[f"{prefix}.conv{i}.b"]))
        h = z if i == 0 else ad.add(h, z)
    return h


def _dilated_recurrence(x, dilation, params, lstm):
    """Run one recurrent cell with recurrence distance ``dilation``.

    The sequence is cut into consecutive blocks of ``dilation`` positions;
    position ``t`` of block ``j`` receives the state of position ``t`` of
    block ``j-1``, so the ``dilation`` interleaved chains advance together.
    """
    B, T, C = x.shape
    n_blocks = -(-T // dilation)
    pad = n_blocks * dilation - T
    if pad:
        x = ad.concat([x, Tensor(np.zeros((B, pad, C)))], axis=1)
    xb = ad.reshape(x, (B, n_blocks, dilation, C))
    hidden = params[1].shape[0]
    h = Tensor(np.zeros((B, dilation, hidden)))
    c = Tensor(np.zeros((B, dilation, hidden)))
    outs = []
    for j in range(n_blocks):
        xj = ad.getitem(xb, (slice(None), j))
        if lstm:
            h, c = ad.lstm_cell_step(xj, (h, c), params)
        else:
            h = ad.recurrent_cell_step(xj, h, params)
        outs.append(h)
    out = ad.reshape(ad.stack(outs, axis=1), (B, n_blocks * dilation, hidden))
    return ad.getitem(out, (slice(None), slice(0, T))) if pad else out


def _rnn(spec, P, x, prefix):
    lstm = spec.family == "lstm"
    h = x
    cell = 0
    for s, group in enumerate(spec.rnn_dilations):
        stack_in = h
        for dil in group:
            params = (P[f"{prefix}.cell{cell}.Wx"], P[f"{prefix}.cell{cell}.U"], P[f"{prefix}.cell{cell}.b"])
            h = _dilated_recurrence(h, dil, params, lstm)
            cell += 1
        if s > 0:
            h = ad.add(h, stack_in)
    return h


def _attention_mask(T, dilation):
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    return (j <= i) & ((i - j) % dilation == 0)


def _transformer(spec, P, x, prefix, training, rng):
    B, T, _ = x.shape
    H, nh = spec.hidden, spec.n_heads
    dh = H // nh
    streams = [
        ad.affine(ad.causal_windows(x, p), P[f"{prefix}.patch{j}.W"], P[f"{prefix}.patch{j}.b"])
        for j, p in enumerate(spec.patch_lengths)
    ]
    h = ad.affine(ad.concat(streams, axis=-1), P[f"{prefix}.mix.W"], P[f"{prefix}.mix.b"])
    for i in range(spec.n_layers):
        dil = spec.attention_dilations[i % len(spec.attention_dilations)]
        mask = _attention_mask(T, dil)

        def heads(t):
            return ad.swapaxes(ad.reshape(t, (B, T, nh, dh)), 1, 2)

        q = heads(ad.affine(h, P[f"{prefix}.att{i}.q"]))
        k = heads(ad.affine(h, P[f"{prefix}.att{i}.k"]))
        v = heads(ad.affine(h, P[f"{prefix}.att{i}.v"]))
        a = ad.scaled_dot_attention(q, k, v, mask, dropout_p=spec.dropout, rng=rng, training=training)
        a = ad.reshape(ad.swapaxes(a, 1, 2), (B, T, H))
        h = ad.add(h, ad.affine(a, P[f"{prefix}.att{i}.o"]))
        ff = ad.relu(ad.affine(h, P[f"{prefix}.ff{i}.W1"], P[f"{prefix}.ff{i}.b1"]))
        h = ad.add(h, ad.affine(ff, P[f"{prefix}.ff{i}.W2"], P[f"{prefix}.ff{i}.b2"]))
    return h


def encode_full(spec: EncoderSpec, params: ParamStore, x, training: bool = False,
                rng: Optional[np.random.Generator] = None, prefix: str = "enc") -> Tensor:
    """Hidden row for every position of ``x`` in one pass.

    ``x`` is (T, d_in) or (B, T, d_in); the output keeps the same leading
    layout with ``hidden`` as the last axis.
    """
    x = ad.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != spec.d_in:
        raise ShapeError(f"encoder expects (B, T, {spec.d_in}) input, got {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("encoder input must have at least one position")
    ad.count("encoder_input", x.size)
    f = spec.family
    if f == "mlp":
        h = _mlp(spec, params, x, prefix)
    elif f == "cnn":
        h = _cnn(spec, params, x, prefix)
    elif f in ("rnn", "lstm"):
        h = _rnn(spec, params, x, prefix)
    else:
        h = _transformer(spec, params, x, prefix, training, rng)
    return ad.reshape(h, h.shape[1:]) if squeeze else h


def encode_window(spec: EncoderSpec, params: ParamStore, window, training: bool = False,
                  rng: Optional[np.random.Generator] = None, prefix: str = "enc") -> Tensor:
    """Hidden state at the final position of ``window`` ((L, d_in) or (B, L, d_in))."""
    hs = encode_full(spec, params, window, training=training, rng=rng, prefix=prefix)
    return ad.getitem(hs, (Ellipsis, -1, slice(None)))
