"""Encoder + multi-quantile decoder bundle."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .decoder import DecoderSpec, decode_all, init_decoder
from .encoders import EncoderSpec, encode_full, encode_window, init_encoder


@dataclass
class MQForecaster:
    encoder: EncoderSpec
    decoder: DecoderSpec
    params: ParamStore
    d_static: int = 0

    @classmethod
    def build(cls, encoder: EncoderSpec, decoder: DecoderSpec, seed: int = 0, d_static: int = 0):
        store = ParamStore(seed)
        init_encoder(encoder, store)
        init_decoder(decoder, store, encoder.hidden, d_static)
        return cls(encoder, decoder, store, d_static)

    @property
    def H(self):
        return self.decoder.H

    @property
    def quantiles(self):
        return self.decoder.quantiles

    def forward_full(self, x, static=None, training=False, rng=None) -> Tensor:
        """(B, T, d_in) inputs -> (B, T, H, Q) forecasts at every position."""
        hs = encode_full(self.encoder, self.params, x, training=training, rng=rng)
        if hs.ndim == 2:
            hs = ad.reshape(hs, (1,) + hs.shape)
        return decode_all(self.decoder, self.params, hs, static)

    def forward_windows(self, windows, static=None, training=False, rng=None) -> Tensor:
        """(B, L, d_in) windows -> (B, H, Q) forecasts at each window's last position."""
        h = encode_window(self.encoder, self.params, windows, training=training, rng=rng)
        if h.ndim == 1:
            h = ad.reshape(h, (1,) + h.shape)
        out = decode_all(self.decoder, self.params, ad.reshape(h, (h.shape[0], 1, h.shape[1])),
                         None if static is None else np.asarray(static)[:, None, :])
        return ad.reshape(out, (h.shape[0], self.decoder.H, self.decoder.Q))

    # -- persistence -------------------------------------------------------

    def spec_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "decoder": {"H": self.decoder.H, "agnostic_dim": self.decoder.agnostic_dim,
                        "specific_dim": self.decoder.specific_dim,
                        "quantiles": list(self.decoder.quantiles)},
            "d_static": self.d_static,
        }

    def save(self, checkpoint_path, spec_path) -> None:
        self.params.save(checkpoint_path)
        with open(spec_path, "w", encoding="utf-8") as fh:
            json.dump(self.spec_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, checkpoint_path, spec_path) -> "MQForecaster":
        with open(spec_path, encoding="utf-8") as fh:
            d = json.load(fh)
        enc = d["encoder"]
        for k in ("conv_dilations", "patch_lengths", "attention_dilations"):
            enc[k] = tuple(enc[k])
        enc["rnn_dilations"] = tuple(tuple(g) for g in enc["rnn_dilations"])
        dec = d["decoder"]
        dec["quantiles"] = tuple(dec["quantiles"])
        return cls(EncoderSpec(**enc), DecoderSpec(**dec), ParamStore.load(checkpoint_path), d["d_static"])
