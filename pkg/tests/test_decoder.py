import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from forkseq import autodiff as ad
from forkseq.autodiff import ParamStore
from forkseq.decoder import (DEFAULT_QUANTILES, DecoderSpec, ForecastGrid, decode, decode_all, init_decoder,
                             read_grid_csv, write_grid_csv)
from forkseq.errors import ShapeError
from forkseq.panel import ScaleParams


def _dec(H=18, d=8, d_static=0, seed=0):
    spec = DecoderSpec(H)
    store = ParamStore(seed)
    init_decoder(spec, store, d, d_static)
    return spec, store


class TestDecode:
    def test_monthly_shape(self, rng):
        spec, store = _dec()
        assert decode(spec, store, rng.normal(size=8)).shape == (18, 9)

    def test_zero_weights(self, rng):
        spec, store = _dec(H=4)
        for p in store.values():
            p.data[:] = 0
        assert np.all(decode(spec, store, rng.normal(size=8)).data == 0)

    def test_slice_identity_bitwise(self, rng):
        spec, store = _dec(H=5)
        hs = rng.normal(size=(3, 40, 8))
        allv = decode_all(spec, store, hs).data
        assert allv.shape == (3, 40, 5, 9)
        for b in range(3):
            for t in (0, 13, 39):
                assert np.array_equal(allv[b, t], decode(spec, store, hs[b, t]).data)

    def test_single_fcd(self, rng):
        spec, store = _dec(H=3)
        h = rng.normal(size=(1, 8))
        assert np.array_equal(decode_all(spec, store, h).data[0, 0], decode(spec, store, h[0]).data)

    def test_static_covariate(self, rng):
        spec, store = _dec(H=3, d_static=2)
        hs = rng.normal(size=(2, 5, 8))
        st = rng.normal(size=(2, 2))
        out = decode_all(spec, store, hs, st).data
        assert np.array_equal(out[1, 3], decode(spec, store, hs[1, 3], st[1]).data)

    def test_width_mismatch(self, rng):
        spec, store = _dec(H=3)
        with pytest.raises(ShapeError):
            decode(spec, store, rng.normal(size=7))

    def test_pinball_gradient(self, rng):
        spec, store = _dec(H=3, d=4)
        h = rng.normal(size=(6, 4))
        y = rng.normal(size=(1, 6, 3, 1))
        q = np.asarray(spec.quantiles)
        f = lambda p: ad.tmean(ad.pinball_elem(y, decode_all(spec, p, h), q))
        assert ad.grad_check(f, store, 1e-5) < 1e-4

    def test_bad_quantiles(self):
        with pytest.raises(ValueError):
            DecoderSpec(3, quantiles=(0.5, 0.1))

    @pytest.mark.slow
    def test_decode_all_linear_time(self, rng):
        spec, store = _dec(H=18, d=16)
        Ts = [1024, 2048, 4096, 8192]
        times = []
        with threadpool_limits(limits=1):
            for T in Ts:
                hs = rng.normal(size=(1, T, 16))
                decode_all(spec, store, hs)
                reps = []
                for _ in range(7):
                    t0 = time.perf_counter()
                    decode_all(spec, store, hs)
                    reps.append(time.perf_counter() - t0)
                times.append(np.median(reps))
        slope = np.polyfit(np.log(Ts), np.log(times), 1)[0]
        assert abs(slope - 1.0) <= 0.2


class TestGrid:
    def test_csv_roundtrip(self, tmp_path, rng):
        g = ForecastGrid(rng.normal(size=(2, 4, 3, 9)), DEFAULT_QUANTILES, 5, ["a", "b"])
        write_grid_csv(g, tmp_path / "g.csv")
        assert (tmp_path / "g.csv").read_text().splitlines()[0] == "unique_id,fcd,h,q,yhat"
        back = read_grid_csv(tmp_path / "g.csv")
        assert back.ids == ["a", "b"] and back.fcd_offset == 5
        assert np.array_equal(back.values, g.values)

    def test_fcds_one_based(self):
        g = ForecastGrid(np.zeros((1, 3, 2, 1)), (0.5,), 10)
        np.testing.assert_array_equal(g.fcds(0), [11, 12, 13])

    def test_unscaled(self):
        g = ForecastGrid(np.ones((1, 2, 2, 1)), (0.5,), scale=[ScaleParams(10.0, 2.0)])
        assert np.all(g.unscaled().values == 12.0)

    def test_shape_checks(self):
        with pytest.raises(ShapeError):
            ForecastGrid(np.zeros((2, 3, 4)), (0.5,))
        with pytest.raises(ShapeError):
            ForecastGrid(np.zeros((1, 1, 1, 2)), (0.5,))
