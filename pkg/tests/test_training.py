from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from forkseq import autodiff as ad
from forkseq.autodiff import Tensor
from forkseq.decoder import DecoderSpec
from forkseq.encoders import EncoderSpec
from forkseq.errors import DivergenceError, EmptyLossError, SamplerError
from forkseq.model import MQForecaster
from forkseq.panel import FrequencyMeta, SeriesRecord, SplitSpec, TimeSeriesPanel, synthesize_panel
from forkseq.theory import AblationConfig, ar_design, train_ar
from forkseq.training import (LossTrajectory, PreparedPanel, TrainConfig, fs_batch, fs_loss, full_fcd_gradient,
                              lr_at, pinball, prepare_panel, train, valid_ws_fcds, window_gradient, ws_sample)

META = FrequencyMeta("M", 12, 4)


def _cfg(scheme="fs", family="cnn", H=4, **kw):
    enc = EncoderSpec.default(family, H, hidden=6)
    dec = DecoderSpec(H, agnostic_dim=5, specific_dim=3)
    kw.setdefault("max_steps", 5)
    return TrainConfig(scheme, enc, dec, **kw)


def _prep(n=4, length=60, seed=0):
    return prepare_panel(synthesize_panel(n, length, 12, 1.0, seed, META))


class TestPinball:
    def test_examples(self):
        assert pinball(1, 0, 0.5) == 0.5
        assert pinball(0, 1, 0.9) == pytest.approx(0.1)
        assert pinball(3.3, 3.3, 0.2) == 0

    def test_bad_quantile(self):
        with pytest.raises(ValueError):
            pinball(0, 0, 1.0)

    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 0.99))
    def test_nonnegative(self, y, yhat, q):
        assert pinball(y, yhat, q) >= 0


class TestFsLoss:
    def test_single_term(self):
        assert fs_loss(np.zeros((1, 1, 1, 1)), np.full((1, 1, 1), 2.0), True, (0.5,)) == 1.0

    def test_perfect_median(self, rng):
        y = rng.normal(size=(2, 3, 4))
        assert fs_loss(y[..., None], y, True, (0.5,)) == 0.0

    def test_empty_mask(self):
        with pytest.raises(EmptyLossError):
            fs_loss(np.zeros((1, 2, 2, 1)), np.zeros((1, 2, 2)), np.zeros((1, 2, 2), bool), (0.5,))

    def test_masked_matches_bruteforce(self, rng):
        q = (0.1, 0.5, 0.9)
        pred = rng.normal(size=(3, 5, 4, 3))
        y = rng.normal(size=(3, 5, 4))
        mask = rng.random((3, 5, 4)) < 0.5
        total, n = 0.0, 0
        for b, t, h in zip(*np.nonzero(mask)):
            for qi, qq in enumerate(q):
                total += pinball(y[b, t, h], pred[b, t, h, qi], qq)
                n += 1
        assert fs_loss(pred, y, mask, q) == pytest.approx(total / n, abs=1e-12)

    def test_locality(self, rng):
        pred = rng.normal(size=(1, 4, 2, 1))
        y = rng.normal(size=(1, 4, 2))
        mask = np.ones((1, 4, 2), bool)
        mask[0, 2, 1] = False
        y2 = y.copy()
        y2[0, 2, 1] += 1e6
        assert fs_loss(pred, y, mask, (0.5,)) == fs_loss(pred, y2, mask, (0.5,))

    def test_tensor_path(self, rng):
        pred = Tensor(rng.normal(size=(1, 3, 2, 1)), requires_grad=True)
        loss = fs_loss(pred, np.zeros((1, 3, 2)), True, (0.5,))
        ad.backward(loss)
        assert pred.grad.shape == (1, 3, 2, 1)


class TestSchedule:
    def test_examples(self):
        cfg = _cfg(max_steps=30000, lr_step=10000)
        assert lr_at(0, cfg) == 0.001
        assert lr_at(10000, cfg) == pytest.approx(0.0001)
        assert lr_at(29999, cfg) == pytest.approx(0.00001)

    def test_decay_events(self):
        cfg = _cfg(max_steps=30000, lr_step=10000)
        lrs = [lr_at(s, cfg) for s in range(cfg.max_steps)]
        assert sum(a != b for a, b in zip(lrs, lrs[1:])) == 2

    def test_defaults(self):
        cfg = TrainConfig("fs", EncoderSpec.default("cnn"), DecoderSpec(18))
        assert (cfg.batch_size, cfg.lr0, cfg.max_steps, cfg.lr_decay, cfg.lr_step) == (8, 0.001, 30000, 0.1, 10000)


class TestSampling:
    def _one(self, length=100, train_end=100, H=18):
        v = np.arange(1.0, length + 1)
        s = SeriesRecord("a", v)
        p = TimeSeriesPanel([s], FrequencyMeta("x", 1, H))
        return PreparedPanel(p, p, [SplitSpec(train_end, train_end, length, H)], [None])

    def test_valid_set_example(self):
        fcds = valid_ws_fcds(SplitSpec(100, 100, 100, 18), 48, 18)
        assert fcds[0] == 48 and fcds[-1] == 82 and len(fcds) == 35

    def test_windows_are_contiguous(self, rng):
        prep = self._one()
        w, y, pairs, _ = ws_sample(prep, 48, 50, rng)
        for r, (_, t) in enumerate(pairs):
            assert 48 <= t <= 82
            np.testing.assert_array_equal(w[r, :, 0], np.arange(t - 47, t + 1))
            np.testing.assert_array_equal(y[r], np.arange(t + 1, t + 19))

    def test_reproducible(self):
        prep = self._one()
        a = ws_sample(prep, 48, 1, np.random.default_rng(3))[2]
        b = ws_sample(prep, 48, 1, np.random.default_rng(3))[2]
        assert a == b

    def test_window_longer_than_train(self, rng):
        with pytest.raises(SamplerError):
            ws_sample(self._one(), 101, 1, rng)

    def test_uniform_over_pairs(self):
        prep = self._one()
        _, _, pairs, _ = ws_sample(prep, 48, 35000, np.random.default_rng(0))
        counts = np.bincount([t for _, t in pairs], minlength=83)[48:]
        assert counts.min() > 800 and counts.max() < 1200


class TestFsBatch:
    def test_targets_follow_convention(self):
        prep = _prep(2, 40)
        x, y, m, _ = fs_batch(prep, [0], 4)
        v = prep.scaled.series[0].values
        te = prep.splits[0].train_end
        assert x.shape == (1, te, 1)
        # row p is FCD p+1; horizon h targets observation p+1+h
        np.testing.assert_array_equal(y[0, 0], v[1:5])
        assert m[0, te - 1].sum() == 0 and m[0, te - 2].sum() == 1

    def test_left_padding_masks(self):
        panel = TimeSeriesPanel([SeriesRecord("a", np.arange(40.0)), SeriesRecord("b", np.arange(50.0))], META)
        prep = prepare_panel(panel)
        x, y, m, _ = fs_batch(prep, [0, 1], 4)
        assert x.shape[1] == 38 and not m[0, :10].any()


class TestTrain:
    @pytest.mark.parametrize("scheme", ["fs", "ws"])
    def test_deterministic(self, scheme):
        prep = _prep(4, 100)
        cfg = _cfg(scheme, max_steps=4, lr0=0.01)
        _, a = train(prep, cfg)
        _, b = train(prep, cfg)
        assert a.loss == b.loss and a.grad_norm == b.grad_norm
        assert a.step == [0, 1, 2, 3]

    def test_trajectory_csv(self, tmp_path):
        _, traj = train(_prep(3, 80), _cfg(max_steps=3))
        traj.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "step,loss,lr,grad_norm" and len(lines) == 4

    def test_trajectory_steps_increase(self):
        t = LossTrajectory()
        t.append(0, 1, 1, 1)
        with pytest.raises(ValueError):
            t.append(0, 1, 1, 1)

    def test_divergence_guard(self):
        prep = _prep(3, 80)
        with pytest.raises(DivergenceError) as exc:
            train(prep, _cfg(max_steps=50, lr0=1e200))
        assert exc.value.trajectory is not None

    def test_loss_decreases(self):
        prep = _prep(6, 80)
        _, traj = train(prep, _cfg(max_steps=150, lr0=0.01, optimizer="adam"))
        assert np.mean(traj.loss[-10:]) < 0.8 * np.mean(traj.loss[:10])

    def test_linear_ar_noiseless(self):
        y = np.sin(2 * np.pi / 12 * np.arange(600))
        X, t = ar_design(y, 1)
        cfg = replace(AblationConfig(), max_steps=4000, lr_step=1500, ar_order=1)
        _, traj = train_ar(X[None], t[None], 600, 0.5, cfg, np.random.default_rng(0))
        assert traj.loss[-1] < 1e-3

    def test_short_series_dropped(self):
        panel = TimeSeriesPanel([SeriesRecord("a", np.arange(10.0)), SeriesRecord("b", np.arange(50.0))], META)
        prep = prepare_panel(panel)
        assert prep.scaled.ids == ["b"]


class TestGradientEstimator:
    def _setup(self):
        H, L = 3, 6
        prep = _prep(1, 60, seed=4)
        model = MQForecaster.build(EncoderSpec.default("mlp", H, hidden=5), DecoderSpec(H, 4, 2), seed=2)
        fcds = valid_ws_fcds(prep.splits[0], L, H)
        te = prep.splits[0].train_end
        mask = np.zeros((1, te, H), bool)
        mask[0, fcds - 1] = True
        return prep, model, L, fcds, mask

    def test_ws_expectation_equals_fs_exactly(self):
        prep, model, L, fcds, mask = self._setup()
        fs = full_fcd_gradient(model, prep, 0, mask)
        ws = window_gradient(model, prep, [(0, int(t)) for t in fcds], L)
        np.testing.assert_allclose(ws, fs, atol=1e-12)

    def test_ws_monte_carlo_unbiased(self):
        prep, model, L, fcds, mask = self._setup()
        fs = full_fcd_gradient(model, prep, 0, mask)
        draws = np.random.default_rng(0).choice(fcds, size=20000)
        ws = window_gradient(model, prep, [(0, int(t)) for t in draws], L)
        assert np.linalg.norm(ws - fs) / np.linalg.norm(fs) < 0.02
