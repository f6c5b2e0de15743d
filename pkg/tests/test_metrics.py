import numpy as np
import pytest
from hypothesis import given, strategies as st

from forkseq.decoder import ForecastGrid
from forkseq.errors import UndefinedMetricError
from forkseq.metrics import (EvalReport, crps_from_quantiles, evaluate_grid, mae, quantile_loss, scrps,
                             sqpc)
from forkseq.training import fs_loss
from oracles import loss_loop, mae_loop, scrps_loop, sqpc_loop


def _random_case(rng):
    B, T, H = rng.integers(1, 4), rng.integers(2, 7), rng.integers(2, 6)
    qs = (0.1, 0.5, 0.9)
    v = np.sort(rng.normal(size=(B, T, H, 3)) * rng.uniform(0.1, 10), axis=-1)
    y = rng.normal(size=(B, T, H)) * rng.uniform(0.1, 10)
    mask = rng.random((B, T, H)) < 0.8
    mask.flat[0] = True
    return y, ForecastGrid(v, qs), mask


class TestOracles:
    def test_hundred_random_grids(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            y, g, m = _random_case(rng)
            assert abs(scrps(y, g, m) - scrps_loop(y, g.values, g.quantiles, m)) < 1e-12
            assert abs(sqpc(g) - sqpc_loop(g.at_quantile(0.5))) < 1e-12
            assert abs(mae(y, g, m) - mae_loop(y, g.at_quantile(0.5), m)) < 1e-12
            ref = loss_loop(y, g.values, g.quantiles, m)
            assert abs(fs_loss(g.values, y, m, g.quantiles) - ref) < 1e-12
            assert abs(quantile_loss(y, g, m) - ref) < 1e-12


class TestScrps:
    def test_example(self):
        g = ForecastGrid(np.zeros((1, 1, 1, 1)), (0.5,))
        # crps = 2 * 0.5 * |y|, so normalized by |y| gives 1
        assert scrps(np.full((1, 1, 1), 3.0), g) == pytest.approx(1.0)

    def test_perfect_forecast(self, rng):
        y = rng.normal(size=(2, 3, 4)) + 5
        g = ForecastGrid(np.repeat(y[..., None], 3, axis=-1), (0.1, 0.5, 0.9))
        assert scrps(y, g) == 0.0

    @given(c=st.floats(1e-3, 1e3))
    def test_scale_invariance(self, c):
        rng = np.random.default_rng(0)
        y, g, m = _random_case(rng)
        a = scrps(y, g, m)
        b = scrps(c * y, g.replace_values(c * g.values), m)
        assert abs(a - b) <= 1e-12 * max(1.0, abs(a))

    def test_zero_targets(self):
        with pytest.raises(UndefinedMetricError):
            scrps(np.zeros((1, 2, 2)), ForecastGrid(np.ones((1, 2, 2, 1)), (0.5,)))

    def test_crps_single_median_is_twice_pinball(self):
        assert crps_from_quantiles(2.0, [0.0], [0.5]) == 2.0

    def test_mae_identity_at_median(self, rng):
        y = rng.normal(size=(2, 3, 4))
        g = ForecastGrid(rng.normal(size=(2, 3, 4, 1)), (0.5,))
        cells = [crps_from_quantiles(y[i], g.values[i], (0.5,)) for i in np.ndindex(*y.shape)]
        assert mae(y, g) == pytest.approx(np.mean(cells), abs=1e-14)

    def test_crps_point(self):
        assert crps_from_quantiles(1.0, [0.0, 1.0, 2.0], [0.1, 0.5, 0.9]) == pytest.approx(2 / 3 * (0.1 + 0 + 0.1))
        with pytest.raises(ValueError):
            crps_from_quantiles(0.0, [0, 0], [0.5, 0.5])


class TestSqpc:
    def test_example_from_definition(self):
        v = np.zeros((1, 2, 2, 1))
        v[0, 0, 1, 0] = 1.0  # old forecast of target 3
        v[0, 1, 0, 0] = 3.0  # new forecast of target 3
        # one pair: |3 - 1| / (3 + 1) = 0.5
        assert sqpc(ForecastGrid(v, (0.5,))) == pytest.approx(100.0)
        assert sqpc(ForecastGrid(v, (0.5,)), literal=True) == pytest.approx(100.0 / 4)

    def test_constant_is_zero(self):
        assert sqpc(ForecastGrid(np.full((2, 5, 3, 1), 4.2), (0.5,))) == 0.0

    def test_zero_pairs_contribute_nothing(self):
        assert sqpc(ForecastGrid(np.zeros((1, 3, 3, 1)), (0.5,))) == 0.0

    def test_bounds_and_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            _, g, _ = _random_case(rng)
            s = sqpc(g)
            assert 0.0 <= s <= 200.0
            flipped = g.replace_values(g.values[:, ::-1, ::-1])
            assert sqpc(flipped) == pytest.approx(s, abs=1e-12)

    def test_sign_flip_extreme(self):
        v = np.zeros((1, 2, 2, 1))
        v[0, 0, 1, 0], v[0, 1, 0, 0] = -1.0, 1.0
        assert sqpc(ForecastGrid(v, (0.5,))) == pytest.approx(200.0)

    def test_needs_two_fcds(self):
        with pytest.raises(UndefinedMetricError):
            sqpc(ForecastGrid(np.ones((1, 1, 3, 1)), (0.5,)))

    def test_raw_array_quantile_lookup(self, rng):
        v = rng.normal(size=(1, 3, 3, 2))
        assert sqpc(v, 0.9, quantiles=(0.1, 0.9)) == sqpc(ForecastGrid(v, (0.1, 0.9)), 0.9)
        with pytest.raises(KeyError):
            sqpc(v, 0.5, quantiles=(0.1, 0.9))


class TestReport:
    def _report(self):
        r = EvalReport()
        for seed, val in enumerate([1.0, 2.0, 3.0]):
            r.add("synth", "Monthly", "cnn", "fs", "scrps", seed, val, 10)
        r.add("synth", "Monthly", "cnn", "ws", "scrps", 0, 5.0, 10)
        return r

    def test_summary(self):
        rows = {r["scheme"]: r for r in self._report().summary()}
        assert rows["fs"]["mean"] == 2.0
        assert rows["fs"]["stderr"] == pytest.approx(1 / np.sqrt(3))
        assert rows["ws"]["stderr"] is None

    def test_csv(self, tmp_path):
        r = self._report()
        r.to_csv(tmp_path / "r.csv")
        r.seeds_to_csv(tmp_path / "s.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "dataset,frequency,model,scheme,metric,mean,stderr"
        assert lines[2].endswith("5.0,")
        assert (tmp_path / "s.csv").read_text().splitlines()[0] == \
            "dataset,frequency,model,scheme,metric,seed,value,n_terms"

    def test_rejects_empty(self):
        with pytest.raises(UndefinedMetricError):
            EvalReport().add("d", "M", "m", "fs", "mae", 0, 1.0, 0)

    def test_evaluate_grid(self, rng):
        y, g, m = _random_case(rng)
        out = evaluate_grid(y, g, m)
        assert set(out) == {"scrps", "sqpc", "mae"}
        assert out["mae"][1] == m.sum()
