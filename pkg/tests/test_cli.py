import csv
import json

import numpy as np
import pytest

from forkseq.cli import COMMANDS, EXIT_FAIL, EXIT_MISSING, EXIT_OK, EXIT_USAGE, build_parser, main, read_config_file
from forkseq.decoder import ForecastGrid
from forkseq.metrics import evaluate_grid

SMALL = ["--n-series", "5", "--length", "80"]


def run(tmp_path, *argv):
    code = main(list(argv) + ["--out", str(tmp_path / "runs")])
    dirs = sorted((tmp_path / "runs").glob(f"*-{argv[0]}-*")) if (tmp_path / "runs").exists() else []
    return code, (dirs[-1] if dirs else None)


def header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    code, d = run(tmp, "train", *SMALL, "--steps", "4", "--hidden", "4", "--seed", "7")
    assert code == EXIT_OK
    return tmp, d


class TestTrain:
    def test_outputs(self, trained):
        _, d = trained
        for name in ("checkpoint.csv", "model.json", "trajectory.csv", "config.txt", "manifest.json"):
            assert (d / name).exists()
        assert header(d / "trajectory.csv") == ["step", "loss", "lr", "grad_norm"]
        assert d.name.endswith("-train-7")

    def test_deterministic(self, trained, tmp_path):
        _, d = trained
        _, d2 = run(tmp_path, "train", *SMALL, "--steps", "4", "--hidden", "4", "--seed", "7")
        assert (d / "trajectory.csv").read_bytes() == (d2 / "trajectory.csv").read_bytes()

    def test_reproducible_from_snapshot(self, trained, tmp_path):
        _, d = trained
        code = main(["train", "--config", str(d / "config.txt"), "--out", str(tmp_path / "again")])
        assert code == EXIT_OK
        d2 = next((tmp_path / "again").iterdir())
        assert (d / "trajectory.csv").read_bytes() == (d2 / "trajectory.csv").read_bytes()

    def test_unknown_encoder(self, tmp_path, capsys):
        assert run(tmp_path, "train", "--encoder", "gru")[0] == EXIT_USAGE
        assert "invalid choice" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("# comment\nsteps=3\nlayers=9\n")
        assert run(tmp_path, "train", "--config", str(cfg))[0] == EXIT_USAGE

    def test_flag_overrides_config(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("steps=3\nhidden=4\nn_series=5\nlength=80\n")
        code, d = run(tmp_path, "train", "--config", str(cfg), "--steps", "2")
        assert code == EXIT_OK
        snap = read_config_file(d / "config.txt")
        assert snap["steps"] == "2" and snap["hidden"] == "4"
        assert len((d / "trajectory.csv").read_text().splitlines()) == 3

    def test_bad_data_path(self, tmp_path):
        assert run(tmp_path, "train", "--data", str(tmp_path / "none.csv"))[0] == EXIT_FAIL


class TestForecastEvaluate:
    def test_forecast(self, trained, tmp_path):
        _, d = trained
        code, out = run(tmp_path, "forecast", *SMALL, "--run", str(d))
        assert code == EXIT_OK
        assert header(out / "forecasts.csv") == ["unique_id", "fcd", "h", "q", "yhat"]
        assert (out / "forecasts_ensembled.csv").exists()

    def test_forecast_missing_run(self, tmp_path):
        assert run(tmp_path, "forecast", "--run", str(tmp_path))[0] == EXIT_MISSING

    def test_evaluate_single_seed(self, trained, tmp_path):
        _, d = trained
        code, out = run(tmp_path, "evaluate", *SMALL, "--runs", str(d))
        assert code == EXIT_OK
        assert header(out / "report.csv") == ["dataset", "frequency", "model", "scheme", "metric", "mean", "stderr"]
        with open(out / "report.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["scheme"] for r in rows} == {"fs", "fs+moving_average"}
        assert all(r["stderr"] == "" for r in rows)
        assert header(out / "report_seeds.csv")[-2:] == ["value", "n_terms"]

    def test_evaluate_several_seeds(self, trained, tmp_path):
        tmp, d = trained
        _, d2 = run(tmp_path, "train", *SMALL, "--steps", "2", "--hidden", "4", "--seed", "8")
        code, out = run(tmp_path, "evaluate", *SMALL, "--runs", f"{d},{d2}", "--ensemble", "none")
        with open(out / "report.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert code == EXIT_OK and all(r["stderr"] != "" for r in rows)

    def test_evaluate_missing_checkpoint(self, tmp_path):
        assert run(tmp_path, "evaluate", "--runs", str(tmp_path / "nope"))[0] == EXIT_MISSING

    def test_perfect_forecast_metrics_zero(self):
        # forecast of target date t+h equals the truth for every FCD
        v = np.array([[[[t + h + 1.0] for h in range(1, 7)] for t in range(4)]])
        grid = ForecastGrid(v, (0.5,))
        y = v[..., 0]
        out = evaluate_grid(y, grid, np.ones(y.shape, bool))
        assert all(val == 0.0 for val, _ in out.values())


class TestOtherCommands:
    def test_simulate(self, tmp_path):
        code, d = run(tmp_path, "simulate", "--theorem", "1", "--M", "0,2,5", "--reps", "60", "--T", "2,4,8,16")
        assert code == EXIT_OK
        assert header(d / "theorem1.csv") == ["M", "T", "variance", "analytic"]
        with open(d / "theorem1.csv", newline="") as fh:
            assert {r["M"] for r in csv.DictReader(fh)} == {"0", "2", "5"}
        assert header(d / "slopes.csv") == ["M", "slope"]

    def test_simulate_theorem2(self, tmp_path):
        code, d = run(tmp_path, "simulate", "--theorem", "2", "--M", "0", "--reps", "100", "--sizes", "1,2,3")
        assert code == EXIT_OK and header(d / "theorem2.csv")[1] == "ensemble_size"

    def test_simulate_domain_error(self, tmp_path):
        assert run(tmp_path, "simulate", "--reps", "10")[0] == EXIT_FAIL

    def test_bench(self, tmp_path):
        code, d = run(tmp_path, "bench", "--family", "cnn", "--schemes", "fs,ws_full", "--T", "8,16,32,64",
                      "--reps", "1", "--hidden", "4")
        assert code == EXIT_OK
        assert header(d / "bench.csv") == ["family", "scheme", "T", "median_seconds", "op_count"]
        assert header(d / "exponents.csv")[0:2] == ["family", "scheme"]
        assert json.loads((d / "machine.json").read_text())["threads"] == 1

    def test_bench_bad_family(self, tmp_path):
        assert run(tmp_path, "bench", "--family", "gru", "--T", "8,16,32,64")[0] == EXIT_USAGE

    def test_ablate_parallel_matches_serial(self, tmp_path):
        args = ["ablate", "--steps", "5", "--sample-sizes", "2,27", "--learning-rates", "0.01,0.05",
                "--variance-draws", "20", "--ar-order", "2"]
        _, a = run(tmp_path / "a", *args)
        _, b = run(tmp_path / "b", *args, "--parallel", "2")
        assert (a / "ablation.csv").read_bytes() == (b / "ablation.csv").read_bytes()
        assert header(a / "ablation.csv") == ["sample_size", "lr", "step", "loss"]
        assert header(a / "steps_to_110.csv") == ["sample_size", "lr", "steps_to_110", "final_loss"]

    def test_ablate_default_grid(self):
        keys = COMMANDS["ablate"]
        assert len(keys["sample_sizes"][1]) == 11 and len(keys["learning_rates"][1]) == 4

    def test_help_per_subcommand(self, capsys):
        for name in COMMANDS:
            with pytest.raises(SystemExit) as exc:
                build_parser().parse_args([name, "--help"])
            assert exc.value.code == 0
        assert main([]) == EXIT_USAGE
