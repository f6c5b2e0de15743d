"""Command-line entry point: ``forkseq {train,forecast,evaluate,ablate,simulate,bench}``.

Each command takes an optional flat ``key=value`` config file (``--config``)
whose entries are overridden by explicit flags.  Outputs go to
``<out>/<timestamp>-<command>-<seed>/`` together with the resolved config
snapshot (``config.txt``) and a ``manifest.json``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 missing artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .encoders import FAMILIES
from .errors import ForkseqError, MissingArtifactError
from .panel import FREQUENCIES

logger = logging.getLogger("forkseq")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_MISSING = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _ints(s):
    return [int(v) for v in str(s).split(",") if v.strip()]


def _floats(s):
    return [float(v) for v in str(s).split(",") if v.strip()]


def _strs(s):
    return [v.strip() for v in str(s).split(",") if v.strip()]


def _opt_int(s):
    return None if str(s).lower() in ("", "none") else int(s)


def _bool(s):
    v = str(s).lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (type, default, help); every command also gets seed and out.
COMMON = {
    "seed": (int, 0, "random seed"),
    "out": (str, "runs", "root directory for run folders"),
}
DATA = {
    "data": (str, "synthetic", "long CSV (unique_id,ds,y) or 'synthetic'"),
    "frequency": (str, "Monthly", "frequency name: " + ", ".join(FREQUENCIES)),
    "n_series": (int, 100, "synthetic panel: number of series"),
    "length": (int, 180, "synthetic panel: series length"),
    "noise_std": (float, 4.0, "synthetic panel: noise standard deviation"),
    "data_seed": (int, 0, "synthetic panel: generator seed"),
}
ENSEMBLE = {
    "ensemble": (str, "moving_average", "none, moving_average, moving_median or cumulative_average"),
    "ensemble_window": (_opt_int, None, "rolling window in FCDs (default H)"),
}
COMMANDS = {
    "train": dict(DATA, **{
        "scheme": (str, "fs", "fs or ws"),
        "encoder": (str, "cnn", "encoder family: " + ", ".join(FAMILIES)),
        "hidden": (int, 32, "encoder hidden width"),
        "steps": (int, 3000, "training steps"),
        "batch_size": (int, 8, "series (fs) or windows (ws) per step"),
        "lr": (float, 0.001, "initial learning rate"),
        "lr_step": (int, 10000, "steps between learning-rate decays"),
        "lr_decay": (float, 0.1, "learning-rate decay factor"),
        "window_length": (_opt_int, None, "ws window length (default max(receptive field, 2H))"),
        "optimizer": (str, "sgd", "sgd or adam"),
    }),
    "forecast": dict(DATA, **ENSEMBLE, **{
        "run": (str, None, "training run directory"),
        "scheme": (str, "fs", "fs, ws_restricted or ws_full"),
        "phase": (str, "test", "FCD range: train, validation or test"),
        "window_length": (_opt_int, None, "ws_restricted window length"),
    }),
    "evaluate": dict(DATA, **ENSEMBLE, **{
        "runs": (_strs, None, "comma-separated training run directories"),
        "dataset": (str, "synthetic", "dataset label for the report"),
    }),
    "ablate": dict(DATA, **{
        "sample_sizes": (_ints, [2, 14, 27, 40, 53, 66, 80, 93, 106, 119, 132], "FCDs sampled per step"),
        "learning_rates": (_floats, [0.001, 0.005, 0.01, 0.05], "learning-rate grid"),
        "steps": (int, 15000, "training steps per cell"),
        "lr_step": (int, 1000, "steps between learning-rate decays"),
        "ar_order": (int, 12, "AR order p (p+1 lags)"),
        "variance_draws": (int, 2000, "draws per size for the frozen-point gradient variance"),
    }),
    "simulate": {
        "theorem": (int, 1, "1: mean-estimator variance, 2: ensemble forecast variance"),
        "M": (_ints, [0, 2, 5], "M-dependence orders"),
        "reps": (int, 200, "Monte-Carlo repetitions"),
        "T": (_ints, [2 ** k for k in range(1, 13)], "theorem 1: sample counts"),
        "sizes": (_ints, list(range(1, 19)), "theorem 2: ensemble sizes"),
        "P": (int, 32, "theorem 1: process dimension"),
    },
    "bench": {
        "family": (_strs, ["cnn"], "encoder families"),
        "schemes": (_strs, ["fs", "ws_restricted", "ws_full"], "inference schemes"),
        "T": (_ints, [256, 512, 1024, 2048, 4096], "series lengths"),
        "reps": (int, 3, "timed repetitions per T"),
        "hidden": (int, 48, "encoder hidden width"),
        "window_length": (_opt_int, None, "ws_restricted window length"),
        "timed": (_bool, True, "measure wall clock (counters are always recorded)"),
    },
}
CHOICES = {
    "scheme": {"train": ("fs", "ws"), "forecast": ("fs", "ws_restricted", "ws_full")},
    "encoder": FAMILIES,
    "frequency": tuple(FREQUENCIES),
    "ensemble": ("none", "moving_average", "moving_median", "cumulative_average"),
    "optimizer": ("sgd", "adam"),
    "phase": ("train", "validation", "test"),
    "theorem": (1, 2),
}


def keys_for(command):
    return dict(COMMON, **COMMANDS[command])


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _fmt(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return "none" if v is None else str(v)


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    spec = keys_for(command)
    raw = {}
    if args.config:
        if not os.path.exists(args.config):
            raise MissingArtifactError(f"config file {args.config} not found")
        raw = read_config_file(args.config)
        unknown = sorted(set(raw) - set(spec))
        if unknown:
            raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg = {}
    for key, (typ, default, _) in spec.items():
        flag = getattr(args, key, None)
        value = flag if flag is not None else raw.get(key, default)
        if isinstance(value, str) and typ is not str:
            try:
                value = typ(value)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {exc}") from exc
        cfg[key] = value
    for key, allowed in CHOICES.items():
        if key in cfg and cfg[key] is not None:
            allowed = allowed.get(command, ()) if isinstance(allowed, dict) else allowed
            if allowed and cfg[key] not in allowed:
                raise UsageError(f"invalid {key} {cfg[key]!r}; choose from {', '.join(map(str, allowed))}")
    return cfg


def make_run_dir(cfg: dict, command: str) -> Path:
    stamp = time.strftime("%Y%m%dT%H%M%S")
    base = Path(cfg["out"]) / f"{stamp}-{command}-{cfg['seed']}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}.{k}")
        k += 1
    path.mkdir(parents=True)
    with open(path / "config.txt", "w", encoding="utf-8") as fh:
        for key, value in cfg.items():
            fh.write(f"{key}={_fmt(value)}\n")
    return path


def write_manifest(run_dir: Path, command: str, argv) -> None:
    files = sorted(p.name for p in run_dir.iterdir() if p.name != "manifest.json")
    with open(run_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump({"command": command, "argv": list(argv), "version": __version__, "files": files},
                  fh, indent=1)


def _load(cfg):
    from .experiment import load_panel

    return load_panel(cfg["data"], cfg["frequency"], cfg["n_series"], cfg["length"], cfg["noise_std"],
                      cfg["data_seed"])


def _ensemble_spec(cfg):
    from .inference import EnsembleSpec

    if cfg["ensemble"] == "none":
        return None
    return EnsembleSpec(cfg["ensemble"], cfg["ensemble_window"])


def _load_run(run_dir):
    from .model import MQForecaster

    run = Path(run_dir) if run_dir else None
    if run is None or not (run / "checkpoint.csv").exists() or not (run / "model.json").exists():
        raise MissingArtifactError(f"no checkpoint in run directory {run_dir!r}")
    model = MQForecaster.load(run / "checkpoint.csv", run / "model.json")
    snap = read_config_file(run / "config.txt") if (run / "config.txt").exists() else {}
    return model, snap


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(cfg, run_dir: Path, parallel: int) -> None:
    from .experiment import make_config
    from .training import prepare_panel, train

    prep = prepare_panel(_load(cfg))
    if len(prep.scaled) == 0:
        raise ForkseqError("no series long enough to train on")
    tc = make_config(cfg["scheme"], cfg["encoder"], prep.H, cfg["hidden"], cfg["steps"], cfg["batch_size"],
                     cfg["lr"], cfg["lr_step"], cfg["lr_decay"], cfg["window_length"], cfg["optimizer"],
                     cfg["seed"])
    model, traj = train(prep, tc)
    model.save(run_dir / "checkpoint.csv", run_dir / "model.json")
    traj.to_csv(run_dir / "trajectory.csv")
    meta = {"window_length": tc.L if tc.scheme == "ws" else None, "n_series": len(prep.scaled)}
    with open(run_dir / "train_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def cmd_forecast(cfg, run_dir: Path, parallel: int) -> None:
    from .decoder import write_grid_csv
    from .inference import cross_val_forecast, ensemble, write_ensemble_metadata
    from .training import prepare_panel

    model, _ = _load_run(cfg["run"])
    prep = prepare_panel(_load(cfg))
    L = cfg["window_length"]
    if cfg["scheme"] == "ws_restricted" and L is None:
        from .bench import default_window

        L = default_window(model)
    grid = cross_val_forecast(model, prep, cfg["scheme"], cfg["phase"], L=L).unscaled()
    write_grid_csv(grid, run_dir / "forecasts.csv")
    spec = _ensemble_spec(cfg)
    if spec is not None:
        write_grid_csv(ensemble(grid, spec), run_dir / "forecasts_ensembled.csv")
        write_ensemble_metadata(spec, 1, run_dir / "ensemble.json")


def cmd_evaluate(cfg, run_dir: Path, parallel: int) -> None:
    from .experiment import evaluate_model
    from .metrics import EvalReport
    from .training import prepare_panel

    if not cfg["runs"]:
        raise UsageError("evaluate needs runs=<dir>[,<dir>...]")
    loaded = [_load_run(r) for r in cfg["runs"]]
    prep = prepare_panel(_load(cfg))
    spec = _ensemble_spec(cfg)
    report = EvalReport()
    for (model, snap), path in zip(loaded, cfg["runs"]):
        scheme = snap.get("scheme", "unknown")
        seed = snap.get("seed", Path(path).name)
        res = evaluate_model(model, prep, spec)
        for variant, metrics in res.items():
            label = scheme if variant == "raw" else f"{scheme}+{spec.method}"
            for metric, (value, n) in metrics.items():
                report.add(cfg["dataset"], cfg["frequency"], model.encoder.family, label, metric, seed, value, n)
    report.to_csv(run_dir / "report.csv")
    report.seeds_to_csv(run_dir / "report_seeds.csv")


def _ablation_cell(args):
    from .theory import _scaled_designs, train_ar

    cfg, data, n, lr, cell = args
    X, y = _scaled_designs(data, cfg.ar_order)
    rng = np.random.default_rng([cfg.seed, cell])
    return train_ar(X, y, min(n, X.shape[1]), lr, cfg, rng)[1]


def cmd_ablate(cfg, run_dir: Path, parallel: int) -> None:
    from .errors import DivergenceError
    from .theory import (AblationConfig, ablation_panel, ar_convergence_ablation, frozen_gradient_variance,
                         loglog_slope, steps_to_fraction, write_ablation_csv, write_pairs_csv)

    ab = AblationConfig(window_sample_sizes=tuple(cfg["sample_sizes"]),
                        learning_rates=tuple(cfg["learning_rates"]), max_steps=cfg["steps"],
                        lr_step=cfg["lr_step"], seed=cfg["seed"], ar_order=cfg["ar_order"])
    data = ablation_panel(seed=cfg["data_seed"]) if cfg["data"] == "synthetic" else _load(cfg)
    if parallel > 1:
        cells = [(ab, data, n, lr, i) for i, (lr, n) in
                 enumerate((lr, n) for lr in ab.learning_rates for n in ab.window_sample_sizes)]
        results = {}
        with ProcessPoolExecutor(parallel) as pool:
            futures = [(c[2], c[3], pool.submit(_ablation_cell, c)) for c in cells]
            for n, lr, fut in futures:
                try:
                    results[(n, lr)] = fut.result()
                except DivergenceError as exc:
                    results[(n, lr)] = exc
    else:
        results = ar_convergence_ablation(ab, data)
    write_ablation_csv(results, run_dir / "ablation.csv")
    with open(run_dir / "steps_to_110.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_size", "lr", "steps_to_110", "final_loss"])
        for (n, lr), traj in results.items():
            if isinstance(traj, Exception):
                w.writerow([n, repr(lr), "", "diverged"])
            else:
                w.writerow([n, repr(lr), steps_to_fraction(traj), repr(traj.loss[-1])])
    sizes = [n for n in ab.window_sample_sizes if n < len(data.series[0])]
    fv = frozen_gradient_variance(data, sizes, ab, draws=cfg["variance_draws"], seed=cfg["seed"])
    write_pairs_csv(fv, ["sample_size", "variance"], run_dir / "frozen_variance.csv")
    if len(fv) >= 3:
        logger.info("frozen-point gradient variance slope %.3f", loglog_slope(fv))


def cmd_simulate(cfg, run_dir: Path, parallel: int) -> None:
    from .theory import (MDependentProcess, forecast_variance_decay, lemma_variance, loglog_slope,
                         mean_estimator_variance)

    rows, slopes = [], []
    for M in cfg["M"]:
        if cfg["theorem"] == 1:
            proc = MDependentProcess(M, P=cfg["P"], seed=cfg["seed"] + M)
            pairs = mean_estimator_variance(proc, cfg["T"], cfg["reps"])
            analytic = [lemma_variance(proc, T) for T, _ in pairs]
        else:
            pairs = forecast_variance_decay(cfg["sizes"], M, cfg["reps"], seed=cfg["seed"] + M)
            proc = MDependentProcess(M)
            analytic = [lemma_variance(proc, n) for n, _ in pairs]
        rows += [(M, x, v, a) for (x, v), a in zip(pairs, analytic)]
        slopes.append((M, loglog_slope(pairs)))
    xname = "T" if cfg["theorem"] == 1 else "ensemble_size"
    with open(run_dir / f"theorem{cfg['theorem']}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["M", xname, "variance", "analytic"])
        for M, x, v, a in rows:
            w.writerow([M, x, repr(v), repr(a)])
    with open(run_dir / "slopes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["M", "slope"])
        for M, s in slopes:
            w.writerow([M, repr(s)])


def cmd_bench(cfg, run_dir: Path, parallel: int) -> None:
    from .bench import (counter_exponent, expected_exponent, fit_exponent, run_scaling_bench,
                        write_bench_csv, write_machine_metadata)

    results = []
    for fam in cfg["family"]:
        if fam not in FAMILIES:
            raise UsageError(f"invalid family {fam!r}; choose from {', '.join(FAMILIES)}")
        for scheme in cfg["schemes"]:
            if scheme not in ("fs", "ws_restricted", "ws_full"):
                raise UsageError(f"invalid scheme {scheme!r}")
            results.append(run_scaling_bench(fam, scheme, cfg["T"], cfg["reps"], cfg["seed"], cfg["hidden"],
                                             cfg["window_length"], timed=cfg["timed"]))
    write_bench_csv(results, run_dir / "bench.csv")
    with open(run_dir / "exponents.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "scheme", "time_exponent", "r_squared", "counter_exponent", "table_order"])
        for res in results:
            te, r2 = fit_exponent(res) if cfg["timed"] else (float("nan"), float("nan"))
            w.writerow([res.family, res.scheme, repr(te), repr(r2), repr(counter_exponent(res)),
                        expected_exponent(res.family, res.scheme)])
    write_machine_metadata(run_dir / "machine.json")


HANDLERS = {"train": cmd_train, "forecast": cmd_forecast, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "simulate": cmd_simulate, "bench": cmd_bench}
HELP = {
    "train": "train a model under forking-sequences or window-sampling",
    "forecast": "write cross-validation forecasts of a trained model",
    "evaluate": "sCRPS / sQPC / MAE report over one or more trained runs",
    "ablate": "linear AR convergence ablation over FCD sample sizes",
    "simulate": "variance-decay simulations for M-dependent samples",
    "bench": "inference scaling benchmark with fitted exponents",
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="forkseq", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"forkseq {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--parallel", type=int, default=1, help="worker processes for independent cells")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, (typ, default, text) in dict(COMMON, **keys).items():
            kw = {}
            allowed = CHOICES.get(key)
            if isinstance(allowed, dict):
                allowed = allowed.get(name)
            if allowed:
                kw["choices"] = allowed
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ, default=None,
                           help=f"{text} (default: {_fmt(default)})", **kw)
    return ap


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        run_dir = make_run_dir(cfg, args.command)
        HANDLERS[args.command](cfg, run_dir, max(1, args.parallel))
        write_manifest(run_dir, args.command, argv)
    except UsageError as exc:
        print(f"forkseq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifactError as exc:
        print(f"forkseq {args.command}: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ForkseqError, ValueError, OSError) as exc:
        print(f"forkseq {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(run_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
