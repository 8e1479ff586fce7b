"""Command-line entry points: gen-world, pretrain, run, eval, tune-once, report.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import subprocess
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from . import experiments as ex
from . import worldbench as wb
from .nrrf import PROFILES, CheckpointError, NrrfModel, load_checkpoint, profile, save_checkpoint
from .online import MODES, RUN_LOG_COLUMNS, OnlineConfig, canonical_mode
from .scene import default_assignment
from .tuner import TunerConfig, tune, tune_global

log = logging.getLogger("nettwin")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
SPLITS = ("IND", "EXT", "OOD")


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    # world source: a saved world file, or a generated benchmark world
    world: str | None = None
    world_size: str = "medium"
    world_mode: str = "irreducible"
    num_objects: int | None = None
    noise_sigma_db: float = 1.0
    num_materials: int = 9
    stream_points: int | None = None
    stream: str | None = None
    # twin
    profile: str = "desk"
    mode: str = "onetwin"
    seed: int = 0
    checkpoint: str | None = None
    pretrain_iterations: int = 2000
    grid_spacing: float = 15.0
    online_batch: int = 16
    sim_batch: int = 16
    steps_per_arrival: int = 25
    ewc_lambda: float = 0.4
    fisher_mode: str = "expected"
    tuning: str = "reduced"
    tuning_budget: int = 25
    warm_start: int = 10
    tuning_delay: float = 0.0
    eval_period: int = 1
    record_timing: bool = False
    threads: int = 1
    output: str = "runs/out"

    def validate(self) -> None:
        try:
            canonical_mode(self.mode)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        if self.world_size not in wb.SCENE_SIZES:
            raise ConfigError(f"unknown world size {self.world_size!r}")
        if self.pretrain_iterations < 1 or self.grid_spacing <= 0 or self.threads < 1:
            raise ConfigError("pretrain_iterations, grid_spacing and threads must be positive")
        if self.stream_points is not None and self.stream_points < 1:
            raise ConfigError("stream_points must be >= 1")
        for name in ("world", "stream", "checkpoint"):
            p = getattr(self, name)
            if p is not None and name != "checkpoint" and not Path(p).exists():
                raise ConfigError(f"{name} file not found: {p}")
        try:
            self.world_config().validate()
            self.online_config().validate()
            self.online_config().tuner.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def world_config(self) -> wb.WorldConfig:
        kw = dict(seed=self.seed, mode=self.world_mode, noise_sigma_db=self.noise_sigma_db,
                  num_materials=self.num_materials)
        cfg = wb.WorldConfig.sized(self.world_size, **kw)
        if self.num_objects is not None:
            cfg = dataclasses.replace(cfg, num_objects=self.num_objects)
        return cfg

    def nrrf_config(self):
        return profile(self.profile, seed=self.seed)

    def online_config(self) -> OnlineConfig:
        return OnlineConfig(mode=self.mode, online_batch=self.online_batch, sim_batch=self.sim_batch,
                            steps_per_arrival=self.steps_per_arrival, ewc_lambda=self.ewc_lambda,
                            fisher_mode=self.fisher_mode, tuning=self.tuning, tuning_delay_s=self.tuning_delay,
                            tuner=TunerConfig(total_evaluations=self.tuning_budget, warm_start=self.warm_start,
                                              seed=self.seed),
                            eval_period=self.eval_period, record_timing=self.record_timing, seed=self.seed)


def load_config(path: str | None, overrides: dict) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**data)
    try:
        cfg.validate()
    except TypeError as e:
        # a config value of the wrong JSON type
        raise ConfigError(str(e)) from None
    return cfg


def describe_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# --------------------------------------------------------------------------- shared setup


def _world(cfg: RunConfig) -> wb.SyntheticWorld:
    if cfg.world is not None:
        return wb.load_world(cfg.world)
    return wb.generate_world(cfg.world_config())


def _benchmark(cfg: RunConfig) -> ex.Benchmark:
    world = _world(cfg)
    if cfg.stream is not None:
        stream = tuple(wb.read_stream_csv(cfg.stream))
        splits = wb.make_splits(world, stream, wb.SplitConfig(seed=cfg.seed))
        return ex.Benchmark(world, stream, splits, *ex.pretraining_grid(world.scene, cfg.grid_spacing))
    n = cfg.stream_points if cfg.stream_points is not None else wb.SCENE_SIZES[cfg.world_size][3]
    return ex.make_benchmark(world, n, cfg.seed, cfg.grid_spacing, wb.SplitConfig(seed=cfg.seed))


def _model(cfg: RunConfig, bench: ex.Benchmark, out: Path) -> NrrfModel:
    if cfg.checkpoint is not None:
        if not Path(cfg.checkpoint).exists():
            raise ConfigError(f"checkpoint not found: {cfg.checkpoint}")
        try:
            return load_checkpoint(cfg.checkpoint, expect=cfg.nrrf_config())
        except CheckpointError as e:
            raise ConfigError(str(e)) from None
    model, res = ex.pretrained(bench, cfg.nrrf_config(), cfg.pretrain_iterations)
    save_checkpoint(model, out / "model.npz")
    _write_curve(out / "pretrain_curve.csv", res.curve)
    return model


def _write_curve(path: Path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "train_loss", "holdout_mse"])
        for it, loss, mse in curve:
            w.writerow([it, repr(float(loss)), repr(float(mse))])


def _echo(cfg: RunConfig, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": asdict(cfg), "seed": cfg.seed, "version": describe_version()}
    (out / "run.json").write_text(json.dumps(doc, indent=2) + "\n")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_gap_csv(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_LOG_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in RUN_LOG_COLUMNS])


def write_report_csv(path: Path, rep: wb.TwinGapReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "predicted_dbm", "truth_dbm", "abs_err_db"])
        for (x, y, z), p, t, e in zip(rep.locations, rep.predicted, rep.truth, rep.per_point_abs_err):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(z)), repr(float(p)), repr(float(t)),
                        repr(float(e))])


def _write_splits(out: Path, bench: ex.Benchmark) -> None:
    wb.write_stream_csv(out / "stream.csv", bench.stream)
    for name in SPLITS:
        locs = bench.splits[name]
        truth = bench.world.truth_table(locs) if len(locs) else np.zeros(0)
        wb.write_points_csv(out / f"split_{name}.csv", locs, truth)


# --------------------------------------------------------------------------- commands


def cmd_gen_world(cfg: RunConfig) -> int:
    out = Path(cfg.output)
    _echo(cfg, out, "gen-world")
    bench = _benchmark(cfg)
    wb.save_world(bench.world, out / "world.json")
    _write_splits(out, bench)
    print(json.dumps({"world": str(out / "world.json"), "objects": len(bench.scene.objects),
                      "stream_points": len(bench.stream),
                      "splits": {k: int(len(v)) for k, v in bench.splits.items()}}))
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    out = Path(cfg.output)
    _echo(cfg, out, "pretrain")
    bench = _benchmark(cfg)
    path = out / "model.npz"
    model, res = ex.pretrained(bench, cfg.nrrf_config(), cfg.pretrain_iterations)
    save_checkpoint(model, path)
    _write_curve(out / "pretrain_curve.csv", res.curve)
    print(json.dumps({"checkpoint": str(path), "grid_points": int(len(bench.grid_rsrp)),
                      "best_iteration": res.best_iteration, "best_holdout_mse": res.best_holdout_mse,
                      "wall_s": round(res.wall_s, 2)}))
    return EXIT_OK


def final_reports(bench: ex.Benchmark, predictor) -> dict[str, wb.TwinGapReport]:
    truth = wb.TruthCache(bench.world)
    return {name: wb.evaluate_gap(predictor, bench.world, bench.splits[name], name, truth)
            for name in SPLITS if len(bench.splits[name])}


def cmd_run(cfg: RunConfig) -> int:
    out = Path(cfg.output)
    _echo(cfg, out, "run")
    bench = _benchmark(cfg)
    _write_splits(out, bench)
    ocfg = cfg.online_config()
    model = None if ocfg.mode == "baseline-sim" else _model(cfg, bench, out)
    res = ex.run_mode(bench, ocfg, model)

    write_gap_csv(out / "gaps.csv", res.rows)
    if res.model is not None:
        save_checkpoint(res.model, out / "final_model.npz")
        predictor = res.model.predict_rsrp
    else:
        predictor = lambda locs: ex.simulator_labels(bench.scene, locs, res.final_assignment)  # noqa: E731
    reports = final_reports(bench, predictor)
    for name, rep in reports.items():
        write_report_csv(out / f"report_{name}.csv", rep)
    summary = {name: {"mean_gap_db": rep.mean_gap_db, "num_points": int(len(rep.truth))}
               for name, rep in reports.items()}
    (out / "reports.json").write_text(json.dumps(summary, indent=2) + "\n")
    with open(out / "episodes.jsonl", "w") as fh:
        for ep in res.episodes:
            fh.write(json.dumps(ep) + "\n")
    (out / "timing.json").write_text(json.dumps(res.update_stats.summary(), indent=2) + "\n")
    names = bench.scene.material_space.names
    (out / "final_assignment.json").write_text(json.dumps(res.final_assignment.to_json(names), indent=2) + "\n")
    print(json.dumps({"mode": ocfg.mode, "final_gap_ind_db": res.final_gap("IND"),
                      "final_gap_ood_db": res.final_gap("OOD"), "episodes": len(res.episodes),
                      "anomalies": res.anomalies, **{f"report_{k}": v["mean_gap_db"] for k, v in summary.items()}}))
    return EXIT_OK


def _read_split(arg: str, bench: ex.Benchmark) -> tuple[str, np.ndarray]:
    if arg.upper() in SPLITS:
        return arg.upper(), bench.splits[arg.upper()]
    if not Path(arg).exists():
        raise ConfigError(f"split file not found: {arg}")
    _, locs, _ = wb.read_points_csv(arg)
    return Path(arg).stem, locs


def cmd_eval(cfg: RunConfig, split: str, predictor: str) -> int:
    bench = _benchmark(cfg)
    name, locs = _read_split(split, bench)
    if not len(locs):
        raise ConfigError(f"split {name} is empty")
    if predictor == "truth":
        fn = bench.world.truth_table
    elif predictor == "simulator":
        fn = lambda l: ex.simulator_labels(bench.scene, l)  # noqa: E731
    else:
        if cfg.checkpoint is None or not Path(cfg.checkpoint).exists():
            raise ConfigError(f"checkpoint not found: {cfg.checkpoint}")
        try:
            fn = load_checkpoint(cfg.checkpoint).predict_rsrp
        except CheckpointError as e:
            raise ConfigError(str(e)) from None
    rep = wb.evaluate_gap(fn, bench.world, locs, name)
    print(json.dumps(rep.to_json()))
    return EXIT_OK


def cmd_tune_once(cfg: RunConfig, arrival: int | None) -> int:
    bench = _benchmark(cfg)
    if not bench.stream:
        raise ConfigError("the stream is empty")
    n = len(bench.stream) if arrival is None else arrival
    if not 1 <= n <= len(bench.stream):
        raise ConfigError(f"arrival must be in [1, {len(bench.stream)}]")
    data = bench.stream[:n]
    a0 = default_assignment(bench.scene)
    tcfg = cfg.online_config().tuner
    res = tune_global(bench.scene, a0, data, tcfg) if cfg.tuning == "global" else tune(bench.scene, a0, data,
                                                                                        data[-1], tcfg)
    for line in res.log_lines():
        print(line)
    names = bench.scene.material_space.names
    print(json.dumps({"focus_objects": list(res.focus_objects), "evaluations": res.evaluations,
                      "initial_objective": res.initial_objective, "best_objective": res.best_objective,
                      "assignment": {str(k): names[res.assignment.material_of(k)] for k in res.focus_objects}}))
    return EXIT_OK


def cmd_report(run_dirs: Sequence[str], out: str | None) -> int:
    from . import plots

    runs, errors = {}, {}
    for d in run_dirs:
        d = Path(d)
        if not (d / "gaps.csv").exists():
            raise ConfigError(f"{d} has no gaps.csv")
        meta = json.loads((d / "run.json").read_text()) if (d / "run.json").exists() else {}
        label = meta.get("config", {}).get("mode", d.name)
        if label in runs:
            label = f"{label} ({d.name})"
        runs[label] = plots.read_gap_rows(d / "gaps.csv")
        for name in SPLITS:
            p = d / f"report_{name}.csv"
            if p.exists():
                with open(p, newline="") as fh:
                    errors[f"{label} {name}"] = [float(r["abs_err_db"]) for r in csv.DictReader(fh)]
    dest = Path(out) if out else Path(run_dirs[0])
    dest.mkdir(parents=True, exist_ok=True)
    written = [plots.plot_gap_curves(runs, dest / "gap_curves.png")]
    if errors:
        written.append(plots.plot_error_cdf(errors, dest / "error_cdf.png"))
    # a tidy combined table next to the figures
    with open(dest / "gap_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run"] + list(RUN_LOG_COLUMNS))
        for label, rows in runs.items():
            for r in rows:
                w.writerow([label] + [r[c] for c in RUN_LOG_COLUMNS])
    print(json.dumps({"figures": [str(p) for p in written]}))
    return EXIT_OK


# --------------------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _flag_type(f: dataclasses.Field):
    t = str(f.type)
    if "bool" in t:
        return None
    if "int" in t:
        return int
    if "float" in t:
        return float
    return str


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = _flag_type(f)
        if kind is None:
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.name == "mode":
            p.add_argument(flag, dest=f.name, default=None, help=f"one of {', '.join(MODES)}")
        else:
            p.add_argument(flag, dest=f.name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nettwin", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("gen-world", "pretrain", "run"):
        _add_config_flags(sub.add_parser(name))
    p = sub.add_parser("eval")
    _add_config_flags(p)
    p.add_argument("--split", default="IND", help="IND, EXT, OOD or a points CSV file")
    p.add_argument("--predictor", choices=("checkpoint", "truth", "simulator"), default="checkpoint")
    p = sub.add_parser("tune-once")
    _add_config_flags(p)
    p.add_argument("--arrival", type=int, default=None, help="use the stream up to this arrival")
    p = sub.add_parser("report")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", default=None, help="figure directory (default: the first run)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"nettwin: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.runs, args.out)
        overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
        cfg = load_config(args.config, overrides)
        torch.set_num_threads(cfg.threads)
        if args.command == "gen-world":
            return cmd_gen_world(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.split, args.predictor)
        return cmd_tune_once(cfg, args.arrival)
    except ConfigError as e:
        print(f"nettwin: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"nettwin: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
