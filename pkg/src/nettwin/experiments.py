"""Reusable experiment plumbing: benchmark worlds, pretraining grids, and per-mode runs."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import worldbench as wb
from .nrrf import NrrfConfig, NrrfModel, PretrainConfig, PretrainResult, load_checkpoint, pretrain, save_checkpoint
from .online import OnlineConfig, RunResult, run_twinning
from .raytracer import PathTable, trace_paths
from .scene import RX_HEIGHT_M, Scene, default_assignment
from .tuner import TunerConfig, tune, tune_global
from .types import Measurement


@dataclass(frozen=True)
class Benchmark:
    world: wb.SyntheticWorld
    stream: tuple[Measurement, ...]
    splits: dict
    grid: np.ndarray            # pretraining locations (n, 3), no-signal points dropped
    grid_rsrp: np.ndarray       # calibrated-simulator labels at ``grid``

    @property
    def scene(self) -> Scene:
        return self.world.scene


def outdoor_grid(scene: Scene, spacing: float) -> np.ndarray:
    """Regular receiver grid at RX height with indoor points removed."""
    if spacing <= 0:
        raise ValueError("grid spacing must be positive")
    xmin, ymin, xmax, ymax = scene.bounds
    off = spacing / 3.0
    gx, gy = np.meshgrid(np.arange(xmin + off, xmax, spacing), np.arange(ymin + off, ymax, spacing))
    xy = np.column_stack([gx.ravel(), gy.ravel()])
    xy = xy[~scene.indoor_mask(xy)]
    tx = np.asarray(scene.tx.position[:2])
    xy = xy[np.linalg.norm(xy - tx, axis=1) > 0.5]
    return np.column_stack([xy, np.full(len(xy), RX_HEIGHT_M)])


def simulator_labels(scene: Scene, locations: np.ndarray, assignment=None) -> np.ndarray:
    assignment = assignment or default_assignment(scene)
    return PathTable.from_locations(scene, locations).rsrp(assignment)


def pretraining_grid(scene: Scene, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Outdoor grid labelled by the calibrated simulator, no-signal points dropped."""
    grid = outdoor_grid(scene, spacing)
    labels = simulator_labels(scene, grid)
    keep = wb.reported(labels)
    return grid[keep], labels[keep]


def make_benchmark(world: wb.SyntheticWorld, num_points: int, traj_seed: int = 0, grid_spacing: float = 15.0,
                   split: wb.SplitConfig = wb.SplitConfig()) -> Benchmark:
    stream = tuple(wb.make_stream(world, wb.TrajectoryConfig(num_points=num_points, seed=traj_seed)))
    splits = wb.make_splits(world, stream, split)
    return Benchmark(world, stream, splits, *pretraining_grid(world.scene, grid_spacing))


def standard_benchmark(seed: int, size: str = "medium", mode: str = "irreducible", grid_spacing: float = 15.0,
                       num_points: int | None = None, **world_kw) -> Benchmark:
    """The synthetic benchmark: a sized world, the matching stream length, default splits."""
    world = wb.generate_world(wb.WorldConfig.sized(size, seed=seed, mode=mode, **world_kw))
    n = num_points if num_points is not None else wb.SCENE_SIZES[size][3]
    return make_benchmark(world, n, seed, grid_spacing, wb.SplitConfig(seed=seed))


def pretrained(bench: Benchmark, config: NrrfConfig, iterations: int, cache: str | Path | None = None
               ) -> tuple[NrrfModel, PretrainResult | None]:
    """Pretrain on the benchmark grid, or reload a cached checkpoint of the same config."""
    if cache is not None and Path(cache).exists():
        return load_checkpoint(cache, expect=config), None
    model = NrrfModel.for_scene(bench.scene, config)
    result = pretrain(model, bench.grid, bench.grid_rsrp, PretrainConfig(iterations=iterations, seed=config.seed))
    if cache is not None:
        save_checkpoint(model, cache)
    return model, result


def ewc_seed_points(bench: Benchmark, n: int = 512, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """A fixed sample of the pretraining set used to seed the initial Fisher estimate."""
    k = min(n, len(bench.grid_rsrp))
    idx = np.sort(np.random.default_rng([seed, 65537]).choice(len(bench.grid_rsrp), size=k, replace=False))
    return bench.grid[idx], bench.grid_rsrp[idx]


def run_mode(bench: Benchmark, config: OnlineConfig, model: NrrfModel | None,
             truth_cache: wb.TruthCache | None = None) -> RunResult:
    """One online run; nerf2-style starts from a fresh model, other NRRF modes from ``model``."""
    truth = truth_cache or wb.TruthCache(bench.world)
    if config.mode == "baseline-sim":
        start = None
    elif config.mode == "nerf2-style":
        if model is None:
            raise ValueError("nerf2-style needs a model to copy the config from")
        # from scratch: the same initial weights the pretrained model started from
        start = NrrfModel.for_scene(bench.scene, model.config)
    else:
        if model is None:
            raise ValueError(f"mode {config.mode} needs a pretrained model")
        start = model.clone()
    init = ewc_seed_points(bench, config.fisher_samples, config.seed)
    return run_twinning(bench.stream, bench.scene, default_assignment(bench.scene), start, config, truth,
                        bench.splits["IND"], bench.splits["OOD"], init)


def relative_reduction(ours: float, reference: float) -> float:
    return (reference - ours) / reference if reference > 0 else math.nan


def final_gaps(results: Sequence[RunResult], split: str = "IND") -> list[float]:
    return [r.final_gap(split) for r in results]


@dataclass
class TuningTrace:
    gaps: list[float]                 # simulator IND gap after each adopted episode (index 0: before any)
    dimensions: list[int]
    evaluations: list[int]
    assignment: object


def tuning_only(bench: Benchmark, config: TunerConfig, strategy: str = "reduced", every: int = 1,
                truth_cache: wb.TruthCache | None = None) -> TuningTrace:
    """Sequential material tuning over the stream with no learned twin in the loop.

    After every ``every`` arrivals one episode runs on the buffer so far and its result
    is adopted; the gap is the tuned simulator's mean error on the IND split.
    """
    if strategy not in ("reduced", "global"):
        raise ValueError(f"unknown tuning strategy {strategy!r}")
    truth = (truth_cache or wb.TruthCache(bench.world))(bench.splits["IND"])
    ind_table = PathTable.from_locations(bench.scene, bench.splits["IND"])
    current = default_assignment(bench.scene)
    gaps = [float(np.mean(np.abs(ind_table.rsrp(current) - truth)))]
    dims, evals = [], []
    cache: dict[int, list] = {}
    for k, m in enumerate(bench.stream, start=1):
        cache[m.sequence] = trace_paths(bench.scene, m.location)
        if k % every:
            continue
        data = bench.stream[:k]
        ep_cfg = replace(config, seed=config.seed * 100003 + k)
        if strategy == "global":
            res = tune_global(bench.scene, current, data, ep_cfg, cache)
        else:
            res = tune(bench.scene, current, data, m, ep_cfg, cache)
        current = res.assignment
        dims.append(res.dimensions)
        evals.append(res.evaluations)
        gaps.append(float(np.mean(np.abs(ind_table.rsrp(current) - truth))))
    return TuningTrace(gaps, dims, evals, current)
