"""Material tuning: reduce to the involved objects, then categorical BO over their materials."""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .raytracer import PathTable, involved_objects, trace, trace_paths
from .scene import GROUND_ID, Scene
from .surrogate import GpModel, OneHotCodec, default_kernel, expected_improvement
from .types import MaterialAssignment, Measurement


@dataclass(frozen=True)
class TunerConfig:
    total_evaluations: int = 25
    warm_start: int = 10
    threshold_db: float = 25.0
    cap: int = 4
    include_ground: bool = False
    pool_limit: int = 4096
    dataset_cap: int = 200
    epsilon: float = 0.01
    kernel: str = "matern52"
    noise_variance: float = 1e-6
    seed: int = 0

    def validate(self) -> None:
        if self.total_evaluations < 1 or not 1 <= self.warm_start <= self.total_evaluations:
            raise ValueError("need 1 <= warm_start <= total_evaluations")
        if self.dataset_cap < 1 or self.pool_limit < 1:
            raise ValueError("dataset_cap and pool_limit must be positive")


@dataclass(frozen=True)
class EvaluationRecord:
    iter: int
    candidate: tuple[int, ...]
    objective: float
    best_so_far: float
    wall_ms: float

    def to_json(self) -> dict:
        return {"iter": self.iter, "candidate": list(self.candidate), "objective": self.objective,
                "best_so_far": self.best_so_far, "wall_ms": self.wall_ms}


@dataclass
class TuningResult:
    assignment: MaterialAssignment
    focus_objects: tuple[int, ...]
    records: list[EvaluationRecord] = field(default_factory=list)
    initial_objective: float | None = None
    best_objective: float | None = None

    @property
    def evaluations(self) -> int:
        return len(self.records)

    @property
    def dimensions(self) -> int:
        return len(self.focus_objects)

    def log_lines(self) -> list[str]:
        return [json.dumps(r.to_json()) for r in self.records]


class DatasetObjective:
    """Mean absolute sim-to-real error over a fixed dataset, scored on cached geometry."""

    def __init__(self, scene: Scene, dataset: Sequence[Measurement], paths: Sequence | None = None):
        if not len(dataset):
            raise ValueError("objective needs a nonempty dataset")
        self.scene = scene
        self.measured = np.asarray([m.rsrp_dbm for m in dataset], dtype=float)
        if paths is None:
            paths = [trace_paths(scene, m.location) for m in dataset]
        self.table = PathTable(scene, paths)

    def __call__(self, assignment: MaterialAssignment) -> float:
        return float(np.mean(np.abs(self.table.rsrp(assignment) - self.measured)))


def objective(scene: Scene, assignment: MaterialAssignment, dataset: Sequence[Measurement]) -> float:
    return DatasetObjective(scene, dataset)(assignment)


def reduce(scene: Scene, assignment: MaterialAssignment, latest: Measurement, threshold_db: float = 25.0,
           cap: int = 4, include_ground: bool = False) -> list[int]:
    """Objects on the significant paths to the latest measurement location."""
    result = trace(scene, assignment, latest.location)
    return involved_objects(result, threshold_db, cap, include_ground)


def candidate_pool(num_objects: int, num_materials: int, incumbent: Sequence[int], limit: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Exhaustive when small, else random samples plus the incumbent and its single mutations."""
    total = num_materials ** num_objects
    if total <= limit:
        return np.asarray(list(itertools.product(range(num_materials), repeat=num_objects)), dtype=int)
    inc = np.asarray(incumbent, dtype=int)
    rows = [inc]
    for k in range(num_objects):
        for b in range(num_materials):
            if b != inc[k]:
                m = inc.copy()
                m[k] = b
                rows.append(m)
    rows.append(rng.integers(num_materials, size=(limit, num_objects)))
    pool = np.vstack([np.atleast_2d(r) for r in rows])
    _, first = np.unique(pool, axis=0, return_index=True)
    return pool[np.sort(first)]


def run_episode(scene: Scene, assignment: MaterialAssignment, focus: Sequence[int], evaluate,
                config: TunerConfig = TunerConfig()) -> TuningResult:
    """Warm start then EI-driven search over the discrete candidate pool."""
    config.validate()
    focus = tuple(int(k) for k in focus)
    if not focus:
        return TuningResult(assignment, ())
    rng = np.random.default_rng([config.seed, 2803])
    B = len(scene.material_space)
    codec = OneHotCodec(len(focus), B)
    incumbent = np.asarray(assignment.restricted(focus), dtype=int)
    pool = candidate_pool(len(focus), B, incumbent, config.pool_limit, rng)
    inc_idx = int(np.nonzero((pool == incumbent).all(axis=1))[0][0])
    pool_x = codec.encode_many(pool)
    evaluated = np.zeros(len(pool), dtype=bool)
    budget = min(config.total_evaluations, len(pool))

    records: list[EvaluationRecord] = []
    ys: list[float] = []
    order: list[int] = []
    best = np.inf

    def evaluate_index(i: int) -> None:
        nonlocal best
        t0 = time.perf_counter()
        cand = tuple(int(v) for v in pool[i])
        value = float(evaluate(assignment.with_materials(dict(zip(focus, cand)))))
        best = min(best, value)
        evaluated[i] = True
        order.append(i)
        ys.append(value)
        records.append(EvaluationRecord(len(records), cand, value, best, (time.perf_counter() - t0) * 1e3))

    evaluate_index(inc_idx)
    others = np.nonzero(~evaluated)[0]
    n_warm = min(config.warm_start - 1, budget - 1, len(others))
    for i in rng.choice(others, size=n_warm, replace=False):
        evaluate_index(int(i))

    kernel = default_kernel(len(focus), B, config.kernel)
    while len(records) < budget:
        y = -np.asarray(ys)
        scale = y.std()
        y_std = (y - y.mean()) / (scale if scale > 0 else 1.0)
        gp = GpModel.from_data(kernel, pool_x[order], y_std, config.noise_variance)
        open_idx = np.nonzero(~evaluated)[0]
        mu, sd = gp.predict(pool_x[open_idx])
        ei = expected_improvement(mu, sd, float(y_std.max()), config.epsilon)
        evaluate_index(int(open_idx[int(np.argmax(ei))]))

    ys_arr = np.asarray(ys)
    k_best = int(np.argmin(ys_arr))       # first minimum; the incumbent wins ties
    best_cand = pool[order[k_best]]
    tuned = assignment.with_materials(dict(zip(focus, (int(v) for v in best_cand))))
    return TuningResult(tuned, focus, records, float(ys_arr[0]), float(ys_arr[k_best]))


def _recent(dataset: Sequence[Measurement], cap: int) -> list[Measurement]:
    return list(dataset)[-cap:]


def tune(scene: Scene, assignment: MaterialAssignment, dataset: Sequence[Measurement], latest: Measurement,
         config: TunerConfig = TunerConfig(), path_cache: Mapping | None = None) -> TuningResult:
    """Reduced episode: only the objects involved at ``latest`` are searched."""
    focus = reduce(scene, assignment, latest, config.threshold_db, config.cap, config.include_ground)
    if not focus:
        return TuningResult(assignment, ())
    return run_episode(scene, assignment, focus, _evaluator(scene, dataset, config, path_cache), config)


def tune_global(scene: Scene, assignment: MaterialAssignment, dataset: Sequence[Measurement],
                config: TunerConfig = TunerConfig(), path_cache: Mapping | None = None) -> TuningResult:
    """Every object is a decision variable; same budget and pool rule as :func:`tune`."""
    focus = list(scene.object_ids)
    if config.include_ground:
        focus.append(GROUND_ID)
    return run_episode(scene, assignment, focus, _evaluator(scene, dataset, config, path_cache), config)


def _evaluator(scene, dataset, config, path_cache):
    data = _recent(dataset, config.dataset_cap)
    paths = None
    if path_cache is not None:
        paths = [path_cache[m.sequence] if m.sequence in path_cache else trace_paths(scene, m.location)
                 for m in data]
    return DatasetObjective(scene, data, paths)
