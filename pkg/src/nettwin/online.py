"""Online twinning: replay buffer, hybrid batches, EWC upkeep, and the per-arrival loop."""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch.func import functional_call, grad, vmap

from .nrrf import EwcState, Learner, NrrfModel, OptimConfig, batch_tensors
from .raytracer import RSRP_FLOOR_DBM, PathTable, trace_paths
from .scene import RX_HEIGHT_M, Scene
from .tuner import TunerConfig, TuningResult, tune
from .types import MaterialAssignment, Measurement, RunningStats

log = logging.getLogger(__name__)

MODES = ("onetwin", "baseline-sim", "nerf2-style", "nrrf-il", "nrrf-base")
_MODE_ALIASES = {"onetwin": "onetwin", "oneTwin": "onetwin", "baseline": "baseline-sim", "nerf2": "nerf2-style"}

RUN_LOG_COLUMNS = ("arrival_seq", "wall_ms_update", "gap_ind_db", "gap_ood_db", "tuning_episode_id",
                   "assignment_version")


def canonical_mode(name: str) -> str:
    mode = _MODE_ALIASES.get(name, name)
    if mode not in MODES:
        raise ValueError(f"unknown mode {name!r}; choose from {', '.join(MODES)}")
    return mode


# --------------------------------------------------------------------------- replay buffer


class ReplayBuffer:
    """Fixed-capacity FIFO of measurements."""

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[Measurement] = deque(maxlen=capacity)

    def push(self, m: Measurement) -> "ReplayBuffer":
        self._items.append(m)
        return self

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, k: int) -> Measurement:
        return self._items[k]

    def __iter__(self):
        return iter(self._items)

    @property
    def latest(self) -> Measurement:
        return self._items[-1]

    def sample(self, n: int, rng: np.random.Generator, include_latest: bool = True) -> list[Measurement]:
        """``n`` uniform draws; with replacement only when the buffer is smaller than ``n``."""
        if not self._items:
            raise ValueError("cannot sample from an empty buffer")
        size = len(self._items)
        if include_latest:
            rest = n - 1
            if size - 1 >= rest:
                idx = rng.choice(size - 1, size=rest, replace=False) if rest else np.zeros(0, int)
            else:
                idx = rng.integers(0, size, size=rest)
            picks = [self._items[-1]] + [self._items[int(i)] for i in idx]
        else:
            idx = rng.choice(size, size=n, replace=size < n)
            picks = [self._items[int(i)] for i in idx]
        return picks


# --------------------------------------------------------------------------- hybrid batches


@dataclass(frozen=True)
class HybridBatch:
    online_points: tuple[Measurement, ...]
    simulated_points: tuple[tuple[tuple[float, float, float], float], ...]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        locs = [m.location for m in self.online_points] + [p for p, _ in self.simulated_points]
        vals = [m.rsrp_dbm for m in self.online_points] + [v for _, v in self.simulated_points]
        return np.asarray(locs, dtype=float).reshape(-1, 3), np.asarray(vals, dtype=float)


def sample_proximal(scene: Scene, center, n: int, radius: float, rng: np.random.Generator,
                    reject_indoor: bool = True, max_tries: int = 20) -> np.ndarray:
    """``n`` receiver positions uniform in a disc around ``center``, clipped to bounds."""
    xmin, ymin, xmax, ymax = scene.bounds
    cx, cy = float(center[0]), float(center[1])
    out = np.empty((n, 3))
    out[:, 2] = RX_HEIGHT_M
    filled = 0
    pending = n
    for _ in range(max_tries):
        r = radius * np.sqrt(rng.uniform(size=pending))
        a = rng.uniform(0.0, 2 * math.pi, size=pending)
        xy = np.column_stack([np.clip(cx + r * np.cos(a), xmin, xmax), np.clip(cy + r * np.sin(a), ymin, ymax)])
        if reject_indoor:
            xy = xy[~scene.indoor_mask(xy)]
        take = xy[:pending]
        out[filled: filled + len(take), :2] = take
        filled += len(take)
        pending = n - filled
        if pending == 0:
            break
    if pending:
        out[filled:, :2] = (cx, cy)
    tx = np.asarray(scene.tx.position[:2])
    near = np.linalg.norm(out[:, :2] - tx, axis=1) < 0.5
    out[near, 0] = np.clip(out[near, 0] + 0.5, xmin, xmax)
    return out


def label_locations(scene: Scene, assignment: MaterialAssignment, locations: np.ndarray) -> np.ndarray:
    return PathTable.from_locations(scene, locations).rsrp(assignment)


def _reported_samples(scene, assignment, center, n, radius, rng, rounds: int = 4):
    # simulated locations with no path carry no signal, so they are redrawn like a missing report
    got_x, got_y = [], []
    for _ in range(rounds):
        locs = sample_proximal(scene, center, n, radius, rng)
        vals = label_locations(scene, assignment, locs)
        keep = vals > RSRP_FLOOR_DBM + 1e-9
        got_x.append(locs[keep])
        got_y.append(vals[keep])
        if sum(map(len, got_y)) >= n:
            break
    else:
        got_x.append(locs[~keep])
        got_y.append(vals[~keep])
    return np.vstack(got_x)[:n], np.concatenate(got_y)[:n]


def build_hybrid_batch(buffer: ReplayBuffer, scene: Scene, assignment: MaterialAssignment, latest: Measurement,
                       rng: np.random.Generator, online_size: int = 16, sim_size: int = 16,
                       radius: float = 30.0) -> HybridBatch:
    if not len(buffer):
        raise ValueError("buffer must be nonempty")
    online = tuple(buffer.sample(online_size, rng)) if online_size else ()
    sims: tuple = ()
    if sim_size:
        locs, vals = _reported_samples(scene, assignment, latest.location, sim_size, radius, rng)
        sims = tuple((tuple(map(float, p)), float(v)) for p, v in zip(locs, vals))
    return HybridBatch(online, sims)


# --------------------------------------------------------------------------- Fisher information


def update_fisher(model: NrrfModel, locations, targets_dbm, lam: float = 0.4, mode: str = "expected",
                  chunk: int = 128) -> EwcState:
    """Diagonal Fisher over the given points, anchored at the current weights.

    ``empirical``: mean of the squared per-point log-likelihood gradient, i.e.
    ((y - f) df/dtheta)^2 for a unit-variance Gaussian on normalized targets.
    ``expected``: its expectation over y ~ N(f, 1), i.e. (df/dtheta)^2.
    """
    if mode not in ("empirical", "expected"):
        raise ValueError(f"unknown fisher mode {mode!r}")
    x, y = batch_tensors(model, locations, targets_dbm)
    if not len(y):
        raise ValueError("fisher needs at least one point")
    params = {k: v.detach() for k, v in model.named_parameters()}
    buffers = {k: v for k, v in model.named_buffers()}

    def pred(p, xi):
        return functional_call(model, (p, buffers), (xi[None],))[0]

    per_point_grad = vmap(grad(pred), in_dims=(None, 0))
    fisher = {k: torch.zeros_like(v) for k, v in params.items()}
    with torch.no_grad():
        residual = y - torch.cat([model(x[k:k + chunk]) for k in range(0, len(x), chunk)])
    for k in range(0, len(x), chunk):
        g = per_point_grad(params, x[k:k + chunk])
        w = residual[k:k + chunk] ** 2 if mode == "empirical" else torch.ones_like(residual[k:k + chunk])
        for name, gv in g.items():
            wv = w.reshape((-1,) + (1,) * (gv.dim() - 1))
            fisher[name] += (wv * gv ** 2).sum(0)
    fisher = {k: v / len(y) for k, v in fisher.items()}
    anchor = {k: v.clone() for k, v in params.items()}
    return EwcState(anchor, fisher, lam)


# --------------------------------------------------------------------------- update step


def online_step(learner: Learner, batch: HybridBatch | tuple[np.ndarray, np.ndarray], ewc: EwcState | None,
                steps: int = 25) -> tuple[float, bool]:
    """``steps`` updates on one batch; a non-finite loss restores the pre-arrival weights.

    Returns (last loss, ok).
    """
    locs, vals = batch.arrays() if isinstance(batch, HybridBatch) else batch
    x, y = batch_tensors(learner.model, locs, vals)
    snap = learner.snapshot()
    loss = math.nan
    for _ in range(steps):
        loss = learner.step(x, y, ewc)
        if not math.isfinite(loss) or not _finite_weights(learner.model):
            learner.restore(snap)
            learner.anomalies += 1
            log.warning("non-finite loss during online update; weights restored")
            return loss, False
    return loss, True


def _finite_weights(model: NrrfModel) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in model.parameters())


# --------------------------------------------------------------------------- orchestration


@dataclass(frozen=True)
class OnlineConfig:
    mode: str = "onetwin"
    online_batch: int = 16
    sim_batch: int = 16
    proximal_radius: float = 30.0
    steps_per_arrival: int = 25
    buffer_capacity: int = 4096
    ewc_lambda: float = 0.4
    fisher_period: int = 50
    fisher_samples: int = 512
    fisher_mode: str = "expected"
    nerf2_window: int = 32
    tuning_delay_s: float = 0.0
    tuning: str = "reduced"              # "reduced" | "global" | "off"
    tuner: TunerConfig = field(default_factory=TunerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval_period: int = 1
    realtime: bool = False               # adopt episodes when the worker finishes, not in simulated time
    record_timing: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))

    def validate(self) -> None:
        if self.online_batch < 0 or self.sim_batch < 0 or self.online_batch + self.sim_batch == 0:
            raise ValueError("batch halves must be >= 0 and not both zero")
        if self.steps_per_arrival < 1 or self.eval_period < 1 or self.fisher_period < 1:
            raise ValueError("steps, eval and fisher periods must be >= 1")
        if self.proximal_radius <= 0:
            raise ValueError("proximal_radius must be positive")
        if self.tuning not in ("reduced", "global", "off"):
            raise ValueError(f"unknown tuning strategy {self.tuning!r}")
        if self.tuning_delay_s < 0:
            raise ValueError("tuning delay must be >= 0")


@dataclass
class RunResult:
    rows: list[dict]
    final_assignment: MaterialAssignment
    episodes: list[dict]
    update_stats: RunningStats
    anomalies: int
    model: NrrfModel | None

    def final_gap(self, split: str = "IND") -> float:
        key = "gap_ind_db" if split == "IND" else "gap_ood_db"
        return float(self.rows[-1][key])

    def mean_gap(self, split: str = "IND") -> float:
        """Gap averaged over every evaluated arrival (row 0, before any arrival, excluded)."""
        key = "gap_ind_db" if split == "IND" else "gap_ood_db"
        rows = self.rows[1:] or self.rows
        return float(np.mean([r[key] for r in rows]))


class _Evaluator:
    """Shared gap evaluation over fixed IND/OOD locations with cached truth."""

    def __init__(self, truth_fn: Callable[[np.ndarray], np.ndarray], ind: np.ndarray, ood: np.ndarray):
        self.ind = np.asarray(ind, float).reshape(-1, 3)
        self.ood = np.asarray(ood, float).reshape(-1, 3)
        self.truth_ind = truth_fn(self.ind) if len(self.ind) else np.zeros(0)
        self.truth_ood = truth_fn(self.ood) if len(self.ood) else np.zeros(0)

    def gaps(self, predict: Callable[[np.ndarray], np.ndarray]) -> tuple[float, float]:
        def g(locs, truth):
            if not len(locs):
                return math.nan
            return float(np.mean(np.abs(np.asarray(predict(locs), float) - truth)))
        return g(self.ind, self.truth_ind), g(self.ood, self.truth_ood)


def _episode(scene, assignment, dataset, latest, config: OnlineConfig, path_cache) -> TuningResult:
    from .tuner import tune_global
    if config.tuning == "global":
        return tune_global(scene, assignment, dataset, config.tuner, path_cache)
    return tune(scene, assignment, dataset, latest, config.tuner, path_cache)


def run_twinning(stream: Iterable[Measurement], scene: Scene, assignment: MaterialAssignment,
                 model: NrrfModel | None, config: OnlineConfig, truth_fn: Callable[[np.ndarray], np.ndarray],
                 ind: np.ndarray, ood: np.ndarray, init_points: tuple[np.ndarray, np.ndarray] | None = None
                 ) -> RunResult:
    """Per-arrival loop for every mode; all modes share one evaluation path.

    ``init_points`` (locations, dBm) seed the initial EWC state, typically a sample of
    the pretraining set.
    """
    config.validate()
    mode = config.mode
    rng = np.random.default_rng([config.seed, 4271])
    evaluator = _Evaluator(truth_fn, ind, ood)
    rows: list[dict] = []
    stats = RunningStats()
    episodes: list[dict] = []
    buffer = ReplayBuffer(config.buffer_capacity)
    current = assignment
    version = 0
    # each measurement's traced geometry, reused by every tuning episode
    path_cache: dict[int, list] = {}
    learner = Learner(model, config.optim) if model is not None else None

    use_ewc = mode in ("onetwin", "nrrf-il")
    use_online = mode in ("onetwin", "nerf2-style")
    use_sim = mode in ("onetwin", "nrrf-il", "nrrf-base")
    tuning_on = mode in ("onetwin", "nrrf-il", "nrrf-base") and config.tuning != "off"
    sim_pool_x: list[np.ndarray] = []
    sim_pool_y: list[np.ndarray] = []

    ewc = None
    if use_ewc and model is not None and init_points is not None and len(init_points[1]):
        ewc = update_fisher(model, init_points[0], init_points[1], config.ewc_lambda, config.fisher_mode)

    if mode == "baseline-sim":
        static_ind = label_locations(scene, assignment, evaluator.ind) if len(evaluator.ind) else np.zeros(0)
        static_ood = label_locations(scene, assignment, evaluator.ood) if len(evaluator.ood) else np.zeros(0)

        def predict(locs):
            if locs is evaluator.ind:
                return static_ind
            return static_ood
    else:
        def predict(locs):
            return learner.model.predict_rsrp(locs)

    def emit(seq, wall_ms, episode_id):
        g_ind, g_ood = evaluator.gaps(predict)
        rows.append({"arrival_seq": seq,
                     "wall_ms_update": (round(wall_ms, 3) if config.record_timing and wall_ms is not None else ""),
                     "gap_ind_db": g_ind, "gap_ood_db": g_ood,
                     "tuning_episode_id": "" if episode_id is None else episode_id,
                     "assignment_version": version})

    emit(0, None, None)
    pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="tuner") if tuning_on else None
    inflight: tuple[Future, float, int] | None = None     # (future, ready time, episode id)
    next_episode = 0
    launched: dict[int, int] = {}
    recent: deque[Measurement] = deque(maxlen=config.nerf2_window)

    try:
        for k, m in enumerate(stream, start=1):
            buffer.push(m)
            recent.append(m)
            t0 = time.perf_counter()
            adopted = None
            if inflight is not None:
                fut, ready, eid = inflight
                done = fut.done() if config.realtime else m.timestamp >= ready
                if done:
                    res: TuningResult = fut.result()
                    if res.assignment != current:
                        current = res.assignment
                        version += 1
                    episodes.append({"episode_id": eid, "launched_seq": launched[eid], "adopted_seq": m.sequence,
                                     "focus_objects": list(res.focus_objects), "evaluations": res.evaluations,
                                     "initial_objective": res.initial_objective,
                                     "best_objective": res.best_objective, "log": res.log_lines()})
                    adopted = eid
                    inflight = None

            if mode == "baseline-sim":
                emit(m.sequence, None, adopted)
                continue

            if tuning_on:
                path_cache[m.sequence] = trace_paths(scene, m.location)

            if mode == "nerf2-style":
                locs = np.asarray([q.location for q in recent], float)
                vals = np.asarray([q.rsrp_dbm for q in recent], float)
                online_step(learner, (locs, vals), None, config.steps_per_arrival)
            else:
                n_on = config.online_batch if use_online else 0
                n_sim = config.sim_batch if use_sim else 0
                if not use_online:
                    n_sim = config.online_batch + config.sim_batch
                batch = build_hybrid_batch(buffer, scene, current, m, rng, n_on, n_sim, config.proximal_radius)
                if mode == "nrrf-base":
                    bx, by = batch.arrays()
                    sim_pool_x.append(bx)
                    sim_pool_y.append(by)
                    allx, ally = np.vstack(sim_pool_x), np.concatenate(sim_pool_y)
                    for _ in range(config.steps_per_arrival):
                        idx = rng.integers(0, len(ally), size=len(by))
                        online_step(learner, (allx[idx], ally[idx]), None, 1)
                else:
                    online_step(learner, batch, ewc, config.steps_per_arrival)
                if use_ewc and k % config.fisher_period == 0:
                    if use_online:
                        picks = buffer.sample(min(config.fisher_samples, len(buffer)), rng, include_latest=False)
                        fx = np.asarray([q.location for q in picks], float)
                        fy = np.asarray([q.rsrp_dbm for q in picks], float)
                    else:
                        fx, fy = batch.arrays()
                    ewc = update_fisher(learner.model, fx, fy, config.ewc_lambda, config.fisher_mode)

            if tuning_on and inflight is None:
                dataset = tuple(buffer)
                eid = next_episode
                next_episode += 1
                ep_config = replace(config.tuner, seed=config.tuner.seed * 100003 + eid)
                fut = pool.submit(_episode, scene, current, dataset, m, replace(config, tuner=ep_config),
                                  dict(path_cache))
                if not config.realtime and config.tuning_delay_s == 0.0:
                    fut.result()
                launched[eid] = m.sequence
                inflight = (fut, m.timestamp + max(config.tuning_delay_s, 1e-9), eid)

            wall_ms = (time.perf_counter() - t0) * 1e3
            stats.add(wall_ms)
            if k % config.eval_period == 0:
                emit(m.sequence, wall_ms, adopted)
    finally:
        if pool is not None:
            pool.shutdown(wait=True, cancel_futures=True)

    return RunResult(rows, current, episodes, stats, learner.anomalies if learner else 0,
                     learner.model if learner else None)
