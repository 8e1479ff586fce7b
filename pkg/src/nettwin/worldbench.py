"""Synthetic stand-in for the live network: hidden truth, streams, splits, gap metric."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from shapely.geometry import Point, Polygon

from .raytracer import RSRP_FLOOR_DBM, ClutterBox, PathTable, trace, trace_paths
from .scene import (
    RX_HEIGHT_M, MaterialSpace, Scene, SceneObject, TxConfig, box_footprint, default_assignment,
    default_material_space, itu_material,
)
from .types import MaterialAssignment, Measurement

OUT_OF_SPACE_MATERIALS = ("itu-ceiling-board", "itu-floorboard", "itu-very-dry-ground", "itu-wet-ground")

# (object count, width, height, stream length) of the three reference scene sizes
SCENE_SIZES = {
    "small": (27, 650.0, 370.0, 200),
    "medium": (39, 900.0, 550.0, 300),
    "large": (68, 1200.0, 800.0, 400),
}


class WorldConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    num_objects: int = 39
    width: float = 900.0
    height: float = 550.0
    mode: str = "irreducible"          # "reducible" | "irreducible"
    seed: int = 0
    noise_sigma_db: float = 1.0
    street_width: float = 20.0
    tx_height: float = 34.0
    tx_site: str = "center"            # "center" | "corner"
    num_materials: int = 9
    clutter_fraction: float = 0.1
    clutter_loss_db: float = 15.0
    out_of_space_fraction: float = 0.3
    building_height: tuple[float, float] = (3.0, 8.0)
    footprint_fill: tuple[float, float] = (0.2, 0.6)
    # clutter boxes are foliage belts lining a street line; length is clipped to bounds
    clutter_length: tuple[float, float] = (500.0, 1000.0)
    clutter_width: tuple[float, float] = (20.0, 24.0)
    clutter_height: tuple[float, float] = (6.0, 12.0)

    @classmethod
    def sized(cls, size: str, **kw) -> "WorldConfig":
        n, w, h, _ = SCENE_SIZES[size]
        return cls(num_objects=n, width=w, height=h, **kw)

    def validate(self) -> None:
        if self.mode not in ("reducible", "irreducible"):
            raise WorldConfigError(f"unknown world mode {self.mode!r}")
        if self.num_objects < 0 or self.width <= 0 or self.height <= 0:
            raise WorldConfigError("object count must be >= 0 and bounds positive")
        if not 2 <= self.num_materials <= 9:
            raise WorldConfigError("num_materials must be in [2, 9]")
        if self.noise_sigma_db < 0:
            raise WorldConfigError("noise_sigma_db must be >= 0")


@dataclass(frozen=True)
class SyntheticWorld:
    scene: Scene                      # public geometry with calibrated (default) materials
    hidden_assignment: MaterialAssignment
    truth_space: MaterialSpace        # public space, optionally extended by out-of-space materials
    noise_sigma_db: float
    clutter: tuple[ClutterBox, ...]
    rng_seed: int
    street_x: tuple[float, ...] = ()
    street_y: tuple[float, ...] = ()

    @property
    def truth_scene(self) -> Scene:
        return self.scene.replace(material_space=self.truth_space)

    def truth_rsrp(self, location) -> float:
        return trace(self.truth_scene, self.hidden_assignment, location, self.clutter).rsrp_dbm

    def truth_table(self, locations) -> np.ndarray:
        table = PathTable.from_locations(self.truth_scene, locations, self.clutter)
        return table.rsrp(self.hidden_assignment)

    def to_json(self) -> dict:
        doc = self.scene.to_json()
        doc["streets"] = {"x": list(self.street_x), "y": list(self.street_y)}
        doc["sealed"] = {
            "hidden_assignment": self.hidden_assignment.to_json([m.name for m in self.truth_space]),
            "truth_space": [m.to_json() for m in self.truth_space],
            "noise_sigma_db": self.noise_sigma_db,
            "clutter": [c.to_json() for c in self.clutter],
            "rng_seed": self.rng_seed,
        }
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticWorld":
        from .scene import Material

        sealed = doc["sealed"]
        scene = Scene.from_json({k: v for k, v in doc.items() if k not in ("sealed", "streets")})
        space = MaterialSpace(tuple(Material.from_json(m) for m in sealed["truth_space"]))
        hidden = MaterialAssignment.from_json(sealed["hidden_assignment"], [m.name for m in space])
        streets = doc.get("streets", {})
        return cls(scene, hidden, space, float(sealed["noise_sigma_db"]),
                   tuple(ClutterBox.from_json(c) for c in sealed["clutter"]), int(sealed["rng_seed"]),
                   tuple(streets.get("x", ())), tuple(streets.get("y", ())))


def save_world(world: SyntheticWorld, path) -> None:
    Path(path).write_text(json.dumps(world.to_json(), indent=1))


def load_world(path) -> SyntheticWorld:
    return SyntheticWorld.from_json(json.loads(Path(path).read_text()))


def _grid_pitch(n: int, width: float, height: float, street: float) -> float:
    if n == 0:
        return max(width, height)
    pitch = math.sqrt(width * height / n)
    while pitch > 2 * street:
        if math.floor(width / pitch) * math.floor(height / pitch) >= n:
            return pitch
        pitch *= 0.97
    raise WorldConfigError(f"cannot place {n} buildings in {width}x{height} with {street} m streets")


def generate_world(config: WorldConfig) -> SyntheticWorld:
    """Deterministic street-grid city with randomly sized rectangular buildings."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    W, H, s = config.width, config.height, config.street_width
    bounds = (0.0, 0.0, W, H)
    pitch = _grid_pitch(config.num_objects, W, H, s)
    nx, ny = max(1, int(W // pitch)), max(1, int(H // pitch))
    px, py = W / nx, H / ny
    street_x = tuple(float(i * px) for i in range(nx + 1))
    street_y = tuple(float(j * py) for j in range(ny + 1))

    base_space = default_material_space()
    space = MaterialSpace(base_space.materials[: config.num_materials]) if config.num_materials < 9 else base_space
    marble = space.index_of("itu-marble")
    concrete = space.index_of("itu-concrete") if "itu-concrete" in space.names else 0

    blocks = [(i, j) for i in range(nx) for j in range(ny)]
    chosen = sorted(rng.choice(len(blocks), size=config.num_objects, replace=False).tolist())
    objects = []
    lo_h, hi_h = config.building_height
    for oid, b in enumerate(chosen):
        i, j = blocks[b]
        x0, x1 = i * px + s / 2 + 2.0, (i + 1) * px - s / 2 - 2.0
        y0, y1 = j * py + s / 2 + 2.0, (j + 1) * py - s / 2 - 2.0
        bw = (x1 - x0) * rng.uniform(*config.footprint_fill)
        bh = (y1 - y0) * rng.uniform(*config.footprint_fill)
        ox = x0 + rng.uniform(0, (x1 - x0) - bw)
        oy = y0 + rng.uniform(0, (y1 - y0) - bh)
        fp = box_footprint(round(ox, 3), round(oy, 3), round(ox + bw, 3), round(oy + bh, 3))
        objects.append(SceneObject(oid, fp, round(float(rng.uniform(lo_h, hi_h)), 2), marble))

    if config.tx_site == "corner":
        tx_xy = (street_x[min(1, nx)], street_y[min(1, ny)])
    else:
        tx_xy = (street_x[nx // 2], street_y[ny // 2])
    tx = TxConfig((float(tx_xy[0]), float(tx_xy[1]), config.tx_height))
    d_max = math.ceil(math.hypot(W, H))
    scene = Scene(tuple(objects), concrete, tx, bounds, float(d_max), space)

    B = len(space)
    if config.mode == "reducible":
        truth_space = space
        hidden = {o.id: int(rng.integers(B)) for o in objects}
    else:
        extras = tuple(itu_material(n) for n in OUT_OF_SPACE_MATERIALS)
        truth_space = MaterialSpace(space.materials + extras)
        hidden = {}
        for o in objects:
            if rng.uniform() < config.out_of_space_fraction:
                hidden[o.id] = B + int(rng.integers(len(extras)))
            else:
                hidden[o.id] = int(rng.integers(B))
    hidden_assignment = MaterialAssignment(hidden, concrete)

    clutter: list[ClutterBox] = []
    if config.mode == "irreducible" and config.num_objects > 0:
        for _ in range(max(1, math.ceil(config.clutter_fraction * config.num_objects))):
            along_x = rng.uniform() < 0.5
            length = float(rng.uniform(*config.clutter_length))
            width = float(rng.uniform(*config.clutter_width))
            if along_x:
                cx = float(rng.uniform(0.1 * W, 0.9 * W))
                cy = float(rng.choice(street_y[1:-1] or street_y))
                hx, hy = length / 2, width / 2
            else:
                cx = float(rng.choice(street_x[1:-1] or street_x))
                cy = float(rng.uniform(0.1 * H, 0.9 * H))
                hx, hy = width / 2, length / 2
            fp = box_footprint(max(0.0, cx - hx), max(0.0, cy - hy), min(W, cx + hx), min(H, cy + hy))
            height = float(rng.uniform(*config.clutter_height))
            if Polygon(fp).distance(Point(tx_xy)) < 15.0:
                continue
            clutter.append(ClutterBox(fp, height, config.clutter_loss_db))

    return SyntheticWorld(scene, hidden_assignment, truth_space, config.noise_sigma_db, tuple(clutter),
                          config.seed, street_x, street_y)


def measure(world: SyntheticWorld, location, index: int = 0, timestamp: float | None = None) -> Measurement:
    """Truth RSRP plus Gaussian noise, seeded by (world seed, query index)."""
    loc = tuple(float(v) for v in location)
    if not world.scene.in_bounds(loc):
        raise ValueError(f"location {loc} is outside the world bounds")
    value = world.truth_rsrp(loc)
    if world.noise_sigma_db > 0:
        value += float(np.random.default_rng([world.rng_seed, 7919, index]).normal(0.0, world.noise_sigma_db))
    return Measurement(loc, value, index, float(index) if timestamp is None else timestamp)


# --------------------------------------------------------------------------- trajectories


@dataclass(frozen=True)
class TrajectoryConfig:
    waypoints: tuple[tuple[float, float], ...] = ()
    spacing_m: float = 5.0
    num_points: int | None = None      # random walk on the street grid when waypoints are empty
    seed: int = 0
    interval_s: float = 1.0
    start: tuple[float, float] | None = None   # None: the intersection nearest the TX


def sample_polyline(waypoints: Sequence[Sequence[float]], spacing: float) -> np.ndarray:
    """Points every ``spacing`` meters along the polyline, both ends included."""
    pts = np.asarray(waypoints, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        return np.zeros((0, 2))
    seg = np.diff(pts, axis=0)
    lens = np.linalg.norm(seg, axis=1)
    total = lens.sum()
    if total <= 0:
        return np.zeros((0, 2))
    n = int(math.floor(total / spacing + 1e-9))
    s = np.arange(n + 1) * spacing
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lens) - 1)
    frac = np.where(lens[k] > 0, (s - cum[k]) / np.where(lens[k] > 0, lens[k], 1), 0.0)
    return pts[k] + frac[:, None] * seg[k]


def street_walk(world: SyntheticWorld, length_m: float, seed: int, start=None) -> list[tuple[float, float]]:
    """Random walk over street intersections without immediate backtracking."""
    rng = np.random.default_rng([seed, 104729])
    xs, ys = world.street_x, world.street_y
    nx, ny = len(xs), len(ys)
    if start is None:
        i, j = int(rng.integers(nx)), int(rng.integers(ny))
    else:
        i = int(np.argmin(np.abs(np.asarray(xs) - start[0])))
        j = int(np.argmin(np.abs(np.asarray(ys) - start[1])))
    path = [(xs[i], ys[j])]
    prev = None
    walked = 0.0
    while walked < length_m:
        moves = [(i + di, j + dj) for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))
                 if 0 <= i + di < nx and 0 <= j + dj < ny]
        if prev is not None and len(moves) > 1:
            moves = [m for m in moves if m != prev]
        prev = (i, j)
        i, j = moves[int(rng.integers(len(moves)))]
        nxt = (xs[i], ys[j])
        walked += math.dist(path[-1], nxt)
        path.append(nxt)
    return path


def trajectory_points(world: SyntheticWorld, traj: TrajectoryConfig) -> np.ndarray:
    if traj.waypoints:
        pts = sample_polyline(traj.waypoints, traj.spacing_m)
    elif traj.num_points:
        start = traj.start if traj.start is not None else world.scene.tx.position[:2]
        walk = street_walk(world, traj.num_points * traj.spacing_m + traj.spacing_m, traj.seed, start)
        pts = sample_polyline(walk, traj.spacing_m)[: traj.num_points]
    else:
        pts = np.zeros((0, 2))
    pts = _nudge_outdoor(world.scene, pts)
    return np.column_stack([pts, np.full(len(pts), RX_HEIGHT_M)]) if len(pts) else np.zeros((0, 3))


def _nudge_outdoor(scene: Scene, pts: np.ndarray) -> np.ndarray:
    # keep receivers off the TX mast and inside bounds
    if not len(pts):
        return pts
    xmin, ymin, xmax, ymax = scene.bounds
    out = pts.copy()
    out[:, 0] = np.clip(out[:, 0], xmin, xmax)
    out[:, 1] = np.clip(out[:, 1], ymin, ymax)
    tx = np.asarray(scene.tx.position[:2])
    close = np.linalg.norm(out - tx, axis=1) < 0.5
    out[close] += 0.5
    return out


def reported(rsrp_dbm) -> np.ndarray:
    """Mask of values a handset would report: the tracer floor means no signal at all."""
    return np.asarray(rsrp_dbm, dtype=float) > RSRP_FLOOR_DBM + 1e-9


def make_stream(world: SyntheticWorld, traj: TrajectoryConfig) -> list[Measurement]:
    """Noisy measurements along the trajectory, one per spacing step.

    Locations with no signal produce no report. A random-walk trajectory is
    extended until it yields ``num_points`` reports.
    """
    pts = trajectory_points(world, traj)
    want = traj.num_points if not traj.waypoints else None
    while True:
        if not len(pts):
            return []
        truth = PathTable.from_locations(world.truth_scene, pts, world.clutter).rsrp(world.hidden_assignment)
        keep = reported(truth)
        if want is None or keep.sum() >= want or len(pts) >= 20 * want:
            break
        pts = trajectory_points(world, replace(traj, num_points=2 * len(pts)))
    pts, truth = pts[keep], truth[keep]
    if want is not None:
        pts, truth = pts[:want], truth[:want]
    out = []
    for k, (loc, value) in enumerate(zip(pts, truth)):
        seq = k + 1
        if world.noise_sigma_db > 0:
            value = value + float(np.random.default_rng([world.rng_seed, 7919, seq]).normal(0.0, world.noise_sigma_db))
        out.append(Measurement(tuple(float(v) for v in loc), float(value), seq, seq * traj.interval_s))
    return out


# --------------------------------------------------------------------------- splits and the gap metric


@dataclass(frozen=True)
class SplitConfig:
    ind_every: int = 3        # one held-out point between every ``ind_every``-th pair of stream points
    ood_margin_m: float = 100.0
    ood_points: int = 60
    seed: int = 0


def make_splits(world: SyntheticWorld, stream: Sequence[Measurement], config: SplitConfig = SplitConfig()) -> dict:
    """IND: midpoints between consecutive training points; EXT: training points; OOD: far street points."""
    train = np.asarray([m.location for m in stream], dtype=float).reshape(-1, 3)
    ext = train.copy()
    ind = []
    for k in range(0, len(train) - 1, max(1, config.ind_every)):
        mid = 0.5 * (train[k] + train[k + 1])
        if np.linalg.norm(train[k + 1, :2] - train[k, :2]) > 1e-9:
            ind.append(mid)
    ind = np.asarray(ind).reshape(-1, 3)
    if len(ind):
        ind = ind[reported(world.truth_table(ind))]
    ood = _ood_points(world, train, config)
    return {"IND": ind, "EXT": ext, "OOD": ood}


def _ood_points(world: SyntheticWorld, train: np.ndarray, config: SplitConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 15485863])
    xs, ys = world.street_x, world.street_y
    xmin, ymin, xmax, ymax = world.scene.bounds
    cands = []
    for _ in range(config.ood_points * 40):
        if rng.uniform() < 0.5:
            p = (float(rng.choice(xs)), float(rng.uniform(ymin, ymax)))
        else:
            p = (float(rng.uniform(xmin, xmax)), float(rng.choice(ys)))
        cands.append(p)
    cands = _nudge_outdoor(world.scene, np.asarray(cands))
    if len(train):
        d = np.min(np.linalg.norm(cands[:, None, :] - train[None, :, :2], axis=2), axis=1)
        cands = cands[d > config.ood_margin_m]
    cands = cands[~world.scene.indoor_mask(cands)] if len(cands) else cands
    # truth is traced in chunks so only about as many candidates as needed are scored
    kept = []
    for k in range(0, len(cands), config.ood_points):
        chunk = cands[k:k + config.ood_points]
        pts = np.column_stack([chunk, np.full(len(chunk), RX_HEIGHT_M)])
        kept.extend(chunk[reported(world.truth_table(pts))])
        if len(kept) >= config.ood_points:
            break
    cands = np.asarray(kept).reshape(-1, 2)[: config.ood_points]
    return np.column_stack([cands, np.full(len(cands), RX_HEIGHT_M)]) if len(cands) else np.zeros((0, 3))


@dataclass
class TwinGapReport:
    split_name: str
    locations: np.ndarray
    predicted: np.ndarray
    truth: np.ndarray
    per_point_abs_err: np.ndarray = field(init=False)
    mean_gap_db: float = field(init=False)

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=float)
        self.truth = np.asarray(self.truth, dtype=float)
        self.per_point_abs_err = np.abs(self.predicted - self.truth)
        self.mean_gap_db = float(np.mean(self.per_point_abs_err))

    def to_json(self) -> dict:
        return {
            "split_name": self.split_name,
            "mean_gap_db": self.mean_gap_db,
            "num_points": int(len(self.truth)),
            "locations": np.asarray(self.locations).tolist(),
            "predicted": self.predicted.tolist(),
            "truth": self.truth.tolist(),
            "per_point_abs_err": self.per_point_abs_err.tolist(),
        }


class TruthCache:
    """Noiseless truth values per split, computed once."""

    def __init__(self, world: SyntheticWorld):
        self.world = world
        self._cache: dict[bytes, np.ndarray] = {}

    def __call__(self, locations: np.ndarray) -> np.ndarray:
        key = np.ascontiguousarray(locations, dtype=float).tobytes()
        if key not in self._cache:
            self._cache[key] = self.world.truth_table(locations)
        return self._cache[key]


def evaluate_gap(predictor: Callable[[np.ndarray], np.ndarray], world: SyntheticWorld, locations: np.ndarray,
                 split_name: str = "IND", truth: Callable | None = None) -> TwinGapReport:
    """Mean absolute error of ``predictor`` against noiseless truth on a split.

    ``predictor`` maps an (n, 3) location array to n predictions in dBm.
    """
    locations = np.asarray(locations, dtype=float).reshape(-1, 3)
    if not len(locations):
        raise ValueError(f"split {split_name!r} is empty")
    truth_values = (truth or world.truth_table)(locations)
    pred = np.asarray(predictor(locations), dtype=float).reshape(-1)
    return TwinGapReport(split_name, locations, pred, truth_values)


def write_points_csv(path, locations: np.ndarray, rsrp: np.ndarray, seq: Iterable[int] | None = None) -> None:
    locations = np.asarray(locations, dtype=float).reshape(-1, 3)
    seq = list(seq) if seq is not None else list(range(1, len(locations) + 1))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq", "x", "y", "z", "rsrp_dbm"])
        for s, (x, y, z), r in zip(seq, locations, rsrp):
            w.writerow([s, f"{x:.6f}", f"{y:.6f}", f"{z:.6f}", f"{r:.6f}"])


def read_points_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = list(csv.DictReader(open(path, newline="")))
    seq = np.asarray([int(r["seq"]) for r in rows], int)
    loc = np.asarray([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]).reshape(-1, 3)
    rsrp = np.asarray([float(r["rsrp_dbm"]) for r in rows])
    return seq, loc, rsrp


def write_stream_csv(path, stream: Sequence[Measurement]) -> None:
    write_points_csv(path, np.asarray([m.location for m in stream]).reshape(-1, 3),
                     [m.rsrp_dbm for m in stream], [m.sequence for m in stream])


def read_stream_csv(path, interval_s: float = 1.0) -> list[Measurement]:
    seq, loc, rsrp = read_points_csv(path)
    return [Measurement(tuple(map(float, l)), float(r), int(s), int(s) * interval_s) for s, l, r in zip(seq, loc, rsrp)]
