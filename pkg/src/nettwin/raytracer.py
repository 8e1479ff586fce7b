"""Image-method ray tracer: LoS plus specular reflections up to depth two.

Geometry is computed once per (scene, receiver); materials only enter through
the Fresnel power factors in :func:`rsrp_from_paths`, which is what lets the
tuner re-score candidate assignments without retracing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .scene import GROUND_ID, MaterialSpace, Material, Scene, SceneObject, TxConfig
from .types import MaterialAssignment

RSRP_FLOOR_DBM = -150.0
EPS_M = 1e-9
_T_EPS = 1e-9  # fraction of a segment treated as its endpoint

LOS, REFLECT1, REFLECT2 = "LoS", "Reflect1", "Reflect2"


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class ClutterBox:
    """Occluder that attenuates (but never reflects or blocks) every segment crossing it."""

    footprint: tuple[tuple[float, float], ...]
    height: float
    loss_db: float

    def to_json(self) -> dict:
        return {"footprint": [list(p) for p in self.footprint], "height": self.height, "loss_db": self.loss_db}

    @classmethod
    def from_json(cls, d: dict) -> "ClutterBox":
        return cls(tuple(tuple(map(float, p)) for p in d["footprint"]), float(d["height"]), float(d["loss_db"]))


@dataclass(frozen=True)
class PathSegmentChain:
    kind: str
    vertices: tuple[tuple[float, float, float], ...]
    reflecting_faces: tuple[tuple[int, int, float], ...]  # (object id, face id, incidence angle rad)
    total_length: float
    clutter_loss_db: float = 0.0

    @property
    def num_reflections(self) -> int:
        return len(self.reflecting_faces)

    def face_keys(self) -> tuple[tuple[int, int], ...]:
        return tuple((o, f) for o, f, _ in self.reflecting_faces)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "vertices": [list(v) for v in self.vertices],
            "reflecting_faces": [list(r) for r in self.reflecting_faces],
            "total_length": self.total_length,
            "clutter_loss_db": self.clutter_loss_db,
        }


@dataclass(frozen=True)
class TraceResult:
    paths: tuple[PathSegmentChain, ...]
    rsrp_dbm: float
    involved_objects: tuple[int, ...]
    path_powers_dbm: tuple[float, ...] = field(default=())

    def to_json_line(self) -> str:
        return json.dumps({
            "rsrp_dbm": self.rsrp_dbm,
            "involved_objects": list(self.involved_objects),
            "path_powers_dbm": list(self.path_powers_dbm),
            "paths": [p.to_json() for p in self.paths],
        })


# --------------------------------------------------------------------------- Fresnel


def reflection_power(material: Material, incidence: np.ndarray | float, frequency_hz: float) -> np.ndarray:
    """Mean of TE and TM |Gamma|^2 for a planar interface, incidence measured from the normal."""
    theta = np.asarray(incidence, dtype=float)
    if material.is_perfect_conductor:
        return np.ones_like(theta)
    eta = material.complex_permittivity(frequency_hz)
    cos_t = np.cos(theta)
    sin2 = np.sin(theta) ** 2
    root = np.sqrt(eta - sin2 + 0j)
    te = (cos_t - root) / (cos_t + root)
    tm = (eta * cos_t - root) / (eta * cos_t + root)
    return 0.5 * (np.abs(te) ** 2 + np.abs(tm) ** 2)


def free_space_power_w(tx: TxConfig, length: np.ndarray | float) -> np.ndarray:
    """Link budget times the Friis spreading factor, in watts."""
    g_link = 10.0 ** ((tx.budget_db - 30.0) / 10.0)
    return g_link * (tx.wavelength_m / (4.0 * math.pi * np.asarray(length, dtype=float))) ** 2


def watts_to_dbm(power_w) -> np.ndarray:
    p = np.asarray(power_w, dtype=float)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(p) + 30.0
    return np.maximum(out, RSRP_FLOOR_DBM)


# --------------------------------------------------------------------------- geometry


@dataclass
class _Occluders:
    """Walls and roofs in array form for vectorized segment tests."""

    a: np.ndarray        # (n, 2)
    e: np.ndarray        # (n, 2) edge vector b - a
    h: np.ndarray        # (n,)
    owner: np.ndarray    # (n,) index of the owning polygon
    roof_h: np.ndarray   # (m,) per polygon
    starts: np.ndarray   # (m,) first edge index of each polygon
    _pad: tuple | None = None

    @classmethod
    def build(cls, polygons: Sequence[tuple[Sequence[tuple[float, float]], float]]) -> "_Occluders":
        a, e, h, owner, roof_h, starts = [], [], [], [], [], []
        for k, (fp, height) in enumerate(polygons):
            starts.append(len(a))
            roof_h.append(height)
            n = len(fp)
            for j in range(n):
                p, q = fp[j], fp[(j + 1) % n]
                a.append(p)
                e.append((q[0] - p[0], q[1] - p[1]))
                h.append(height)
                owner.append(k)
        return cls(np.asarray(a, float).reshape(-1, 2), np.asarray(e, float).reshape(-1, 2),
                   np.asarray(h, float), np.asarray(owner, int), np.asarray(roof_h, float),
                   np.asarray(starts, int))

    @property
    def num_polygons(self) -> int:
        return len(self.roof_h)

    def hits(self, p: np.ndarray, q: np.ndarray, exclude: np.ndarray | None = None) -> np.ndarray:
        """(S, n_polygons) bool: segment s passes through polygon k's wall or roof.

        ``exclude`` is an (S, k) array of wall indices that a segment may touch
        at its endpoints (the faces it reflects on); -1 entries are ignored.
        """
        S = len(p)
        m = self.num_polygons
        if S == 0 or m == 0:
            return np.zeros((S, m), dtype=bool)
        d = q - p  # (S, 3)
        # walls
        ap = self.a[None, :, :] - p[:, None, :2]                      # (S, n, 2)
        denom = d[:, None, 0] * self.e[None, :, 1] - d[:, None, 1] * self.e[None, :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (ap[..., 0] * self.e[None, :, 1] - ap[..., 1] * self.e[None, :, 0]) / denom
            u = (ap[..., 0] * d[:, None, 1] - ap[..., 1] * d[:, None, 0]) / denom
            z = p[:, None, 2] + t * d[:, None, 2]
        wall_hit = (np.abs(denom) > 1e-15) & (t > _T_EPS) & (t < 1 - _T_EPS) & (u >= 0) & (u <= 1) \
            & (z >= 0) & (z <= self.h[None, :])
        if exclude is not None:
            for col in range(exclude.shape[1]):
                idx = exclude[:, col]
                ok = idx >= 0
                wall_hit[np.nonzero(ok)[0], idx[ok]] = False
        hit = np.zeros((S, m), dtype=bool)
        rows, cols = np.nonzero(wall_hit)
        hit[rows, self.owner[cols]] = True
        # roofs: crossing of the plane z = h inside the footprint (crossing-number test)
        dz = d[:, 2:3]
        with np.errstate(divide="ignore", invalid="ignore"):
            tr = (self.roof_h[None, :] - p[:, 2:3]) / dz             # (S, m)
        cand = (np.abs(dz) > 1e-15) & (tr > _T_EPS) & (tr < 1 - _T_EPS)
        if cand.any():
            si, pk = np.nonzero(cand)
            qx = p[si, 0] + tr[si, pk] * d[si, 0]
            qy = p[si, 1] + tr[si, pk] * d[si, 1]
            inside = self._point_in_polygon(qx, qy, pk)
            hit[si[inside], pk[inside]] = True
        return hit

    def _point_in_polygon(self, qx: np.ndarray, qy: np.ndarray, poly: np.ndarray) -> np.ndarray:
        if self._pad is None:
            self._pad = self._padded_edges()
        ax, ay, bx, by, bbox = self._pad
        lo, hi = bbox[poly, :2], bbox[poly, 2:]
        inside = (qx >= lo[:, 0]) & (qx <= hi[:, 0]) & (qy >= lo[:, 1]) & (qy <= hi[:, 1])
        sel = np.nonzero(inside)[0]
        if len(sel):
            k = poly[sel]
            x, y = qx[sel, None], qy[sel, None]
            a_x, a_y, b_x, b_y = ax[k], ay[k], bx[k], by[k]
            straddle = (a_y > y) != (b_y > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = a_x + (y - a_y) * (b_x - a_x) / (b_y - a_y)
            inside[sel] = np.sum(straddle & (x < xint), axis=1) % 2 == 1
        return inside

    def _padded_edges(self):
        # per-polygon edge arrays padded with degenerate edges that never straddle
        m = self.num_polygons
        ends = np.append(self.starts[1:], len(self.a))
        width = int((ends - self.starts).max())
        ax = np.zeros((m, width))
        ay = np.zeros((m, width))
        bx = np.zeros((m, width))
        by = np.zeros((m, width))
        bbox = np.zeros((m, 4))
        for k in range(m):
            sl = slice(self.starts[k], ends[k])
            n = ends[k] - self.starts[k]
            ax[k, :n], ay[k, :n] = self.a[sl, 0], self.a[sl, 1]
            bx[k, :n], by[k, :n] = self.a[sl, 0] + self.e[sl, 0], self.a[sl, 1] + self.e[sl, 1]
            bbox[k] = (ax[k, :n].min(), ay[k, :n].min(), ax[k, :n].max(), ay[k, :n].max())
        return ax, ay, bx, by, bbox


@dataclass
class SceneGeometry:
    """Reflecting faces (walls + ground) and TX images for one scene."""

    scene: Scene
    # reflecting faces: index 0..n_walls-1 walls, n_walls = ground
    face_object: np.ndarray
    face_id: np.ndarray
    wall_a: np.ndarray
    wall_e: np.ndarray
    wall_len: np.ndarray
    wall_h: np.ndarray
    wall_n: np.ndarray
    occ: _Occluders
    tx: np.ndarray
    image1: np.ndarray          # (F, 3) TX mirrored across face f
    tx_front: np.ndarray        # (F,)
    pair_f1: np.ndarray
    pair_f2: np.ndarray
    image2: np.ndarray          # (P, 3)

    @property
    def n_walls(self) -> int:
        return len(self.wall_a)

    @property
    def ground(self) -> int:
        return self.n_walls

    @property
    def n_faces(self) -> int:
        return self.n_walls + 1

    # signed distance to the plane of face f (positive on the reflecting side)
    def side(self, f: np.ndarray, pts: np.ndarray) -> np.ndarray:
        f = np.asarray(f)
        pts = np.asarray(pts, dtype=float)
        out = np.empty(np.broadcast_shapes(f.shape, pts.shape[:-1]))
        f_b = np.broadcast_to(f, out.shape)
        pts_b = np.broadcast_to(pts, out.shape + (3,))
        g = f_b == self.ground
        out[g] = pts_b[g][:, 2]
        w = ~g
        fw = f_b[w]
        out[w] = np.einsum("ij,ij->i", pts_b[w][:, :2] - self.wall_a[fw], self.wall_n[fw])
        return out

    def normal3(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f)
        n = np.zeros(f.shape + (3,))
        g = f == self.ground
        n[g] = (0.0, 0.0, 1.0)
        n[~g, :2] = self.wall_n[f[~g]]
        return n

    def mirror(self, f: np.ndarray, pts: np.ndarray) -> np.ndarray:
        s = self.side(f, pts)
        return pts - 2.0 * s[..., None] * self.normal3(f)

    def on_face(self, f: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Point (already on the plane of f) lies within the face extent, edge-inclusive."""
        f = np.asarray(f)
        ok = np.zeros(f.shape, dtype=bool)
        g = f == self.ground
        xmin, ymin, xmax, ymax = self.scene.bounds
        pg = pts[g]
        ok[g] = (pg[:, 0] >= xmin - EPS_M) & (pg[:, 0] <= xmax + EPS_M) \
            & (pg[:, 1] >= ymin - EPS_M) & (pg[:, 1] <= ymax + EPS_M)
        w = ~g
        fw = f[w]
        pw = pts[w]
        L = self.wall_len[fw]
        u = np.einsum("ij,ij->i", pw[:, :2] - self.wall_a[fw], self.wall_e[fw]) / L
        ok[w] = (u >= -EPS_M) & (u <= L + EPS_M) & (pw[:, 2] >= -EPS_M) & (pw[:, 2] <= self.wall_h[fw] + EPS_M)
        return ok

    def intersect_plane(self, f: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        sx = self.side(f, x)
        sy = self.side(f, y)
        s = sx / (sx - sy)
        return x + s[..., None] * (y - x)

    def wall_index(self, f: np.ndarray) -> np.ndarray:
        """Occluder wall index for a reflecting face, -1 for the ground."""
        f = np.asarray(f)
        return np.where(f == self.ground, -1, f)

    def incidence(self, f: np.ndarray, start: np.ndarray, hit: np.ndarray) -> np.ndarray:
        d = hit - start
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        c = np.abs(np.einsum("ij,ij->i", d, self.normal3(f)))
        return np.arccos(np.clip(c, 0.0, 1.0))


def _build_geometry(scene: Scene) -> SceneGeometry:
    walls = scene.wall_faces()
    face_object = np.array([w.object_id for w in walls] + [GROUND_ID], dtype=int)
    face_id = np.array([w.face_id for w in walls] + [0], dtype=int)
    wall_a = np.array([w.a for w in walls], float).reshape(-1, 2)
    wall_b = np.array([w.b for w in walls], float).reshape(-1, 2)
    wall_e = wall_b - wall_a
    wall_len = np.linalg.norm(wall_e, axis=1)
    wall_h = np.array([w.height for w in walls], float)
    wall_n = np.array([w.normal for w in walls], float).reshape(-1, 2)
    occ = _Occluders.build([(o.footprint, o.height) for o in scene.objects])
    tx = np.asarray(scene.tx.position, float)
    geo = SceneGeometry(scene, face_object, face_id, wall_a, wall_e, wall_len, wall_h, wall_n, occ, tx,
                        np.zeros((0, 3)), np.zeros(0, bool), np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3)))
    F = geo.n_faces
    faces = np.arange(F)
    geo.tx_front = geo.side(faces, np.broadcast_to(tx, (F, 3))) > 0
    geo.image1 = geo.mirror(faces, np.broadcast_to(tx, (F, 3)).copy())
    # candidate face pairs: TX in front of f1, image1 in front of f2, and each face has
    # some part in front of the other
    f1, f2 = np.meshgrid(faces, faces, indexing="ij")
    f1 = f1.ravel()
    f2 = f2.ravel()
    keep = (f1 != f2) & geo.tx_front[f1]
    f1, f2 = f1[keep], f2[keep]
    keep = geo.side(f2, geo.image1[f1]) > 0
    f1, f2 = f1[keep], f2[keep]
    keep = _faces_face_each_other(geo, f1, f2) & _faces_face_each_other(geo, f2, f1)
    geo.pair_f1, geo.pair_f2 = f1[keep], f2[keep]
    geo.image2 = geo.mirror(geo.pair_f2, geo.image1[geo.pair_f1])
    return geo


def _faces_face_each_other(geo: SceneGeometry, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Some point of face g lies strictly in front of face f."""
    out = np.ones(len(f), dtype=bool)
    wall_g = g != geo.ground
    wall_f = f != geo.ground
    both = wall_g & wall_f
    if both.any():
        ff, gg = f[both], g[both]
        a = geo.wall_a[gg]
        b = a + geo.wall_e[gg]
        sa = np.einsum("ij,ij->i", a - geo.wall_a[ff], geo.wall_n[ff])
        sb = np.einsum("ij,ij->i", b - geo.wall_a[ff], geo.wall_n[ff])
        out[both] = (sa > EPS_M) | (sb > EPS_M)
    # any wall has points above the ground; the ground extends in front of every wall
    return out


@lru_cache(maxsize=32)
def scene_geometry(scene: Scene) -> SceneGeometry:
    return _build_geometry(scene)


@lru_cache(maxsize=32)
def _clutter_occluders(clutter: tuple[ClutterBox, ...]) -> _Occluders:
    return _Occluders.build([(c.footprint, c.height) for c in clutter])


# --------------------------------------------------------------------------- tracing


def trace(scene: Scene, assignment: MaterialAssignment, rx, clutter: Sequence[ClutterBox] = ()) -> TraceResult:
    """All LoS, single- and double-reflection paths from the scene TX to ``rx``."""
    paths = trace_paths(scene, rx, clutter)
    return _result(paths, assignment, scene)


def trace_paths(scene: Scene, rx, clutter: Sequence[ClutterBox] = ()) -> list[PathSegmentChain]:
    rx = np.asarray(rx, dtype=float)
    if rx.shape != (3,):
        raise TraceError("rx must be a 3D point")
    if not scene.in_bounds(rx):
        raise TraceError(f"rx {tuple(rx)} is outside the scene bounds")
    geo = scene_geometry(scene)
    if np.linalg.norm(rx - geo.tx) < EPS_M:
        raise TraceError("rx coincides with the transmitter")
    clutter_occ = _clutter_occluders(tuple(clutter)) if clutter else None

    chains: list[tuple[str, list[np.ndarray], list[int]]] = []

    # line of sight
    if not geo.occ.hits(geo.tx[None], rx[None]).any():
        chains.append((LOS, [geo.tx, rx], []))

    # first order
    faces = np.arange(geo.n_faces)
    rx_front = geo.side(faces, np.broadcast_to(rx, (geo.n_faces, 3))) > 0
    cand = np.nonzero(geo.tx_front & rx_front)[0]
    if len(cand):
        R = geo.intersect_plane(cand, np.broadcast_to(rx, (len(cand), 3)), geo.image1[cand])
        ok = geo.on_face(cand, R)
        cand, R = cand[ok], R[ok]
        excl = geo.wall_index(cand)[:, None]
        blocked = geo.occ.hits(np.broadcast_to(geo.tx, R.shape), R, excl).any(1) \
            | geo.occ.hits(R, np.broadcast_to(rx, R.shape), excl).any(1)
        for f, r in zip(cand[~blocked], R[~blocked]):
            chains.append((REFLECT1, [geo.tx, r, rx], [int(f)]))

    # second order
    if len(geo.pair_f1):
        f2_front = geo.side(geo.pair_f2, np.broadcast_to(rx, (len(geo.pair_f2), 3))) > 0
        idx = np.nonzero(f2_front)[0]
        f1, f2 = geo.pair_f1[idx], geo.pair_f2[idx]
        R2 = geo.intersect_plane(f2, np.broadcast_to(rx, (len(idx), 3)), geo.image2[idx])
        ok = geo.on_face(f2, R2) & (geo.side(f1, R2) > 0)
        f1, f2, R2 = f1[ok], f2[ok], R2[ok]
        R1 = geo.intersect_plane(f1, R2, geo.image1[f1])
        ok = geo.on_face(f1, R1)
        f1, f2, R1, R2 = f1[ok], f2[ok], R1[ok], R2[ok]
        if len(f1):
            e1 = geo.wall_index(f1)[:, None]
            e2 = geo.wall_index(f2)[:, None]
            blocked = geo.occ.hits(np.broadcast_to(geo.tx, R1.shape), R1, e1).any(1)
            blocked |= geo.occ.hits(R1, R2, np.hstack([e1, e2])).any(1)
            blocked |= geo.occ.hits(R2, np.broadcast_to(rx, R2.shape), e2).any(1)
            for a, b, r1, r2 in zip(f1[~blocked], f2[~blocked], R1[~blocked], R2[~blocked]):
                chains.append((REFLECT2, [geo.tx, r1, r2, rx], [int(a), int(b)]))

    out = []
    for kind, verts, fs in chains:
        V = np.asarray(verts)
        seg = np.linalg.norm(np.diff(V, axis=0), axis=1)
        refl = []
        for j, f in enumerate(fs):
            ang = float(geo.incidence(np.array([f]), V[j][None], V[j + 1][None])[0])
            refl.append((int(geo.face_object[f]), int(geo.face_id[f]), ang))
        loss = 0.0
        if clutter_occ is not None:
            crossed = clutter_occ.hits(V[:-1], V[1:])
            loss = float(sum(clutter[k].loss_db for k in np.nonzero(crossed)[1]))
        out.append(PathSegmentChain(kind, tuple(tuple(map(float, v)) for v in V), tuple(refl),
                                    float(seg.sum()), loss))
    return out


def path_powers_w(paths: Sequence[PathSegmentChain], assignment: MaterialAssignment, tx: TxConfig,
                  space: MaterialSpace) -> np.ndarray:
    powers = np.empty(len(paths))
    for k, p in enumerate(paths):
        g = 1.0
        for obj, _, ang in p.reflecting_faces:
            g *= float(reflection_power(space[assignment.material_of(obj)], ang, tx.frequency_hz))
        powers[k] = float(free_space_power_w(tx, p.total_length)) * g * 10.0 ** (-p.clutter_loss_db / 10.0)
    return powers


def rsrp_from_paths(paths: Sequence[PathSegmentChain], assignment: MaterialAssignment, tx: TxConfig,
                    space: MaterialSpace) -> float:
    """Incoherent power sum over paths, in dBm, floored at RSRP_FLOOR_DBM."""
    if not paths:
        return RSRP_FLOOR_DBM
    return float(watts_to_dbm(path_powers_w(paths, assignment, tx, space).sum()))


def _result(paths: Sequence[PathSegmentChain], assignment: MaterialAssignment, scene: Scene) -> TraceResult:
    powers = path_powers_w(paths, assignment, scene.tx, scene.material_space)
    rsrp = float(watts_to_dbm(powers.sum())) if len(paths) else RSRP_FLOOR_DBM
    with np.errstate(divide="ignore"):
        powers_dbm = tuple(float(v) for v in 10 * np.log10(powers) + 30) if len(paths) else ()
    order = np.argsort(-powers, kind="stable")
    involved: list[int] = []
    for k in order:
        for obj, _, _ in paths[k].reflecting_faces:
            if obj not in involved:
                involved.append(obj)
    return TraceResult(tuple(paths), rsrp, tuple(involved), powers_dbm)


def involved_objects(result: TraceResult, threshold_db: float = 25.0, cap: int = 4,
                     include_ground: bool = False) -> list[int]:
    """Objects on paths within ``threshold_db`` of the strongest path, strongest first."""
    if threshold_db <= 0 or cap < 1:
        raise ValueError("threshold_db must be > 0 and cap >= 1")
    if not result.paths:
        return []
    powers = np.asarray(result.path_powers_dbm)
    strongest = powers.max()
    out: list[int] = []
    for k in np.argsort(-powers, kind="stable"):
        if powers[k] < strongest - threshold_db:
            break
        for obj, _, _ in result.paths[k].reflecting_faces:
            if obj == GROUND_ID and not include_ground:
                continue
            if obj not in out:
                out.append(obj)
    return out[:cap]


# --------------------------------------------------------------------------- fast re-scoring


class PathTable:
    """Cached path geometry for a set of receivers, re-scored per assignment.

    Fresnel factors are precomputed for every (reflection, material) pair, so
    scoring an assignment is a gather plus a bincount.
    """

    def __init__(self, scene: Scene, per_point_paths: Sequence[Sequence[PathSegmentChain]]):
        self.scene = scene
        self.num_points = len(per_point_paths)
        space = scene.material_space
        tx = scene.tx
        path_point, base, refl_path, refl_obj, angles = [], [], [], [], []
        for i, paths in enumerate(per_point_paths):
            for p in paths:
                pid = len(path_point)
                path_point.append(i)
                base.append(float(free_space_power_w(tx, p.total_length)) * 10.0 ** (-p.clutter_loss_db / 10.0))
                for obj, _, ang in p.reflecting_faces:
                    refl_path.append(pid)
                    refl_obj.append(obj)
                    angles.append(ang)
        self.path_point = np.asarray(path_point, int)
        self.base_power = np.asarray(base, float)
        self.refl_path = np.asarray(refl_path, int)
        self.refl_obj = np.asarray(refl_obj, int)
        ang = np.asarray(angles, float)
        self.refl_gamma2 = np.stack([reflection_power(m, ang, tx.frequency_hz) for m in space], axis=1) \
            if len(ang) else np.zeros((0, len(space)))
        ids = sorted(set(scene.object_ids) | {GROUND_ID})
        self._id_lookup = {oid: k for k, oid in enumerate(ids)}
        self._refl_slot = np.asarray([self._id_lookup[o] for o in refl_obj], int)
        self._ids = ids

    @classmethod
    def from_locations(cls, scene: Scene, locations: Iterable, clutter: Sequence[ClutterBox] = ()) -> "PathTable":
        return cls(scene, [trace_paths(scene, loc, clutter) for loc in locations])

    def rsrp(self, assignment: MaterialAssignment) -> np.ndarray:
        mats = np.asarray([assignment.material_of(o) for o in self._ids], int)
        factor = np.ones(len(self.base_power))
        if len(self.refl_path):
            np.multiply.at(factor, self.refl_path, self.refl_gamma2[np.arange(len(self.refl_path)),
                                                                     mats[self._refl_slot]])
        power = np.bincount(self.path_point, weights=self.base_power * factor, minlength=self.num_points)
        return watts_to_dbm(power)
