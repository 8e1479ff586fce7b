"""Independent reference implementations used by the test-suite."""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.optimize import minimize

from nettwin.raytracer import trace
from nettwin.scene import (
    GROUND_ID, Scene, SceneObject, TxConfig, box_footprint, default_assignment, default_material_space,
)
from nettwin.types import Measurement

C = 299_792_458.0


def friis_dbm(tx: TxConfig, d: float) -> float:
    """Free-space received power with the default link budget (gains and losses in dB)."""
    fspl = 20 * math.log10(4 * math.pi * d * tx.frequency_hz / C)
    return 37 + 12 + 1 - 15 - 18 - 18 - fspl


def box_scene(boxes, tx=(0.0, 0.0, 20.0), bounds=(-100.0, -100.0, 100.0, 100.0), materials=None) -> Scene:
    """Scene of axis-aligned boxes given as (x0, y0, x1, y1, height)."""
    space = default_material_space()
    objs = []
    for k, (x0, y0, x1, y1, h) in enumerate(boxes):
        mat = space.index_of("itu-marble") if materials is None else materials[k]
        objs.append(SceneObject(k, box_footprint(x0, y0, x1, y1), h, mat))
    d = math.hypot(bounds[2] - bounds[0], bounds[3] - bounds[1])
    return Scene(tuple(objs), space.index_of("itu-concrete"), TxConfig(tx), bounds, math.ceil(d), space)


def _faces(scene: Scene):
    out = []
    for o in scene.objects:
        for f in o.wall_faces():
            a = np.array(f.a)
            e = np.array(f.b) - a
            out.append(("wall", o.id, f.face_id, a, e, f.height, np.array(f.normal)))
    out.append(("ground", GROUND_ID, 0, None, None, None, None))
    return out


def _point(face, uv):
    kind, _, _, a, e, _, _ = face
    if kind == "ground":
        return np.array([uv[0], uv[1], 0.0])
    t = e / np.linalg.norm(e)
    return np.array([a[0] + uv[0] * t[0], a[1] + uv[0] * t[1], uv[1]])


def _front(face, p):
    kind, _, _, a, _, _, n = face
    if kind == "ground":
        return p[2]
    return (p[0] - a[0]) * n[0] + (p[1] - a[1]) * n[1]


def _within(face, uv, scene, tol=1e-7):
    kind, _, _, a, e, h, _ = face
    if kind == "ground":
        xmin, ymin, xmax, ymax = scene.bounds
        return xmin - tol <= uv[0] <= xmax + tol and ymin - tol <= uv[1] <= ymax + tol
    return -tol <= uv[0] <= np.linalg.norm(e) + tol and -tol <= uv[1] <= h + tol


def _blocked(p, q, boxes, shrink=1e-7):
    """Segment passes through the interior of any box (slab test)."""
    d = q - p
    for x0, y0, x1, y1, h in boxes:
        lo = np.array([x0, y0, 0.0]) + shrink
        hi = np.array([x1, y1, h]) - shrink
        t0, t1 = 0.0, 1.0
        empty = False
        for k in range(3):
            if abs(d[k]) < 1e-15:
                if not lo[k] < p[k] < hi[k]:
                    empty = True
                    break
                continue
            a, b = (lo[k] - p[k]) / d[k], (hi[k] - p[k]) / d[k]
            a, b = min(a, b), max(a, b)
            t0, t1 = max(t0, a), min(t1, b)
        if not empty and t1 - t0 > 1e-9:
            return True
    return False


def _tangents(face):
    if face[0] == "ground":
        return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    e = face[4] / np.linalg.norm(face[4])
    return np.array([[e[0], e[1], 0.0], [0.0, 0.0, 1.0]])


def _fermat(tx, rx, seq):
    """Reflection points minimizing total length, each constrained to its face plane."""
    basis = [_tangents(f) for f in seq]

    def unpack(z):
        return [_point(f, z[2 * k: 2 * k + 2]) for k, f in enumerate(seq)]

    def length_and_grad(z):
        pts = [tx] + unpack(z) + [rx]
        segs = [b - a for a, b in zip(pts[:-1], pts[1:])]
        lens = [np.linalg.norm(v) for v in segs]
        units = [v / max(n, 1e-300) for v, n in zip(segs, lens)]
        grad = np.concatenate([basis[k] @ (units[k] - units[k + 1]) for k in range(len(seq))])
        return sum(lens), grad

    z0 = []
    for f in seq:
        if f[0] == "ground":
            z0 += [0.5 * (tx[0] + rx[0]), 0.5 * (tx[1] + rx[1])]
        else:
            z0 += [0.5 * np.linalg.norm(f[4]), 0.5 * f[5]]
    res = minimize(length_and_grad, np.array(z0, float), jac=True, method="BFGS",
                   options={"gtol": 1e-11, "maxiter": 5000})
    return res.x, unpack(res.x)


def enumerate_paths(scene: Scene, boxes, rx) -> dict:
    """Exhaustive path search: {((obj, face), ...): vertex array} for LoS and 1-2 reflections."""
    tx = np.asarray(scene.tx.position, float)
    rx = np.asarray(rx, float)
    faces = _faces(scene)
    found = {}
    if not _blocked(tx, rx, boxes):
        found[()] = np.array([tx, rx])
    for r in (1, 2):
        for seq in itertools.product(faces, repeat=r):
            if r == 2 and seq[0][1:3] == seq[1][1:3]:
                continue
            # reflection needs both neighbours strictly on the outer side of the first/last face
            if _front(seq[0], tx) <= 0 or _front(seq[-1], rx) <= 0:
                continue
            z, pts = _fermat(tx, rx, seq)
            chain = [tx] + pts + [rx]
            ok = True
            for k, f in enumerate(seq):
                if not _within(f, z[2 * k: 2 * k + 2], scene):
                    ok = False
                    break
                if _front(f, chain[k]) <= 1e-9 or _front(f, chain[k + 2]) <= 1e-9:
                    ok = False
                    break
            if not ok:
                continue
            if any(_blocked(a, b, boxes) for a, b in zip(chain[:-1], chain[1:])):
                continue
            found[tuple((f[1], f[2]) for f in seq)] = np.array(chain)
    return found


def dense_gp_posterior(kernel, X, y, noise, Xs):
    """Posterior mean/variance by plain dense solves."""
    K = kernel(X, X) + noise * np.eye(len(X))
    ks = kernel(Xs, X)
    mean = ks @ np.linalg.solve(K, y)
    var = np.diag(kernel(Xs, Xs)) - np.einsum("ij,ji->i", ks, np.linalg.solve(K, ks.T))
    return mean, var


def canyon(seed: int):
    """Two long walls either side of a 30 m street; hidden materials drawn per seed.

    Receivers alternate between the two kerbs so each wall's reflection is strong somewhere.
    """
    s = box_scene([(-150.0, -25.0, 150.0, -15.0, 15.0), (-150.0, 15.0, 150.0, 25.0, 15.0)],
                  tx=(-100.0, -5.0, 10.0), bounds=(-200.0, -200.0, 200.0, 200.0))
    rng = np.random.default_rng([seed, 5])
    a0 = default_assignment(s)
    marble = a0.material_of(0)
    hidden_mats = [int(v) for v in rng.choice([m for m in range(9) if m != marble], size=2)]
    hidden = a0.with_materials({0: hidden_mats[0], 1: hidden_mats[1]})
    data = []
    for k, x in enumerate(np.linspace(-80.0, 120.0, 21)):
        loc = (float(x), 13.0 * (-1) ** k, 1.0)
        data.append(Measurement(loc, trace(s, hidden, loc).rsrp_dbm, k + 1, float(k + 1)))
    return s, a0, hidden, data


def random_box_scene(rng):
    """1-3 separated boxes, a TX and two receivers outside them."""
    boxes = []
    while len(boxes) < rng.integers(1, 4):
        x0, y0 = rng.uniform(-40, 25, 2)
        w, d = rng.uniform(5, 20, 2)
        b = (float(x0), float(y0), float(x0 + w), float(y0 + d), float(rng.uniform(4, 30)))
        if all(b[2] + 2 < o[0] or o[2] + 2 < b[0] or b[3] + 2 < o[1] or o[3] + 2 < b[1] for o in boxes):
            boxes.append(b)

    def outside(p):
        return all(not (o[0] - 1 < p[0] < o[2] + 1 and o[1] - 1 < p[1] < o[3] + 1) for o in boxes)

    while True:
        tx = (*rng.uniform(-50, 50, 2), float(rng.uniform(5, 35)))
        if outside(tx):
            break
    rxs = []
    while len(rxs) < 2:
        rx = (*rng.uniform(-50, 50, 2), 1.0)
        if outside(rx):
            rxs.append(tuple(float(v) for v in rx))
    return boxes, tuple(float(v) for v in tx), rxs
