import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nettwin import worldbench as wb
from nettwin.nrrf import EwcState, Learner, NrrfModel, batch_tensors, profile
from nettwin.online import (
    OnlineConfig,
    ReplayBuffer,
    build_hybrid_batch,
    canonical_mode,
    label_locations,
    online_step,
    run_twinning,
    sample_proximal,
    update_fisher,
)
from nettwin.raytracer import RSRP_FLOOR_DBM
from nettwin.scene import default_assignment
from nettwin.tuner import TunerConfig
from nettwin.types import Measurement

from oracles import box_scene

BLOCKS = [(20.0, 20.0, 45.0, 45.0, 10.0), (60.0, -40.0, 90.0, -10.0, 15.0), (-50.0, -50.0, -25.0, 30.0, 6.0)]


def _m(k, loc=(0.0, 0.0, 1.0), v=-90.0):
    return Measurement(loc, v, k, float(k))


def tiny_model(seed=0, dtype="float32"):
    return NrrfModel(profile("desk", n_azimuth=4, n_elevation=1, n_radial=8, seed=seed, dtype=dtype),
                     (-100.0, -100.0, 100.0, 100.0), (0.0, 0.0, 20.0), 283.0)


def test_fifo_eviction_arithmetic():
    buf = ReplayBuffer(4096)
    for k in range(1, 10_001):
        buf.push(_m(k))
    assert len(buf) == 4096 and buf[0].sequence == 5905 and buf.latest.sequence == 10_000
    small = ReplayBuffer(3)
    for k in range(1, 6):
        small.push(_m(k))
    assert [m.sequence for m in small] == [3, 4, 5]
    with pytest.raises(ValueError):
        ReplayBuffer(0)
    with pytest.raises(ValueError):
        ReplayBuffer(2).sample(1, np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(cap=st.integers(1, 50), pushes=st.integers(1, 200))
def test_fifo_property(cap, pushes):
    buf = ReplayBuffer(cap)
    for k in range(1, pushes + 1):
        buf.push(_m(k))
    assert [m.sequence for m in buf] == list(range(max(1, pushes - cap + 1), pushes + 1))


def test_sample_without_replacement_when_possible():
    buf = ReplayBuffer(100)
    for k in range(1, 41):
        buf.push(_m(k))
    picks = buf.sample(16, np.random.default_rng(1))
    seqs = [p.sequence for p in picks]
    assert seqs[0] == 40 and len(set(seqs)) == 16
    few = ReplayBuffer(10).push(_m(1)).push(_m(2))
    assert len(few.sample(16, np.random.default_rng(1))) == 16


@settings(max_examples=30, deadline=None)
@given(n_buf=st.integers(1, 60), cx=st.floats(-95, 95), cy=st.floats(-95, 95), seed=st.integers(0, 10_000))
def test_hybrid_batch_contract(n_buf, cx, cy, seed):
    s = box_scene(BLOCKS, tx=(0.0, 0.0, 20.0))
    buf = ReplayBuffer(4096)
    for k in range(1, n_buf + 1):
        buf.push(_m(k, (cx, cy, 1.0)))
    latest = buf.latest
    batch = build_hybrid_batch(buf, s, default_assignment(s), latest, np.random.default_rng(seed))
    assert len(batch.online_points) == 16 and len(batch.simulated_points) == 16
    locs, vals = batch.arrays()
    assert locs.shape == (32, 3) and np.all(np.isfinite(vals))
    sims = np.asarray([p for p, _ in batch.simulated_points])
    assert np.all(np.linalg.norm(sims[:, :2] - [cx, cy], axis=1) <= 30.0 + 0.5 + 1e-9)
    if not s.indoor_mask(np.array([[cx, cy]]))[0]:
        assert not s.indoor_mask(sims[:, :2]).any()


def test_proximal_disc_is_uniform_and_bounded():
    s = box_scene([])
    pts = sample_proximal(s, (50.0, 50.0), 4000, 30.0, np.random.default_rng(0))
    r = np.linalg.norm(pts[:, :2] - 50.0, axis=1)
    assert r.max() <= 30.0 and pts[:, 2].tolist() == [1.0] * 4000
    # uniform in area: half the points inside radius 30/sqrt(2)
    assert abs(np.mean(r < 30 / math.sqrt(2)) - 0.5) < 0.03
    edge = sample_proximal(s, (99.0, -99.0), 200, 30.0, np.random.default_rng(0))
    assert all(s.in_bounds(p) for p in edge)
    assert np.all(np.linalg.norm(edge[:, :2] - [99.0, -99.0], axis=1) <= 30.0)


def _loop_fisher(model, locs, y, mode):
    x, yn = batch_tensors(model, locs, y)
    out = {k: torch.zeros_like(v) for k, v in model.named_parameters()}
    for i in range(len(x)):
        model.zero_grad()
        f = model(x[i:i + 1])[0]
        f.backward()
        w = float((yn[i] - f.detach()) ** 2) if mode == "empirical" else 1.0
        for k, p in model.named_parameters():
            out[k] += w * p.grad ** 2
    return {k: v / len(x) for k, v in out.items()}


@pytest.mark.parametrize("mode", ["empirical", "expected"])
def test_fisher_matches_per_point_loop(mode):
    torch.manual_seed(0)
    m = tiny_model(dtype="float64")
    rng = np.random.default_rng(0)
    locs = np.column_stack([rng.uniform(-90, 90, 7), rng.uniform(-90, 90, 7), np.ones(7)])
    y = rng.uniform(-120, -70, 7)
    state = update_fisher(m, locs, y, 0.4, mode, chunk=3)
    ref = _loop_fisher(m, locs, y, mode)
    for k in ref:
        assert torch.allclose(state.fisher[k], ref[k], rtol=1e-9, atol=1e-15)
        assert torch.equal(state.anchor[k], dict(m.named_parameters())[k].detach())
    assert state.lam == 0.4


def _batch(seed=0):
    rng = np.random.default_rng(seed)
    locs = np.column_stack([rng.uniform(-90, 90, 32), rng.uniform(-90, 90, 32), np.ones(32)])
    return locs, rng.uniform(-120, -70, 32)


def test_lambda_zero_is_bitwise_plain_mse():
    locs, y = _batch()
    a, b = tiny_model(3), tiny_model(3)
    ewc = update_fisher(a, locs, y, lam=0.0)
    la, lb = Learner(a), Learner(b)
    online_step(la, (locs, y), ewc, steps=10)
    online_step(lb, (locs, y), None, steps=10)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q)


def test_large_lambda_limits_displacement():
    locs, y = _batch(1)
    base = tiny_model(5)
    f_locs, f_y = _batch(2)
    anchor = update_fisher(base, f_locs, f_y, lam=1e6)

    def displacement(ewc):
        m = base.clone()
        online_step(Learner(m), (locs, y), ewc, steps=10)
        return math.sqrt(sum(float(((p.detach() - anchor.anchor[k]) ** 2).sum()) for k, p in m.named_parameters()))

    assert displacement(anchor) < displacement(None)


def test_nonfinite_loss_restores_weights():
    m = tiny_model(1)
    learner = Learner(m)
    before = {k: v.detach().clone() for k, v in m.named_parameters()}
    locs, y = _batch()
    y[0] = math.nan
    loss, ok = online_step(learner, (locs, y), None, steps=3)
    assert not ok and learner.anomalies == 1
    for k, v in m.named_parameters():
        assert torch.equal(v, before[k])


def test_mode_names():
    assert canonical_mode("oneTwin") == "onetwin"
    with pytest.raises(ValueError):
        canonical_mode("magic")
    with pytest.raises(ValueError):
        OnlineConfig(tuning="sometimes").validate()


# --------------------------------------------------------------------------- small end-to-end runs


@pytest.fixture(scope="module")
def tiny_world():
    w = wb.generate_world(wb.WorldConfig(num_objects=6, width=240.0, height=160.0, seed=3, tx_height=20.0))
    stream = wb.make_stream(w, wb.TrajectoryConfig(num_points=12, seed=3))
    splits = wb.make_splits(w, stream, wb.SplitConfig(ood_margin_m=40.0, ood_points=10))
    return w, stream, splits


def _run(world, mode, **kw):
    w, stream, splits = world
    model = NrrfModel.for_scene(w.scene, profile("desk", n_azimuth=4, n_elevation=1, n_radial=8))
    cfg = OnlineConfig(mode=mode, steps_per_arrival=2, fisher_period=5, fisher_samples=16, record_timing=False,
                       tuner=TunerConfig(total_evaluations=6, warm_start=3), **kw)
    return run_twinning(stream, w.scene, default_assignment(w.scene), model, cfg, w.truth_table,
                        splits["IND"], splits["OOD"])


def test_baseline_gap_curve_is_constant(tiny_world):
    res = _run(tiny_world, "baseline-sim")
    gaps = {r["gap_ind_db"] for r in res.rows}
    assert len(gaps) == 1 and len(res.rows) == 13
    assert res.episodes == []


def test_every_mode_runs_and_logs(tiny_world):
    for mode in ("onetwin", "nerf2-style", "nrrf-il", "nrrf-base"):
        res = _run(tiny_world, mode)
        assert [r["arrival_seq"] for r in res.rows] == list(range(13))
        assert all(math.isfinite(r["gap_ind_db"]) for r in res.rows)
        if mode == "nerf2-style":
            assert res.episodes == []
        else:
            assert len(res.episodes) >= 10


def test_delayed_adoption_follows_simulated_time(tiny_world):
    res = _run(tiny_world, "onetwin", tuning_delay_s=3.0)
    for ep in res.episodes:
        assert ep["adopted_seq"] - ep["launched_seq"] == 3
    sync = _run(tiny_world, "onetwin")
    assert all(ep["adopted_seq"] - ep["launched_seq"] == 1 for ep in sync.episodes)


def test_same_seed_same_rows(tiny_world):
    a = _run(tiny_world, "onetwin")
    b = _run(tiny_world, "onetwin")
    assert a.rows == b.rows and a.final_assignment == b.final_assignment


def test_simulated_samples_skip_no_signal_courtyard():
    # a closed courtyard next to the latest point: its interior has no path to the TX
    ring = [(0.0, 0.0, 40.0, 4.0, 60.0), (0.0, 36.0, 40.0, 40.0, 60.0),
            (0.0, 4.0, 4.0, 36.0, 60.0), (36.0, 4.0, 40.0, 36.0, 60.0)]
    s = box_scene(ring, tx=(-60.0, 20.0, 10.0))
    inside = sample_proximal(s, (20.0, 20.0), 50, 10.0, np.random.default_rng(0))
    assert (label_locations(s, default_assignment(s), inside) == RSRP_FLOOR_DBM).all()
    buf = ReplayBuffer().push(_m(1, (-10.0, 20.0, 1.0)))
    batch = build_hybrid_batch(buf, s, default_assignment(s), buf.latest, np.random.default_rng(1), radius=40.0)
    vals = np.asarray([v for _, v in batch.simulated_points])
    assert len(vals) == 16 and (vals > RSRP_FLOOR_DBM).all()


def test_run_result_gap_summaries():
    from nettwin.online import RunResult
    rows = [{"gap_ind_db": 9.0, "gap_ood_db": 1.0}, {"gap_ind_db": 3.0, "gap_ood_db": 2.0},
            {"gap_ind_db": 1.0, "gap_ood_db": 4.0}]
    r = RunResult(rows, None, [], None, 0, None)
    assert r.final_gap("IND") == 1.0 and r.final_gap("OOD") == 4.0
    assert r.mean_gap("IND") == 2.0 and r.mean_gap("OOD") == 3.0
