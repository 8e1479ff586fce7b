import itertools

import numpy as np
import pytest

from nettwin.tuner import (
    DatasetObjective,
    TunerConfig,
    candidate_pool,
    reduce,
    run_episode,
    tune,
    tune_global,
)

from oracles import canyon


def test_reduce_finds_both_walls():
    s, a0, _, data = canyon(0)
    assert sorted(reduce(s, a0, data[-1])) == [0, 1]


def test_candidate_pool_rules():
    rng = np.random.default_rng(0)
    small = candidate_pool(2, 9, (0, 0), 4096, rng)
    assert len(small) == 81 and len(np.unique(small, axis=0)) == 81
    big = candidate_pool(5, 9, (1, 2, 3, 4, 5), 4096, rng)
    assert len(np.unique(big, axis=0)) == len(big)
    assert (big[0] == [1, 2, 3, 4, 5]).all()
    # every single mutation of the incumbent is present
    assert all(((big == m).all(1)).any() for m in _mutations((1, 2, 3, 4, 5), 9))
    assert len(big) <= 4096 + 1 + 5 * 8


def _mutations(inc, B):
    for k in range(len(inc)):
        for b in range(B):
            if b != inc[k]:
                m = list(inc)
                m[k] = b
                yield m


@pytest.mark.parametrize("seed", [1, 3, 4, 5])
def test_recovers_hidden_materials(seed):
    s, a0, hidden, data = canyon(seed)
    res = tune(s, a0, data, data[-1], TunerConfig(seed=seed))
    obj = DatasetObjective(s, data)
    brute = min(obj(a0.with_materials({0: i, 1: j})) for i, j in itertools.product(range(9), repeat=2))
    assert brute < 1e-9
    assert res.best_objective <= brute + 0.1
    assert res.assignment.restricted((0, 1)) == hidden.restricted((0, 1))


def test_near_duplicate_materials_are_indistinguishable():
    # plasterboard and chipboard differ by < 0.4 dB in |Gamma|^2; swapping them barely moves the objective
    s, a0, hidden, data = canyon(2)
    names = s.material_space.names
    assert hidden.restricted((0, 1)) == (names.index("itu-chipboard"),) * 2
    obj = DatasetObjective(s, data)
    swapped = hidden.with_materials({0: names.index("itu-plasterboard")})
    assert 0 < obj(swapped) < 0.05


def test_budget_warm_start_and_log():
    s, a0, _, data = canyon(1)
    res = tune(s, a0, data, data[-1], TunerConfig(seed=3))
    assert res.evaluations == 25 and res.dimensions == 2
    assert res.records[0].candidate == a0.restricted((0, 1))
    assert [r.iter for r in res.records] == list(range(25))
    best = np.minimum.accumulate([r.objective for r in res.records])
    assert np.allclose(best, [r.best_so_far for r in res.records])
    assert len({r.candidate for r in res.records}) == 25
    assert all(line.startswith("{") for line in res.log_lines())


def test_non_regression_and_locality():
    s, a0, _, data = canyon(2)
    for seed in range(3):
        res = tune(s, a0, data, data[-1], TunerConfig(seed=seed, total_evaluations=12))
        assert res.best_objective <= res.initial_objective
        assert res.assignment.ground_material == a0.ground_material


def test_incumbent_kept_when_nothing_beats_it():
    s, a0, hidden, data = canyon(0)
    res = tune(s, hidden, data, data[-1], TunerConfig(seed=0))
    assert res.assignment == hidden and res.best_objective == pytest.approx(0.0, abs=1e-9)


def test_determinism():
    s, a0, _, data = canyon(4)
    r1 = tune(s, a0, data, data[-1], TunerConfig(seed=9))
    r2 = tune(s, a0, data, data[-1], TunerConfig(seed=9))
    assert r1.assignment == r2.assignment
    assert [r.candidate for r in r1.records] == [r.candidate for r in r2.records]


def test_global_uses_every_object_and_small_pool_caps_budget():
    s, a0, _, data = canyon(0)
    res = tune_global(s, a0, data, TunerConfig(seed=0))
    assert res.dimensions == 2
    res = run_episode(s, a0, [0], DatasetObjective(s, data), TunerConfig(seed=0))
    assert res.evaluations == 9            # only nine one-object candidates exist


def test_empty_focus_and_config_errors():
    s, a0, _, data = canyon(0)
    res = run_episode(s, a0, [], DatasetObjective(s, data))
    assert res.assignment == a0 and res.best_objective is None
    with pytest.raises(ValueError):
        TunerConfig(warm_start=30).validate()
    with pytest.raises(ValueError):
        DatasetObjective(s, [])
