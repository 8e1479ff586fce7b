import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nettwin.surrogate import GpModel, Kernel, OneHotCodec, default_kernel, expected_improvement

from oracles import dense_gp_posterior


def _random_set(rng, n, objects=3, materials=9):
    codec = OneHotCodec(objects, materials)
    rows = rng.integers(materials, size=(n, objects))
    return codec, codec.encode_many(rows), rng.normal(size=n)


def test_codec_round_trip_and_errors():
    codec = OneHotCodec(3, 9)
    v = codec.encode([0, 8, 4])
    assert v.shape == (27,) and v.sum() == 3
    assert codec.decode(v) == (0, 8, 4)
    assert np.array_equal(codec.encode_many([[0, 8, 4]])[0], v)
    with pytest.raises(ValueError):
        codec.encode([0, 9, 1])
    with pytest.raises(ValueError):
        codec.encode([0, 1])
    bad = v.copy()
    bad[1] = 1.0
    with pytest.raises(ValueError):
        codec.decode(bad)


@pytest.mark.parametrize("family", ["matern52", "rbf"])
def test_posterior_matches_dense_solve(family):
    rng = np.random.default_rng(11)
    for n in (5, 9, 14, 20):
        codec, X, y = _random_set(rng, n)
        X = np.unique(X, axis=0)
        y = y[: len(X)]
        kern = Kernel(1.0, math.sqrt(codec.length) / 2.0, family)
        gp = GpModel.from_data(kern, X, y, 1e-6)
        Xs = codec.encode_many(rng.integers(9, size=(30, 3)))
        mu, sd = gp.predict(Xs)
        rmu, rvar = dense_gp_posterior(kern, X, y, 1e-6, Xs)
        assert np.max(np.abs(mu - rmu)) < 1e-8
        assert np.max(np.abs(sd ** 2 - np.maximum(rvar, 0))) < 1e-8


def test_fit_extends_without_mutation():
    rng = np.random.default_rng(2)
    codec, X, y = _random_set(rng, 6)
    gp0 = GpModel(default_kernel(3, 9))
    gp1 = gp0.fit(X[:3], y[:3])
    gp2 = gp1.fit(X[3:], y[3:])
    assert len(gp0.train_y) == 0 and len(gp1.train_y) == 3
    full = GpModel.from_data(default_kernel(3, 9), X, y)
    assert np.allclose(gp2.predict(X)[0], full.predict(X)[0], atol=1e-12)
    with pytest.raises(ValueError):
        gp1.fit(np.zeros((1, 5)), [0.0])


def test_prior_prediction():
    mu, sd = GpModel(default_kernel(2, 9)).predict(np.zeros((4, 18)))
    assert np.all(mu == 0) and np.allclose(sd, 1.0)


def test_kernel_depends_on_hamming_distance_only():
    codec = OneHotCodec(4, 9)
    k = default_kernel(4, 9)
    a = codec.encode([0, 1, 2, 3])
    b = codec.encode([0, 1, 5, 3])      # one block differs
    c = codec.encode([7, 1, 2, 3])      # another block differs
    d = codec.encode([7, 1, 5, 3])      # two blocks differ
    assert k(a, b)[0, 0] == pytest.approx(k(a, c)[0, 0], abs=1e-15)
    assert k(a, d)[0, 0] < k(a, b)[0, 0] < k(a, a)[0, 0] == pytest.approx(1.0)
    r = math.sqrt(2.0) / k.length_scale
    assert k(a, b)[0, 0] == pytest.approx((1 + math.sqrt(5) * r + 5 * r * r / 3) * math.exp(-math.sqrt(5) * r))


def test_duplicate_points_keep_mean():
    codec = OneHotCodec(2, 9)
    X = codec.encode_many([[1, 2], [3, 4], [1, 2]])
    gp = GpModel.from_data(default_kernel(2, 9), X, [0.5, -1.0, 0.5])
    mu, sd = gp.predict(codec.encode_many([[1, 2]]))
    assert mu[0] == pytest.approx(0.5, abs=1e-4) and sd[0] < 1e-2


def test_ei_closed_form_value():
    # mu = f_best + eps, sigma = 1 -> EI = phi(0) = 0.398942...; sigma = 2 -> 2 phi(0)
    assert expected_improvement(0.01, 1.0, 0.0)[()] == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-12)
    assert expected_improvement(0.01, 2.0, 0.0)[()] == pytest.approx(0.797885, abs=1e-6)


def test_ei_zero_when_sigma_zero():
    ei = expected_improvement(np.array([5.0, -5.0, 0.0]), np.zeros(3), 0.0)
    assert np.all(ei == 0.0)


def test_ei_monte_carlo():
    rng = np.random.default_rng(7)
    for mu, sd, fb in [(0.3, 0.8, 0.1), (-0.5, 1.5, 0.0), (1.2, 0.2, 1.4)]:
        draws = mu + sd * rng.standard_normal(10_000_000)
        mc = np.maximum(draws - fb - 0.01, 0.0).mean()
        assert abs(expected_improvement(mu, sd, fb)[()] - mc) < 1e-3


@settings(max_examples=80, deadline=None)
@given(mu=st.floats(-5, 5), sd=st.floats(1e-3, 5), fb=st.floats(-5, 5))
def test_ei_nonnegative_and_monotone(mu, sd, fb):
    e = expected_improvement(mu, sd, fb)[()]
    assert e >= 0
    assert expected_improvement(mu + 0.5, sd, fb)[()] >= e - 1e-12
    assert expected_improvement(mu, sd * 1.5, fb)[()] >= e - 1e-12
