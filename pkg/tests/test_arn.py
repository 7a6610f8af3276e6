import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qwm import arn
from qwm.arn import RewardNormalizer, UnknownId


def linear_percentile(values, q):
    """Hand-rolled linear-interpolation percentile."""
    s = sorted(values)
    pos = (len(s) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def test_constant_stream_decays_geometrically():
    norm = RewardNormalizer()
    for n in range(1, 51):
        norm.observe(0, np.full(8, 5.0))
        assert math.isclose(norm.sigma(0), 0.99 ** n, rel_tol=1e-12)


def test_uniform_stream_matches_buffer_oracle():
    rng = np.random.default_rng(0)
    norm = RewardNormalizer(capacity=512)
    sigma, buf = 1.0, []
    for _ in range(1500):
        batch = rng.uniform(0, 100, 16)
        norm.observe(0, batch)
        buf = (buf + batch.tolist())[-512:]
        sigma = 0.99 * sigma + 0.01 * (linear_percentile(buf, 95) - linear_percentile(buf, 5))
    assert math.isclose(norm.sigma(0), sigma, rel_tol=1e-10)
    assert abs(norm.sigma(0) - 90.0) < 4.0


def test_ids_are_independent():
    norm = RewardNormalizer()
    norm.observe("a", np.linspace(0, 10, 50))
    before = norm.sigma("a")
    norm.observe("b", np.linspace(0, 1000, 50))
    assert norm.sigma("a") == before
    assert norm.sigma("b") != before


def test_normalize_examples():
    norm = RewardNormalizer()
    norm.register(1)
    assert norm.normalize_reward(1, 7.5) == 7.5
    norm._sigma[1] = 0.3
    assert norm.normalize_reward(1, 7.5) == 7.5
    norm._sigma[1] = 90.0
    assert norm.normalize_reward(1, 45.0) == 0.5
    np.testing.assert_allclose(arn.normalize_reward(norm, 1, np.array([90.0, -9.0])), [1.0, -0.1])


def test_unknown_id():
    with pytest.raises(UnknownId):
        RewardNormalizer().normalize_reward(3, 1.0)


def test_rejects_non_finite():
    with pytest.raises(ValueError):
        RewardNormalizer().observe(0, [1.0, float("nan")])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=64), st.floats(-1e6, 1e6))
def test_never_amplifies_and_preserves_sign(stream, r):
    norm = RewardNormalizer()
    arn.observe(norm, 0, stream)
    out = norm.normalize_reward(0, r)
    assert abs(out) <= abs(r)
    assert np.sign(out) == np.sign(r)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1e3, 1e3))
def test_sigma_shift_invariant(seed, offset):
    rng = np.random.default_rng(seed)
    stream = rng.standard_normal((30, 10))
    a, b = RewardNormalizer(), RewardNormalizer()
    for row in stream:
        a.observe(0, row)
        b.observe(0, row + offset)
    assert math.isclose(a.sigma(0), b.sigma(0), rel_tol=1e-9, abs_tol=1e-9)


@pytest.mark.parametrize("dist", ["uniform", "normal", "exponential"])
def test_equalizes_ten_times_scaled_streams(dist):
    rng = np.random.default_rng(1)
    draw = {"uniform": lambda n: rng.uniform(0, 5, n), "normal": lambda n: rng.normal(0, 3, n),
            "exponential": lambda n: rng.exponential(2.0, n)}[dist]
    norm = RewardNormalizer()
    for _ in range(2000):
        norm.observe("big", 10.0 * draw(32))
        norm.observe("small", draw(32))
    x = draw(20_000)
    spreads = []
    for key, scale in (("big", 10.0), ("small", 1.0)):
        out = norm.normalize_reward(key, scale * x)
        spreads.append(np.percentile(out, 95) - np.percentile(out, 5))
    assert max(spreads) / min(spreads) < 1.5


def test_state_round_trip():
    rng = np.random.default_rng(2)
    norm = RewardNormalizer(capacity=64)
    for k in range(3):
        norm.observe(k, rng.standard_normal(100) * (k + 1))
    back = RewardNormalizer.loads(norm.dumps(), capacity=64)
    assert back.ids == norm.ids
    for k in range(3):
        assert back.sigma(k) == norm.sigma(k)
    batch = rng.standard_normal(10)
    norm.observe(1, batch)
    back.observe(1, batch)
    assert back.sigma(1) == norm.sigma(1)
