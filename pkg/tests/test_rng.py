import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from ladderflow.rng import stream


def test_same_key_same_draws():
    a = stream(0, "x", 1, 2).standard_normal(8)
    b = stream(0, "x", 1, 2).standard_normal(8)
    assert np.array_equal(a, b)


def test_distinct_purposes_decorrelated():
    a = stream(0, "alpha").standard_normal(64)
    b = stream(0, "beta").standard_normal(64)
    assert not np.array_equal(a, b)


def test_distinct_indices_decorrelated():
    a = stream(0, "x", 0).standard_normal(64)
    b = stream(0, "x", 1).standard_normal(64)
    assert not np.array_equal(a, b)


def test_index_draw_independent_of_other_indices():
    # drawing stream (seed, p, i) never touches stream (seed, p, j)
    before = stream(3, "p", 7).standard_normal(4)
    _ = stream(3, "p", 6).standard_normal(1000)
    after = stream(3, "p", 7).standard_normal(4)
    assert np.array_equal(before, after)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 63 - 1), st.integers(0, 2 ** 63 - 1))
def test_distinct_seeds_distinct_streams(s1, s2):
    if s1 == s2:
        return
    a = stream(s1, "h").standard_normal(16)
    b = stream(s2, "h").standard_normal(16)
    assert not np.array_equal(a, b)
