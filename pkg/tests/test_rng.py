from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from svpic.rng import (DOMAIN_BRIDGE, DOMAIN_WIENER, WienerBatch, _philox, empty_batch,
                       philox_stream, refine_increments, refine_to_depth, standard_normals,
                       wiener_increments)

U = np.uint32


@pytest.mark.parametrize("ctr, key, expected", [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
])
def test_philox_known_answers(ctr, key, expected):
    out = _philox(*(U(c) for c in ctr), *(U(k) for k in key))
    assert tuple(int(x) for x in out) == expected


def test_same_address_same_value():
    a = wiener_increments(7, 3, 100, 3, 0.01).increments
    b = wiener_increments(7, 3, 100, 3, 0.01).increments
    assert np.array_equal(a, b)


def test_different_steps_and_seeds_differ():
    a = standard_normals(7, 3, 50, 3)
    assert not np.array_equal(a, standard_normals(7, 4, 50, 3))
    assert not np.array_equal(a, standard_normals(8, 3, 50, 3))
    assert not np.array_equal(a, standard_normals(7, 3, 50, 3, domain=DOMAIN_BRIDGE))


@given(st.integers(1, 300), st.integers(1, 6), st.integers(0, 2 ** 64 - 1),
       st.integers(0, 10_000))
def test_entries_independent_of_batch_shape(n, m, seed, step):
    big = standard_normals(seed, step, 300, 6)
    small = standard_normals(seed, step, n, m)
    assert np.array_equal(big[:n, :m], small)


def test_increment_scale():
    dt = 0.04
    dw = wiener_increments(1, 0, 200_000, 1, dt).increments[:, 0]
    assert abs(dw.mean()) < 5 * np.sqrt(dt / len(dw))
    assert abs(dw.var() / dt - 1) < 0.02


def test_normals_pass_ks():
    z = standard_normals(11, 5, 100_000, 2).ravel()
    assert stats.kstest(z, "norm").pvalue > 1e-3
    # the ziggurat tail beyond R must be populated
    assert np.sum(np.abs(z) > 3.442619855899) > 0


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        wiener_increments(1, 0, 10, 3, 0.0)
    with pytest.raises(ValueError):
        wiener_increments(1, 0, 10, 0, 0.1)
    with pytest.raises(ValueError):
        standard_normals(-1, 0, 10, 3)
    with pytest.raises(ValueError):
        standard_normals(1, -1, 10, 3)


def test_bridge_children_sum_to_parent():
    parent = wiener_increments(3, 9, 1000, 3, 0.1)
    a, b = refine_increments(parent)
    assert a.dt == b.dt == pytest.approx(0.05)
    np.testing.assert_allclose(a.increments + b.increments, parent.increments, atol=1e-15)


def test_bridge_with_supplied_noise():
    parent = WienerBatch(1.0, np.array([[2.0]]))
    a, b = refine_increments(parent, np.array([[1.0]]))
    assert a.increments[0, 0] == pytest.approx(1.5)
    assert b.increments[0, 0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        refine_increments(parent, np.zeros((2, 1)))


def test_refined_increments_have_brownian_law():
    parent = wiener_increments(5, 0, 100_000, 1, 0.2)
    leaves = refine_to_depth(parent, 3)
    assert len(leaves) == 8
    stacked = np.hstack([b.increments for b in leaves])
    # each leaf ~ N(0, dt/8) and leaves are uncorrelated
    var = stacked.var(axis=0)
    np.testing.assert_allclose(var, 0.2 / 8, rtol=0.03)
    corr = np.corrcoef(stacked.T)
    assert np.max(np.abs(corr - np.eye(8))) < 0.02
    np.testing.assert_allclose(stacked.sum(axis=1), parent.increments[:, 0], atol=1e-13)


def test_refinement_is_deterministic_per_node():
    parent = wiener_increments(5, 2, 10, 2, 0.1)
    left1 = refine_to_depth(parent, 2)
    left2 = refine_to_depth(parent, 2)
    for x, y in zip(left1, left2):
        assert np.array_equal(x.increments, y.increments)
    assert [b.sub_index for b in left1] == [0, 1, 2, 3]


def test_empty_batch_has_no_channels():
    b = empty_batch(4, 0.1)
    assert b.increments.shape == (4, 0)


def test_philox_stream_reproducible():
    a = philox_stream(3, DOMAIN_WIENER, 1).standard_normal(5)
    b = philox_stream(3, DOMAIN_WIENER, 1).standard_normal(5)
    c = philox_stream(3, DOMAIN_WIENER, 2).standard_normal(5)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
