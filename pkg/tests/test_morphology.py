import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from morphseg.morphology import (
    PLANE_NORMALS,
    curvature_smooth,
    element_offsets,
    is_op,
    mask_pool,
    si,
    structuring_elements,
)
from oracles import is_loop, plane_offsets, si_loop

vol_shapes = st.tuples(*(st.integers(3, 5),) * 3)
reals = st.floats(-10, 10, allow_nan=False)


def test_nine_elements_of_nine_voxels():
    els = structuring_elements()
    assert els.shape == (9, 3, 3, 3)
    assert all(e.sum() == 9 for e in els)
    assert all(e[1, 1, 1] for e in els)


def test_elements_match_independent_enumeration():
    ours = {frozenset(o) for o in element_offsets()}
    assert ours == {frozenset(p) for p in plane_offsets()}


def test_union_size_by_enumeration():
    # counted by enumeration, then frozen
    union = set(itertools.chain.from_iterable(plane_offsets()))
    assert len(union) == 27
    assert structuring_elements().any(axis=0).sum() == 27


def test_canonical_order():
    assert PLANE_NORMALS[:3] == ((1, 0, 0), (0, 1, 0), (0, 0, 1))
    assert list(PLANE_NORMALS[3:]) == sorted(PLANE_NORMALS[3:])


def test_mask_pool_constant():
    for el in structuring_elements():
        assert mask_pool(np.full((3, 3, 3), 0.5), el) == 0.5


def test_mask_pool_center_spike():
    w = np.zeros((3, 3, 3))
    w[1, 1, 1] = 1
    for el in structuring_elements():
        assert mask_pool(w, el) == 1


def test_mask_pool_ignores_out_of_range():
    w = np.full((3, 3, 3), np.nan)
    w[1, 1, 1] = -2.0
    assert mask_pool(w, structuring_elements()[0]) == -2.0


def test_mask_pool_planar_analogue():
    # 2D picture: in the z-mid plane only the middle slab counts
    w = np.zeros((3, 3, 3))
    w[0] = 5.0
    w[1, 0, 2] = 3.0
    assert mask_pool(w, structuring_elements()[0]) == 3.0
    assert mask_pool(w, structuring_elements()[1]) == 5.0


def test_constant_is_fixed():
    v = np.full((4, 4, 4), 1.25)
    np.testing.assert_array_equal(si(v), v)
    np.testing.assert_array_equal(is_op(v), v)


def test_isolated_voxel():
    v = np.zeros((5, 5, 5))
    v[2, 2, 2] = 1
    assert np.all(si(v) == 0)
    np.testing.assert_array_equal(is_op(v), v)
    assert np.all(curvature_smooth(v, 1) == 0)


def test_mu_zero_identity():
    v = np.random.default_rng(0).random((4, 5, 6))
    np.testing.assert_array_equal(curvature_smooth(v, 0), v)


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_half_space_fixed_point(axis):
    v = np.zeros((6, 7, 8))
    idx = [slice(None)] * 3
    idx[axis] = slice(0, 3)
    v[tuple(idx)] = 1
    for mu in (1, 2, 4):
        np.testing.assert_array_equal(curvature_smooth(v, mu), v)


def test_shape_too_small():
    with pytest.raises(ValueError):
        si(np.zeros((2, 5, 5)))
    with pytest.raises(ValueError):
        curvature_smooth(np.zeros((3, 3, 3)), -1)


@settings(max_examples=60, deadline=None)
@given(st.data(), vol_shapes)
def test_brute_force_equivalence(data, shape):
    v = data.draw(arrays(np.float64, shape, elements=reals))
    np.testing.assert_array_equal(si(v), si_loop(v))
    np.testing.assert_array_equal(is_op(v), is_loop(v))


@settings(max_examples=60, deadline=None)
@given(st.data(), vol_shapes)
def test_duality(data, shape):
    v = data.draw(arrays(np.float64, shape, elements=reals))
    np.testing.assert_array_equal(is_op(v), -si(-v))


@settings(max_examples=40, deadline=None)
@given(st.data(), vol_shapes)
def test_monotone(data, shape):
    a = data.draw(arrays(np.float64, shape, elements=reals))
    b = a + data.draw(arrays(np.float64, shape, elements=st.floats(0, 5)))
    assert np.all(si(a) <= si(b))
    assert np.all(is_op(a) <= is_op(b))


@settings(max_examples=40, deadline=None)
@given(st.data(), vol_shapes)
def test_binary_preserved_and_range(data, shape):
    b = data.draw(arrays(np.float64, shape, elements=st.sampled_from([0.0, 1.0])))
    for op in (si, is_op):
        assert set(np.unique(op(b))) <= {0.0, 1.0}
    v = data.draw(arrays(np.float64, shape, elements=reals))
    for op in (si, is_op):
        out = op(v)
        assert np.all(out >= v.min()) and np.all(out <= v.max())
