import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import random_polygon, riemann_level2
from roughldp.rough_core import (
    CameronMartinPath,
    GridError,
    GroupElement,
    Level2RoughPath,
    SampledPath,
    TimeGrid,
    chen_compose,
    chen_defect,
    dilate,
    from_record,
    geometric_defect,
    homogeneous_norm,
    lift_piecewise_linear,
    max_chen_defect,
    to_record,
    young_pair,
    young_translate,
)

seeds = st.integers(0, 2**31 - 1)
dims = st.integers(1, 3)
steps = st.sampled_from([1, 2, 4, 8])


def _path(seed, n, d):
    return SampledPath(TimeGrid(n), random_polygon(np.random.default_rng(seed), n, d))


# --- grids and paths ---------------------------------------------------------------


def test_grid_nodes():
    g = TimeGrid(8)
    assert g.dt == 1 / 8
    assert g.times[0] == 0.0 and g.times[-1] == 1.0
    assert g.is_dyadic
    assert not TimeGrid(6).is_dyadic


def test_grid_rejects_off_grid_time():
    with pytest.raises(GridError):
        TimeGrid(4).index(0.3)


def test_sampled_path_length_checked():
    with pytest.raises(GridError):
        SampledPath(TimeGrid(4), np.zeros((4, 1)))


def test_cameron_martin_norm_and_endpoint():
    h = CameronMartinPath.linear(TimeGrid(4), [2.0, -1.0])
    assert h.sq_norm == pytest.approx(5.0)
    assert h.energy == pytest.approx(2.5)
    np.testing.assert_allclose(h.values[0], 0.0)
    np.testing.assert_allclose(h.endpoint, [2.0, -1.0])


# --- lift ----------------------------------------------------------------------------


def test_lift_single_segment():
    v = np.array([1.5, -2.0])
    X = lift_piecewise_linear(SampledPath(TimeGrid(1), np.vstack([np.zeros(2), v])))
    g = X.increment(0.0, 1.0)
    np.testing.assert_allclose(g.a1, v)
    np.testing.assert_allclose(g.a2, 0.5 * np.outer(v, v))


def test_lift_corner_path_area():
    vals = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    X = lift_piecewise_linear(SampledPath(TimeGrid(2), vals))
    got = X.increment(0.0, 1.0).a2
    np.testing.assert_allclose(got, riemann_level2(vals), atol=1e-12)
    np.testing.assert_allclose(got, [[0.5, 1.0], [0.0, 0.5]], atol=1e-15)
    assert 0.5 * (got[0, 1] - got[1, 0]) == pytest.approx(0.5)


@given(seeds, dims, steps)
def test_lift_matches_riemann_sum(seed, d, n):
    p = _path(seed, n, d)
    X = lift_piecewise_linear(p)
    np.testing.assert_allclose(X.increment(0.0, 1.0).a2, riemann_level2(p.values, 8), atol=1e-9)


def test_lift_concatenation():
    rng = np.random.default_rng(3)
    vals = random_polygon(rng, 8, 2)
    X = lift_piecewise_linear(SampledPath(TimeGrid(8), vals))
    left = lift_piecewise_linear(SampledPath(TimeGrid(4), vals[:5] - vals[0]))
    right = lift_piecewise_linear(SampledPath(TimeGrid(4), vals[4:] - vals[4]))
    whole = left.increment(0, 1) * right.increment(0, 1)
    np.testing.assert_allclose(whole.a1, X.increment(0, 1).a1, atol=1e-12)
    np.testing.assert_allclose(whole.a2, X.increment(0, 1).a2, atol=1e-12)


def test_level2_shape_checked():
    with pytest.raises(GridError):
        Level2RoughPath(TimeGrid(4), np.zeros((3, 1)), np.zeros((3, 1, 1)))


# --- group --------------------------------------------------------------------------


def test_chen_compose_tensor_entry():
    left = GroupElement([1.0, 0.0], np.zeros((2, 2)))
    right = GroupElement([0.0, 1.0], np.zeros((2, 2)))
    g = chen_compose(left, right)
    np.testing.assert_array_equal(g.a1, [1.0, 1.0])
    np.testing.assert_array_equal(g.a2, [[0.0, 1.0], [0.0, 0.0]])


@given(seeds, dims)
def test_group_axioms(seed, d):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(d)
    b = rng.standard_normal(d)
    area_a = rng.standard_normal((d, d))
    area_b = rng.standard_normal((d, d))
    g = GroupElement(a, 0.5 * np.outer(a, a) + area_a - area_a.T)
    h = GroupElement(b, 0.5 * np.outer(b, b) + area_b - area_b.T)
    e = GroupElement.identity(d)
    for x, y in ((g * e, g), (e * g, g), (g * g.inverse(), e), (g.inverse() * g, e)):
        np.testing.assert_allclose(x.a1, y.a1, atol=1e-12)
        np.testing.assert_allclose(x.a2, y.a2, atol=1e-12)
    assert g.in_group() and (g * h).in_group() and g.inverse().in_group()
    k = GroupElement(a + b, np.outer(b, a))
    lhs, rhs = (g * h) * k, g * (h * k)
    np.testing.assert_allclose(lhs.a2, rhs.a2, atol=1e-12)


def test_homogeneous_norm():
    assert homogeneous_norm(GroupElement.identity(3)) == 0.0
    assert homogeneous_norm(GroupElement([0.0, 1.0], np.zeros((2, 2)))) == pytest.approx(1.0)
    g = GroupElement([0.3, -1.2], [[0.1, 2.0], [-0.4, 0.5]])
    for lam in (0.5, 2.0, -3.0):
        assert homogeneous_norm(g.dilate(lam)) == pytest.approx(abs(lam) * homogeneous_norm(g))


# --- defects --------------------------------------------------------------------------


@given(seeds, dims, steps)
def test_chen_defect_vanishes_on_lifts(seed, d, n):
    X = lift_piecewise_linear(_path(seed, n, d))
    scale = 1.0 + float(np.max(np.abs(X.path.values))) ** 2
    assert max_chen_defect(X) <= 1e-12 * scale
    assert geometric_defect(X) <= 1e-12 * scale


def test_chen_defect_detects_perturbation():
    X = lift_piecewise_linear(_path(0, 4, 2))
    E = np.array([[0.0, 0.3], [-0.4, 0.0]])
    tab = X.table().perturbed(1, 3, E)
    assert chen_defect(tab, 0.25, 0.5, 0.75) == pytest.approx(np.linalg.norm(E))
    assert chen_defect(tab, 0.0, 0.5, 1.0) == pytest.approx(0.0, abs=1e-12)


def test_chen_defect_rejects_bad_order():
    X = lift_piecewise_linear(_path(0, 4, 1))
    with pytest.raises(GridError):
        chen_defect(X, 0.5, 0.25, 1.0)


def test_geometric_defect_cases():
    g = TimeGrid(1)
    area = Level2RoughPath(g, np.zeros((1, 2)), np.array([[[0.0, 1.0], [-1.0, 0.0]]]))
    assert geometric_defect(area) == 0.0
    eye = Level2RoughPath(g, np.zeros((1, 2)), np.eye(2)[None])
    assert geometric_defect(eye) == pytest.approx(2.0)


# --- dilation, translation, pairing --------------------------------------------------


def test_dilation_cases():
    p = _path(1, 4, 2)
    X = lift_piecewise_linear(p)
    one = dilate(X, 1.0)
    np.testing.assert_array_equal(one.second, X.second)
    zero = dilate(X, 0.0)
    assert not zero.first.any() and not zero.second.any()
    neg = dilate(X, -1.0)
    ref = lift_piecewise_linear(-p)
    np.testing.assert_allclose(neg.first, ref.first)
    np.testing.assert_allclose(neg.second, ref.second)


def test_translate_by_zero():
    X = lift_piecewise_linear(_path(2, 4, 2))
    Y = young_translate(X, CameronMartinPath.zero(TimeGrid(4), 2))
    np.testing.assert_array_equal(Y.first, X.first)
    np.testing.assert_array_equal(Y.second, X.second)


@given(seeds, dims, steps, st.sampled_from([1, 2]))
def test_translation_identity(seed, d, n, coarse):
    w = _path(seed, n, d)
    h = _path(seed + 1, max(n // coarse, 1), d)
    lhs = lift_piecewise_linear(w + h.refine(w.grid) if h.grid != w.grid else w + h)
    rhs = young_translate(lift_piecewise_linear(w), CameronMartinPath.from_path(h))
    np.testing.assert_allclose(rhs.table().second, lhs.table().second, atol=1e-12 * (1 + np.abs(lhs.second).max()))


@given(seeds, dims)
def test_translation_flow(seed, d):
    X = lift_piecewise_linear(_path(seed, 4, d))
    h1 = CameronMartinPath.from_path(_path(seed + 1, 4, d))
    h2 = CameronMartinPath.from_path(_path(seed + 2, 4, d))
    a = young_translate(young_translate(X, h2), h1)
    b = young_translate(X, h1 + h2)
    np.testing.assert_allclose(a.second, b.second, atol=1e-10)


def test_translation_in_one_dimension_is_square():
    X = lift_piecewise_linear(_path(5, 8, 1))
    h = CameronMartinPath.from_path(_path(6, 8, 1))
    tab = young_translate(X, h).table()
    np.testing.assert_allclose(tab.second[..., 0, 0], 0.5 * tab.first[..., 0] ** 2, atol=1e-12)


def test_translate_dimension_mismatch():
    X = lift_piecewise_linear(_path(0, 4, 2))
    with pytest.raises(GridError):
        young_translate(X, CameronMartinPath.zero(TimeGrid(4), 1))


def test_young_pair_examples():
    g = TimeGrid(4)
    zero = young_pair(lift_piecewise_linear(SampledPath(g, np.zeros((5, 1)))))
    assert zero.increment(0, 1).a2[1, 1] == pytest.approx(0.5)
    v = np.array([2.0, -1.0])
    line = young_pair(lift_piecewise_linear(SampledPath(g, g.times[:, None] * v)))
    np.testing.assert_allclose(line.increment(0, 1).a2[:2, 2], v / 2)
    rough = young_pair(lift_piecewise_linear(_path(7, 4, 2)))
    assert geometric_defect(rough) <= 1e-12 * (1 + np.abs(rough.second).max())


def test_refine_keeps_increments():
    X = young_translate(lift_piecewise_linear(_path(8, 4, 2)), CameronMartinPath.from_path(_path(9, 4, 2)))
    Y = X.refine(TimeGrid(16))
    for s, t in ((0.0, 1.0), (0.25, 0.75)):
        np.testing.assert_allclose(Y.increment(s, t).a2, X.increment(s, t).a2, atol=1e-12)


def test_record_round_trip():
    X = lift_piecewise_linear(_path(4, 4, 3))
    Y = from_record(to_record(X))
    np.testing.assert_array_equal(X.first, Y.first)
    np.testing.assert_array_equal(X.second, Y.second)
