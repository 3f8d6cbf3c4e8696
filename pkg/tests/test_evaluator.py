"""Online evaluation: lookup, interpolation, batch semantics, both backends."""

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles_for_tests import MixedFeasibilityOracle

from alkiax._hot import STATUS_INFEASIBLE, STATUS_OK, STATUS_OUTSIDE
from alkiax.approximator import ApproxConfig, approximate
from alkiax.errors import InfeasibleRegionError, OutOfDomainError
from alkiax.evaluator import evaluate, evaluate_batch, stats
from alkiax.kernels import covariance_vector, cube_vertices
from alkiax.oracles import ConstantOracle, SincosOracle, SyntheticRkhsOracle
from alkiax.kernels import Kernel
from alkiax.partition import Status, grid_points, locate


@pytest.fixture(scope="module")
def sincos():
    model, report = approximate(SincosOracle(), None, ApproxConfig(1e-2))
    return model, report


@pytest.fixture(scope="module")
def shifted_box():
    """A 1D model on a non-unit box with two outputs."""
    oracle = SyntheticRkhsOracle(Kernel("matern", 1.0, 2.5), [[-1.0], [0.5], [2.0]],
                                 [[1.0, 0.2], [-0.5, 0.1], [0.3, -1.0]], (-2.0,), (3.0,))
    model, _ = approximate(oracle, None, ApproxConfig(1e-3))
    return model, oracle


def reference_value(model, x):
    """Re-derive h(x) from the tree with plain Python: locate, then sum k(x, v) w_v."""
    u = model.transform.to_unit(np.atleast_1d(x))
    leaf, cube, _ = locate(model.tree, u)
    cells = 1 << leaf.p
    spacing = leaf.edge / cells
    lattice = np.array(np.unravel_index(cube, (cells,) * model.dim))
    corner = leaf.origin + lattice * spacing
    verts = corner + cube_vertices(model.dim, spacing)
    k = covariance_vector(model.kernel.scaled(leaf.edge), verts, u)
    return leaf.mean + leaf.weights[cube] @ k


def test_sincos_error_at_random_points(sincos):
    model, _ = sincos
    pts = np.random.default_rng(0).random((10_000, 2))
    err = np.abs(evaluate_batch(model, pts).values[:, 0] - SincosOracle().query_many(pts).values[:, 0])
    assert err.max() <= model.epsilon


def test_evaluate_matches_plain_reference(sincos, shifted_box):
    model, _ = sincos
    for x in np.random.default_rng(1).random((50, 2)):
        np.testing.assert_allclose(evaluate(model, x), reference_value(model, x), rtol=1e-13, atol=1e-14)
    model, _ = shifted_box
    for x in np.random.default_rng(2).uniform(-2, 3, 50):
        np.testing.assert_allclose(evaluate(model, [x]), reference_value(model, x), rtol=1e-13, atol=1e-14)


def test_nodes_reproduce_oracle(shifted_box):
    model, oracle = shifted_box
    for leaf in model.tree.leaves():
        unit = grid_points(leaf, leaf.p)
        pts = model.transform.from_unit(unit)
        np.testing.assert_allclose(evaluate_batch(model, pts).values, oracle.query_many(pts).values, atol=1e-8)


def test_non_unit_box_error_bound(shifted_box):
    model, oracle = shifted_box
    pts = np.linspace(-2, 3, 20001)[:, None]
    err = np.abs(evaluate_batch(model, pts).values - oracle.query_many(pts).values)
    assert err.max() <= model.epsilon


def test_constant_model_everywhere():
    model, _ = approximate(ConstantOracle(-2.5, (0, 0, 0), (2, 2, 2)), None, ApproxConfig(1e-3, p_lo=1, p_hi=3))
    pts = np.random.default_rng(0).uniform(0, 2, (500, 3))
    assert np.all(evaluate_batch(model, pts).values == -2.5)
    info = stats(model)
    assert info["leaf_count"] == 1 and info["cube_count"] == 8


def test_stats_examples():
    model, report = approximate(ConstantOracle(1.0, (0, 0), (1, 1)), None, ApproxConfig(1e-3))
    info = stats(model)
    assert info["leaf_count"] == 1 and info["cube_count"] == 16 and info["max_depth"] == report.max_depth_reached
    assert info["bytes"] > 0 and info["mean_eval_ops"] > 0


def test_stats_after_one_split(sincos):
    model, report = approximate(SincosOracle(), None, ApproxConfig(0.3))
    info = stats(model)
    assert info["max_depth"] == report.max_depth_reached
    if report.max_depth_reached == 1:
        assert info["leaf_count"] == 4


def test_batch_semantics(sincos):
    model, _ = sincos
    empty = evaluate_batch(model, [])
    assert empty.values.shape == (0, 1) and empty.status.shape == (0,)
    x = np.array([0.3, 0.9])
    np.testing.assert_array_equal(evaluate_batch(model, [x]).values[0], evaluate(model, x))
    pts = np.random.default_rng(3).random((1000, 2))
    whole = evaluate_batch(model, pts).values
    parts = np.vstack([evaluate_batch(model, pts[:377]).values, evaluate_batch(model, pts[377:]).values])
    np.testing.assert_array_equal(whole, parts)


def test_out_of_domain(sincos):
    model, _ = sincos
    with pytest.raises(OutOfDomainError):
        evaluate(model, [1.0 + 1e-9, 0.5])
    with pytest.raises(OutOfDomainError):
        evaluate(model, [0.5])
    res = evaluate_batch(model, [[0.5, 0.5], [-0.1, 0.5], [0.2, 2.0]])
    assert res.status.tolist() == [STATUS_OK, STATUS_OUTSIDE, STATUS_OUTSIDE]
    assert np.isnan(res.values[1:]).all()


def test_infeasible_region_signal():
    model = _shared_model()
    bad = next(s for s in model.tree.leaves() if s.status == Status.INFEASIBLE)
    centre = bad.origin + bad.edge / 2
    with pytest.raises(InfeasibleRegionError):
        evaluate(model, centre)
    assert evaluate_batch(model, [centre]).status[0] == STATUS_INFEASIBLE


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=200))
def test_numba_and_numpy_backends_agree(points):
    model = _shared_model()
    a = evaluate_batch(model, points, use_numba=True)
    b = evaluate_batch(model, points, use_numba=False)
    np.testing.assert_array_equal(a.status, b.status)
    np.testing.assert_allclose(a.values, b.values, rtol=0, atol=1e-13)
    np.testing.assert_array_equal(a.visits, b.visits)


_MODEL = []


def _shared_model():
    if not _MODEL:
        _MODEL.append(approximate(MixedFeasibilityOracle(), None, ApproxConfig(2e-2))[0])
    return _MODEL[0]


def test_visit_count_is_logarithmic(sincos):
    model, _ = sincos
    min_edge = min(leaf.edge for leaf in model.tree.leaves())
    pts = np.random.default_rng(4).random((20000, 2))
    res = evaluate_batch(model, pts)
    assert res.visits.max() <= math.ceil(math.log2(1 / min_edge)) + 1


def test_concurrent_reads_match_sequential(sincos):
    model, _ = sincos
    pts = np.random.default_rng(5).random((4000, 2))
    expected = np.array([evaluate(model, x) for x in pts])
    chunks = np.array_split(pts, 8)
    with ThreadPoolExecutor(8) as pool:
        singles = list(pool.map(lambda c: np.array([evaluate(model, x) for x in c]), chunks))
        batches = list(pool.map(lambda c: evaluate_batch(model, c).values, chunks))
    np.testing.assert_array_equal(np.vstack(singles), expected)
    np.testing.assert_array_equal(np.vstack(batches), expected)


def test_continuity_across_cube_faces_within_a_leaf(sincos):
    model, _ = sincos
    leaf = model.tree.leaves()[0]
    spacing = leaf.edge / (1 << leaf.p)
    face = leaf.origin[0] + 3 * spacing
    ys = leaf.origin[1] + np.linspace(0, leaf.edge, 101)
    left = evaluate_batch(model, np.c_[np.full_like(ys, np.nextafter(face, 0)), ys]).values[:, 0]
    right = evaluate_batch(model, np.c_[np.full_like(ys, face), ys]).values[:, 0]
    vertices = np.isclose((ys - leaf.origin[1]) / spacing, np.round((ys - leaf.origin[1]) / spacing), atol=1e-9)
    np.testing.assert_allclose(left[vertices], right[vertices], atol=1e-8)
    # away from vertices the two cubes may differ, but both are within epsilon of f
    assert np.abs(left - right).max() <= 2 * model.epsilon
