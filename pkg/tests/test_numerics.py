import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from graspsense import numerics as nx
from gradcheck import PRIMITIVES, grad_case, kink_free
from oracles import simplex_grid_search, simplex_projection

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def vectors(min_size=2, max_size=34):
    return st.integers(min_size, max_size).flatmap(lambda n: arrays(np.float64, n, elements=finite))


# ------------------------------------------------------------------- fc

def test_fc_examples():
    out, _ = nx.fc_forward([[1, 2]], np.eye(2), np.zeros(2))
    assert out.tolist() == [[1, 2]]
    out, _ = nx.fc_forward([[0, 0]], np.random.default_rng(0).normal(size=(2, 2)), [3, 4])
    assert out.tolist() == [[3, 4]]
    out, _ = nx.fc_forward([[1, 1]], np.array([[2, 3], [4, 5]]), np.array([1, 1]))
    assert out.tolist() == [[7, 9]]


def test_fc_shape_mismatch_names_both_shapes():
    with pytest.raises(nx.DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
        nx.fc_forward(np.ones((1, 3)), np.ones((2, 2)))


def test_fc_backward_hand_case():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    w = np.array([[1.0, -1.0], [0.5, 2.0]])
    _, cache = nx.fc_forward(x, w, np.zeros(2))
    up = np.array([[1.0, 0.0], [0.0, 1.0]])
    dx, dw, db = nx.fc_backward(up, cache)
    # dW = x^T up = x^T; dx = up W^T = W^T; db = column sums
    assert dw.tolist() == [[1.0, 3.0], [2.0, 4.0]]
    assert dx.tolist() == [[1.0, 0.5], [-1.0, 2.0]]
    assert db.tolist() == [1.0, 1.0]


def test_cache_reuse_rejected():
    _, cache = nx.fc_forward(np.ones((2, 2)), np.ones((2, 2)))
    nx.fc_backward(np.ones((2, 2)), cache)
    with pytest.raises(nx.CacheReuseError):
        nx.fc_backward(np.ones((2, 2)), cache)


def test_cache_kind_checked():
    _, cache = nx.relu_forward(np.ones(3))
    with pytest.raises(TypeError):
        nx.sigmoid_backward(np.ones(3), cache)


# ------------------------------------------------------------ batchnorm

def _bn(x, gamma, beta, eps=nx.BN_EPS, mode="train", stats=None):
    x = np.asarray(x, dtype=float)
    stats = stats or nx.RunningStats.fresh(x.shape[1])
    return nx.batchnorm_forward(x, np.asarray(gamma, float), np.asarray(beta, float), stats,
                                mode, eps)


def test_batchnorm_two_point():
    out, _ = _bn([[1.0], [3.0]], [1.0], [0.0], eps=1e-300)
    np.testing.assert_allclose(out.ravel(), [-1.0, 1.0], atol=1e-12)


def test_batchnorm_affine_collapse():
    out, _ = _bn(np.random.default_rng(1).normal(size=(5, 3)), np.zeros(3), np.full(3, 5.0))
    assert np.all(out == 5.0)


def test_batchnorm_population_variance():
    out, _ = _bn([[2.0], [4.0], [6.0]], [1.0], [0.0])
    expected = np.array([-2, 0, 2]) / math.sqrt(8 / 3 + 1e-5)
    np.testing.assert_allclose(out.ravel(), expected, atol=1e-12)
    np.testing.assert_allclose(out.ravel(), [-1.2247, 0, 1.2247], atol=1e-4)


def test_batchnorm_single_row_train_rejected():
    with pytest.raises(ValueError, match="at least 2"):
        _bn([[1.0, 2.0]], np.ones(2), np.zeros(2))


def test_batchnorm_running_stats_and_infer():
    stats = nx.RunningStats.fresh(1)
    _bn([[2.0], [4.0], [6.0]], [1.0], [0.0], stats=stats)
    assert stats.mean[0] == pytest.approx(0.1 * 4.0)
    assert stats.var[0] == pytest.approx(0.9 + 0.1 * 8 / 3)
    out, _ = _bn([[4.0]], [2.0], [1.0], mode="infer", stats=stats)
    assert out[0, 0] == pytest.approx(2.0 * (4.0 - 0.4) / math.sqrt(stats.var[0] + 1e-5) + 1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(1, 6), st.integers(0, 2**31))
def test_batchnorm_train_columns_standardized(n, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d)) * rng.uniform(0.5, 5, d) + rng.uniform(-5, 5, d)
    out, cache = _bn(x, np.ones(d), np.zeros(d))
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)
    var = x.var(axis=0)
    # eps shrinks the unit variance by var / (var + eps)
    np.testing.assert_allclose(out.var(axis=0), var / (var + nx.BN_EPS), atol=1e-6)
    out_tiny, _ = _bn(x, np.ones(d), np.zeros(d), eps=1e-12)
    np.testing.assert_allclose(out_tiny.var(axis=0), 1.0, atol=1e-6)


# ------------------------------------------------------------ elementwise

def test_glu_examples():
    assert nx.glu_forward([[2.0, 0.0]])[0][0, 0] == pytest.approx(1.0)
    for g in (-30.0, 0.0, 7.0):
        assert nx.glu_forward([[0.0, g]])[0][0, 0] == 0.0
    assert nx.glu_forward([[1.0, 2.0]])[0][0, 0] == pytest.approx(0.8807970779778823, abs=1e-12)


def test_glu_odd_columns():
    with pytest.raises(nx.DimensionError):
        nx.glu_forward(np.ones((2, 3)))


def test_relu_softmax_examples():
    assert nx.relu([-1, 0, 2]).tolist() == [0, 0, 2]
    np.testing.assert_allclose(nx.softmax_rows(np.full((1, 13), 0.7)), 1 / 13, atol=1e-15)
    np.testing.assert_allclose(nx.softmax_rows([[math.log(2), 0.0]]), [[2 / 3, 1 / 3]],
                               atol=1e-15)


def test_relu_backward_gates():
    _, cache = nx.relu_forward(np.array([2.0, -2.0]))
    assert nx.relu_backward(np.array([3.0, 3.0]), cache).tolist() == [3.0, 0.0]


def test_sigmoid_extremes_finite():
    s = nx.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert s.tolist() == [0.0, 0.5, 1.0]


# ------------------------------------------------------------- sparsemax

def test_sparsemax_examples():
    np.testing.assert_allclose(nx.sparsemax([0.5, 0.3, 0.2]), [0.5, 0.3, 0.2], atol=1e-15)
    np.testing.assert_allclose(nx.sparsemax(np.full(7, 3.3)), 1 / 7, atol=1e-15)
    out = nx.sparsemax([1.2, 0.8, 0.1])
    np.testing.assert_allclose(out, [0.7, 0.3, 0.0], atol=1e-12)
    np.testing.assert_allclose(out, simplex_projection([1.2, 0.8, 0.1]), atol=1e-12)
    np.testing.assert_allclose(out, simplex_grid_search([1.2, 0.8, 0.1]), atol=1e-2)


def test_sparsemax_rejects_non_finite():
    with pytest.raises(ValueError):
        nx.sparsemax([1.0, np.nan])
    with pytest.raises(ValueError):
        nx.sparsemax([1.0, np.inf])


def test_sparsemax_allowed_mask():
    z = np.array([3.0, 0.5, 0.4])
    out = nx.sparsemax(z, [False, True, True])
    assert out[0] == 0.0
    np.testing.assert_allclose(out[1:], simplex_projection(z[1:]), atol=1e-12)
    # nothing allowed: unrestricted projection
    np.testing.assert_allclose(nx.sparsemax(z, [False] * 3), nx.sparsemax(z), atol=0)


def test_sparsemax_grid_oracle_3d():
    rng = np.random.default_rng(3)
    for _ in range(5):
        z = rng.uniform(-1, 2, 3)
        np.testing.assert_allclose(nx.sparsemax(z), simplex_grid_search(z, 300), atol=5e-3)


@settings(max_examples=300, deadline=None)
@given(vectors())
def test_sparsemax_properties(z):
    p = nx.sparsemax(z)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(nx.sparsemax(p), p, atol=1e-9)
    np.testing.assert_allclose(nx.sparsemax(z + 3.7), p, atol=1e-9)
    np.testing.assert_allclose(p, simplex_projection(z), atol=1e-9)


def test_sparsemax_truncates_dominant_logit():
    z = np.array([2.5, 1.0, 0.9, 0.2])
    assert nx.sparsemax(z).tolist() == [1.0, 0.0, 0.0, 0.0]


def test_sparsemax_backward_support_one():
    _, cache = nx.sparsemax_forward(np.array([[5.0, 0.0, -1.0]]))
    g = nx.sparsemax_backward(np.array([[2.0, 2.0, 2.0]]), cache)
    assert np.all(g == 0.0)


# ---------------------------------------------------------- cross entropy

def test_cross_entropy_examples():
    loss, _ = nx.cross_entropy(np.zeros((4, 13)), np.array([0, 3, 7, 12]))
    assert loss == pytest.approx(math.log(13), abs=1e-12)
    loss, _ = nx.cross_entropy(np.array([[1.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.3133, abs=1e-4)
    loss, _ = nx.cross_entropy(np.array([[800.0, 0.0]]), np.array([0]))
    assert loss == 0.0


def test_cross_entropy_bad_target_names_row():
    with pytest.raises(ValueError, match="row 2"):
        nx.cross_entropy(np.zeros((3, 2)), np.array([0, 1, 2]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(2, 13), st.integers(0, 2**31))
def test_cross_entropy_grad_rows_sum_to_zero(n, c, seed):
    rng = np.random.default_rng(seed)
    _, g = nx.cross_entropy(rng.normal(size=(n, c)) * 5, rng.integers(0, c, n))
    assert np.abs(g.sum(axis=1)).max() < 1e-12


# ------------------------------------------------------------------ adam

def test_adam_first_step():
    p = {"w": np.zeros(1)}
    nx.adam_step(p, {"w": np.ones(1)}, nx.AdamState(), 0.02)
    assert p["w"][0] == pytest.approx(-0.02 / (1 + 1e-8), abs=1e-15)


def test_adam_zero_grad_and_zero_lr():
    p = {"w": np.array([1.5, -2.0])}
    nx.adam_step(p, {"w": np.zeros(2)}, nx.AdamState(), 0.1)
    assert p["w"].tolist() == [1.5, -2.0]
    before = np.random.default_rng(0).normal(size=(3, 3))
    p = {"w": before.copy()}
    nx.adam_step(p, {"w": np.ones((3, 3))}, nx.AdamState(), 0.0)
    assert np.array_equal(p["w"], before)


def test_adam_constant_gradient_monotone():
    p = {"w": np.zeros(1)}
    state = nx.AdamState()
    steps = []
    for _ in range(2):
        before = p["w"][0]
        nx.adam_step(p, {"w": np.array([0.3])}, state, 0.01)
        steps.append(p["w"][0] - before)
    assert steps[0] < 0 and steps[1] < 0


def test_adam_shape_mismatch():
    with pytest.raises(nx.DimensionError):
        nx.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nx.AdamState(), 0.1)
    with pytest.raises(nx.DimensionError):
        nx.adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, nx.AdamState(), 0.1)


def test_determinism_bitwise():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(16, 8))
    a, _ = _bn(x, np.ones(8), np.zeros(8))
    b, _ = _bn(x, np.ones(8), np.zeros(8))
    assert a.tobytes() == b.tobytes()
    assert nx.sparsemax(x).tobytes() == nx.sparsemax(x.copy()).tobytes()


@pytest.mark.parametrize("kind", PRIMITIVES)
def test_primitive_gradients_quick(kind):
    errs = [grad_case(kind, s) for s in range(40) if kink_free(kind, s)]
    assert errs and max(errs) < 1e-4
