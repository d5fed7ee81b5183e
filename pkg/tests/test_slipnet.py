import numpy as np
import pytest

from graspsense import numerics as nx
from graspsense.dataio import GraspLabel
from graspsense.slipnet import (NonFiniteActivation, SlipNet, SlipNetConfig, StepTrace, explain,
                                predict_from_logits)
from gradcheck import slipnet_case
from oracles import naive_slipnet_row


def trained_like(cfg=None, seed=0):
    """Random parameters and non-trivial running statistics."""
    m = SlipNet(cfg or SlipNetConfig(), seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, p in m.params.items():
        p += rng.normal(0, 0.1, p.shape)
    for name, b in m.buffers.items():
        if name.endswith("running_mean"):
            b += rng.normal(0, 0.2, b.shape)
        else:
            b *= rng.uniform(0.5, 2.0, b.shape)
    return m


def test_identical_rows_identical_logits():
    m = trained_like()
    x = np.tile(np.random.default_rng(0).uniform(0, 1, 34), (5, 1))
    out = m.forward(x)
    # BLAS row tiling may reorder sums, so allow last-bit differences
    np.testing.assert_allclose(out.slip, np.tile(out.slip[0], (5, 1)), rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.crumple, np.tile(out.crumple[0], (5, 1)), rtol=0, atol=1e-12)


def test_naive_oracle_agrees():
    m = trained_like()
    x = np.random.default_rng(3).uniform(-0.2, 1.2, (50, 34))
    out = m.forward(x)
    for i in range(0, 50, 7):
        s, c = naive_slipnet_row(m, x[i])
        np.testing.assert_allclose(out.slip[i], s, atol=1e-9)
        np.testing.assert_allclose(out.crumple[i], c, atol=1e-9)


def prior_recurrence_case(seed: int):
    """gamma=1 with a step-1 mask that saturates one feature; returns later masks."""
    cfg = SlipNetConfig(feature_dim=8, n_d=4, n_a=4, gamma=1.0)
    m = SlipNet(cfg, seed=seed)
    # make step 1's attention dominated by feature 2 regardless of input
    m.params["att1.fc.W"][:] = 0.0
    m.params["att1.bn.beta"][:] = 0.0
    m.params["att1.bn.beta"][2] = 5.0
    x = np.random.default_rng(seed).normal(size=(6, 8))
    out = m.forward(x)
    return out


def test_gamma_one_exhausts_feature():
    out = prior_recurrence_case(0)
    assert np.all(out.traces[0].mask[:, 2] == 1.0)
    assert np.all(out.traces[1].prior[:, 2] == 0.0)
    for t in out.traces[1:]:
        assert np.all(t.mask[:, 2] == 0.0)


def test_prior_recurrence_bit_exact():
    m = trained_like(SlipNetConfig(gamma=1.3))
    out = m.forward(np.random.default_rng(2).uniform(0, 1, (8, 34)))
    prior = np.ones((8, 34))
    for t in out.traces:
        assert np.array_equal(t.prior, prior)
        prior = prior * (1.3 - t.mask)


def test_mask_rows_on_simplex():
    m = trained_like()
    out = m.forward(np.random.default_rng(4).uniform(0, 1, (32, 34)), "train")
    for t in out.traces:
        assert np.all(t.mask >= 0)
        np.testing.assert_allclose(t.mask.sum(axis=1), 1.0, atol=1e-9)


def test_mask_truncates_with_dominant_logit():
    out = prior_recurrence_case(1)
    assert np.all((out.traces[0].mask == 0).sum(axis=1) >= 1)


def test_row_permutation_equivariance():
    m = trained_like()
    x = np.random.default_rng(5).uniform(0, 1, (10, 34))
    perm = np.random.default_rng(6).permutation(10)
    a, b = m.forward(x), m.forward(x[perm])
    np.testing.assert_allclose(a.slip[perm], b.slip, atol=1e-12)
    np.testing.assert_allclose(a.crumple[perm], b.crumple, atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_end_to_end_gradients(seed):
    err = slipnet_case(seed)
    assert err is None or err < 1e-3


def test_non_finite_activation_names_step():
    m = SlipNet(SlipNetConfig(feature_dim=4, n_d=2, n_a=2))
    m.params["step0.block0.fc.W"][:] = np.inf
    msg = "step 0 block step0.block0"
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteActivation, match=msg):
        m.forward(np.ones((3, 4)), "train")


def test_param_mismatch_rejected():
    cfg = SlipNetConfig(feature_dim=4, n_d=2, n_a=2)
    params, _ = SlipNet.init_params(cfg)
    params["att1.fc.W"] = np.zeros((3, 3))
    with pytest.raises(ValueError, match="att1.fc.W"):
        SlipNet(cfg, params)
    del params["att1.fc.W"]
    with pytest.raises(ValueError):
        SlipNet(cfg, params)
    with pytest.raises(nx.DimensionError):
        SlipNet(cfg).forward(np.ones((2, 5)))


def test_predict_examples():
    labels, _, _ = predict_from_logits(np.array([[5.0, -5.0]]), np.array([[-5.0, 5.0]]))
    assert labels == [GraspLabel(0, 1)]
    labels, sc, cc = predict_from_logits(np.zeros((1, 2)), np.zeros((1, 2)))
    assert labels == [GraspLabel(0, 0)] and sc[0] == 0.5 and cc[0] == 0.5


def test_explain_examples():
    mask = np.array([[0.2, 0.8, 0.0], [0.5, 0.5, 0.0]])
    single = explain([StepTrace(mask, np.ones_like(mask), np.ones((2, 4)))])
    np.testing.assert_allclose(single, mask.mean(axis=0), atol=1e-12)
    uni = np.full((3, 4), 0.25)
    traces = [StepTrace(uni, np.ones_like(uni), np.random.default_rng(i).normal(size=(3, 2)))
              for i in range(3)]
    np.testing.assert_allclose(explain(traces), 0.25, atol=1e-12)
    with pytest.raises(ValueError):
        explain([])


def test_backward_tape_single_use():
    m = SlipNet(SlipNetConfig(feature_dim=4, n_d=2, n_a=2))
    out = m.forward(np.random.default_rng(0).normal(size=(3, 4)), "train")
    m.backward(out, np.zeros((3, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        m.backward(out, np.zeros((3, 2)), np.zeros((3, 2)))


def test_torque_only_labels_attribution():
    """Labels driven by torque columns only: attribution concentrates there."""
    from graspsense.training import TrainConfig, fit
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (3000, 34))
    tip = x[:, [3, 7, 11, 15]].mean(axis=1)
    y = np.stack([(tip < 0.4).astype(int), (tip > 0.6).astype(int)], axis=1)
    model = SlipNet(SlipNetConfig(n_d=8, n_a=8), seed=1)
    cfg = TrainConfig("slip", lr=0.02, epochs=15, batch_size=256, seed=0)
    res = fit(model, x[:2500], y[:2500], x[2500:], y[2500:], cfg)
    attr = explain(res.model.forward(x[2500:]).traces)
    assert attr[:16].sum() >= 0.7


def test_prior_non_increasing_for_gamma_one():
    m = trained_like(SlipNetConfig(gamma=1.0))
    out = m.forward(np.random.default_rng(6).uniform(0, 1, (16, 34)), "train")
    priors = [t.prior for t in out.traces]
    for a, b in zip(priors, priors[1:]):
        assert np.all(b <= a) and np.all(b >= 0)
