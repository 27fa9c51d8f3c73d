import numpy as np
import pytest

from deesco import tensor as T
from deesco.ensemble import EnsembleModel, branch_configs_from_preset
from deesco.losses import MuWeights, combinatory_loss, l2_gaze_loss, sample_mu, total_loss
from deesco.tensor import ShapeError, Tensor
from test_branches import make_batch

KEYS = ["0", "1", "2", "0,1", "0,2", "1,2"]


def test_l2_loss_value():
    pred = Tensor(np.array([[0.0, 0.0], [1.0, 1.0]]))
    truth = np.array([[3.0, 4.0], [1.0, 0.0]])
    assert l2_gaze_loss(pred, truth).item() == pytest.approx((25.0 + 1.0) / 2)


def test_l2_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        l2_gaze_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 2)))


def test_mu_is_a_distribution(rng):
    mu = sample_mu(rng, KEYS, batch_id=5)
    assert mu.batch_id == 5 and len(mu) == 6
    w = np.array([mu[k] for k in KEYS])
    assert np.all(w > 0) and w.sum() == pytest.approx(1.0, abs=1e-15)


def test_mu_accepts_index_lists(rng):
    assert list(sample_mu(rng, [[0], [0, 1]]).weights) == ["0", "0,1"]


def test_mu_expectation_is_uniform():
    rng = np.random.default_rng(2024)
    draws = np.array([[sample_mu(rng, KEYS)[k] for k in KEYS] for _ in range(4000)])
    mean, se = draws.mean(axis=0), draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(mean - 1 / 6) < 3 * se)


def test_mu_draws_reproducible():
    a = sample_mu(np.random.default_rng([0, 2, 0, 17]), KEYS)
    b = sample_mu(np.random.default_rng([0, 2, 0, 17]), KEYS)
    assert a.weights == b.weights


def test_combinatory_loss_matches_independent_sum(rng):
    truth = rng.uniform(-1, 1, (5, 2))
    preds = {k: Tensor(rng.uniform(-1, 1, (5, 2))) for k in KEYS}
    mu = sample_mu(rng, KEYS)
    l_comb, per = combinatory_loss(preds, truth, mu)
    ref = sum(mu[k] * np.mean(np.sum((preds[k].data - truth) ** 2, axis=1)) for k in KEYS)
    assert abs(l_comb.item() - ref) < 1e-12
    assert set(per) == set(KEYS)


def test_combinatory_loss_is_order_independent(rng):
    truth = rng.uniform(-1, 1, (4, 2))
    preds = {k: Tensor(rng.uniform(-1, 1, (4, 2))) for k in KEYS}
    mu = sample_mu(rng, KEYS)
    shuffled = {k: preds[k] for k in reversed(KEYS)}
    mu_shuffled = MuWeights({k: mu[k] for k in rng.permutation(KEYS)})
    a = combinatory_loss(preds, truth, mu)[0].item()
    b = combinatory_loss(shuffled, truth, mu_shuffled)[0].item()
    assert a == pytest.approx(b, rel=1e-14)


def test_combinatory_loss_key_mismatch(rng):
    preds = {"0": Tensor(np.zeros((1, 2)))}
    with pytest.raises(KeyError, match="do not match"):
        combinatory_loss(preds, np.zeros((1, 2)), sample_mu(rng, ["1"]))


def test_single_branch_has_zero_combinatory_loss(rng):
    l_comb, per = combinatory_loss({}, np.zeros((2, 2)), sample_mu(rng, []))
    assert l_comb.item() == 0.0 and per == {}


def test_total_loss_is_exact():
    l0, lc = Tensor(np.array(0.3)), Tensor(np.array(0.7))
    for nu in (0.0, 0.1, 1.0, 5.0, 10.0):
        assert total_loss(l0, lc, nu).item() == 0.3 + nu * 0.7
    with pytest.raises(ValueError):
        total_loss(l0, lc, -1.0)


def _model_grads(rng, nu):
    cfgs = branch_configs_from_preset("Rh+Ou+Fc", crop_size=(16, 16), heatmap_size=16,
                                      conv_channels=[4, 8], fc_widths=[16])
    model = EnsembleModel(cfgs, seed=0)
    batch = make_batch(rng, n=4)
    out = model.forward(batch)
    l0 = l2_gaze_loss(out.full, batch.targets)
    lc, _ = combinatory_loss(out.subsets, batch.targets, sample_mu(rng, list(out.subsets)))
    total_loss(l0, lc, nu).backward()
    return model


def test_nu_zero_leaves_subset_weights_without_gradient(rng):
    model = _model_grads(rng, 0.0)
    params = model.parameters()
    for name in model.subset_lambda_names():
        np.testing.assert_array_equal(params[name].grad, 0.0)
    assert np.any(params["combiner/0,1,2/lambda"].grad != 0)


def test_positive_nu_reaches_subset_weights(rng):
    model = _model_grads(rng, 1.0)
    params = model.parameters()
    assert all(np.any(params[n].grad != 0) for n in model.subset_lambda_names())
