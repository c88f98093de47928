import numpy as np
import pytest

from cafe_lab.errors import ShapeError
from cafe_lab.model import (LabeledBatch, LayerSpec, backward_full,
                            forward_first_fc, forward_representation,
                            gradmatch_input_grads, init_model, loss_batch,
                            representation_input_grads, softmax)
from cafe_lab.partition import make_partition

from conftest import finite_diff_param_grads, max_rel_err, true_v_star

rng = np.random.default_rng(0)


def tiny_params(extractor="identity", seed=0, d2=6, n_classes=3, shape=(4, 4),
                m=2, init_scale=0.9):
    part = make_partition(shape, m, "even" if extractor != "conv" else "blocks")
    specs = {
        "identity": [LayerSpec("identity")],
        "dense": [LayerSpec("dense", out_dim=5), LayerSpec("relu")],
        "conv": [LayerSpec("conv2d", channels=2, kernel=2, stride=1),
                 LayerSpec("sigmoid")],
    }[extractor]
    return init_model(part, specs, d2=d2, n_classes=n_classes, seed=seed,
                      init_scale=init_scale)


def test_identity_extractor_passthrough():
    params = tiny_params("identity")
    x = rng.random((4, 4))
    h = forward_representation(params, x)
    np.testing.assert_allclose(h, x.ravel())


def test_zero_dense_extractor_zero_representation():
    params = tiny_params("dense")
    for layers in params.extractors:
        for lay in layers:
            if lay.has_params:
                lay.weight[:] = 0.0
                lay.bias[:] = 0.0
    h = forward_representation(params, rng.random((4, 4)))
    np.testing.assert_allclose(h, 0.0)


def test_first_fc_zero_and_identity():
    params = tiny_params("identity", d2=16)
    params.fc1_weight[:] = 0.0
    params.fc1_bias[:] = 0.0
    assert np.all(forward_first_fc(params, rng.random(16)) == 0.0)
    params.fc1_weight[:] = np.eye(16)
    h = rng.random(16)
    np.testing.assert_allclose(forward_first_fc(params, h), h)


def test_first_fc_hand_value():
    params = tiny_params("identity", shape=(1, 2), m=1, d2=2)
    params.fc1_weight[:] = np.array([[1.0, 0.0], [0.0, 2.0]])
    params.fc1_bias[:] = np.array([0.5, -0.5])
    np.testing.assert_allclose(forward_first_fc(params, np.array([1.0, 1.0])),
                               [1.5, 1.5])


def test_first_fc_dimension_error():
    params = tiny_params("identity")
    with pytest.raises(ShapeError):
        forward_first_fc(params, np.zeros(params.d1 + 1))


def test_uniform_logits_loss_is_log_c():
    params = tiny_params("identity", n_classes=3)
    params.fc1_weight[:] = 0.0
    params.fc1_bias[:] = 0.0
    for lay in params.head:
        if lay.has_params:
            lay.weight[:] = 0.0
            lay.bias[:] = 0.0
    batch = LabeledBatch(rng.random((5, 4, 4)), np.array([0, 1, 2, 0, 1]))
    assert loss_batch(params, batch) == pytest.approx(np.log(3.0), rel=1e-12)


def test_full_batch_loss_equals_dataset_mean():
    params = tiny_params("conv")
    x = rng.random((6, 4, 4))
    y = rng.integers(0, 3, size=6)
    total = loss_batch(params, LabeledBatch(x, y))
    singles = np.mean([loss_batch(params, LabeledBatch(x[i:i + 1], y[i:i + 1]))
                       for i in range(6)])
    assert total == pytest.approx(singles, rel=1e-12)


@pytest.mark.parametrize("extractor", ["identity", "dense", "conv"])
def test_backward_matches_finite_differences(extractor):
    params = tiny_params(extractor, seed=3)
    batch = LabeledBatch(rng.random((3, 4, 4)), rng.integers(0, 3, size=3))
    rep = backward_full(params, batch)
    fd = finite_diff_param_grads(params, batch)
    worst = max(max_rel_err(rep.params[k], fd[k]) for k in fd)
    assert worst < 1e-5


def test_duplicated_sample_gradient_equals_single():
    params = tiny_params("dense", seed=5)
    x = rng.random((1, 4, 4))
    y = np.array([2])
    single = backward_full(params, LabeledBatch(x, y))
    dup = backward_full(params, LabeledBatch(np.repeat(x, 4, axis=0),
                                             np.repeat(y, 4)))
    for k in single.params:
        np.testing.assert_allclose(dup.params[k], single.params[k], atol=1e-12)


def test_bias_gradient_is_row_sum_of_du():
    params = tiny_params("conv", seed=7)
    batch = LabeledBatch(rng.random((5, 4, 4)), rng.integers(0, 3, size=5))
    rep = backward_full(params, batch)
    np.testing.assert_allclose(rep.params["fc1.bias"], rep.du.sum(axis=0),
                               atol=1e-12)


def test_eq6_identity_two_paths():
    # batch bias gradient equals the sum of per-sample loss gradients at the
    # first FC outputs, computed by an independent single-sample path
    params = tiny_params("dense", seed=11)
    x = rng.random((8, 4, 4))
    y = rng.integers(0, 3, size=8)
    k = 4
    sel = np.array([0, 2, 5, 7])
    batch_rep = backward_full(params, LabeledBatch(x[sel], y[sel]))
    v_star = true_v_star(params, x, y, k)
    np.testing.assert_allclose(batch_rep.params["fc1.bias"],
                               v_star[sel].sum(axis=0), atol=1e-12)


def test_chain_rule_weight_gradient_identity():
    params = tiny_params("conv", seed=13)
    x = rng.random((4, 4, 4))
    y = rng.integers(0, 3, size=4)
    rep = backward_full(params, LabeledBatch(x, y))
    h = forward_representation(params, x)
    rebuilt = sum(np.outer(h[i], rep.du[i]) for i in range(4))
    np.testing.assert_allclose(rep.params["fc1.weight"], rebuilt, atol=1e-10)


def test_scaling_convention_identities():
    # V*^T s equals the observed bias gradient for every mask, and
    # V* = (N/K) times the 1/N-scaled full-dataset per-sample matrix
    params = tiny_params("identity", seed=17, d2=20)
    n, k = 6, 2
    x = rng.random((n, 4, 4))
    y = rng.integers(0, 3, size=n)
    v_star = true_v_star(params, x, y, k)
    from cafe_lab.protocol import enumerate_masks
    for mask in enumerate_masks(n, k):
        sel = mask.indices()
        rep = backward_full(params, LabeledBatch(x[sel], y[sel]))
        np.testing.assert_allclose(v_star.T @ mask.bits,
                                   rep.params["fc1.bias"], atol=1e-13)
    full = backward_full(params, LabeledBatch(x, y))  # 1/N scaling
    np.testing.assert_allclose(v_star, (n / k) * full.du, atol=1e-13)


def test_forward_backward_deterministic():
    a = tiny_params("conv", seed=23)
    b = tiny_params("conv", seed=23)
    x = rng.random((3, 4, 4))
    y = rng.integers(0, 3, size=3)
    ra = backward_full(a, LabeledBatch(x, y))
    rb = backward_full(b, LabeledBatch(x, y))
    assert ra.loss == rb.loss
    for k in ra.params:
        assert np.array_equal(ra.params[k], rb.params[k])


def test_gradmatch_pullback_matches_finite_differences():
    params = tiny_params("conv", seed=29)
    x = rng.random((2, 4, 4))
    ysoft = softmax(rng.normal(size=(2, 3)))
    gbar = {k: rng.normal(size=v.shape) for k, v in params.param_items()}

    def psi(xv, yv):
        rep = backward_full(params, LabeledBatch(xv, yv))
        return sum(float((gbar[k] * rep.params[k]).sum()) for k in gbar)

    dx, dy, _ = gradmatch_input_grads(params, LabeledBatch(x, ysoft), gbar)
    h = 1e-6
    fd_x = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        lp = psi(x, ysoft)
        x[idx] = old - h
        lm = psi(x, ysoft)
        x[idx] = old
        fd_x[idx] = (lp - lm) / (2 * h)
    assert max_rel_err(dx, fd_x) < 1e-4
    fd_y = np.zeros_like(ysoft)
    for idx in np.ndindex(ysoft.shape):
        old = ysoft[idx]
        ysoft[idx] = old + h
        lp = psi(x, ysoft)
        ysoft[idx] = old - h
        lm = psi(x, ysoft)
        ysoft[idx] = old
        fd_y[idx] = (lp - lm) / (2 * h)
    assert max_rel_err(dy, fd_y) < 1e-4


def test_representation_pullback_matches_finite_differences():
    params = tiny_params("conv", seed=31)
    x = rng.random((2, 4, 4))
    hbar = rng.normal(size=(2, params.d1))

    def phi(xv):
        return float((hbar * forward_representation(params, xv)).sum())

    dx = representation_input_grads(params, x, hbar)
    h = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        lp = phi(x)
        x[idx] = old - h
        lm = phi(x)
        x[idx] = old
        fd[idx] = (lp - lm) / (2 * h)
    assert max_rel_err(dx, fd) < 1e-6


def test_empty_batch_rejected():
    with pytest.raises(ShapeError):
        LabeledBatch(np.zeros((0, 4, 4)), np.zeros(0, dtype=int))
