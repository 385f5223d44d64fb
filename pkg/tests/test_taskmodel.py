import math

import numpy as np
import pytest

import dataopt.diffcore as dc
from dataopt.diffcore import Tensor, backward
from dataopt.hypermodel import HyperTable, SubmodelFlags, weights, soft_labels
from dataopt.taskmodel import (
    ModelError, TaskModel, train_loss, valid_loss,
)

from oracles import central_diff, rel_err

RNG = np.random.default_rng(7)


def test_zero_linear_model_uniform_logits():
    m = TaskModel("linear", (1, 4, 4), 3, seed=0)
    m.params[:] = 0.0
    x = Tensor(RNG.uniform(0, 1, (5, 1, 4, 4)))
    logits = m.forward(m.param_tensor(), x)
    assert np.allclose(logits.data, 0.0)
    p = dc.softmax(logits, axis=1)
    assert np.allclose(p.data, 1.0 / 3.0)


@pytest.mark.parametrize("kind", ["linear", "mlp", "tinycnn"])
def test_forward_shape_and_permutation_equivariance(kind):
    m = TaskModel(kind, (1, 8, 8), 4, hidden=(16,), channels=(4, 6), seed=1)
    x = RNG.uniform(0, 1, (6, 1, 8, 8))
    logits = m.forward(m.param_tensor(), Tensor(x)).data
    assert logits.shape == (6, 4)
    assert np.all(np.isfinite(logits))
    perm = RNG.permutation(6)
    logits_p = m.forward(m.param_tensor(), Tensor(x[perm])).data
    assert np.allclose(logits_p, logits[perm], atol=1e-12)


def test_forward_shape_mismatch():
    m = TaskModel("linear", (1, 8, 8), 4)
    with pytest.raises(ModelError):
        m.forward(m.param_tensor(), Tensor(np.zeros((2, 1, 4, 4))))


def test_param_budget_and_determinism():
    m1 = TaskModel("tinycnn", (1, 16, 16), 10, channels=(8, 16), seed=42)
    m2 = TaskModel("tinycnn", (1, 16, 16), 10, channels=(8, 16), seed=42)
    assert m1.n_params <= 50_000
    assert np.array_equal(m1.params, m2.params)
    m3 = TaskModel("tinycnn", (1, 16, 16), 10, channels=(8, 16), seed=43)
    assert not np.array_equal(m1.params, m3.params)


def test_train_loss_hand_example():
    # C=2, yS=(0.9,0.1), p=(0.5,0.5), w=1 -> 0.87889
    logits = Tensor(np.zeros((1, 2)))
    ys = Tensor(np.array([[0.9, 0.1]]))
    w = Tensor(np.ones(1))
    loss = train_loss(logits, ys, w)
    kl1 = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    kl2 = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert abs(kl1 - 0.36806) < 1e-5
    assert abs(kl2 - 0.51083) < 1e-5
    assert abs(loss.item() - (kl1 + kl2)) < 1e-10
    # brute-force cross-check over the definition
    p = np.array([0.5, 0.5])
    y = np.array([0.9, 0.1])
    brute = np.sum(y * np.log(y / p)) + np.sum(p * np.log(p / y))
    assert abs(loss.item() - brute) < 1e-12


def test_train_loss_zero_cases():
    p_logits = RNG.normal(size=(4, 3))
    probs = np.exp(p_logits) / np.exp(p_logits).sum(axis=1, keepdims=True)
    same = train_loss(Tensor(p_logits), Tensor(probs), Tensor(np.ones(4)))
    assert abs(same.item()) < 1e-10
    zero_w = train_loss(Tensor(RNG.normal(size=(4, 3))),
                        Tensor(probs), Tensor(np.zeros(4)))
    assert zero_w.item() == 0.0


def test_train_loss_nonnegative_random():
    for trial in range(20):
        logits = RNG.normal(size=(3, 5)) * 3
        raw = RNG.uniform(0.01, 1, size=(3, 5))
        ys = raw / raw.sum(axis=1, keepdims=True)
        w = RNG.uniform(0, 2, size=3)
        val = train_loss(Tensor(logits), Tensor(ys), Tensor(w)).item()
        assert val >= -1e-12


def test_valid_loss_values():
    # confident correct prediction -> ~0; uniform -> ln C
    logits = np.full((2, 10), -20.0)
    logits[0, 3] = 20.0
    l0 = valid_loss(Tensor(logits[:1]), [3])
    assert l0.item() < 1e-8
    lu = valid_loss(Tensor(np.zeros((4, 10))), [0, 3, 5, 9])
    assert abs(lu.item() - math.log(10)) < 1e-12
    with pytest.raises(ModelError):
        valid_loss(Tensor(np.zeros((1, 3))), [5])


def test_valid_loss_is_first_kl_term_with_hard_labels():
    # train_loss with w=1 and one-hot targets = CE + reverse term; the
    # forward KL alone must equal valid_loss
    logits0 = RNG.normal(size=(6, 4))
    labels = RNG.integers(0, 4, size=6)
    onehot = np.eye(4)[labels]
    p = np.exp(logits0 - logits0.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    eps = 1e-8
    kl_fwd = np.mean([np.sum(onehot[i] * (np.log(np.clip(onehot[i], eps, 1.0))
                                          - np.log(np.clip(p[i], eps, 1.0))))
                      for i in range(6)])
    vl = valid_loss(Tensor(logits0), labels).item()
    assert abs(vl - kl_fwd) < 1e-10
    full = train_loss(Tensor(logits0), Tensor(onehot), Tensor(np.ones(6))).item()
    rev = np.mean([np.sum(p[i] * (np.log(np.clip(p[i], eps, 1.0))
                                  - np.log(np.clip(onehot[i], eps, 1.0))))
                   for i in range(6)])
    assert abs(full - (kl_fwd + rev)) < 1e-10


def test_train_loss_gradients_vs_fd():
    b, c = 3, 4
    logits0 = RNG.normal(size=(b, c))
    lam_s0 = RNG.normal(size=(b, c))
    lam_w0 = RNG.normal(size=b)

    def value(lg, ls, lw):
        ys = dc.softmax(Tensor(ls), axis=1)
        w = 1.44 * dc.softplus(Tensor(lw))
        return float(train_loss(Tensor(lg), ys, w).data)

    logits = Tensor(logits0, requires_grad=True)
    lam_s = Tensor(lam_s0, requires_grad=True)
    lam_w = Tensor(lam_w0, requires_grad=True)
    loss = train_loss(logits, dc.softmax(lam_s, axis=1), 1.44 * dc.softplus(lam_w))
    gl, gs, gw = backward(loss, [logits, lam_s, lam_w])
    assert rel_err(gl.data, central_diff(lambda a: value(a, lam_s0, lam_w0), logits0)) < 1e-5
    assert rel_err(gs.data, central_diff(lambda a: value(logits0, a, lam_w0), lam_s0)) < 1e-5
    assert rel_err(gw.data, central_diff(lambda a: value(logits0, lam_s0, a), lam_w0)) < 1e-5


def test_valid_loss_has_zero_hypergrad():
    # the outer loss never touches the hyper table directly
    table = HyperTable(np.arange(6), RNG.integers(0, 3, 6), 3,
                       SubmodelFlags.for_arm("aug_weights_soft"))
    m = TaskModel("linear", (1, 4, 4), 3, seed=2)
    x = Tensor(RNG.uniform(0, 1, (6, 1, 4, 4)))
    logits = m.forward(m.param_tensor(), x)
    lv = valid_loss(logits, RNG.integers(0, 3, 6))
    grads = backward(lv, [table.aug.lambda_m, table.aug.lambda_b,
                          table.lambda_w, table.lambda_s])
    for g in grads:
        assert np.all(g.data == 0.0)


def test_model_loss_gradient_through_submodels_vs_fd():
    # end-to-end: model forward + weights + soft labels, gradient wrt theta
    m = TaskModel("mlp", (1, 3, 3), 3, hidden=(5,), seed=4)
    table = HyperTable(np.arange(4), np.array([0, 1, 2, 1]), 3,
                       SubmodelFlags.for_arm("aug_weights_soft"))
    x = RNG.uniform(0, 1, (4, 1, 3, 3))
    idx = np.arange(4)

    def value(theta_flat):
        logits = m.forward(Tensor(theta_flat), Tensor(x))
        return float(train_loss(logits, soft_labels(table, idx),
                                 weights(table, idx)).data)

    theta = m.param_tensor()
    loss = train_loss(m.forward(theta, Tensor(x)), soft_labels(table, idx),
                      weights(table, idx))
    g, = backward(loss, [theta])
    ref = central_diff(value, m.params.copy())
    assert rel_err(g.data, ref) < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    m = TaskModel("tinycnn", (1, 8, 8), 4, channels=(3, 5), seed=11)
    m.params[:] = RNG.normal(size=m.n_params)
    p = tmp_path / "model.ckpt"
    m.save(p)
    back = TaskModel.load(p)
    assert back.descriptor() == m.descriptor()
    assert np.array_equal(back.params, m.params)
    x = RNG.uniform(0, 1, (2, 1, 8, 8))
    assert np.array_equal(back.predict(x), m.predict(x))
