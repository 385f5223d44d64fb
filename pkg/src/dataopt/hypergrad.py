"""Outer-objective gradients through the trained parameters.

At an inner stationary point the validation gradient with respect to
the hyperparameters factors into: validation gradient wrt parameters,
times an inverse Hessian of the train loss, times the mixed second
derivative of the train loss.  The inverse is approximated by a Neumann
series of Hessian-vector products; a dense solve (small models only)
and an identity substitution are available as alternative estimators.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .augment import augment_batch
from .diffcore import Tensor
from .hypermodel import soft_labels, weights
from .seeding import derive_rng
from .taskmodel import train_loss, valid_loss

ESTIMATORS = ("ift_neumann", "darts_identity", "exact_inverse")
EXACT_MAX_PARAMS = 200
HESSIAN_JITTER = 1e-8


class HypergradError(Exception):
    pass


@dataclass(frozen=True)
class NeumannConfig:
    """Series length, step size, and which inverse estimator to use."""

    steps: int = 5
    alpha: float = 0.1
    estimator: str = "ift_neumann"

    def __post_init__(self):
        if self.steps < 0:
            raise HypergradError("Neumann steps must be >= 0")
        if self.alpha <= 0:
            raise HypergradError("Neumann step size must be positive")
        if self.estimator not in ESTIMATORS:
            raise HypergradError(f"unknown estimator {self.estimator!r}")


@dataclass
class HypergradEstimate:
    """Per-block hypergradients from one outer step (zeros outside the batch)."""

    grads: dict
    estimator: str
    batch_indices: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"estimator": self.estimator,
                           "batch_size": int(len(self.batch_indices)),
                           "diagnostics": self.diagnostics})


def _tick(counter, name):
    if counter is not None:
        counter.tick(name)


def _ihvp_from_grad(grad_theta: Tensor, theta: Tensor, v0: np.ndarray,
                    cfg: NeumannConfig, counter=None):
    """Inverse-Hessian-vector product from an already-built gradient graph.

    Returns (solution vector, diagnostics).  Every Hessian-vector
    product is one backward sweep through the gradient graph.
    """
    if cfg.estimator == "darts_identity":
        return v0.copy(), {"residual_norm": 0.0, "hvp_calls": 0}

    if cfg.estimator == "exact_inverse":
        n = theta.size
        if n > EXACT_MAX_PARAMS:
            raise HypergradError(
                f"exact_inverse needs <= {EXACT_MAX_PARAMS} parameters, got {n}")
        H = np.empty((n, n))
        eye = np.eye(n)
        for j in range(n):
            gv = dc.tsum(dc.mul(grad_theta, dc.constant(eye[j].reshape(theta.shape))))
            col, = dc.backward(gv, [theta])
            _tick(counter, "outer_bwd")
            H[:, j] = col.data.reshape(-1)
        H = (H + H.T) / 2.0
        try:
            sol = np.linalg.solve(H, v0.reshape(-1))
        except np.linalg.LinAlgError:
            sol = np.linalg.solve(H + HESSIAN_JITTER * np.eye(n), v0.reshape(-1))
        return sol.reshape(v0.shape), {"residual_norm": 0.0, "hvp_calls": n}

    # Neumann series: alpha * sum_{j=0..T} (I - alpha H)^j v0, running accumulation
    v = v0.copy()
    acc = v0.copy()
    for _ in range(cfg.steps):
        gv = dc.tsum(dc.mul(grad_theta, dc.constant(v)))
        hv, = dc.backward(gv, [theta])
        _tick(counter, "outer_bwd")
        with np.errstate(over="ignore", invalid="ignore"):
            v = v - cfg.alpha * hv.data
        if not np.all(np.isfinite(v)):
            raise HypergradError(
                f"Neumann iterate diverged (alpha={cfg.alpha}, T={cfg.steps})")
        acc = acc + v
    return cfg.alpha * acc, {"residual_norm": float(np.linalg.norm(v)),
                             "hvp_calls": cfg.steps}


def neumann_ihvp(train_loss_fn, theta: Tensor, v0, cfg: NeumannConfig,
                 counter=None) -> Tensor:
    """Approximate H^-1 v0 for the Hessian of ``train_loss_fn()`` at theta.

    The loss function is evaluated once to build a differentiable
    gradient; the series then runs T Hessian-vector products on top of
    it (the identity estimator skips all of that and returns v0).
    """
    v0 = np.asarray(v0, dtype=np.float64)
    if v0.shape != theta.shape:
        raise HypergradError(f"v0 shape {v0.shape} != theta shape {theta.shape}")
    if cfg.estimator == "darts_identity":
        return dc.constant(v0.copy())
    loss = train_loss_fn()
    g, = dc.backward(loss, [theta])
    sol, _ = _ihvp_from_grad(g, theta, v0, cfg, counter)
    return dc.constant(sol)


def implicit_hypergrad(build_train_loss, build_valid_loss, theta: Tensor,
                       hyper_tensors, cfg: NeumannConfig, counter=None):
    """Shared estimator core: hypergrad_i = - (d^2 L / d hyper d theta^T) H^-1 dLv/dtheta.

    ``build_*_loss`` are closures recording their losses against
    ``theta`` (and the hyper tensors) on the active graph.  Returns the
    per-tensor gradients (numpy) and diagnostics.
    """
    lv = build_valid_loss()
    v0_t, = dc.backward(lv, [theta])
    _tick(counter, "outer_bwd")
    v0 = v0_t.data.copy()

    lt = build_train_loss()
    g_t, = dc.backward(lt, [theta])
    _tick(counter, "outer_bwd")

    p, diag = _ihvp_from_grad(g_t, theta, v0, cfg, counter)
    gv = dc.tsum(dc.mul(g_t, dc.constant(p)))
    mixed = dc.backward(gv, list(hyper_tensors))
    _tick(counter, "outer_bwd")

    grads = [-m.data for m in mixed]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise HypergradError("non-finite hypergradient")
    diag = {**diag, "v0_norm": float(np.linalg.norm(v0)),
            "ihvp_norm": float(np.linalg.norm(p)),
            "train_loss": float(lt.data), "valid_loss": float(lv.data)}
    return grads, diag


def hypergrad_step(model, table, train_batch, valid_batch, cfg: NeumannConfig,
                   noise_seed=0, temperature=1.0, straight_through=False,
                   counter=None) -> HypergradEstimate:
    """One outer step: validation batch drives the gradient over the
    hyperparameter rows touched by the train batch."""
    x_train, idx = train_batch
    x_valid, y_valid = valid_batch
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) == 0 or len(y_valid) == 0:
        raise HypergradError("empty batch in hypergradient step")
    leaves = table.enabled_leaves()
    if not leaves:
        raise HypergradError("no enabled hyperparameter blocks to optimize")

    dc.new_graph()
    theta = model.param_tensor()

    def build_valid():
        logits = model.forward(theta, dc.constant(x_valid))
        _tick(counter, "outer_fwd")
        return valid_loss(logits, y_valid)

    def build_train():
        x_in = dc.constant(x_train)
        if table.flags.augment:
            x_in = augment_batch(x_in, table.aug, idx, temperature, noise_seed,
                                 straight_through=straight_through)
        logits = model.forward(theta, x_in)
        _tick(counter, "outer_fwd")
        return train_loss(logits, soft_labels(table, idx), weights(table, idx))

    grads, diag = implicit_hypergrad(build_train, build_valid, theta,
                                     [t for _, t in leaves], cfg, counter)
    return HypergradEstimate({name: g for (name, _), g in zip(leaves, grads)},
                             cfg.estimator, idx, diag)


# ---------------------------------------------------------------------------
# Fisher-information diagnostic

def _linear_features(model, images):
    if model.kind != "linear":
        raise HypergradError("fisher_check expects a linear task model")
    x = images.reshape(images.shape[0], -1)
    return np.hstack([x, np.ones((x.shape[0], 1))])  # bias as extra feature


def _softmax_np(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _scores(feats, labels, probs):
    # score of log p wrt theta laid out [W (F,C) row-major; b (C,)]
    resid = np.eye(probs.shape[1])[labels] - probs
    return np.einsum("nf,nc->nfc", feats, resid).reshape(feats.shape[0], -1)


def _nll_hessian(feats, probs):
    c = probs.shape[1]
    s = np.einsum("nc,nd->ncd", probs, probs)
    s[:, np.arange(c), np.arange(c)] -= probs
    s = -s  # diag(p) - p p^T per point
    blocks = np.einsum("nf,ng,ncd->nfcgd", feats, feats, s)
    n, f = feats.shape
    return blocks.reshape(n, f * c, f * c).mean(axis=0)


def fisher_check(model, data, sample_count, seed=0) -> dict:
    """Empirical check that the score covariance matches the mean curvature.

    Labels are resampled from the model's own conditional distribution,
    the model is refit to that sample, and the empirical Fisher matrix
    is compared against the mean Hessian of the negative log-likelihood
    (relative Frobenius discrepancy).  Also cross-checks closed-form
    scores/Hessian against the engine and compares the score-space form
    of the reweighting hypergradient with the direct computation.
    """
    if model.n_params > EXACT_MAX_PARAMS:
        raise HypergradError(
            f"fisher_check needs <= {EXACT_MAX_PARAMS} parameters, got {model.n_params}")
    rng = derive_rng(seed, 0xF15E)
    pick = rng.integers(0, len(data), size=sample_count)
    feats = _linear_features(model, data.images[pick])
    n_classes = model.n_classes

    # sample labels from the model's own conditional, then refit to the MLE
    theta0 = model.params.copy()
    w0 = theta0.reshape(feats.shape[1], n_classes)
    probs0 = _softmax_np(feats @ w0)
    u = rng.uniform(size=sample_count)
    labels = (probs0.cumsum(axis=1) > u[:, None]).argmax(axis=1)

    theta = theta0.copy()
    for _ in range(50):
        w = theta.reshape(feats.shape[1], n_classes)
        probs = _softmax_np(feats @ w)
        grad = -_scores(feats, labels, probs).mean(axis=0)
        H = _nll_hessian(feats, probs)
        step = np.linalg.solve(H + 1e-10 * np.eye(H.shape[0]), grad)
        theta = theta - step
        if np.linalg.norm(grad) < 1e-12:
            break
    w = theta.reshape(feats.shape[1], n_classes)
    probs = _softmax_np(feats @ w)
    scores = _scores(feats, labels, probs)
    mle_grad_norm = float(np.linalg.norm(scores.mean(axis=0)))

    fisher = (scores.T @ scores) / sample_count
    hessian = _nll_hessian(feats, probs)
    rel_frob = float(np.linalg.norm(fisher - hessian) / np.linalg.norm(hessian))

    engine = _engine_cross_checks(model, theta, feats, labels, probs, n_classes)
    eq_check = _reweighting_form_check(model, theta, feats, labels, probs, scores,
                                       fisher, n_classes, rng)

    return {"n_samples": int(sample_count),
            "rel_frobenius": rel_frob,
            "mle_grad_norm": mle_grad_norm,
            **engine, **eq_check}


def _model_nll(model, theta_t, images, labels):
    logits = model.forward(theta_t, dc.constant(images))
    return valid_loss(logits, labels)


def _engine_cross_checks(model, theta, feats, labels, probs, n_classes):
    """Engine per-point scores and hvp-assembled Hessian vs the closed forms."""
    n_check = min(10, feats.shape[0])
    images = feats[:n_check, :-1].reshape((n_check,) + model.input_shape)
    score_err = 0.0
    for i in range(n_check):
        dc.new_graph()
        tt = Tensor(theta.copy(), requires_grad=True)
        nll = _model_nll(model, tt, images[i:i + 1], labels[i:i + 1])
        g, = dc.backward(nll, [tt])
        closed = -_scores(feats[i:i + 1], labels[i:i + 1], probs[i:i + 1])[0]
        score_err = max(score_err, float(np.max(np.abs(g.data - closed))))

    n_sub = min(200, feats.shape[0])
    sub_imgs = feats[:n_sub, :-1].reshape((n_sub,) + model.input_shape)
    H_engine = np.empty((model.n_params, model.n_params))
    for j in range(model.n_params):
        dc.new_graph()
        tt = Tensor(theta.copy(), requires_grad=True)
        nll = _model_nll(model, tt, sub_imgs, labels[:n_sub])
        e = np.zeros(model.n_params)
        e[j] = 1.0
        H_engine[:, j] = dc.hvp(nll, tt, dc.constant(e)).data
    H_closed = _nll_hessian(feats[:n_sub], probs[:n_sub])
    hess_err = float(np.max(np.abs(H_engine - H_closed)))
    return {"score_engine_max_err": score_err, "hessian_engine_max_err": hess_err}


def _reweighting_form_check(model, theta, feats, labels, probs, scores, fisher,
                            n_classes, rng):
    """Score-space (kernel) form of the reweighting hypergradient vs the
    direct factored computation, with the Fisher matrix substituted for
    the curvature on both sides."""
    n_train = min(64, feats.shape[0] // 2)
    n_val = min(64, feats.shape[0] - n_train)
    tr, va = slice(0, n_train), slice(n_train, n_train + n_val)
    images_tr = feats[tr, :-1].reshape((n_train,) + model.input_shape)

    wprime = 1.44 * 0.5  # d/dlam of 1.44*softplus(lam) at lam = 0
    fisher_reg = fisher + 1e-10 * np.eye(fisher.shape[0])

    # direct route: engine mixed derivative with p = Fisher^-1 v0
    dc.new_graph()
    tt = Tensor(theta.copy(), requires_grad=True)
    lam = Tensor(np.zeros(n_train), requires_grad=True)
    logits = model.forward(tt, dc.constant(images_tr))
    p_hat = dc.softmax(logits, axis=1)
    logp = dc.log(dc.clamp(p_hat, 1e-12, 1.0))
    onehot = dc.constant(np.eye(n_classes)[labels[tr]])
    per_point = dc.neg(dc.tsum(dc.mul(onehot, logp), axis=1))
    w_t = dc.mul(dc.constant(1.44), dc.softplus(lam))
    loss_tr = dc.tmean(dc.mul(w_t, per_point))

    v0 = -scores[va].mean(axis=0)  # gradient of validation NLL wrt theta
    p_vec = np.linalg.solve(fisher_reg, v0)
    g_t, = dc.backward(loss_tr, [tt])
    gv = dc.tsum(dc.mul(g_t, dc.constant(p_vec)))
    mixed, = dc.backward(gv, [lam])
    direct = -mixed.data

    # kernel route: assembled from scores only
    ubar_v = scores[va].mean(axis=0)
    kernel = -(wprime / n_train) * (scores[tr] @ np.linalg.solve(fisher_reg, ubar_v))

    return {"eq_form_max_err": float(np.max(np.abs(direct - kernel)))}
