"""Self-contained oracle suite behind the ``check`` CLI subcommand.

Each check recomputes its expected values from an independent route
(finite differences, closed forms, brute-force counting) and reports
pass/fail with the observed discrepancy.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .augment import AugHypers, augment_batch
from .dataforge import DatasetView, DistortionSpec, apply_imbalance, \
    apply_label_noise, make_synthetic, stratified_split
from .diffcore import Tensor
from .hypergrad import NeumannConfig, fisher_check, hypergrad_step, \
    implicit_hypergrad, neumann_ihvp
from .hypermodel import HyperTable, SubmodelFlags, smooth_label_target, \
    soft_labels, weights
from .runner import PassCounter, RunConfig, run
from .seeding import derive_rng
from .taskmodel import TaskModel, train_loss, valid_loss


def _fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def _max_rel(a, b, floor=1e-3):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def check_gradients() -> dict:
    """First derivatives of engine ops and sub-model outputs vs central FD."""
    rng = derive_rng(0xC0FE)
    worst = 0.0

    def track(build, x0):
        nonlocal worst
        t = Tensor(x0, requires_grad=True)
        g, = dc.backward(build(t), [t])
        ref = _fd_grad(lambda a: float(build(Tensor(a)).data), x0)
        worst = max(worst, _max_rel(g.data, ref))

    x0 = rng.uniform(-2, 2, size=(3, 4))
    track(lambda t: dc.tsum(dc.sigmoid(t) * dc.constant(x0)), x0)
    track(lambda t: dc.tsum(dc.softplus(t) ** 2.0), x0)
    track(lambda t: dc.tsum(dc.softmax(t, axis=1) * dc.constant(x0)), x0)
    track(lambda t: dc.tsum(dc.exp(dc.sin(t)) + dc.cos(t)), x0)
    w0 = rng.uniform(-1, 1, size=(4, 2))
    track(lambda t: dc.tsum(dc.matmul(t, dc.constant(w0)) ** 2.0), x0)
    img = rng.uniform(0.2, 0.8, size=(2, 1, 6, 6))
    k0 = rng.uniform(-0.5, 0.5, size=(2, 1, 3, 3))
    track(lambda t: dc.tsum(dc.conv2d_3x3(dc.constant(img), t, None) ** 2.0), k0)

    # sub-model surfaces: weights, soft labels, losses, augmentation chain
    n, c = 5, 4
    table = HyperTable(np.arange(n), rng.integers(0, c, n), c,
                       SubmodelFlags.for_arm("aug_weights_soft"))
    idx = np.arange(n)
    logits0 = rng.normal(size=(n, c))

    def loss_of(lw, ls, lg):
        t2 = HyperTable(np.arange(n), table.hard_labels, c, table.flags)
        t2.lambda_w.data[...] = lw
        t2.lambda_s.data[...] = ls
        return float(train_loss(Tensor(lg), soft_labels(t2, idx),
                                weights(t2, idx)).data)

    lw0 = rng.normal(size=n)
    ls0 = rng.normal(size=(n, c))
    table.lambda_w.data[...] = lw0
    table.lambda_s.data[...] = ls0
    loss = train_loss(Tensor(logits0), soft_labels(table, idx), weights(table, idx))
    gw, gs = dc.backward(loss, [table.lambda_w, table.lambda_s])
    worst = max(worst, _max_rel(gw.data, _fd_grad(lambda a: loss_of(a, ls0, logits0), lw0)))
    worst = max(worst, _max_rel(gs.data, _fd_grad(lambda a: loss_of(lw0, a, logits0), ls0)))

    lgt = Tensor(logits0, requires_grad=True)
    vl = valid_loss(lgt, table.hard_labels)
    gv, = dc.backward(vl, [lgt])
    worst = max(worst, _max_rel(
        gv.data, _fd_grad(lambda a: float(valid_loss(Tensor(a), table.hard_labels).data),
                          logits0)))

    x_img = rng.uniform(0.2, 0.8, size=(2, 1, 8, 8))
    hyp = AugHypers(n_points=2)
    lm0 = rng.uniform(-0.5, 0.5, size=(2, 6))
    hyp.lambda_m = Tensor(lm0.copy(), requires_grad=True)

    def aug_loss(lm):
        h2 = AugHypers(n_points=2)
        h2.lambda_m = Tensor(lm)
        out = augment_batch(Tensor(x_img), h2, [0, 1], 1.0, noise_seed=3)
        return float(dc.tsum(out * out).data)

    out = augment_batch(Tensor(x_img), hyp, [0, 1], 1.0, noise_seed=3)
    gm, = dc.backward(dc.tsum(out * out), [hyp.lambda_m])
    aug_err = _max_rel(gm.data, _fd_grad(aug_loss, lm0, h=1e-6))
    passed = worst < 1e-4 and aug_err < 1e-3
    return {"name": "gradient_fd", "passed": bool(passed),
            "max_rel_err": worst, "augment_chain_rel_err": aug_err}


def check_second_order() -> dict:
    """hvp and the mixed derivative vs explicitly assembled matrices."""
    rng = derive_rng(0x2ED)
    n, d = 8, 3
    X = rng.uniform(-1.5, 1.5, size=(n, d))
    y = (rng.uniform(size=n) > 0.5).astype(float)
    th0 = rng.uniform(-0.5, 0.5, size=d)
    lam0 = rng.uniform(0.5, 1.5, size=n)

    def wls(theta_t, lam_t):
        r = dc.reshape(dc.constant(X) @ dc.reshape(theta_t, (d, 1)), (n,)) - dc.constant(y)
        return 0.5 * dc.tsum(lam_t * r * r)

    H_true = X.T @ (lam0[:, None] * X)
    th = Tensor(th0, requires_grad=True)
    lam = Tensor(lam0, requires_grad=True)
    H_hvp = np.column_stack([
        dc.hvp(wls(tt := Tensor(th0, requires_grad=True), Tensor(lam0)), tt,
               dc.constant(e)).data
        for e in np.eye(d)])
    hvp_err = float(np.max(np.abs(H_hvp - H_true)))

    v = rng.normal(size=d)
    mix = dc.mixed_grad(wls(th, lam), th, lam, dc.constant(v))
    resid = X @ th0 - y
    mix_true = (X * resid[:, None]) @ v
    mix_err = float(np.max(np.abs(mix.data - mix_true)))
    return {"name": "second_order", "passed": bool(hvp_err < 1e-8 and mix_err < 1e-8),
            "hvp_err": hvp_err, "mixed_err": mix_err}


def check_neumann() -> dict:
    """Scalar worked example and geometric convergence on an SPD system."""
    th = Tensor(1.0, requires_grad=True)
    scalar = neumann_ihvp(lambda: th * th, th, np.array(1.0),
                          NeumannConfig(steps=5, alpha=0.25)).data
    scalar_ok = float(scalar) == 0.4921875

    rng = derive_rng(0x5BD)
    q, _ = np.linalg.qr(rng.normal(size=(10, 10)))
    eig = np.linspace(1.0, 10.0, 10)
    H = q @ np.diag(eig) @ q.T
    v0 = rng.normal(size=10)
    exact = np.linalg.solve(H, v0)
    errs = []
    for t in (0, 50, 100, 200):
        thv = Tensor(np.zeros(10), requires_grad=True)

        def loss_fn():
            r = dc.reshape(thv, (1, 10))
            return 0.5 * dc.tsum(dc.matmul(dc.matmul(r, dc.constant(H)),
                                           dc.transpose(r, (1, 0))))

        approx = neumann_ihvp(loss_fn, thv, v0,
                              NeumannConfig(steps=t, alpha=1.0 / eig.max())).data
        errs.append(float(np.linalg.norm(approx - exact)))
    decays = all(b < 0.5 * a for a, b in zip(errs, errs[1:]))
    return {"name": "neumann_convergence",
            "passed": bool(scalar_ok and decays and errs[-1] < 1e-6),
            "scalar_example": float(scalar), "errors_by_T": errs}


def check_ridge_bilevel() -> dict:
    """Weighted ridge with closed-form inner solution: estimator vs analytic."""
    rng = derive_rng(0x41D6E)
    n, d, m, gamma = 24, 4, 40, 2.0
    X = rng.normal(size=(n, d)) * 0.7
    y = rng.normal(size=n)
    Xv = rng.normal(size=(m, d)) * 0.7
    yv = rng.normal(size=m)
    lam0 = rng.uniform(0.5, 1.5, size=n)

    def theta_star(lam):
        H = X.T @ (lam[:, None] * X) + gamma * np.eye(d)
        return np.linalg.solve(H, X.T @ (lam * y))

    def valid_np(theta):
        r = Xv @ theta - yv
        return 0.5 * float(r @ r) / m

    theta0 = theta_star(lam0)
    H = X.T @ (lam0[:, None] * X) + gamma * np.eye(d)
    v0 = Xv.T @ (Xv @ theta0 - yv) / m
    hinv_v = np.linalg.solve(H, v0)
    resid = X @ theta0 - y
    analytic = np.array([-(hinv_v @ X[i]) * resid[i] for i in range(n)])
    fd = np.zeros(n)
    for i in range(n):
        lp, lm = lam0.copy(), lam0.copy()
        lp[i] += 1e-4
        lm[i] -= 1e-4
        fd[i] = (valid_np(theta_star(lp)) - valid_np(theta_star(lm))) / 2e-4

    def engine(cfg):
        dc.new_graph()
        theta = Tensor(theta0, requires_grad=True)
        lam = Tensor(lam0.copy(), requires_grad=True)

        def build_train():
            r = dc.reshape(dc.constant(X) @ dc.reshape(theta, (d, 1)), (n,)) - dc.constant(y)
            return 0.5 * dc.tsum(lam * r * r) + 0.5 * gamma * dc.tsum(theta * theta)

        def build_valid():
            rv = dc.reshape(dc.constant(Xv) @ dc.reshape(theta, (d, 1)), (m,)) - dc.constant(yv)
            return 0.5 * dc.tmean(rv * rv)

        grads, _ = implicit_hypergrad(build_train, build_valid, theta, [lam], cfg)
        return grads[0]

    exact_err = float(np.max(np.abs(engine(NeumannConfig(estimator="exact_inverse"))
                                    - analytic)))
    eig = np.linalg.eigvalsh(H)
    neum_err = float(np.max(np.abs(
        engine(NeumannConfig(steps=50, alpha=1.0 / eig.max())) - analytic)))
    fd_err = float(np.max(np.abs(fd - analytic)))
    return {"name": "ridge_bilevel",
            "passed": bool(exact_err < 1e-8 and neum_err < 1e-4 and fd_err < 1e-4),
            "exact_vs_analytic": exact_err, "neumann_t50_vs_analytic": neum_err,
            "retrain_fd_vs_analytic": fd_err}


def check_estimator_equivalence() -> dict:
    """Identity estimator == Neumann with the inverse forced to identity."""
    rng = derive_rng(0xDA27)
    n, c = 10, 4
    images = rng.uniform(0.1, 0.9, size=(n, 1, 4, 4))
    labels = rng.integers(0, c, size=n)
    model = TaskModel("linear", (1, 4, 4), c, seed=3)
    model.params[:] = rng.normal(0, 0.3, size=model.n_params)
    table = HyperTable(np.arange(n), labels, c, SubmodelFlags.for_arm("aug_weights_soft"))
    xv = rng.uniform(0.1, 0.9, size=(6, 1, 4, 4))
    yv = rng.integers(0, c, size=6)
    idx = np.arange(6)
    darts = hypergrad_step(model, table, (images[idx], idx), (xv, yv),
                           NeumannConfig(steps=5, alpha=0.3, estimator="darts_identity"),
                           noise_seed=1)
    forced = hypergrad_step(model, table, (images[idx], idx), (xv, yv),
                            NeumannConfig(steps=0, alpha=1.0, estimator="ift_neumann"),
                            noise_seed=1)
    equal = all(np.array_equal(darts.grads[k], forced.grads[k]) for k in darts.grads)
    return {"name": "estimator_equivalence", "passed": bool(equal)}


def check_fisher() -> dict:
    """Empirical Fisher vs mean curvature on a model-consistent sample."""
    rng = derive_rng(0xF15)
    images = rng.uniform(0, 1, size=(4000, 1, 1, 2))
    data = DatasetView(images, np.zeros(4000, dtype=int), 2)
    model = TaskModel("linear", (1, 1, 2), 2, seed=21)
    model.params[:] = rng.normal(0, 0.5, size=model.n_params)
    report = fisher_check(model, data, sample_count=50_000, seed=5)
    passed = (report["rel_frobenius"] < 0.05 and report["eq_form_max_err"] < 1e-6
              and report["score_engine_max_err"] < 1e-10)
    return {"name": "fisher_diagnostic", "passed": bool(passed), **report}


def check_soft_label_init() -> dict:
    worst = 0.0
    for c in (2, 10, 100):
        for alpha in (0.05, 0.1, 0.2):
            labels = np.arange(6) % c
            table = HyperTable(np.arange(6), labels, c,
                               SubmodelFlags.for_arm("aug_weights_soft"), alpha=alpha)
            got = soft_labels(table, np.arange(6)).data
            worst = max(worst, float(np.max(np.abs(
                got - smooth_label_target(labels, c, alpha)))))
    return {"name": "soft_label_init", "passed": bool(worst < 1e-9),
            "max_abs_err": worst}


def check_pass_ratio() -> dict:
    """Tiny runs: total/inner pass ratio 3.5 for T=5, 2.25 for the identity arm."""
    base = dict(n_per_class=8, n_classes=4, image_size=8, test_n_per_class=4,
                epochs=4, ho_start_epoch=2, batch_size=16, model_kind="linear",
                arm="aug_weights_soft", model_seed=1, data_seed=2, noise_seed=3)
    ift = run(RunConfig(neumann_steps=5, **base))
    darts = run(RunConfig(estimator="darts_identity", **base))
    return {"name": "pass_ratio",
            "passed": bool(ift.counter.ratio() == 3.5 and darts.counter.ratio() == 2.25),
            "ift_ratio": ift.counter.ratio(), "darts_ratio": darts.counter.ratio()}


def check_distortion_counts() -> dict:
    rng = derive_rng(0xD15)
    images = rng.uniform(0, 1, size=(1000, 1, 8, 8))
    labels = np.repeat([0, 1], 500)
    view = DatasetView(images, labels, 2)
    imb = apply_imbalance(view, DistortionSpec(ir=10, seed=5))
    counts_ok = imb.class_counts().tolist() == [500, 50]

    images2 = rng.uniform(0, 1, size=(550, 1, 8, 8))
    labels2 = np.tile(np.arange(10), 55)
    view2 = DatasetView(images2, labels2, 10)
    noisy = apply_label_noise(view2, DistortionSpec(nr=0.1, seed=6))
    noise_ok = int(np.sum(noisy.labels != view2.labels)) == 55

    pool = make_synthetic(50, 4, 8, seed=9)
    t1, v1 = stratified_split(pool, 0.2, fold_seed=3)
    t2, v2 = stratified_split(pool, 0.2, fold_seed=3)
    split_ok = (np.array_equal(v1.global_index, v2.global_index)
                and v1.class_counts().tolist() == [10, 10, 10, 10])
    return {"name": "distortion_exactness",
            "passed": bool(counts_ok and noise_ok and split_ok),
            "imbalance_ok": counts_ok, "noise_ok": noise_ok, "split_ok": split_ok}


ALL_CHECKS = (check_gradients, check_second_order, check_neumann, check_ridge_bilevel,
              check_estimator_equivalence, check_fisher, check_soft_label_init,
              check_pass_ratio, check_distortion_counts)


def run_all_checks():
    return [fn() for fn in ALL_CHECKS]
