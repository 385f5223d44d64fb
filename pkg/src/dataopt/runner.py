"""End-to-end training: inner SGD over the task model, gated outer loop
updating the hyperparameter table, ablation arms, metrics, and the
forward/backward pass accounting."""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import diffcore as dc
from .augment import AugOpSpec, augment_batch, default_ops
from .dataforge import DatasetView, DistortionSpec, distort, load_container, \
    make_synthetic, stratified_split
from .diffcore import Tensor
from .hypergrad import NeumannConfig, hypergrad_step
from .hypermodel import HyperTable, SubmodelFlags, save_summary, save_table, \
    soft_labels, weights
from .seeding import derive_rng, derive_seed
from .taskmodel import TaskModel, train_loss, valid_loss

ARMS = ("baseline", "aug_shared", "aug", "aug_weights", "aug_weights_soft")


class RunnerError(Exception):
    pass


@dataclass
class RunConfig:
    """Every knob of a run; all randomness comes from the three seeds."""

    # data
    dataset: str = "synthetic"
    n_per_class: int = 250
    n_classes: int = 10
    image_size: int = 16
    test_n_per_class: int = 100
    valid_fraction: float = 0.2
    fold_seed: int = 0
    ir: int = 1
    nr: float = 0.0
    # model
    model_kind: str = "tinycnn"
    hidden: tuple = (32,)
    channels: tuple = (8, 16)
    # inner optimization
    epochs: int = 60
    ho_start_epoch: int | None = None   # defaults to epochs // 2
    batch_size: int = 128
    inner_lr: float = 0.05
    inner_momentum: float = 0.9
    # outer optimization
    hyper_lr: float = 0.01
    hyper_beta1: float = 0.9
    hyper_beta2: float = 0.999
    neumann_steps: int = 5
    neumann_alpha: float | None = None  # defaults to the inner learning rate
    estimator: str = "ift_neumann"
    # sub-models
    arm: str = "aug_weights_soft"
    alpha_smooth: float = 0.1
    temperature: float = 1.0
    straight_through: bool = False
    m_norm: float = 10.0
    aug_ops: tuple | None = None        # ((kind, mu, rng), ...) or None for defaults
    # protocol variants
    ho_source: str = "valid"            # "valid" | "test"
    train_on_all: bool = False
    # seeds
    model_seed: int = 0
    data_seed: int = 0
    noise_seed: int = 0
    # output
    out_dir: str | None = None

    def __post_init__(self):
        if self.ho_start_epoch is None:
            self.ho_start_epoch = self.epochs // 2
        if not (0 <= self.ho_start_epoch <= self.epochs):
            raise RunnerError(
                f"ho_start_epoch must be in [0, {self.epochs}], got {self.ho_start_epoch}")
        if self.arm not in ARMS:
            raise RunnerError(f"unknown arm {self.arm!r}")
        if self.ho_source not in ("valid", "test"):
            raise RunnerError(f"ho_source must be valid|test, got {self.ho_source!r}")

    @property
    def neumann(self) -> NeumannConfig:
        alpha = self.inner_lr if self.neumann_alpha is None else self.neumann_alpha
        return NeumannConfig(steps=self.neumann_steps, alpha=alpha,
                             estimator=self.estimator)

    def ops(self):
        if self.aug_ops is None:
            return default_ops()
        return [AugOpSpec(k, float(mu), float(rng)) for k, mu, rng in self.aug_ops]


@dataclass
class PassCounter:
    """Exact counts of forward/backward sweeps through the task model."""

    inner_fwd: int = 0
    inner_bwd: int = 0
    outer_fwd: int = 0
    outer_bwd: int = 0

    def tick(self, name):
        setattr(self, name, getattr(self, name) + 1)

    @property
    def inner(self):
        return self.inner_fwd + self.inner_bwd

    @property
    def outer(self):
        return self.outer_fwd + self.outer_bwd

    def ratio(self):
        """Total passes relative to inner-only training."""
        return (self.inner + self.outer) / self.inner


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    test_error: float
    per_class_acc: list
    inner_passes: int
    outer_passes: int
    wall_time_s: float

    def to_json(self):
        d = asdict(self)
        d["per_class_acc"] = [round(float(a), 6) for a in d["per_class_acc"]]
        return json.dumps(d, sort_keys=True)


class SGDMomentum:
    def __init__(self, n, lr, momentum):
        self.velocity = np.zeros(n)
        self.lr = lr
        self.momentum = momentum

    def step(self, params, grad):
        self.velocity = self.momentum * self.velocity + grad
        params -= self.lr * self.velocity


class RowAdam:
    """Adam over table rows; only rows touched by a batch move, so rows
    never sampled keep their initialization exactly."""

    def __init__(self, shape, lr, beta1, beta2, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = np.zeros(shape[0] if len(shape) else 1, dtype=np.int64)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps

    def step(self, params, grad, rows):
        rows = np.unique(np.asarray(rows, dtype=np.int64))
        g = grad[rows]
        self.t[rows] += 1
        self.m[rows] = self.b1 * self.m[rows] + (1 - self.b1) * g
        self.v[rows] = self.b2 * self.v[rows] + (1 - self.b2) * g * g
        t = self.t[rows]
        mhat = self.m[rows] / (1 - self.b1 ** t).reshape((-1,) + (1,) * (g.ndim - 1))
        vhat = self.v[rows] / (1 - self.b2 ** t).reshape((-1,) + (1,) * (g.ndim - 1))
        params[rows] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# data preparation

def prepare_data(cfg: RunConfig):
    """(train, valid, test) views per the split-then-distort protocol."""
    if cfg.dataset == "synthetic":
        pool = make_synthetic(cfg.n_per_class, cfg.n_classes, cfg.image_size,
                              seed=cfg.data_seed)
        test = make_synthetic(cfg.test_n_per_class, cfg.n_classes, cfg.image_size,
                              seed=derive_seed(cfg.data_seed, 0x7E57))
    else:
        pool = load_container(cfg.dataset)
        test_path = cfg.dataset + ".test"
        test = load_container(test_path) if os.path.exists(test_path) else None
    train_clean, valid = stratified_split(pool, cfg.valid_fraction, cfg.fold_seed)
    spec = DistortionSpec(ir=cfg.ir, nr=cfg.nr,
                          seed=derive_seed(cfg.data_seed, cfg.fold_seed, 0xD157))
    train = distort(train_clean, spec)
    return train, valid, test


def concat_views(a: DatasetView, b: DatasetView) -> DatasetView:
    if a.n_classes != b.n_classes:
        raise RunnerError("cannot concatenate views with different class counts")
    overlap = np.intersect1d(a.global_index, b.global_index)
    if overlap.size:
        raise RunnerError("cannot concatenate views with overlapping identities")
    return DatasetView(np.concatenate([a.images, b.images]),
                       np.concatenate([a.labels, b.labels]), a.n_classes,
                       np.concatenate([a.global_index, b.global_index]),
                       {"source": "union", "parts": [a.lineage, b.lineage]})


# ---------------------------------------------------------------------------
# evaluation

def evaluate(model: TaskModel, test: DatasetView, batch=512):
    """Top-1 error rate, confusion matrix (rows = true class), per-class accuracy."""
    c = test.n_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    for start in range(0, len(test), batch):
        xb = test.images[start:start + batch]
        pred = model.predict(xb)
        true = test.labels[start:start + batch]
        np.add.at(confusion, (true, pred), 1)
    row_sums = confusion.sum(axis=1)
    per_class = np.divide(np.diag(confusion), row_sums,
                          out=np.zeros(c), where=row_sums > 0)
    error_rate = 1.0 - np.trace(confusion) / max(1, len(test))
    return float(error_rate), confusion, per_class


# ---------------------------------------------------------------------------
# the main loop

@dataclass
class RunResult:
    config: RunConfig
    history: list
    model: TaskModel
    table: HyperTable
    counter: PassCounter
    confusion: np.ndarray
    per_class_acc: np.ndarray
    lineage: dict = field(default_factory=dict)

    @property
    def final_error(self):
        return self.history[-1].test_error

    def interclass_std(self):
        return float(np.std(self.per_class_acc))


def run(cfg: RunConfig, data=None) -> RunResult:
    """Execute the bilevel loop: per epoch one inner sweep over all
    batches, and past the gate epoch a second sweep computing
    hypergradients and updating the table."""
    train, valid, test = data if data is not None else prepare_data(cfg)
    if cfg.train_on_all:
        train = concat_views(train, valid)
    ho_pool = valid if cfg.ho_source == "valid" else test
    if ho_pool is None:
        raise RunnerError("hyperparameter optimization source dataset is missing")

    flags = SubmodelFlags.for_arm(cfg.arm)
    model = TaskModel(cfg.model_kind, train.image_shape, train.n_classes,
                      hidden=tuple(cfg.hidden), channels=tuple(cfg.channels),
                      seed=cfg.model_seed)
    table = HyperTable(train.global_index, train.labels, train.n_classes, flags,
                       ops=cfg.ops(), alpha=cfg.alpha_smooth, m_norm=cfg.m_norm)

    inner_opt = SGDMomentum(model.n_params, cfg.inner_lr, cfg.inner_momentum)
    hyper_opts = {name: RowAdam(leaf.data.shape, cfg.hyper_lr, cfg.hyper_beta1,
                                cfg.hyper_beta2)
                  for name, leaf in table.enabled_leaves()}

    counter = PassCounter()
    history = []
    n = len(train)
    out_dir = cfg.out_dir
    metrics_file = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_file = open(os.path.join(out_dir, "metrics.jsonl"), "w")

    t0 = time.monotonic()
    try:
        for epoch in range(1, cfg.epochs + 1):
            epoch_loss = _inner_epoch(cfg, model, table, train, inner_opt, counter,
                                      epoch)
            if epoch > cfg.ho_start_epoch and hyper_opts:
                _outer_epoch(cfg, model, table, train, ho_pool, hyper_opts, counter,
                             epoch)
            record = _epoch_metrics(cfg, model, valid, test, counter, epoch,
                                    epoch_loss, time.monotonic() - t0)
            history.append(record)
            if metrics_file:
                metrics_file.write(record.to_json() + "\n")
                metrics_file.flush()
    finally:
        if metrics_file:
            metrics_file.close()

    if test is not None:
        _, confusion, per_class = evaluate(model, test)
    else:
        confusion, per_class = np.zeros((0, 0), dtype=np.int64), np.zeros(0)
    result = RunResult(cfg, history, model, table, counter, confusion, per_class,
                       lineage=train.lineage)
    if out_dir:
        _write_outputs(result, out_dir)
    return result


def _inner_epoch(cfg, model, table, train, inner_opt, counter, epoch):
    n = len(train)
    order = derive_rng(cfg.noise_seed, 0x0EDE, epoch).permutation(n)
    total, seen = 0.0, 0
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        dc.new_graph()
        theta = model.param_tensor()
        x_in = dc.constant(train.images[idx])
        if table.flags.augment:
            seed = derive_seed(cfg.noise_seed, 0xA06, epoch, start)
            x_in = augment_batch(x_in, table.aug, idx, cfg.temperature, seed,
                                 straight_through=cfg.straight_through)
        logits = model.forward(theta, x_in)
        counter.tick("inner_fwd")
        loss = train_loss(logits, soft_labels(table, idx), weights(table, idx))
        if not np.isfinite(loss.data):
            raise RunnerError(f"non-finite train loss at epoch {epoch}")
        g, = dc.backward(loss, [theta])
        counter.tick("inner_bwd")
        inner_opt.step(model.params, g.data)
        total += float(loss.data) * len(idx)
        seen += len(idx)
    return total / max(1, seen)


def _outer_epoch(cfg, model, table, train, ho_pool, hyper_opts, counter, epoch):
    n = len(train)
    order = derive_rng(cfg.noise_seed, 0x40DE, epoch).permutation(n)
    vrng = derive_rng(cfg.noise_seed, 0x7ADE, epoch)
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        vidx = vrng.choice(len(ho_pool), size=min(cfg.batch_size, len(ho_pool)),
                           replace=False)
        seed = derive_seed(cfg.noise_seed, 0xB07, epoch, start)
        est = hypergrad_step(
            model, table, (train.images[idx], idx),
            (ho_pool.images[vidx], ho_pool.labels[vidx]),
            cfg.neumann, noise_seed=seed, temperature=cfg.temperature,
            straight_through=cfg.straight_through, counter=counter)
        for name, leaf in table.enabled_leaves():
            grad = est.grads[name]
            rows = np.zeros(1, dtype=np.int64) if grad.shape[0] == 1 else idx
            hyper_opts[name].step(leaf.data, grad, rows)


def _epoch_metrics(cfg, model, valid, test, counter, epoch, epoch_loss, elapsed):
    vl = _plain_loss(model, valid) if valid is not None else float("nan")
    if test is not None:
        test_error, _, per_class = evaluate(model, test)
    else:
        test_error, per_class = float("nan"), np.zeros(0)
    return MetricsRecord(epoch=epoch, train_loss=round(epoch_loss, 10),
                         valid_loss=round(vl, 10), test_error=round(test_error, 10),
                         per_class_acc=list(per_class),
                         inner_passes=counter.inner, outer_passes=counter.outer,
                         wall_time_s=elapsed)


def _plain_loss(model, view, batch=512):
    total = 0.0
    for start in range(0, len(view), batch):
        xb = view.images[start:start + batch]
        logits = model.forward(Tensor(model.params), Tensor(xb))
        total += float(valid_loss(logits, view.labels[start:start + batch]).data) * len(xb)
    return total / max(1, len(view))


def _write_outputs(result: RunResult, out_dir):
    model_path = os.path.join(out_dir, "model.ckpt")
    result.model.save(model_path)
    save_table(result.table, os.path.join(out_dir, "hypertable.htb"))
    save_summary(result.table, os.path.join(out_dir, "hypertable_summary.json"))
    with open(os.path.join(out_dir, "confusion.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        for row in result.confusion:
            writer.writerow([int(x) for x in row])
    summary = {
        "arm": result.config.arm,
        "fold_seed": result.config.fold_seed,
        "final_test_error": result.final_error,
        "per_class_acc": [float(a) for a in result.per_class_acc],
        "interclass_std": result.interclass_std(),
        "pass_counters": asdict(result.counter),
        "pass_ratio": result.counter.ratio(),
        "epochs": result.config.epochs,
        "ho_start_epoch": result.config.ho_start_epoch,
        "estimator": result.config.estimator,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# experiment suites

def _suite_worker(job):
    label, cfg = job
    result = run(cfg)
    return {"arm": label, "fold_seed": cfg.fold_seed,
            "error": result.final_error,
            "per_class_acc": [float(a) for a in result.per_class_acc],
            "interclass_std": result.interclass_std(),
            "pass_ratio": result.counter.ratio(),
            "lineage": result.lineage}


def run_ablation_suite(base: RunConfig, arms, folds=4, workers=None):
    """Run each arm over the same folds (shared data/model seeds) and
    aggregate mean/std test error per arm."""
    for arm in arms:
        if arm not in ARMS and arm != "darts":
            raise RunnerError(f"unknown arm {arm!r}")
    jobs = []
    for arm in arms:
        for fold in range(folds):
            sub_out = None
            if base.out_dir:
                sub_out = os.path.join(base.out_dir, f"{arm}_fold{fold}")
            if arm == "darts":
                cfg = replace(base, arm="aug_weights_soft", estimator="darts_identity",
                              fold_seed=fold, out_dir=sub_out)
            else:
                cfg = replace(base, arm=arm, fold_seed=fold, out_dir=sub_out)
            jobs.append((arm, cfg))

    if workers is None:
        workers = min(len(jobs), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_suite_worker, jobs))
    else:
        rows = [_suite_worker(j) for j in jobs]

    _check_lineage_consistency(rows)
    table = {}
    for arm in arms:
        errs = [r["error"] for r in rows if r["arm"] == arm]
        stds = [r["interclass_std"] for r in rows if r["arm"] == arm]
        table[arm] = {"errors": errs, "mean": float(np.mean(errs)),
                      "std": float(np.std(errs)),
                      "interclass_std_mean": float(np.mean(stds))}
    return {"arms": table, "rows": rows}


def _check_lineage_consistency(rows):
    by_fold = {}
    for r in rows:
        key = r["fold_seed"]
        lineage = json.dumps(r["lineage"], sort_keys=True)
        if key in by_fold and by_fold[key] != lineage:
            raise RunnerError(f"inconsistent dataset lineage across arms for fold {key}")
        by_fold[key] = lineage


def swap_valid_for_test(cfg: RunConfig):
    """Run with hyperparameters estimated on the validation split and, as
    the overfitting probe, on the test set; report the error gap."""
    on_valid = run(replace(cfg, ho_source="valid"))
    on_test = run(replace(cfg, ho_source="test"))
    return {
        "error_ho_on_valid": on_valid.final_error,
        "error_ho_on_test": on_test.final_error,
        "gap": on_valid.final_error - on_test.final_error,
    }
