"""The per-point hyperparameter table: augmentation block, loss weights,
and soft-label logits, with the smooth-label initialization."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .augment import AugHypers, default_ops
from .diffcore import Tensor

WEIGHT_SCALE = 1.44
WEIGHT_INIT = WEIGHT_SCALE * math.log(2.0)  # softplus(0) scaled; weights start at ~1
TABLE_MAGIC = b"HTB1"


class HyperModelError(Exception):
    pass


@dataclass(frozen=True)
class SubmodelFlags:
    """Which hyperparameter blocks are live (the ablation arms)."""

    augment: bool = True
    augment_shared: bool = False
    weights: bool = True
    soft_labels: bool = True

    @classmethod
    def for_arm(cls, arm: str) -> "SubmodelFlags":
        table = {
            "baseline": cls(False, False, False, False),
            "aug_shared": cls(True, True, False, False),
            "aug": cls(True, False, False, False),
            "aug_weights": cls(True, False, True, False),
            "aug_weights_soft": cls(True, False, True, True),
        }
        if arm not in table:
            raise HyperModelError(f"unknown ablation arm {arm!r} (choose from {sorted(table)})")
        return table[arm]


class HyperTable:
    """One hyperparameter row per train record, addressed by global index.

    Blocks: augmentation magnitudes+gates [N,2A], loss weight [N], and
    soft-label logits [N,C].  Disabled blocks stay frozen at values that
    make them exact no-ops.
    """

    def __init__(self, global_index, hard_labels, n_classes, flags: SubmodelFlags,
                 ops=None, alpha=0.1, m_norm=10.0):
        self.global_index = np.asarray(global_index, dtype=np.int64)
        self.hard_labels = np.asarray(hard_labels, dtype=np.int64)
        n = len(self.global_index)
        if self.hard_labels.shape != (n,):
            raise HyperModelError("hard label count does not match table size")
        self.n_points = n
        self.n_classes = n_classes
        self.flags = flags
        self.alpha = alpha
        self.aug = AugHypers(n, ops=ops or default_ops(),
                             shared=flags.augment_shared, m_norm=m_norm)
        self.lambda_w = Tensor(np.zeros(n), requires_grad=True)
        self.lambda_s = Tensor(np.zeros((n, n_classes)), requires_grad=True)
        init_soft_labels(self, self.hard_labels, alpha)

    @property
    def n_ops(self):
        return self.aug.n_ops

    def enabled_leaves(self):
        """(name, tensor) pairs for the blocks the current arm trains."""
        leaves = []
        if self.flags.augment:
            leaves.append(("lambda_m", self.aug.lambda_m))
            leaves.append(("lambda_b", self.aug.lambda_b))
        if self.flags.weights:
            leaves.append(("lambda_w", self.lambda_w))
        if self.flags.soft_labels:
            leaves.append(("lambda_s", self.lambda_s))
        return leaves

    def snapshot(self):
        return {
            "lambda_m": self.aug.lambda_m.data.copy(),
            "lambda_b": self.aug.lambda_b.data.copy(),
            "lambda_w": self.lambda_w.data.copy(),
            "lambda_s": self.lambda_s.data.copy(),
        }


def weights(table: HyperTable, indices) -> Tensor:
    """Per-point loss weights 1.44*softplus(lambda_w); constant when disabled."""
    indices = np.asarray(indices, dtype=np.int64)
    if not table.flags.weights:
        return dc.constant(np.full(len(indices), WEIGHT_INIT))
    lam = dc.gather_rows(table.lambda_w, indices)
    return dc.mul(dc.constant(WEIGHT_SCALE), dc.softplus(lam))


def soft_labels(table: HyperTable, indices) -> Tensor:
    """Per-point label distributions softmax(lambda_s); hard labels when disabled."""
    indices = np.asarray(indices, dtype=np.int64)
    if not table.flags.soft_labels:
        onehot = np.eye(table.n_classes)[table.hard_labels[indices]]
        return dc.constant(onehot)
    lam = dc.gather_rows(table.lambda_s, indices)
    return dc.softmax(lam, axis=1)


def soft_label_init_gap(n_classes: int, alpha: float) -> float:
    """Logit gap so that softmax reproduces the smooth-label target exactly.

    Solving softmax(lam) = (1-alpha)*onehot + alpha/C for a two-level
    logit vector gives gap log(1 - C + C/alpha).
    """
    arg = 1.0 - n_classes + n_classes / alpha
    if arg <= 0:
        raise HyperModelError(
            f"alpha={alpha} too large for C={n_classes}: needs alpha < C/(C-1)")
    return math.log(arg)


def init_soft_labels(table: HyperTable, labels, alpha: float):
    """Set lambda_s so the soft labels start at (1-alpha)*y + alpha/C."""
    if not (0.0 < alpha < 1.0):
        raise HyperModelError(f"alpha must be in (0,1), got {alpha}")
    labels = np.asarray(labels, dtype=np.int64)
    gap = soft_label_init_gap(table.n_classes, alpha)
    onehot = np.eye(table.n_classes)[labels]
    table.lambda_s.data[...] = (onehot - 0.5) * gap
    table.alpha = alpha


def smooth_label_target(labels, n_classes, alpha):
    onehot = np.eye(n_classes)[np.asarray(labels, dtype=np.int64)]
    return (1.0 - alpha) * onehot + alpha / n_classes


# ---------------------------------------------------------------------------
# checkpoint and summary

def save_table(table: HyperTable, path):
    """Binary checkpoint keyed by global index, holding all four blocks."""
    path = str(path)
    n, a, c = table.n_points, table.n_ops, table.n_classes
    rows_aug = table.aug.lambda_m.data.shape[0]
    flag_bits = (table.flags.augment | (table.flags.augment_shared << 1)
                 | (table.flags.weights << 2) | (table.flags.soft_labels << 3))
    with open(path, "wb") as f:
        f.write(TABLE_MAGIC)
        f.write(struct.pack("<5I", n, a, c, rows_aug, flag_bits))
        f.write(struct.pack("<d", table.alpha))
        f.write(table.global_index.astype("<u4").tobytes())
        f.write(table.hard_labels.astype("<u2").tobytes())
        f.write(table.aug.lambda_m.data.astype("<f8").tobytes())
        f.write(table.aug.lambda_b.data.astype("<f8").tobytes())
        f.write(table.lambda_w.data.astype("<f8").tobytes())
        f.write(table.lambda_s.data.astype("<f8").tobytes())


def load_table(path, ops=None) -> HyperTable:
    path = str(path)
    with open(path, "rb") as f:
        if f.read(4) != TABLE_MAGIC:
            raise HyperModelError("bad hypertable magic")
        n, a, c, rows_aug, flag_bits = struct.unpack("<5I", f.read(20))
        alpha = struct.unpack("<d", f.read(8))[0]
        gidx = np.frombuffer(f.read(n * 4), dtype="<u4").astype(np.int64)
        labels = np.frombuffer(f.read(n * 2), dtype="<u2").astype(np.int64)
        lm = np.frombuffer(f.read(rows_aug * a * 8), dtype="<f8").reshape(rows_aug, a)
        lb = np.frombuffer(f.read(rows_aug * a * 8), dtype="<f8").reshape(rows_aug, a)
        lw = np.frombuffer(f.read(n * 8), dtype="<f8")
        ls = np.frombuffer(f.read(n * c * 8), dtype="<f8").reshape(n, c)
    flags = SubmodelFlags(bool(flag_bits & 1), bool(flag_bits & 2),
                          bool(flag_bits & 4), bool(flag_bits & 8))
    ops = ops or default_ops()
    if len(ops) != a:
        raise HyperModelError(f"checkpoint has {a} ops, table configured with {len(ops)}")
    table = HyperTable(gidx, labels, c, flags, ops=ops, alpha=alpha)
    table.aug.lambda_m.data[...] = lm
    table.aug.lambda_b.data[...] = lb
    table.lambda_w.data[...] = lw
    table.lambda_s.data[...] = ls
    return table


def table_summary(table: HyperTable) -> dict:
    """Per-point weight, soft-label entropy, and gate probabilities for reporting."""
    w = WEIGHT_SCALE * np.logaddexp(0.0, table.lambda_w.data)
    p = np.exp(table.lambda_s.data - table.lambda_s.data.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    entropy = -np.sum(p * np.log(np.maximum(p, 1e-300)), axis=1)
    gate_prob = 1.0 / (1.0 + np.exp(-table.aug.lambda_b.data))
    if table.flags.augment_shared:
        gate_prob = np.repeat(gate_prob, table.n_points, axis=0)
    return {
        "global_index": table.global_index.tolist(),
        "weight": np.round(w, 6).tolist(),
        "soft_label_entropy": np.round(entropy, 6).tolist(),
        "gate_prob": np.round(gate_prob, 6).tolist(),
    }


def save_summary(table: HyperTable, path):
    with open(path, "w") as f:
        json.dump(table_summary(table), f)
