"""Small task models over a flat parameter vector, and the two losses:
weighted symmetric KL for training, plain cross-entropy for validation."""

from __future__ import annotations

import json
import struct

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

PROB_EPS = 1e-8
MODEL_MAGIC = b"TMC1"
MAX_PARAMS = 50_000


class ModelError(Exception):
    pass


class TaskModel:
    """Classifier with all parameters in one flat float64 vector.

    ``forward`` slices shaped layer views out of the flat tensor with
    recorded ops, so one leaf tensor carries every parameter: exactly
    what the inverse-Hessian machinery wants.
    """

    def __init__(self, kind, input_shape, n_classes, hidden=(32,), channels=(8, 16),
                 seed=0):
        self.kind = kind
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.hidden = tuple(hidden)
        self.channels = tuple(channels)
        self.seed = seed
        self._layers = self._plan()
        self.n_params = sum(int(np.prod(s)) for _, s in self._layers)
        if self.n_params > MAX_PARAMS:
            raise ModelError(f"parameter count {self.n_params} exceeds {MAX_PARAMS}")
        self.params = self._init_params(seed)

    def _plan(self):
        cch, h, w = self.input_shape
        feat = cch * h * w
        if self.kind == "linear":
            return [("w0", (feat, self.n_classes)), ("b0", (self.n_classes,))]
        if self.kind == "mlp":
            layers = []
            prev = feat
            for i, hsz in enumerate(self.hidden):
                layers += [(f"w{i}", (prev, hsz)), (f"b{i}", (hsz,))]
                prev = hsz
            layers += [(f"w{len(self.hidden)}", (prev, self.n_classes)),
                       (f"b{len(self.hidden)}", (self.n_classes,))]
            return layers
        if self.kind == "tinycnn":
            if h % 4 or w % 4:
                raise ModelError("tinycnn needs spatial dims divisible by 4")
            c1, c2 = self.channels
            flat = c2 * (h // 4) * (w // 4)
            return [("conv1_w", (c1, cch, 3, 3)), ("conv1_b", (c1,)),
                    ("conv2_w", (c2, c1, 3, 3)), ("conv2_b", (c2,)),
                    ("fc_w", (flat, self.n_classes)), ("fc_b", (self.n_classes,))]
        raise ModelError(f"unknown model kind {self.kind!r}")

    def _init_params(self, seed):
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x7A5C]))
        chunks = []
        for name, shape in self._layers:
            if name.startswith("b"):
                chunks.append(np.zeros(int(np.prod(shape))))
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                std = np.sqrt(2.0 / fan_in)
                chunks.append(rng.normal(0.0, std, size=int(np.prod(shape))))
        return np.concatenate(chunks)

    def param_tensor(self) -> Tensor:
        return Tensor(self.params.copy(), requires_grad=True)

    def _views(self, theta: Tensor):
        views = {}
        off = 0
        for name, shape in self._layers:
            n = int(np.prod(shape))
            views[name] = dc.reshape(dc.narrow(theta, 0, off, n), shape)
            off += n
        return views

    def forward(self, theta: Tensor, x: Tensor) -> Tensor:
        """Logits [B, C] for a batch; recorded on the active graph."""
        if x.shape[1:] != self.input_shape:
            raise ModelError(f"input shape {x.shape[1:]} != expected {self.input_shape}")
        v = self._views(theta)
        b = x.shape[0]
        if self.kind == "linear":
            flat = dc.reshape(x, (b, int(np.prod(self.input_shape))))
            return dc.add(dc.matmul(flat, v["w0"]), dc.reshape(v["b0"], (1, self.n_classes)))
        if self.kind == "mlp":
            h = dc.reshape(x, (b, int(np.prod(self.input_shape))))
            for i in range(len(self.hidden)):
                h = dc.relu(dc.add(dc.matmul(h, v[f"w{i}"]),
                                   dc.reshape(v[f"b{i}"], (1, self.hidden[i]))))
            last = len(self.hidden)
            return dc.add(dc.matmul(h, v[f"w{last}"]),
                          dc.reshape(v[f"b{last}"], (1, self.n_classes)))
        # tinycnn
        h = dc.relu(dc.conv2d_3x3(x, v["conv1_w"], v["conv1_b"]))
        h = dc.avg_pool2d(h)
        h = dc.relu(dc.conv2d_3x3(h, v["conv2_w"], v["conv2_b"]))
        h = dc.avg_pool2d(h)
        h = dc.reshape(h, (b, v["fc_w"].shape[0]))
        return dc.add(dc.matmul(h, v["fc_w"]), dc.reshape(v["fc_b"], (1, self.n_classes)))

    def predict(self, x_data: np.ndarray) -> np.ndarray:
        """Argmax labels with the stored parameters (no graph recording)."""
        logits = self.forward(Tensor(self.params), Tensor(x_data))
        return np.argmax(logits.data, axis=1)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "input_shape": list(self.input_shape),
                "n_classes": self.n_classes, "hidden": list(self.hidden),
                "channels": list(self.channels), "seed": self.seed}

    def save(self, path):
        blob = json.dumps(self.descriptor()).encode()
        with open(path, "wb") as f:
            f.write(MODEL_MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(self.params.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "TaskModel":
        with open(path, "rb") as f:
            if f.read(4) != MODEL_MAGIC:
                raise ModelError("bad model checkpoint magic")
            n = struct.unpack("<I", f.read(4))[0]
            desc = json.loads(f.read(n).decode())
            flat = np.frombuffer(f.read(), dtype="<f8")
        model = cls(desc["kind"], desc["input_shape"], desc["n_classes"],
                    hidden=desc["hidden"], channels=desc["channels"], seed=desc["seed"])
        if flat.size != model.n_params:
            raise ModelError("checkpoint parameter count mismatch")
        model.params = flat.copy()
        return model


def train_loss(logits: Tensor, soft_targets: Tensor, point_weights: Tensor) -> Tensor:
    """Batch mean of w_i * [KL(y_i || p_i) + KL(p_i || y_i)].

    Probabilities are clamped to [eps, 1] before the logarithms, so
    hard targets stay finite; differentiable in logits, targets, weights.
    """
    p = dc.softmax(logits, axis=1)
    logp = dc.log(dc.clamp(p, PROB_EPS, 1.0))
    logy = dc.log(dc.clamp(soft_targets, PROB_EPS, 1.0))
    diff = dc.sub(logy, logp)
    kl_forward = dc.tsum(dc.mul(soft_targets, diff), axis=1)
    kl_reverse = dc.tsum(dc.mul(p, dc.neg(diff)), axis=1)
    per_point = dc.mul(point_weights, dc.add(kl_forward, kl_reverse))
    return dc.tmean(per_point)


def valid_loss(logits: Tensor, hard_labels) -> Tensor:
    """Plain mean cross-entropy against integer labels."""
    labels = np.asarray(hard_labels, dtype=np.int64)
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ModelError("validation label out of range")
    p = dc.softmax(logits, axis=1)
    logp = dc.log(dc.clamp(p, PROB_EPS, 1.0))
    onehot = dc.constant(np.eye(n_classes)[labels])
    return dc.neg(dc.tmean(dc.tsum(dc.mul(onehot, logp), axis=1)))
