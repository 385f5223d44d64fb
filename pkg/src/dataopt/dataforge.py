"""Dataset ingestion, synthetic glyph generation, stratified splits, and
train-set distortions (class imbalance, label noise)."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .seeding import derive_rng as _rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CONTAINER_MAGIC = b"DSET"


class DataError(Exception):
    pass


@dataclass(frozen=True)
class DistortionSpec:
    """Class-imbalance ratio, label-noise ratio, and the seed driving both."""

    ir: int = 1
    nr: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.ir < 1:
            raise DataError(f"imbalance ratio must be >= 1, got {self.ir}")
        if not (0.0 <= self.nr < 1.0):
            raise DataError(f"noise ratio must be in [0, 1), got {self.nr}")


class DatasetView:
    """Immutable indexed collection of (image, label, global index) records.

    Images are [N, Cch, H, W] float64 in [0, 1].  ``global_index`` is a
    stable per-record identity that survives splitting and distortion.
    ``lineage`` records provenance (source, split, distortions applied).
    """

    def __init__(self, images, labels, n_classes, global_index=None, lineage=None):
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise DataError("labels length does not match image count")
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise DataError("label out of range")
        if not np.all(np.isfinite(images)) or images.min() < 0 or images.max() > 1:
            raise DataError("images must be finite in [0, 1]")
        if global_index is None:
            global_index = np.arange(images.shape[0], dtype=np.int64)
        else:
            global_index = np.asarray(global_index, dtype=np.int64)
            if len(np.unique(global_index)) != len(global_index):
                raise DataError("global_index values must be unique")
        for arr in (images, labels, global_index):
            arr.flags.writeable = False
        self.images = images
        self.labels = labels
        self.n_classes = n_classes
        self.global_index = global_index
        self.lineage = dict(lineage or {"source": "unknown"})

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def take(self, indices, lineage_event=None):
        indices = np.asarray(indices, dtype=np.int64)
        lineage = dict(self.lineage)
        if lineage_event:
            lineage.setdefault("events", [])
            lineage = {**lineage, "events": list(lineage.get("events", [])) + [lineage_event]}
        return DatasetView(self.images[indices], self.labels[indices], self.n_classes,
                           self.global_index[indices], lineage)

    def with_labels(self, labels, lineage_extra):
        lineage = {**self.lineage, **lineage_extra}
        return DatasetView(self.images, labels, self.n_classes, self.global_index, lineage)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def stratified_split(data: DatasetView, valid_fraction: float, fold_seed: int):
    """Per-class shuffled split into (train, valid); deterministic in fold_seed."""
    if not (0.0 < valid_fraction < 1.0):
        raise DataError(f"valid_fraction must be in (0,1), got {valid_fraction}")
    counts = data.class_counts()
    train_idx, valid_idx = [], []
    for c in range(data.n_classes):
        members = np.where(data.labels == c)[0]
        if len(members) < 2:
            raise DataError(f"class {c} has {len(members)} examples, need >= 2 to split")
        n_valid = _round_half_up(valid_fraction * len(members))
        n_valid = min(max(n_valid, 1), len(members) - 1)
        perm = _rng(fold_seed, 101, c).permutation(len(members))
        valid_idx.append(members[perm[:n_valid]])
        train_idx.append(members[perm[n_valid:]])
    train_idx = np.sort(np.concatenate(train_idx))
    valid_idx = np.sort(np.concatenate(valid_idx))
    train = data.take(train_idx, {"op": "split", "part": "train", "fold_seed": fold_seed,
                                  "valid_fraction": valid_fraction})
    valid = data.take(valid_idx, {"op": "split", "part": "valid", "fold_seed": fold_seed,
                                  "valid_fraction": valid_fraction})
    return train, valid


def apply_imbalance(data: DatasetView, spec: DistortionSpec) -> DatasetView:
    """Subsample upper-half classes so each keeps max(1, round(count/ir)) records."""
    if data.n_classes % 2:
        raise DataError("class imbalance needs an even class count")
    if spec.ir == 1:
        return data
    keep = []
    half = data.n_classes // 2
    for c in range(data.n_classes):
        members = np.where(data.labels == c)[0]
        if c < half:
            keep.append(members)
        else:
            n_keep = max(1, _round_half_up(len(members) / spec.ir))
            perm = _rng(spec.seed, 211, c).permutation(len(members))
            keep.append(np.sort(members[perm[:n_keep]]))
    keep = np.sort(np.concatenate(keep))
    return data.take(keep, {"op": "imbalance", "ir": spec.ir, "seed": spec.seed})


def apply_label_noise(data: DatasetView, spec: DistortionSpec) -> DatasetView:
    """Flip exactly round(nr*N) labels, resampled uniformly over the other classes."""
    if data.n_classes < 2:
        raise DataError("label noise needs >= 2 classes")
    n_flip = _round_half_up(spec.nr * len(data))
    if n_flip == 0:
        return data
    rng = _rng(spec.seed, 307)
    chosen = rng.choice(len(data), size=n_flip, replace=False)
    labels = data.labels.copy()
    # uniform over the C-1 other classes, so every flipped label differs
    offsets = rng.integers(1, data.n_classes, size=n_flip)
    labels[chosen] = (labels[chosen] + offsets) % data.n_classes
    corrupted = np.sort(data.global_index[chosen])
    return data.with_labels(labels, {
        "noise": {"nr": spec.nr, "seed": spec.seed, "n_flipped": int(n_flip),
                  # diagnostics only; training code never reads this
                  "corrupted_global_index": [int(i) for i in corrupted]},
    })


def distort(data: DatasetView, spec: DistortionSpec) -> DatasetView:
    """Full distortion pipeline: imbalance first, then label noise on the survivors."""
    return apply_label_noise(apply_imbalance(data, spec), spec)


# ---------------------------------------------------------------------------
# IDX ingestion

def load_idx(images_path, labels_path) -> DatasetView:
    """Read an IDX image/label file pair (big-endian, ubyte pixels)."""
    with open(images_path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise DataError("truncated idx image header")
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise DataError(f"bad idx image magic 0x{magic:08x}")
        raw = f.read(n * rows * cols)
        if len(raw) != n * rows * cols:
            raise DataError("truncated idx image payload")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    with open(labels_path, "rb") as f:
        header = f.read(8)
        if len(header) < 8:
            raise DataError("truncated idx label header")
        magic, n_labels = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise DataError(f"bad idx label magic 0x{magic:08x}")
        if n_labels != n:
            raise DataError(f"idx count mismatch: {n} images vs {n_labels} labels")
        raw = f.read(n_labels)
        if len(raw) != n_labels:
            raise DataError("truncated idx label payload")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    n_classes = int(labels.max()) + 1 if n else 0
    if n_classes % 2:
        n_classes += 1  # keep the even-class invariant for the imbalance protocol
    return DatasetView(images.astype(np.float64) / 255.0, labels, max(n_classes, 2),
                       lineage={"source": f"idx:{images_path}"})


# ---------------------------------------------------------------------------
# synthetic glyphs

def _glyph_field(cls, u, v):
    """Signed distance-ish field for glyph class; negative inside the stroke."""
    r = np.sqrt(u * u + v * v)
    au, av = np.abs(u), np.abs(v)
    if cls == 0:      # ring
        return np.abs(r - 0.55) - 0.16
    if cls == 1:      # filled disk
        return r - 0.5
    if cls == 2:      # dot inside ring
        return np.minimum(np.abs(r - 0.62) - 0.12, r - 0.2)
    if cls == 3:      # vertical bar
        return np.maximum(au - 0.16, av - 0.72)
    if cls == 4:      # horizontal bar
        return np.maximum(av - 0.16, au - 0.72)
    if cls == 5:      # plus
        return np.minimum(np.maximum(au - 0.16, av - 0.68),
                          np.maximum(av - 0.16, au - 0.68))
    if cls == 6:      # two parallel bars
        top = np.maximum(np.abs(v - 0.34) - 0.13, au - 0.62)
        bot = np.maximum(np.abs(v + 0.34) - 0.13, au - 0.62)
        return np.minimum(top, bot)
    if cls == 7:      # filled triangle
        e1 = v - 0.55
        e2 = 0.5 * (-v - 0.6) + 0.866 * u - 0.05
        e3 = 0.5 * (-v - 0.6) - 0.866 * u - 0.05
        return np.maximum(e1, np.maximum(e2, e3))
    if cls == 8:      # square outline
        return np.abs(np.maximum(au, av) - 0.5) - 0.14
    if cls == 9:      # half disk
        return np.maximum(r - 0.55, -v + 0.05)
    raise DataError(f"no glyph for class {cls}")


def make_synthetic(n_per_class, n_classes, image_size, seed,
                   rot_jitter=15.0, trans_jitter=0.12, scale_lo=0.85, scale_hi=1.15,
                   noise_sigma=0.04) -> DatasetView:
    """Render jittered glyph images: ``n_per_class * n_classes`` records.

    Each sample gets a random rotation (degrees), translation (fraction
    of size), isotropic scale, and pixel noise, all drawn from ``seed``.
    """
    if n_classes % 2:
        raise DataError("synthetic generator needs an even class count")
    if n_classes > 10:
        raise DataError("at most 10 glyph classes available")
    if image_size < 8:
        raise DataError("image_size must be >= 8")
    s = image_size
    lin = np.linspace(-1.0, 1.0, s)
    vg, ug = np.meshgrid(lin, lin, indexing="ij")
    rng = _rng(seed, 401)
    images = np.empty((n_per_class * n_classes, 1, s, s))
    labels = np.empty(n_per_class * n_classes, dtype=np.int64)
    aa = 2.0 / s  # antialias width of one pixel
    i = 0
    for c in range(n_classes):
        for _ in range(n_per_class):
            phi = np.deg2rad(rng.uniform(-rot_jitter, rot_jitter))
            tx = rng.uniform(-trans_jitter, trans_jitter) * 2.0
            ty = rng.uniform(-trans_jitter, trans_jitter) * 2.0
            sc = rng.uniform(scale_lo, scale_hi)
            # inverse-map pixel coords into glyph frame
            uu = (np.cos(phi) * (ug - tx) + np.sin(phi) * (vg - ty)) / sc
            vv = (-np.sin(phi) * (ug - tx) + np.cos(phi) * (vg - ty)) / sc
            field = _glyph_field(c, uu, vv)
            img = np.clip(0.5 - field / aa, 0.0, 1.0)
            img = img * 0.85 + 0.05
            img += rng.normal(0.0, noise_sigma, size=img.shape)
            images[i, 0] = np.clip(img, 0.0, 1.0)
            labels[i] = c
            i += 1
    return DatasetView(images, labels, n_classes,
                       lineage={"source": f"synthetic(seed={seed}, n={n_per_class}x{n_classes}, size={s})"})


# ---------------------------------------------------------------------------
# container serialization

def save_container(data: DatasetView, path):
    """Binary container + JSON lineage sidecar."""
    path = str(path)
    n, cch, h, w = data.images.shape
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<5I", n, data.n_classes, cch, h, w))
        f.write(data.images.astype("<f8").tobytes())
        f.write(data.labels.astype("<u2").tobytes())
        f.write(data.global_index.astype("<u4").tobytes())
    with open(path + ".lineage.json", "w") as f:
        json.dump(data.lineage, f, indent=2, sort_keys=True)


def load_container(path) -> DatasetView:
    path = str(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CONTAINER_MAGIC:
            raise DataError("bad container magic")
        n, n_classes, cch, h, w = struct.unpack("<5I", f.read(20))
        images = np.frombuffer(f.read(n * cch * h * w * 8), dtype="<f8").reshape(n, cch, h, w)
        labels = np.frombuffer(f.read(n * 2), dtype="<u2").astype(np.int64)
        gidx = np.frombuffer(f.read(n * 4), dtype="<u4").astype(np.int64)
    try:
        with open(path + ".lineage.json") as f:
            lineage = json.load(f)
    except FileNotFoundError:
        lineage = {"source": f"container:{path}"}
    return DatasetView(images.copy(), labels, n_classes, gidx, lineage)
