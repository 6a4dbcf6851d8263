"""Minimal differentiable models, datasets, and canonical state hashing.

The default model is multinomial logistic regression (optionally with one
tanh hidden layer), trained by plain mini-batch gradient descent so that
every executor reproduces bit-identical weights from the same seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from hashlib import sha256

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    EmptyEvalSet,
    EmptyShard,
    NonFiniteState,
    TruncatedFile,
)
from .rng import rng_from

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor: layer dims plus hidden activation."""

    input_dim: int
    class_count: int
    hidden: int = 0
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim < 1 or self.class_count < 2 or self.hidden < 0:
            raise ValueError("invalid model dimensions")
        if self.hidden and self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        if self.hidden:
            return (self.input_dim, self.hidden, self.class_count)
        return (self.input_dim, self.class_count)

    @property
    def param_count(self) -> int:
        d, c, h = self.input_dim, self.class_count, self.hidden
        if h:
            return d * h + h + h * c + c
        return d * c + c


@dataclass(frozen=True)
class ModelWeights:
    """Flat parameter vector tied to its architecture."""

    values: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.shape != (self.spec.param_count,):
            raise DimensionMismatch(
                f"expected {self.spec.param_count} parameters, got {self.values.shape}"
            )

    def with_values(self, values: np.ndarray) -> "ModelWeights":
        return ModelWeights(values=values, spec=self.spec)


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix with integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if len(self.features) != len(self.labels):
            raise DimensionMismatch("feature and label row counts differ")
        if len(self.labels) and int(self.labels.max()) >= self.class_count:
            raise ValueError("label outside class range")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[indices], self.labels[indices], self.class_count)

    def head(self, rows: int) -> "LabeledDataset":
        if rows >= len(self):
            return self
        return LabeledDataset(self.features[:rows], self.labels[:rows], self.class_count)


@dataclass(frozen=True)
class DatasetSplits:
    train: LabeledDataset
    validation: LabeledDataset
    test: LabeledDataset


@dataclass(frozen=True)
class MetricSpec:
    metric_id: str = "accuracy"
    threshold: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")


@dataclass(frozen=True)
class SynthSpec:
    """Gaussian-cluster classification task, one axis-aligned mean per class."""

    class_count: int = 4
    dims: int = 16
    separation: float = 6.0
    noise: float = 1.0

    def __post_init__(self):
        if self.dims < self.class_count:
            raise ValueError("need dims >= class_count for distinct cluster means")


def init_weights(spec: ModelSpec, seed: bytes) -> ModelWeights:
    """Zero weights for the linear model; scaled normal init with a hidden layer."""
    if spec.hidden == 0:
        return ModelWeights(np.zeros(spec.param_count), spec)
    rng = rng_from(seed)
    d, h, c = spec.input_dim, spec.hidden, spec.class_count
    parts = [
        rng.normal(0.0, 1.0 / np.sqrt(d), size=d * h),
        np.zeros(h),
        rng.normal(0.0, 1.0 / np.sqrt(h), size=h * c),
        np.zeros(c),
    ]
    return ModelWeights(np.concatenate(parts), spec)


def _unpack(w: ModelWeights):
    d, c, h = w.spec.input_dim, w.spec.class_count, w.spec.hidden
    v = w.values
    if h == 0:
        return v[: d * c].reshape(d, c), v[d * c :]
    o = 0
    w1 = v[o : o + d * h].reshape(d, h); o += d * h
    b1 = v[o : o + h]; o += h
    w2 = v[o : o + h * c].reshape(h, c); o += h * c
    b2 = v[o:]
    return w1, b1, w2, b2


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_logits(w: ModelWeights, features: np.ndarray) -> np.ndarray:
    if w.spec.hidden == 0:
        mat, bias = _unpack(w)
        return features @ mat + bias
    w1, b1, w2, b2 = _unpack(w)
    return np.tanh(features @ w1 + b1) @ w2 + b2


def loss_and_grad(w: ModelWeights, features: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy loss and its gradient as a flat vector."""
    n = len(labels)
    probs_err = None
    if w.spec.hidden == 0:
        mat, bias = _unpack(w)
        probs = _softmax(features @ mat + bias)
        loss = -np.log(probs[np.arange(n), labels] + 1e-300).mean()
        probs[np.arange(n), labels] -= 1.0
        probs_err = probs / n
        grad = np.concatenate([(features.T @ probs_err).ravel(), probs_err.sum(axis=0)])
        return loss, grad
    w1, b1, w2, b2 = _unpack(w)
    hidden = np.tanh(features @ w1 + b1)
    probs = _softmax(hidden @ w2 + b2)
    loss = -np.log(probs[np.arange(n), labels] + 1e-300).mean()
    probs[np.arange(n), labels] -= 1.0
    probs_err = probs / n
    d_hidden = (probs_err @ w2.T) * (1.0 - hidden**2)
    grad = np.concatenate(
        [
            (features.T @ d_hidden).ravel(),
            d_hidden.sum(axis=0),
            (hidden.T @ probs_err).ravel(),
            probs_err.sum(axis=0),
        ]
    )
    return loss, grad


def local_update(
    w: ModelWeights,
    shard: LabeledDataset,
    epochs: int = 3,
    lr: float = 0.01,
    batch: int = 64,
    seed: bytes = b"\x00" * 32,
) -> np.ndarray:
    """Parameter delta after mini-batch gradient descent on the shard.

    Row order is reshuffled each epoch from the seed, so the result is a
    pure function of (w, shard, hyperparameters, seed).
    """
    if len(shard) == 0:
        raise EmptyShard("cannot train on an empty shard")
    rng = rng_from(seed)
    local = w.values.copy()
    for _ in range(epochs):
        order = rng.permutation(len(shard))
        for start in range(0, len(order), batch):
            rows = order[start : start + batch]
            _, grad = loss_and_grad(
                w.with_values(local), shard.features[rows], shard.labels[rows]
            )
            local -= lr * grad
    return local - w.values


def evaluate_metric(
    w: ModelWeights, eval_set: LabeledDataset, spec: MetricSpec | None = None
) -> float:
    """Fraction of rows whose argmax prediction matches the label."""
    if len(eval_set) == 0:
        raise EmptyEvalSet("empty evaluation set")
    metric = spec.metric_id if spec is not None else "accuracy"
    if metric != "accuracy":
        raise ValueError(f"unknown metric {metric!r}")
    predicted = predict_logits(w, eval_set.features).argmax(axis=1)
    return float((predicted == eval_set.labels).mean())


def utility(w: ModelWeights, eval_set: LabeledDataset) -> float:
    """Mean cross-entropy loss; lower means a better model."""
    if len(eval_set) == 0:
        raise EmptyEvalSet("empty evaluation set")
    loss, _ = loss_and_grad(w, eval_set.features, eval_set.labels)
    return float(loss)


def state_digest(w: ModelWeights, p: np.ndarray, counts: np.ndarray) -> bytes:
    """SHA-256 of the canonical byte serialization of (weights, p, counts).

    Layout: layer dims, activation tag, then each array as a length-
    prefixed little-endian block, making the encoding injective on the
    state.  Rejects non-finite weights or probabilities.
    """
    p = np.asarray(p, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    if not np.all(np.isfinite(w.values)) or not np.all(np.isfinite(p)):
        raise NonFiniteState("state contains non-finite values")
    h = sha256(b"state-v1")
    dims = w.spec.layer_dims
    h.update(struct.pack("<I", len(dims)))
    h.update(struct.pack(f"<{len(dims)}I", *dims))
    act = w.spec.activation.encode() if w.spec.hidden else b""
    h.update(struct.pack("<I", len(act)))
    h.update(act)
    for arr in (w.values, p):
        h.update(struct.pack("<Q", arr.size))
        h.update(arr.astype("<f8").tobytes())
    h.update(struct.pack("<Q", counts.size))
    h.update(counts.astype("<i8").tobytes())
    return h.digest()


def _read_idx_header(data: bytes, path: str, magic: int, dim_count: int) -> tuple[int, ...]:
    header = 4 + 4 * dim_count
    if len(data) < header:
        raise TruncatedFile(f"{path}: header truncated")
    found = struct.unpack(">i", data[:4])[0]
    if found != magic:
        raise BadMagic(f"{path}: magic {found:#010x}, expected {magic:#010x}")
    return struct.unpack(f">{dim_count}i", data[4:header])


def load_idx(images_path: str, labels_path: str) -> LabeledDataset:
    """Parse an IDX image/label file pair into a dataset scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        img_data = f.read()
    with open(labels_path, "rb") as f:
        lbl_data = f.read()
    count, rows, cols = _read_idx_header(img_data, images_path, IDX_IMAGE_MAGIC, 3)
    (label_count,) = _read_idx_header(lbl_data, labels_path, IDX_LABEL_MAGIC, 1)
    pixel_bytes = count * rows * cols
    if len(img_data) < 16 + pixel_bytes:
        raise TruncatedFile(f"{images_path}: expected {pixel_bytes} pixel bytes")
    if len(lbl_data) < 8 + label_count:
        raise TruncatedFile(f"{labels_path}: expected {label_count} label bytes")
    if label_count != count:
        raise DimensionMismatch(f"{count} images but {label_count} labels")
    pixels = np.frombuffer(img_data, dtype=np.uint8, count=pixel_bytes, offset=16)
    labels = np.frombuffer(lbl_data, dtype=np.uint8, count=label_count, offset=8)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    class_count = int(labels.max()) + 1 if count else 1
    return LabeledDataset(features, labels.astype(np.int64), class_count)


def split_dataset(dataset: LabeledDataset) -> DatasetSplits:
    """80/10/10 split in row order; the flooring remainder stays in train."""
    rows = len(dataset)
    n_val = rows // 10
    n_test = rows // 10
    n_train = rows - n_val - n_test
    idx = np.arange(rows)
    return DatasetSplits(
        train=dataset.take(idx[:n_train]),
        validation=dataset.take(idx[n_train : n_train + n_val]),
        test=dataset.take(idx[n_train + n_val :]),
    )


def synth_dataset(spec: SynthSpec, rows: int, seed: bytes) -> DatasetSplits:
    """Deterministic Gaussian-cluster dataset split 80/10/10."""
    if rows < spec.class_count:
        raise ValueError("need at least one row per class")
    rng = rng_from(seed)
    counts = [rows // spec.class_count] * spec.class_count
    for k in range(rows % spec.class_count):
        counts[k] += 1
    labels = np.repeat(np.arange(spec.class_count), counts)
    means = np.zeros((spec.class_count, spec.dims))
    means[np.arange(spec.class_count), np.arange(spec.class_count)] = spec.separation
    features = means[labels] + spec.noise * rng.normal(size=(rows, spec.dims))
    order = rng.permutation(rows)
    full = LabeledDataset(features[order], labels[order], spec.class_count)
    return split_dataset(full)


def dirichlet_partition(
    dataset: LabeledDataset,
    sellers: int,
    concentration: float,
    seed: bytes,
) -> list[np.ndarray]:
    """Split row indices across sellers with per-class Dirichlet shares.

    Low concentration produces heavily skewed per-seller label mixes;
    large concentration approaches an even split.  Rows are assigned at
    most once and shards are disjoint by construction.
    """
    if sellers < 1:
        raise ValueError("need at least one seller")
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    rng = rng_from(seed)
    shards: list[list[np.ndarray]] = [[] for _ in range(sellers)]
    for k in range(dataset.class_count):
        idx = np.nonzero(dataset.labels == k)[0]
        if len(idx) == 0:
            continue
        idx = rng.permutation(idx)
        shares = rng.dirichlet(np.full(sellers, concentration))
        cuts = (np.cumsum(shares) * len(idx)).astype(int)[:-1]
        for s, chunk in enumerate(np.split(idx, cuts)):
            shards[s].append(chunk)
    return [
        np.sort(np.concatenate(chunks)) if chunks else np.empty(0, dtype=np.int64)
        for chunks in shards
    ]


def partition_shards(
    dataset: LabeledDataset, plan: list[np.ndarray]
) -> list[LabeledDataset]:
    return [dataset.take(indices) for indices in plan]
