"""Small fully connected classifier that infers a group label from an embedding.

Architecture: ``input_dim -> hidden[0] -> hidden[1] -> n_classes`` with
biases, an elementwise nonlinearity after each hidden layer and a softmax
output, trained with mini-batch SGD on mean cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import GroupKey
from .errors import ConfigError, DataError

__all__ = [
    "DetectorConfig",
    "DetectorParams",
    "LabeledEmbeddingSet",
    "PRPoint",
    "dense_param_count",
    "count_detector_params",
    "init_detector",
    "detector_forward",
    "loss_and_grads",
    "train_detector",
    "precision_recall_curve",
    "detect",
    "accuracy",
]

ACTIVATIONS = {
    "relu": (lambda a: np.maximum(a, 0.0), lambda a, z: (a > 0).astype(a.dtype)),
    "tanh": (np.tanh, lambda a, z: 1.0 - z * z),
    "sigmoid": (lambda a: 1.0 / (1.0 + np.exp(-a)), lambda a, z: z * (1.0 - z)),
}


@dataclass(frozen=True)
class DetectorConfig:
    input_dim: int = 256
    hidden: tuple[int, ...] = (128, 256)
    n_classes: int = 2
    activation: str = "relu"
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    class_weighting: bool = False
    class_names: tuple[str, ...] = ("male", "female")
    dimension: str = "gender"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.input_dim < 1 or self.n_classes < 2 or any(h < 1 for h in self.hidden):
            raise ConfigError("layer sizes must be >= 1 and n_classes >= 2")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if len(self.class_names) != self.n_classes:
            raise ConfigError(f"{len(self.class_names)} class names for {self.n_classes} classes")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.n_classes)


@dataclass(frozen=True)
class DetectorParams:
    weights: tuple[np.ndarray, ...]  # (n_out, n_in) each
    biases: tuple[np.ndarray, ...]
    activation: str = "relu"
    class_names: tuple[str, ...] = ("male", "female")
    dimension: str = "gender"

    def to_arrays(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"dense{i}.weight"] = w
            out[f"dense{i}.bias"] = b
        return out

    @classmethod
    def from_arrays(cls, arrays, activation="relu", class_names=("male", "female"), dimension="gender"):
        n = len([k for k in arrays if k.endswith(".weight")])
        try:
            ws = tuple(np.asarray(arrays[f"dense{i}.weight"], dtype=np.float64) for i in range(n))
            bs = tuple(np.asarray(arrays[f"dense{i}.bias"], dtype=np.float64) for i in range(n))
        except KeyError as exc:
            raise DataError(f"detector parameters missing array {exc}") from exc
        for i in range(n):
            if bs[i].shape != (ws[i].shape[0],) or (i and ws[i].shape[1] != ws[i - 1].shape[0]):
                raise DataError(f"detector layer {i}: inconsistent shapes")
        return cls(ws, bs, activation, tuple(class_names), dimension)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    def count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass
class LabeledEmbeddingSet:
    embeddings: np.ndarray
    labels: np.ndarray
    ids: list = field(default_factory=list)
    class_names: tuple[str, ...] = ("male", "female")
    split: str = "train"

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.embeddings.shape[0] != self.labels.size:
            raise DataError(f"{self.labels.size} labels for {self.embeddings.shape[0]} embeddings")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError(f"labels must index {len(self.class_names)} classes")
        if not self.ids:
            self.ids = [str(i) for i in range(self.labels.size)]

    def __len__(self):
        return self.labels.size


def dense_param_count(n_in: int, n_out: int, bias=True) -> int:
    return n_in * n_out + (n_out if bias else 0)


def count_detector_params(config: DetectorConfig) -> int:
    """Trainable scalars of the detector (66,434 for 256-128-256-2).

    The published figure for this topology is 67,716; the 1,282 extra
    parameters are not explained by the stated layer sizes.
    """
    sizes = config.layer_sizes
    return sum(dense_param_count(a, b) for a, b in zip(sizes[:-1], sizes[1:]))


def init_detector(config: DetectorConfig, rng=None) -> DetectorParams:
    rng = np.random.default_rng(config.seed if rng is None else rng)
    ws, bs = [], []
    sizes = config.layer_sizes
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        ws.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)))
        bs.append(np.zeros(n_out))
    return DetectorParams(tuple(ws), tuple(bs), config.activation, config.class_names, config.dimension)


def _forward(params: DetectorParams, x):
    act = ACTIVATIONS[params.activation][0]
    pre, post = [], [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w.T + b
        pre.append(a)
        h = a if i == last else act(a)
        post.append(h)
    return pre, post


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(emb, params):
    x = np.asarray(getattr(emb, "vector", emb), dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.input_dim:
        raise DataError(f"detector expects {params.input_dim}-dim input, got {x.shape[1]}")
    return x, single


def detector_forward(emb, params: DetectorParams) -> np.ndarray:
    """Class probabilities for one embedding (vector) or a batch (rows)."""
    x, single = _as_batch(emb, params)
    probs = _softmax(_forward(params, x)[0][-1])
    return probs[0] if single else probs


def loss_and_grads(params: DetectorParams, x, y, sample_weight=None):
    """Mean (optionally weighted) cross-entropy and its gradients.

    Returns ``(loss, grad_weights, grad_biases)`` with the gradient tuples
    aligned to ``params.weights`` / ``params.biases``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    n = y.size
    sw = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    pre, post = _forward(params, x)
    logits = pre[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-(sw * log_p[rows, y]).sum() / n)

    delta = np.exp(log_p)
    delta[rows, y] -= 1.0
    delta *= sw[:, None] / n
    deriv = ACTIVATIONS[params.activation][1]
    gw, gb = [None] * len(params.weights), [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = delta.T @ post[i]
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ params.weights[i]) * deriv(pre[i - 1], post[i])
    return loss, tuple(gw), tuple(gb)


def train_detector(data: LabeledEmbeddingSet, config: DetectorConfig):
    """Fit the detector with mini-batch SGD.

    Returns ``(params, history)`` where ``history`` holds the mean training
    loss of every epoch.
    """
    if len(data) == 0:
        raise DataError("empty training set")
    present = np.unique(data.labels)
    if present.size < 2:
        raise DataError("training data must contain at least two classes")
    if data.embeddings.shape[1] != config.input_dim:
        raise DataError(f"embeddings are {data.embeddings.shape[1]}-dim, config expects {config.input_dim}")
    if data.labels.max() >= config.n_classes:
        raise DataError("labels exceed n_classes")

    rng = np.random.default_rng(config.seed)
    params = init_detector(config, rng)
    class_w = np.ones(config.n_classes)
    if config.class_weighting:
        counts = np.bincount(data.labels, minlength=config.n_classes).astype(np.float64)
        class_w = np.where(counts > 0, counts.sum() / (present.size * np.maximum(counts, 1)), 0.0)
    ws, bs = [w.copy() for w in params.weights], [b.copy() for b in params.biases]
    history = []
    n = len(data)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            y = data.labels[idx]
            current = DetectorParams(tuple(ws), tuple(bs), config.activation)
            loss, gw, gb = loss_and_grads(current, data.embeddings[idx], y, class_w[y])
            for i in range(len(ws)):
                ws[i] -= config.learning_rate * gw[i]
                bs[i] -= config.learning_rate * gb[i]
            total += loss * idx.size
        history.append(total / n)
    final = DetectorParams(tuple(ws), tuple(bs), config.activation, config.class_names, config.dimension)
    return final, history


def accuracy(params: DetectorParams, data: LabeledEmbeddingSet) -> float:
    pred = np.argmax(detector_forward(data.embeddings, params), axis=1)
    return float(np.mean(pred == data.labels))


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


def precision_recall_curve(probabilities, labels, full=False) -> list[PRPoint]:
    """Precision and recall of ``prob >= threshold`` at distinct probabilities.

    ``labels`` are 1 for the positive class and 0 otherwise. Points are ordered
    by increasing threshold, so recall is non-increasing along the list. Lower
    thresholds than the largest one that already reaches recall 1 only add
    false positives and are dropped unless ``full`` is set.
    """
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if p.size == 0 or p.size != y.size:
        raise DataError("need equally many probabilities and labels, at least one")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be binary (0/1)")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise DataError("precision-recall needs both positive and negative labels")
    order = np.argsort(p, kind="stable")
    p_sorted, y_sorted = p[order], y[order]
    thresholds = np.unique(p_sorted)
    start = np.searchsorted(p_sorted, thresholds, side="left")
    # positives among predictions >= threshold, via a suffix sum
    suffix_pos = np.concatenate([np.cumsum(y_sorted[::-1])[::-1], [0]])
    tp = suffix_pos[start]
    predicted = p.size - start
    if not full:
        first = int(np.flatnonzero(tp == n_pos)[-1])
        thresholds, tp, predicted = thresholds[first:], tp[first:], predicted[first:]
    return [PRPoint(float(t), float(a / b), float(a / n_pos)) for t, a, b in zip(thresholds, tp, predicted)]


def detect(emb, params: DetectorParams) -> GroupKey:
    """Group of the most probable class; ties go to the lowest class index."""
    probs = detector_forward(emb, params)
    return GroupKey(params.dimension, params.class_names[int(np.argmax(probs))])
