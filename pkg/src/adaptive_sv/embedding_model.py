"""Res2Net speaker-embedding network (inference), ASP pooling and AM-Softmax.

Layout of the network for the default :class:`ModelConfig`::

    input (1, 80, T)
    conv 7x7, stride (2, 1), padding 3, 64 channels      -> (64, 40, T)
    4 stacks of Res2Net bottleneck blocks                -> (512, 10, T/4)
    mean over the frequency axis                         -> (512, T/4)
    attentive statistics pooling                         -> 1024
    dense                                                -> 256 (the embedding)
    AM-Softmax head (training only)                      -> n_classes

Only the forward pass of the network is implemented. Backward passes exist
for :func:`am_softmax_loss` alone.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError
from .features import FeatureMatrix

__all__ = [
    "BlockSpec",
    "ModelConfig",
    "ParameterSet",
    "Embedding",
    "conv2d",
    "batch_norm",
    "res2net_module_forward",
    "res2net_block_forward",
    "asp_pool",
    "embed",
    "am_softmax_loss",
    "init_params",
    "parameter_shapes",
    "count_params",
    "count_macs",
]


@dataclass(frozen=True)
class BlockSpec:
    planes: int
    out_channels: int
    repeats: int
    stride: int

    def subset_width(self, basewidth: int) -> int:
        return self.planes * basewidth // 64


DEFAULT_BLOCKS = (
    BlockSpec(64, 256, 3, 1),
    BlockSpec(64, 256, 4, 2),
    BlockSpec(128, 512, 6, 2),
    BlockSpec(128, 512, 3, 1),
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``basewidth`` is the per-subset channel count of a block with 64 planes;
    blocks with ``planes`` planes use ``planes * basewidth // 64`` channels per
    subset and ``scale`` subsets, as in the reference Res2Net bottleneck.
    """

    basewidth: int = 26
    scale: int = 8
    n_mels: int = 80
    stem_channels: int = 64
    stem_kernel: int = 7
    stem_stride: tuple[int, int] = (2, 1)
    blocks: tuple[BlockSpec, ...] = DEFAULT_BLOCKS
    embedding_dim: int = 256
    n_classes: int = 7315
    am_margin: float = 0.2
    am_scale: float = 30.0
    asp_hidden: int = 128
    asp_eps: float = 1e-5
    bn_eps: float = 1e-5

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, BlockSpec) else BlockSpec(*b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "stem_stride", tuple(int(s) for s in self.stem_stride))
        if self.scale < 2:
            raise ConfigError(f"scale must be >= 2, got {self.scale}")
        if not blocks:
            raise ConfigError("at least one block stack is required")
        for i, b in enumerate(blocks):
            if b.subset_width(self.basewidth) < 1:
                raise ConfigError(f"block stack {i + 1}: basewidth {self.basewidth} leaves no channels per subset")
            if b.repeats < 1 or b.stride < 1 or b.out_channels < 1:
                raise ConfigError(f"block stack {i + 1}: invalid spec {b}")
        for name in ("n_mels", "stem_channels", "embedding_dim", "n_classes", "asp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.stem_kernel % 2 == 0:
            raise ConfigError("stem kernel must be odd")
        if self.asp_eps <= 0:
            raise ConfigError("asp_eps must be positive")

    @property
    def stem_padding(self) -> int:
        return self.stem_kernel // 2

    @property
    def min_frames(self) -> int:
        """Shortest input keeping one frame per time-stride step of the schedule."""
        n = self.stem_stride[1]
        for b in self.blocks:
            n *= b.stride
        return n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(asdict(b).values()) for b in self.blocks]
        d["stem_stride"] = list(self.stem_stride)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "blocks" in d:
            d["blocks"] = tuple(BlockSpec(*b) for b in d["blocks"])
        if "stem_stride" in d:
            d["stem_stride"] = tuple(d["stem_stride"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class ParameterSet(Mapping):
    """Read-only mapping of parameter name to array."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._arrays = {}
        for name, arr in arrays.items():
            arr = np.array(arr, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise DataError(f"parameter {name} has non-finite entries")
            arr.setflags(write=False)
            self._arrays[name] = arr

    def __getitem__(self, name):
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def with_arrays(self, updates: Mapping[str, np.ndarray]) -> "ParameterSet":
        merged = dict(self._arrays)
        merged.update(updates)
        return ParameterSet(merged)


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    utterance_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).ravel()
        if not np.all(np.isfinite(v)):
            raise DataError(f"embedding {self.utterance_id!r} has non-finite values")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.size


# ---------------------------------------------------------------------------
# layers


def conv2d(x, weight, stride=(1, 1), padding=(0, 0)):
    """2-D cross-correlation of a (C, H, W) map with (O, C, kh, kw) weights, no bias."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ConfigError(f"expected a (C, H, W) tensor, got shape {x.shape}")
    o, c, kh, kw = weight.shape
    if x.shape[0] != c:
        raise ConfigError(f"conv expects {c} input channels, got {x.shape[0]}")
    sh, sw = (stride, stride) if np.isscalar(stride) else stride
    ph, pw = (padding, padding) if np.isscalar(padding) else padding
    if kh == kw == 1 and ph == pw == 0:
        return np.tensordot(weight[:, :, 0, 0], x[:, ::sh, ::sw], axes=(1, 0))
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise DataError(f"input {x.shape[1:]} too small for a {kh}x{kw} kernel")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    return np.tensordot(weight, windows, axes=([1, 2, 3], [0, 3, 4]))


def batch_norm(x, gamma, beta, mean, var, eps=1e-5):
    """Inference-mode per-channel normalization of a (C, ...) tensor."""
    shape = (-1,) + (1,) * (x.ndim - 1)
    scale = gamma / np.sqrt(var + eps)
    return x * scale.reshape(shape) + (beta - mean * scale).reshape(shape)


def relu(x):
    return np.maximum(x, 0.0)


def _bn(params, prefix, x, eps):
    return batch_norm(x, params[prefix + ".gamma"], params[prefix + ".beta"], params[prefix + ".mean"], params[prefix + ".var"], eps)


def res2net_module_forward(x, kernels, scale, post=None):
    """Hierarchical multi-scale 3x3 stage of a Res2Net block.

    The channels of ``x`` are split into ``scale`` equal subsets x_1..x_s and::

        y_1 = x_1
        y_2 = K_2(x_2)
        y_i = K_i(x_i + y_{i-1})    i >= 3

    Args:
      x: (C, H, W) tensor, C divisible by ``scale``.
      kernels: ``scale - 1`` weight arrays of shape (C/s, C/s, 3, 3) for K_2..K_s.
      scale: number of subsets.
      post: optional list of callables applied after each K_i (normalization
        and activation in a full block).

    Returns:
      Channel concatenation of y_1..y_s, same shape as ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if scale < 2 or x.shape[0] % scale:
        raise ConfigError(f"{x.shape[0]} channels cannot be split into {scale} subsets")
    if len(kernels) != scale - 1:
        raise ConfigError(f"need {scale - 1} subset kernels, got {len(kernels)}")
    subsets = np.split(x, scale, axis=0)
    outputs = [subsets[0]]
    prev = None
    for i, (xi, k) in enumerate(zip(subsets[1:], kernels)):
        inp = xi if prev is None else xi + prev
        prev = conv2d(inp, k, padding=(1, 1))
        if post is not None:
            prev = post[i](prev)
        outputs.append(prev)
    return np.concatenate(outputs, axis=0)


def res2net_block_forward(x, params, prefix, config: ModelConfig, stride=1):
    """One bottleneck: 1x1 reduce -> Res2Net stage -> 1x1 expand, plus residual.

    The stride is applied by the 1x1 reduce convolution (and by the 1x1
    projection on the shortcut) so the Res2Net stage itself is shape-preserving.
    """
    eps = config.bn_eps
    w1 = params[prefix + ".conv1.weight"]
    if x.shape[0] != w1.shape[1]:
        raise ConfigError(f"{prefix}: expects {w1.shape[1]} input channels, got {x.shape[0]}")
    out = relu(_bn(params, prefix + ".bn1", conv2d(x, w1, stride=(stride, stride)), eps))
    n_sub = config.scale - 1
    kernels = [params[f"{prefix}.convs.{k}.weight"] for k in range(n_sub)]
    post = [lambda t, k=k: relu(_bn(params, f"{prefix}.bns.{k}", t, eps)) for k in range(n_sub)]
    out = res2net_module_forward(out, kernels, config.scale, post)
    out = _bn(params, prefix + ".bn3", conv2d(out, params[prefix + ".conv3.weight"]), eps)
    if prefix + ".proj.weight" in params:
        shortcut = _bn(params, prefix + ".proj.bn", conv2d(x, params[prefix + ".proj.weight"], stride=(stride, stride)), eps)
    else:
        if stride != 1 or x.shape != out.shape:
            raise ConfigError(f"{prefix}: identity shortcut needs matching shapes, got {x.shape} -> {out.shape}")
        shortcut = x
    return relu(out + shortcut)


def asp_attention(h, params, prefix="asp"):
    """Softmax attention weights over the T frames of a (C, T) matrix."""
    hidden = np.tanh(params[prefix + ".w1"] @ h + params[prefix + ".b1"][:, None])
    scores = params[prefix + ".w2"] @ hidden + params[prefix + ".b2"][0]
    scores = scores - scores.max()
    e = np.exp(scores)
    return e / e.sum()


def asp_pool(h, params, eps=1e-5, prefix="asp", return_weights=False):
    """Attentive statistics pooling of a (C, T) matrix into concat(mean, std).

    Moments are accumulated about the first frame so that a constant input
    gives an exactly zero variance and std ``sqrt(eps)``.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] < 1:
        raise DataError(f"asp_pool expects a (C, T>=1) matrix, got {h.shape}")
    alpha = asp_attention(h, params, prefix)
    d = h - h[:, :1]
    dm = d @ alpha
    mu = h[:, 0] + dm
    var = np.maximum((d * d) @ alpha - dm * dm, 0.0)
    out = np.concatenate([mu, np.sqrt(var + eps)])
    return (out, alpha) if return_weights else out


# ---------------------------------------------------------------------------
# parameters


def _conv_shapes(name, cout, cin, k):
    yield name + ".weight", (cout, cin, k, k), "conv"


def _bn_shapes(name, c):
    for stat in ("gamma", "beta", "mean", "var"):
        yield f"{name}.{stat}", (c,), "bn_" + stat


def _block_prefixes(config: ModelConfig):
    cin = config.stem_channels
    for i, spec in enumerate(config.blocks, start=1):
        for j in range(spec.repeats):
            stride = spec.stride if j == 0 else 1
            needs_proj = stride != 1 or cin != spec.out_channels
            yield f"layer{i}.{j}", spec, cin, stride, needs_proj
            cin = spec.out_channels


def parameter_shapes(config: ModelConfig, include_head=True):
    """Yield ``(name, shape, kind)`` for every array of the network, in a fixed order."""
    yield from _conv_shapes("stem.conv", config.stem_channels, 1, config.stem_kernel)
    yield from _bn_shapes("stem.bn", config.stem_channels)
    for prefix, spec, cin, _, needs_proj in _block_prefixes(config):
        w = spec.subset_width(config.basewidth)
        width = w * config.scale
        yield from _conv_shapes(prefix + ".conv1", width, cin, 1)
        yield from _bn_shapes(prefix + ".bn1", width)
        for k in range(config.scale - 1):
            yield from _conv_shapes(f"{prefix}.convs.{k}", w, w, 3)
            yield from _bn_shapes(f"{prefix}.bns.{k}", w)
        yield from _conv_shapes(prefix + ".conv3", spec.out_channels, width, 1)
        yield from _bn_shapes(prefix + ".bn3", spec.out_channels)
        if needs_proj:
            yield from _conv_shapes(prefix + ".proj", spec.out_channels, cin, 1)
            yield from _bn_shapes(prefix + ".proj.bn", spec.out_channels)
    c = config.blocks[-1].out_channels
    yield "asp.w1", (config.asp_hidden, c), "dense"
    yield "asp.b1", (config.asp_hidden,), "bias"
    yield "asp.w2", (config.asp_hidden,), "dense"
    yield "asp.b2", (1,), "bias"
    yield "embed.weight", (config.embedding_dim, 2 * c), "dense"
    yield "embed.bias", (config.embedding_dim,), "bias"
    if include_head:
        yield "amsoftmax.weight", (config.n_classes, config.embedding_dim), "class"


_TRAINABLE = {"conv", "dense", "bias", "class", "bn_gamma", "bn_beta"}


def init_params(config: ModelConfig, seed=0) -> ParameterSet:
    """He-uniform conv/dense weights, zero biases, identity batch-norm, unit-norm class rows."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape, kind in parameter_shapes(config):
        if kind in ("conv", "dense"):
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        elif kind == "class":
            rows = rng.standard_normal(shape)
            arrays[name] = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        elif kind in ("bn_gamma", "bn_var"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return ParameterSet(arrays)


def count_params(config: ModelConfig, include_head=False) -> int:
    """Number of trainable scalars.

    Batch-norm running statistics are not trainable and are excluded. The
    AM-Softmax class matrix is only counted when ``include_head`` is set, since
    it is discarded after training.
    """
    return sum(int(np.prod(shape)) for _, shape, kind in parameter_shapes(config, include_head) if kind in _TRAINABLE)


def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def count_macs(config: ModelConfig, n_frames: int, include_head=False) -> int:
    """Multiply-accumulates of one forward pass over ``n_frames`` input frames.

    Counts convolutions, the ASP attention network and dense layers; the
    elementwise work of normalization, activations and pooling is ignored.
    """
    if n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    k, (sf, st), p = config.stem_kernel, config.stem_stride, config.stem_padding
    f, t = _conv_out(config.n_mels, k, sf, p), _conv_out(n_frames, k, st, p)
    macs = config.stem_channels * k * k * f * t
    for _, spec, cin, stride, needs_proj in _block_prefixes(config):
        w = spec.subset_width(config.basewidth)
        width = w * config.scale
        f, t = _conv_out(f, 1, stride, 0), _conv_out(t, 1, stride, 0)
        hw = f * t
        macs += cin * width * hw
        macs += (config.scale - 1) * w * w * 9 * hw
        macs += width * spec.out_channels * hw
        if needs_proj:
            macs += cin * spec.out_channels * hw
    c = config.blocks[-1].out_channels
    macs += (c * config.asp_hidden + config.asp_hidden) * t
    macs += 2 * c * config.embedding_dim
    if include_head:
        macs += config.embedding_dim * config.n_classes
    return macs


# ---------------------------------------------------------------------------
# full forward pass


def frame_level_features(x, params, config: ModelConfig):
    """Stem and all block stacks applied to a (1, n_mels, T) input."""
    eps = config.bn_eps
    p = config.stem_padding
    out = relu(_bn(params, "stem.bn", conv2d(x, params["stem.conv.weight"], config.stem_stride, (p, p)), eps))
    for prefix, _, _, stride, _ in _block_prefixes(config):
        out = res2net_block_forward(out, params, prefix, config, stride)
    return out


def embed(features, params: ParameterSet, config: ModelConfig, utterance_id=None) -> Embedding:
    """Embedding of one utterance from its T x n_mels feature matrix."""
    if isinstance(features, FeatureMatrix):
        utterance_id = features.utterance_id if utterance_id is None else utterance_id
        frames = features.frames
    else:
        frames = np.asarray(features, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != config.n_mels:
        raise DataError(f"expected a T x {config.n_mels} feature matrix, got shape {frames.shape}")
    if frames.shape[0] < config.min_frames:
        raise DataError(
            f"utterance too short for model: need at least {config.min_frames} frames, got {frames.shape[0]}"
        )
    h = frame_level_features(frames.T[None], params, config)
    pooled = asp_pool(h.mean(axis=1), params, config.asp_eps)
    vec = params["embed.weight"] @ pooled + params["embed.bias"]
    return Embedding(vec, utterance_id or "")


# ---------------------------------------------------------------------------
# AM-Softmax


def _normalize_rows(a):
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("cannot normalize a zero vector")
    return a / norms, norms


def _through_normalization(grad, unit, norms):
    # d(v/|v|)/dv applied to grad
    return (grad - unit * np.sum(unit * grad, axis=1, keepdims=True)) / norms


def am_softmax_loss(embeddings, labels, weight, margin=0.2, scale=30.0):
    """Additive-margin softmax loss and its analytic gradients.

    Both the embeddings and the class-weight rows are length-normalized
    internally, so the logits are ``scale * cos(theta_j)`` with ``margin``
    subtracted from the cosine of the true class.

    Returns:
      ``(loss, grad_embeddings, grad_weight)``; the loss is the batch mean.
    """
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    weight = np.asarray(weight, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n_classes = weight.shape[0]
    if labels.size != emb.shape[0]:
        raise DataError(f"{labels.size} labels for {emb.shape[0]} embeddings")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"label out of range [0, {n_classes})")
    if emb.shape[1] != weight.shape[1]:
        raise DataError(f"embedding dim {emb.shape[1]} != class weight dim {weight.shape[1]}")

    e_hat, e_norm = _normalize_rows(emb)
    w_hat, w_norm = _normalize_rows(weight)
    cos = e_hat @ w_hat.T
    rows = np.arange(labels.size)
    logits = scale * cos
    logits[rows, labels] -= scale * margin
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    loss = -log_p[rows, labels].mean()

    d_logits = np.exp(log_p)
    d_logits[rows, labels] -= 1.0
    d_cos = scale * d_logits / labels.size
    grad_e = _through_normalization(d_cos @ w_hat, e_hat, e_norm)
    grad_w = _through_normalization(d_cos.T @ e_hat, w_hat, w_norm)
    return float(loss), grad_e, grad_w
