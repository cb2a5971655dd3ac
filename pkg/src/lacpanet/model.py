"""Lesion-aware cross-phase attention classifier.

Each phase volume runs through three weight-shared encoders (query, key and
value paths).  Features are masked-average-pooled over the lesion at two
scales, offset by learnable per-phase embeddings, mixed across phases by
scaled dot-product attention and classified by one FFN head per scale.
Encoder feature maps are kept channels-last, ``[N, H, W, D, C]``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import EmptyLesionError, ShapeError, Tensor

PATHS = ("q", "k", "v")
PHASE_NAMES = ("non-contrast", "arterial", "portal", "delayed")
LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5


@dataclass
class ModelConfig:
    n_phases: int = 4
    base_channels: int = 8
    n_classes: int = 5
    lam: float = 0.1
    alpha: float = 0.7
    beta: float = 0.1
    volume_shape: tuple[int, int, int] = (16, 16, 8)
    # "sqrt" draws phase embeddings with std sqrt(width); "inv_sqrt" with 1/sqrt(width)
    phase_embedding_std: str = "sqrt"
    multi_scale: bool = True
    use_phase_embedding: bool = True

    def __post_init__(self):
        self.volume_shape = tuple(int(s) for s in self.volume_shape)
        if self.n_phases < 2:
            raise ValueError("n_phases must be at least 2")
        if self.base_channels < 1 or self.n_classes < 2:
            raise ValueError("base_channels must be >= 1 and n_classes >= 2")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lam and beta must be non-negative")
        if len(self.volume_shape) != 3 or any(s < 2 or s % 2 for s in self.volume_shape):
            raise ValueError(f"volume_shape must be three even extents, got {self.volume_shape}")
        if self.phase_embedding_std not in ("sqrt", "inv_sqrt"):
            raise ValueError("phase_embedding_std must be 'sqrt' or 'inv_sqrt'")

    @property
    def high_channels(self) -> int:
        return 2 * self.base_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["volume_shape"] = list(self.volume_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    """Named learnable tensors; insertion order is the canonical order."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return cls({k: Tensor(v, requires_grad=True) for k, v in arrays.items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


@dataclass
class AttentionRecord:
    a_low: np.ndarray
    a_high: np.ndarray | None
    case_id: str = ""


@dataclass
class CasePrediction:
    y_low: np.ndarray
    y_high: np.ndarray | None
    y_final: np.ndarray

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.y_final))


@dataclass
class ScaleTrace:
    """Intermediate tensors of one attention scale."""

    q: Tensor
    k: Tensor
    v: Tensor
    attention: Tensor
    f_out: Tensor
    logits: Tensor


@dataclass
class ForwardTrace:
    low: ScaleTrace
    high: ScaleTrace | None
    prediction: CasePrediction
    attention: AttentionRecord


# ---------------------------------------------------------------- parameters

def _layer_specs(config: ModelConfig) -> list[tuple[str, int, int, int]]:
    c = config.base_channels
    layers = [("conv1", 1, c, 1), ("conv2", c, c, 1)]
    if config.multi_scale:
        layers += [("conv3", c, 2 * c, 2), ("conv4", 2 * c, 2 * c, 1)]
    return layers


def _ffn_widths(config: ModelConfig, scale: str) -> list[int]:
    width = config.n_phases * (config.base_channels if scale == "low" else config.high_channels)
    return [width, width, width, config.n_classes]


def expected_param_count(config: ModelConfig) -> int:
    """Parameter count when every phase shares the three encoders."""
    per_path = sum(co * ci * 27 + co + 2 * co for _, ci, co, _ in _layer_specs(config))
    total = len(PATHS) * per_path
    scales = ("low", "high") if config.multi_scale else ("low",)
    for scale in scales:
        w = _ffn_widths(config, scale)
        total += sum(a * b + b for a, b in zip(w[:-1], w[1:]))
        if config.use_phase_embedding:
            total += w[0]
    return total


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Draw fresh parameters; identical seeds give bit-identical results.

    Convolution and FC weights are He-normal (std ``sqrt(2/fan_in)``), biases
    and instance-norm shifts zero, instance-norm scales one.  Phase embeddings
    are zero-mean Gaussian with std ``sqrt(width)`` (or ``1/sqrt(width)``).
    """
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for path in PATHS:
        for name, c_in, c_out, _ in _layer_specs(config):
            prefix = f"enc_{path}.{name}"
            fan_in = c_in * 27
            params[f"{prefix}.weight"] = Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), (c_out, c_in, 3, 3, 3)), True)
            params[f"{prefix}.bias"] = Tensor(np.zeros(c_out), True)
            params[f"{prefix}.norm_gamma"] = Tensor(np.ones(c_out), True)
            params[f"{prefix}.norm_beta"] = Tensor(np.zeros(c_out), True)
    scales = ("low", "high") if config.multi_scale else ("low",)
    for scale in scales:
        if config.use_phase_embedding:
            width = config.base_channels if scale == "low" else config.high_channels
            std = math.sqrt(width) if config.phase_embedding_std == "sqrt" else 1.0 / math.sqrt(width)
            params[f"phase_{scale}"] = Tensor(rng.normal(0.0, std, (config.n_phases, width)), True)
        widths = _ffn_widths(config, scale)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            params[f"ffn_{scale}.fc{i}.weight"] = Tensor(rng.normal(0.0, math.sqrt(2.0 / a), (a, b)), True)
            params[f"ffn_{scale}.fc{i}.bias"] = Tensor(np.zeros(b), True)
    return params


# ---------------------------------------------------------------- building blocks

def downsample_mask(mask) -> np.ndarray:
    """2x2x2 block maximum over the last three axes."""
    mask = np.asarray(mask)
    *lead, h, w, d = mask.shape
    if h % 2 or w % 2 or d % 2:
        raise ShapeError(f"downsample_mask needs even extents, got {(h, w, d)}")
    blocks = (mask != 0).reshape(*lead, h // 2, 2, w // 2, 2, d // 2, 2)
    return blocks.any(axis=(-5, -3, -1)).astype(np.float64)


def masked_average_pool(feature: Tensor, mask) -> Tensor:
    """Mean of ``feature[..., H, W, D, C]`` over lesion voxels, per channel."""
    return T.masked_average_pool(feature, mask)


def cross_phase_attention(q: Tensor, k: Tensor, v: Tensor, lam: float) -> tuple[Tensor, Tensor]:
    """``A = softmax(Q K^T / sqrt(C'))`` and ``F_out = lam * A V + V``.

    ``C'`` is the embedding width actually in use, so the high scale is
    scaled by ``sqrt(2C)``.
    """
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention expects equal [N, C] operands, got {q.shape}, {k.shape}, {v.shape}")
    width = q.shape[1]
    logits = T.scalar_mul(T.matmul(q, T.transpose(k, (1, 0))), 1.0 / math.sqrt(width))
    a = T.softmax_rows(logits)
    if lam == 0:
        return v, a
    return T.add(T.scalar_mul(T.matmul(a, v), lam), v), a


def _conv_block(x: Tensor, params: ModelParams, prefix: str, stride: int) -> Tensor:
    y = T.conv3d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], stride=stride, channels_last=True)
    y = T.instance_norm(y, params[f"{prefix}.norm_gamma"], params[f"{prefix}.norm_beta"],
                        eps=NORM_EPS, channels_last=True)
    return T.leaky_relu(y, LEAKY_SLOPE)


def encode(volumes, params: ModelParams, config: ModelConfig, path: str) -> tuple[Tensor, Tensor | None]:
    """Feature maps of one encoder path for a stack of phases.

    Returns ``(low [N,H,W,D,C], high [N,H/2,W/2,D/2,2C])``; ``high`` is None
    for single-scale models.
    """
    x = volumes if isinstance(volumes, Tensor) else Tensor(np.asarray(volumes, dtype=np.float64))
    x = T.reshape(x, x.shape + (1,))
    prefix = f"enc_{path}"
    low = _conv_block(_conv_block(x, params, f"{prefix}.conv1", 1), params, f"{prefix}.conv2", 1)
    if not config.multi_scale:
        return low, None
    high = _conv_block(_conv_block(low, params, f"{prefix}.conv3", 2), params, f"{prefix}.conv4", 1)
    return low, high


def _phase_masks(mask, n_phases: int, spatial: tuple[int, ...]) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape == spatial:
        mask = np.broadcast_to(mask, (n_phases,) + spatial)
    if mask.shape != (n_phases,) + spatial:
        raise ShapeError(f"mask shape {mask.shape} does not match volumes {(n_phases,) + spatial}")
    if np.any(mask.reshape(n_phases, -1).sum(axis=1) == 0):
        raise EmptyLesionError("lesion mask is empty for at least one phase")
    return mask


def embed_lesion_features(volumes, mask, params: ModelParams, config: ModelConfig) -> dict[str, dict[str, Tensor]]:
    """Lesion-level query/key/value embeddings of every phase at each scale.

    ``volumes`` is ``[N, H, W, D]``; ``mask`` is shared ``[H, W, D]`` or
    per-phase ``[N, H, W, D]``.  Returns ``{"low": {"q","k","v"}, "high": ...}``
    with ``[N, C']`` tensors, phase embeddings already added.
    """
    volumes = volumes if isinstance(volumes, Tensor) else np.asarray(volumes, dtype=np.float64)
    if volumes.ndim != 4 or volumes.shape[0] != config.n_phases:
        raise ShapeError(f"expected {config.n_phases} stacked phase volumes, got {volumes.shape}")
    masks = {"low": _phase_masks(mask, config.n_phases, tuple(volumes.shape[1:]))}
    if config.multi_scale:
        masks["high"] = downsample_mask(masks["low"])
        if np.any(masks["high"].reshape(config.n_phases, -1).sum(axis=1) == 0):
            raise EmptyLesionError("downsampled lesion mask is empty")
    out: dict[str, dict[str, Tensor]] = {scale: {} for scale in masks}
    for path in PATHS:
        low, high = encode(volumes, params, config, path)
        for scale, feature in (("low", low), ("high", high)):
            if feature is None:
                continue
            pooled = T.masked_average_pool(feature, masks[scale])
            if config.use_phase_embedding:
                pooled = T.add(pooled, params[f"phase_{scale}"])
            out[scale][path] = pooled
    return out


def _ffn(x: Tensor, params: ModelParams, scale: str) -> Tensor:
    h = T.leaky_relu(T.fully_connected(x, params[f"ffn_{scale}.fc1.weight"], params[f"ffn_{scale}.fc1.bias"]), LEAKY_SLOPE)
    h = T.leaky_relu(T.fully_connected(h, params[f"ffn_{scale}.fc2.weight"], params[f"ffn_{scale}.fc2.bias"]), LEAKY_SLOPE)
    return T.fully_connected(h, params[f"ffn_{scale}.fc3.weight"], params[f"ffn_{scale}.fc3.bias"])


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def combine_predictions(y_low: np.ndarray, y_high: np.ndarray | None, alpha: float) -> np.ndarray:
    if y_high is None:
        return np.array(y_low, dtype=np.float64)
    return alpha * np.asarray(y_low) + (1.0 - alpha) * np.asarray(y_high)


# ---------------------------------------------------------------- model

def forward_trace(volumes, mask, params: ModelParams, config: ModelConfig, case_id: str = "") -> ForwardTrace:
    embeddings = embed_lesion_features(volumes, mask, params, config)
    traces: dict[str, ScaleTrace] = {}
    for scale, qkv in embeddings.items():
        f_out, a = cross_phase_attention(qkv["q"], qkv["k"], qkv["v"], config.lam)
        flat = T.reshape(f_out, (f_out.size,))
        traces[scale] = ScaleTrace(qkv["q"], qkv["k"], qkv["v"], a, f_out, _ffn(flat, params, scale))
    low, high = traces["low"], traces.get("high")
    y_low = _softmax(low.logits.data)
    y_high = None if high is None else _softmax(high.logits.data)
    prediction = CasePrediction(y_low, y_high, combine_predictions(y_low, y_high, config.alpha))
    record = AttentionRecord(low.attention.data.copy(), None if high is None else high.attention.data.copy(), case_id)
    return ForwardTrace(low, high, prediction, record)


def forward(volumes, mask, params: ModelParams, config: ModelConfig, case_id: str = "") -> tuple[CasePrediction, AttentionRecord]:
    trace = forward_trace(volumes, mask, params, config, case_id)
    return trace.prediction, trace.attention


def loss_from_trace(trace: ForwardTrace, label: int, config: ModelConfig) -> Tensor:
    total = T.cross_entropy(trace.low.logits, label)
    if trace.high is not None:
        total = T.add(total, T.scalar_mul(T.cross_entropy(trace.high.logits, label), config.beta))
    return total


def loss(volumes, mask, label: int, params: ModelParams, config: ModelConfig) -> Tensor:
    """Cross-entropy of the low head plus ``beta`` times that of the high head."""
    return loss_from_trace(forward_trace(volumes, mask, params, config), label, config)
