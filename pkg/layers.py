"""
Structural building blocks: sparsity-invariant convolution with observation
mask propagation, masked pooling, residual blocks and residual up-projection.

Blocks read their weights from a ParamGroup under a dotted prefix, e.g.
`demo.block0.conv1.weight`; the matching `init_*` helpers register them.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ConfigError, MaskError, ShapeError
from tensor_core import (
    EPSILON, ParamGroup, Tensor, add, add_bias, apply_mask, conv2d, nearest_upsample2x, relu, scale,
    make_result,
)

logger = logging.getLogger(__name__)


class ObservationMask:
    """Binary Bx1xHxW validity map; carries no gradient"""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, None]
        elif arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[1] != 1:
            raise ShapeError(f"observation mask must be Bx1xHxW, got {arr.shape}", dimension=1)
        if not np.all((arr == 0.0) | (arr == 1.0)):
            bad = arr[(arr != 0.0) & (arr != 1.0)]
            raise MaskError(f"observation mask must be binary, found value {bad.flat[0]!r}")
        self.data = arr

    @classmethod
    def from_depth(cls, depth: np.ndarray) -> "ObservationMask":
        """Mask of pixels holding a positive finite depth"""
        depth = np.asarray(depth, dtype=np.float64)
        return cls((np.isfinite(depth) & (depth > 0)).astype(np.float64))

    @classmethod
    def zeros(cls, batch: int, height: int, width: int) -> "ObservationMask":
        return cls(np.zeros((batch, 1, height, width)))

    @classmethod
    def ones(cls, batch: int, height: int, width: int) -> "ObservationMask":
        return cls(np.ones((batch, 1, height, width)))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def count(self) -> int:
        return int(self.data.sum())

    def density(self) -> float:
        return float(self.data.mean())

    def __repr__(self):
        return f"ObservationMask(shape={self.shape}, count={self.count()})"


def as_mask(value) -> ObservationMask:
    return value if isinstance(value, ObservationMask) else ObservationMask(value)


def _check_aligned(features: Tensor, mask: ObservationMask, op: str):
    if features.data.ndim != 4:
        raise ShapeError(f"{op}: features must be BxCxHxW, got {features.shape}")
    for dim in (0, 2, 3):
        if features.shape[dim] != mask.shape[dim]:
            raise ShapeError(
                f"{op}: mask size {mask.shape[dim]} != feature size {features.shape[dim]} "
                f"at dimension {dim}", dimension=dim)


@dataclass
class SparseConvParams:
    weight: Tensor
    bias: Tensor
    epsilon: float = EPSILON

    def validate(self):
        if self.epsilon <= 0:
            raise ConfigError(f"sparse conv epsilon must be positive, got {self.epsilon}")
        k = self.weight.shape[-1]
        if k % 2 == 0 or self.weight.shape[-2] != k:
            raise ConfigError(f"sparse conv kernel must be square and odd, got {self.weight.shape[-2:]}")

    @classmethod
    def from_group(cls, group: ParamGroup, prefix: str, epsilon: float = EPSILON) -> "SparseConvParams":
        return cls(group[f"{prefix}.weight"], group[f"{prefix}.bias"], epsilon)


def _window_sums(mask: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    padded = np.pad(mask, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else mask
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return windows.sum(axis=(4, 5))


def mask_maxpool(mask: ObservationMask, k: int, stride: int = 1, pad: int = 0) -> ObservationMask:
    """1 wherever any pixel of the KxK window is observed"""
    mask = as_mask(mask)
    padded = np.pad(mask.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else mask.data
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return ObservationMask(windows.max(axis=(4, 5)))


def sparse_conv(features: Tensor, mask: ObservationMask, p: SparseConvParams,
                stride: int = 1, pad: int = 0) -> Tuple[Tensor, ObservationMask]:
    """
    Sparsity-invariant convolution.

    out = conv(mask * features) / (window mask count + eps) + bias, and the
    mask is expanded by a KxK max-pool. Windows with no observation yield
    exactly the bias.
    """
    mask = as_mask(mask)
    p.validate()
    _check_aligned(features, mask, "sparse_conv")
    k = p.weight.shape[-1]

    observed = apply_mask(features, mask.data)
    numerator = conv2d(observed, p.weight, None, stride=stride, pad=pad)
    counts = _window_sums(mask.data, k, stride, pad)
    normalized = scale(numerator, 1.0 / (counts + p.epsilon))
    return add_bias(normalized, p.bias), mask_maxpool(mask, k, stride, pad)


def masked_avg_pool(features: Tensor, mask: ObservationMask, window: int = 0) -> Tensor:
    """
    Average features over observed pixels of each non-overlapping window and
    broadcast the mean back over the window; window 0 means the whole image.

    Values are sorted inside each window before summing, so relabeling which
    observed pixel holds which value leaves the result bitwise unchanged.
    """
    mask = as_mask(mask)
    _check_aligned(features, mask, "masked_avg_pool")
    batch, channels, height, width = features.shape
    if window < 0:
        raise ShapeError(f"masked_avg_pool: negative window {window}")
    tile_h, tile_w = (height, width) if window == 0 else (window, window)
    if height % tile_h or width % tile_w:
        raise ShapeError(
            f"masked_avg_pool: window {window} does not divide {height}x{width}",
            dimension=2 if height % tile_h else 3)
    rows, cols = height // tile_h, width // tile_w

    def to_tiles(arr: np.ndarray) -> np.ndarray:
        c = arr.shape[1]
        return (arr.reshape(batch, c, rows, tile_h, cols, tile_w)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(batch, c, rows, cols, tile_h * tile_w))

    def from_tiles(arr: np.ndarray) -> np.ndarray:
        # (B, C, rows, cols) -> (B, C, H, W)
        return np.repeat(np.repeat(arr, tile_h, axis=2), tile_w, axis=3)

    keep = mask.data > 0
    values = to_tiles(np.where(keep, features.data, 0.0))
    counts = to_tiles(mask.data).sum(axis=-1)
    denom = np.maximum(counts, 1.0)
    means = np.sort(values, axis=-1).sum(axis=-1) / denom
    out = from_tiles(means)

    def backward(g: np.ndarray):
        tile_grad = to_tiles(g).sum(axis=-1) / denom
        return (np.where(keep, from_tiles(tile_grad), 0.0),)

    return make_result(out, (features,), "masked_avg_pool", backward)


def residual_block(x: Tensor, params: ParamGroup, prefix: str) -> Tensor:
    """relu(x + conv3x3(relu(conv3x3(x))))"""
    w1 = params[f"{prefix}.conv1.weight"]
    w2 = params[f"{prefix}.conv2.weight"]
    if w1.shape[1] != x.shape[1] or w2.shape[0] != x.shape[1]:
        raise ShapeError(
            f"residual_block '{prefix}': block expects {w1.shape[1]} channels, input has {x.shape[1]}",
            dimension=1)
    hidden = relu(conv2d(x, w1, params[f"{prefix}.conv1.bias"], stride=1, pad=1))
    return relu(add(x, conv2d(hidden, w2, params[f"{prefix}.conv2.bias"], stride=1, pad=1)))


def residual_up_projection(x: Tensor, params: ParamGroup, prefix: str) -> Tensor:
    """Nearest 2x upsample, then relu(5x5 -> relu -> 3x3 branch + 5x5 projection); halves channels"""
    channels = x.shape[1]
    if channels % 2:
        raise ShapeError(f"residual_up_projection '{prefix}': odd channel count {channels}", dimension=1)
    up = nearest_upsample2x(x)
    main = relu(conv2d(up, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], pad=2))
    main = conv2d(main, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"], pad=1)
    projection = conv2d(up, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"], pad=2)
    return relu(add(main, projection))


def init_conv(group: ParamGroup, prefix: str, out_channels: int, in_channels: int, kernel: int,
              rng: np.random.Generator, gain: float = 1.0, bias: float = 0.0):
    """He-normal weights scaled by `gain`, constant bias"""
    std = gain * np.sqrt(2.0 / (in_channels * kernel * kernel))
    group.add(f"{prefix}.weight", rng.normal(0.0, std, size=(out_channels, in_channels, kernel, kernel)))
    group.add(f"{prefix}.bias", np.full(out_channels, bias, dtype=np.float64))


def init_residual_block(group: ParamGroup, prefix: str, channels: int, rng: np.random.Generator):
    init_conv(group, f"{prefix}.conv1", channels, channels, 3, rng)
    # small residual branch keeps long stacks close to identity at start
    init_conv(group, f"{prefix}.conv2", channels, channels, 3, rng, gain=0.1)


def init_up_projection(group: ParamGroup, prefix: str, in_channels: int, rng: np.random.Generator):
    if in_channels % 2:
        raise ConfigError(f"up-projection '{prefix}' needs an even channel count, got {in_channels}")
    out_channels = in_channels // 2
    init_conv(group, f"{prefix}.conv1", out_channels, in_channels, 5, rng)
    init_conv(group, f"{prefix}.conv2", out_channels, out_channels, 3, rng, gain=0.5)
    init_conv(group, f"{prefix}.proj", out_channels, in_channels, 5, rng, gain=0.5)
