"""
Depth completion networks.

The inductive model runs a context encoder over RGB and a sparsity-invariant
depth encoder over the sparse depth, then fuses them per pixel:

    demonstrate: r_i = h(x_i, y_i) on every pixel
    aggregate:   r   = mean of r_i over observed pixels of each window
    predict:     depth = g(x, r)

Baselines for ablation share the same encoders: a vanilla late-fusion net
(concat + 9 residual blocks), a context-only monocular net and an
early-fusion net that feeds sparse depth into the context encoder.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from errors import ConfigError, MaskMismatchError, ShapeError
from layers import (
    ObservationMask, SparseConvParams, as_mask, init_conv, init_residual_block, init_up_projection,
    masked_avg_pool, residual_block, residual_up_projection, sparse_conv,
)
from prng import generator_for
from tensor_core import (
    EPSILON, ParamGroup, Tensor, add, apply_mask, concat_channels, conv2d, relu,
)

logger = logging.getLogger(__name__)

VARIANTS = ("inductive", "vanilla", "context_only", "early_fusion")
DEPTH_KERNELS = (11, 7, 5, 3, 3)
DEMONSTRATION_BLOCKS = 4
PREDICTION_BLOCKS = 5
VANILLA_BLOCKS = DEMONSTRATION_BLOCKS + PREDICTION_BLOCKS
# Positive start keeps the final ReLU clamp from zeroing every gradient
HEAD_BIAS_INIT = 1.0


@dataclass
class ModelConfig:
    variant: str = "inductive"
    context_widths: Tuple[int, int, int] = (16, 32, 64)
    context_channels: int = 16
    depth_channels: int = 16
    demo_channels: int = 32
    depth_encoder_layers: int = 3
    aggregation_window: int = 0
    epsilon: float = EPSILON

    def decoder_widths(self) -> Tuple[int, int, int]:
        """Output channels of the three up-projection stages"""
        w1, w2, w3 = self.context_widths
        u1 = w3 // 2
        u2 = (u1 + w2) // 2
        u3 = (u2 + w1) // 2
        return u1, u2, u3

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown model variant '{self.variant}', expected one of {VARIANTS}")
        if self.depth_encoder_layers not in (3, 5):
            raise ConfigError(f"depth_encoder_layers must be 3 or 5, got {self.depth_encoder_layers}")
        if self.aggregation_window < 0:
            raise ConfigError(f"aggregation_window must be >= 0, got {self.aggregation_window}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if len(self.context_widths) != 3 or min(self.context_widths) < 1:
            raise ConfigError(f"context_widths must be three positive ints, got {self.context_widths}")
        for name in ("context_channels", "depth_channels", "demo_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        w1, w2, w3 = self.context_widths
        u1, u2, _ = self.decoder_widths()
        for stage, channels in ((1, w3), (2, u1 + w2), (3, u2 + w1)):
            if channels % 2:
                raise ConfigError(
                    f"context_widths {self.context_widths} give odd input ({channels}) "
                    f"to up-projection stage {stage}")


@dataclass
class Model:
    """Parameter groups plus the config that shaped them"""
    config: ModelConfig
    groups: Dict[str, ParamGroup] = field(default_factory=dict)

    def group(self, name: str) -> ParamGroup:
        return self.groups[name]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for group_name, group in self.groups.items():
            for name, tensor in group.items():
                yield f"{group_name}.{name}", tensor

    def num_parameters(self) -> int:
        return sum(group.num_parameters() for group in self.groups.values())

    def zero_grad(self):
        for group in self.groups.values():
            group.zero_grad()


def _build_context_encoder(config: ModelConfig, in_channels: int, seed: int) -> ParamGroup:
    rng = generator_for(seed, "init", "context_encoder", in_channels)
    group = ParamGroup("context_encoder")
    w1, w2, w3 = config.context_widths
    u1, u2, u3 = config.decoder_widths()
    init_conv(group, "stem", w1, in_channels, 3, rng)
    for stage, (c_in, c_out) in enumerate(((w1, w1), (w1, w2), (w2, w3)), start=1):
        init_conv(group, f"down{stage}.conv1", c_out, c_in, 3, rng)
        init_conv(group, f"down{stage}.conv2", c_out, c_out, 3, rng, gain=0.1)
        init_conv(group, f"down{stage}.proj", c_out, c_in, 1, rng, gain=0.5)
    init_up_projection(group, "up1", w3, rng)
    init_up_projection(group, "up2", u1 + w2, rng)
    init_up_projection(group, "up3", u2 + w1, rng)
    init_conv(group, "head", config.context_channels, u3 + w1, 1, rng)
    return group


def _build_depth_encoder(config: ModelConfig, seed: int) -> ParamGroup:
    rng = generator_for(seed, "init", "depth_encoder")
    group = ParamGroup("depth_encoder")
    in_channels = 1
    for layer, kernel in enumerate(DEPTH_KERNELS[:config.depth_encoder_layers]):
        init_conv(group, f"scn{layer}", config.depth_channels, in_channels, kernel, rng)
        in_channels = config.depth_channels
    # only used while pretraining the encoder on its own
    init_conv(group, "head", 1, config.depth_channels, 1, rng, gain=0.5)
    return group


def _build_block_stack(name: str, in_channels: int, width: int, blocks: int,
                       seed: int, with_head: bool) -> ParamGroup:
    rng = generator_for(seed, "init", name, in_channels)
    group = ParamGroup(name)
    init_conv(group, "fuse", width, in_channels, 1, rng)
    for index in range(blocks):
        init_residual_block(group, f"block{index}", width, rng)
    if with_head:
        init_conv(group, "head", 1, width, 1, rng, gain=0.5, bias=HEAD_BIAS_INIT)
    return group


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Initialize every parameter group the variant needs, deterministic in seed"""
    config.validate()
    c = config
    model = Model(config=c)
    if c.variant == "inductive":
        model.groups["context_encoder"] = _build_context_encoder(c, 3, seed)
        model.groups["depth_encoder"] = _build_depth_encoder(c, seed)
        model.groups["demonstration"] = _build_block_stack(
            "demonstration", c.context_channels + c.depth_channels, c.demo_channels,
            DEMONSTRATION_BLOCKS, seed, with_head=False)
        model.groups["prediction"] = _build_block_stack(
            "prediction", c.context_channels + c.demo_channels, c.demo_channels,
            PREDICTION_BLOCKS, seed, with_head=True)
    elif c.variant == "vanilla":
        model.groups["context_encoder"] = _build_context_encoder(c, 3, seed)
        model.groups["depth_encoder"] = _build_depth_encoder(c, seed)
        model.groups["fusion"] = _build_block_stack(
            "fusion", c.context_channels + c.depth_channels, c.demo_channels,
            VANILLA_BLOCKS, seed, with_head=True)
    elif c.variant == "context_only":
        model.groups["context_encoder"] = _build_context_encoder(c, 3, seed)
        model.groups["prediction"] = _build_block_stack(
            "prediction", c.context_channels, c.demo_channels, PREDICTION_BLOCKS, seed, with_head=True)
    else:
        model.groups["context_encoder"] = _build_context_encoder(c, 4, seed)
        model.groups["prediction"] = _build_block_stack(
            "prediction", c.context_channels, c.demo_channels, PREDICTION_BLOCKS, seed, with_head=True)
    logger.debug(f"Built {c.variant} model with {model.num_parameters()} parameters")
    return model


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=np.float64)
    while arr.ndim < 4:
        arr = arr[None]
    return Tensor(arr)


def _check_depth_mask(sparse_depth: Tensor, mask: ObservationMask, strict: bool):
    if sparse_depth.data.ndim != 4 or sparse_depth.shape[1] != 1:
        raise ShapeError(f"sparse depth must be Bx1xHxW, got {sparse_depth.shape}", dimension=1)
    if sparse_depth.shape != mask.shape:
        raise ShapeError(f"sparse depth {sparse_depth.shape} and mask {mask.shape} are not aligned")
    if strict:
        stray = (mask.data == 0) & (sparse_depth.data != 0)
        if stray.any():
            raise MaskMismatchError(
                f"sparse depth is nonzero at {int(stray.sum())} pixels where the mask is 0")


def _stack(x: Tensor, group: ParamGroup, blocks: int) -> Tensor:
    h = relu(conv2d(x, group["fuse.weight"], group["fuse.bias"]))
    for index in range(blocks):
        h = residual_block(h, group, f"block{index}")
    return h


def _head(h: Tensor, group: ParamGroup, clamp: bool) -> Tensor:
    depth = conv2d(h, group["head.weight"], group["head.bias"])
    # depth is nonnegative
    return relu(depth) if clamp else depth


def residual_downsample(x: Tensor, params: ParamGroup, prefix: str) -> Tensor:
    """Stride-2 residual stage: relu(conv3x3(relu(conv3x3/2(x))) + conv1x1/2(x))"""
    h = relu(conv2d(x, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], stride=2, pad=1))
    h = conv2d(h, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"], pad=1)
    shortcut = conv2d(x, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"], stride=2)
    return relu(add(h, shortcut))


def depth_encoder(sparse_depth, mask, model: Model, strict: bool = True) -> Tuple[Tensor, ObservationMask]:
    """Stack of sparse convolutions (11, 7, 5[, 3, 3]) with ReLU; keeps HxW"""
    sparse_depth = _as_tensor(sparse_depth)
    mask = as_mask(mask)
    _check_depth_mask(sparse_depth, mask, strict)
    group = model.group("depth_encoder")
    features, current = sparse_depth, mask
    for layer, kernel in enumerate(DEPTH_KERNELS[:model.config.depth_encoder_layers]):
        params = SparseConvParams.from_group(group, f"scn{layer}", model.config.epsilon)
        features, current = sparse_conv(features, current, params, stride=1, pad=kernel // 2)
        features = relu(features)
    return features, current


def depth_pretrain_head(features: Tensor, mask: ObservationMask, model: Model) -> Tensor:
    """1x1 sparse conv regressing depth straight from encoder features"""
    params = SparseConvParams.from_group(model.group("depth_encoder"), "head", model.config.epsilon)
    depth, _ = sparse_conv(features, mask, params)
    return depth


def context_encoder(rgb, model: Model) -> Tensor:
    """
    Encoder-decoder over the image: three stride-2 residual stages, three
    residual up-projections back to full resolution, each joined by a
    channel-concat skip from the encoder stage of matching resolution.
    """
    rgb = _as_tensor(rgb)
    group = model.group("context_encoder")
    expected = group["stem.weight"].shape[1]
    if rgb.data.ndim != 4 or rgb.shape[1] != expected:
        raise ShapeError(f"context encoder expects {expected} input channels, got {rgb.shape}", dimension=1)
    height, width = rgb.shape[2:]
    if height % 8 or width % 8:
        raise ShapeError(f"image size {height}x{width} must be divisible by 8",
                         dimension=2 if height % 8 else 3)

    s0 = relu(conv2d(rgb, group["stem.weight"], group["stem.bias"], pad=1))
    e1 = residual_downsample(s0, group, "down1")
    e2 = residual_downsample(e1, group, "down2")
    e3 = residual_downsample(e2, group, "down3")

    d1 = residual_up_projection(e3, group, "up1")
    d2 = residual_up_projection(concat_channels(d1, e2), group, "up2")
    d3 = residual_up_projection(concat_channels(d2, e1), group, "up3")
    return relu(conv2d(concat_channels(d3, s0), group["head.weight"], group["head.bias"]))


def demonstrate(x: Tensor, y: Tensor, mask, model: Model) -> Tensor:
    """r_i = h(x_i, y_i), computed densely; only observed pixels are aggregated"""
    mask = as_mask(mask)
    if x.shape[2:] != y.shape[2:] or x.shape[2:] != mask.shape[2:]:
        raise ShapeError(f"demonstrate: context {x.shape}, depth {y.shape}, mask {mask.shape} not aligned")
    return _stack(concat_channels(x, y), model.group("demonstration"), DEMONSTRATION_BLOCKS)


def aggregate(r: Tensor, mask, window: int) -> Tensor:
    return masked_avg_pool(r, as_mask(mask), window)


def predict(x: Tensor, r_agg: Optional[Tensor], model: Model, clamp: bool = True) -> Tensor:
    """
    Depth from context features and the aggregated demonstration.

    With clamp=False the head output is returned before the nonnegative
    clamp; training scores that raw map so pixels the clamp would zero still
    receive a gradient pushing them back up.
    """
    fused = x if r_agg is None else concat_channels(x, r_agg)
    group = model.group("prediction")
    return _head(_stack(fused, group, PREDICTION_BLOCKS), group, clamp)


def forward(rgb, sparse_depth, mask, model: Model, strict: bool = True, clamp: bool = True) -> Tensor:
    """context_encoder -> depth_encoder -> demonstrate -> aggregate -> predict"""
    mask = as_mask(mask)
    x = context_encoder(rgb, model)
    y, _ = depth_encoder(sparse_depth, mask, model, strict=strict)
    r = demonstrate(x, y, mask, model)
    r_agg = aggregate(r, mask, model.config.aggregation_window)
    return predict(x, r_agg, model, clamp)


def forward_vanilla_baseline(rgb, sparse_depth, mask, model: Model, strict: bool = True,
                             clamp: bool = True) -> Tensor:
    """Plain late fusion: concat(x, y) + 9 residual blocks, no aggregation"""
    mask = as_mask(mask)
    x = context_encoder(rgb, model)
    y, _ = depth_encoder(sparse_depth, mask, model, strict=strict)
    return fuse_late(x, y, model, clamp)


def fuse_late(x: Tensor, y: Tensor, model: Model, clamp: bool = True) -> Tensor:
    group = model.group("fusion")
    return _head(_stack(concat_channels(x, y), group, VANILLA_BLOCKS), group, clamp)


def forward_context_only(rgb, model: Model, clamp: bool = True) -> Tensor:
    """Monocular baseline; sparse depth never enters"""
    return predict(context_encoder(rgb, model), None, model, clamp)


def forward_early_fusion(rgb, sparse_depth, mask, model: Model, strict: bool = True,
                         clamp: bool = True) -> Tensor:
    """Sparse depth enters the context encoder as a fourth input channel"""
    mask = as_mask(mask)
    sparse_depth = _as_tensor(sparse_depth)
    _check_depth_mask(sparse_depth, mask, strict)
    observed = apply_mask(sparse_depth, mask.data)
    return predict(context_encoder(concat_channels(_as_tensor(rgb), observed), model), None, model, clamp)


ForwardFn = Callable[..., Tensor]

FORWARD_FUNCTIONS: Dict[str, ForwardFn] = {
    "inductive": forward,
    "vanilla": forward_vanilla_baseline,
    "context_only": lambda rgb, sparse_depth, mask, model, strict=True, clamp=True:
        forward_context_only(rgb, model, clamp),
    "early_fusion": forward_early_fusion,
}


def forward_for(model: Model) -> ForwardFn:
    """Uniform (rgb, sparse_depth, mask, model, strict, clamp) entry point for the variant"""
    return FORWARD_FUNCTIONS[model.config.variant]


def demonstration_receptive_radius() -> int:
    """Pixels of y that can influence one r_i, as a Chebyshev radius"""
    return DEMONSTRATION_BLOCKS * 2


def context_receptive_radius() -> int:
    """
    Conservative Chebyshev radius (input pixels) beyond which the context
    encoder output ignores the image, counting each kernel at its stride
    and one coarse pixel per nearest upsampling.
    """
    radius = 1  # stem
    spacing = 1
    for _ in range(3):
        radius += 1 * spacing        # 3x3 stride-2 conv reads the finer grid
        spacing *= 2
        radius += 1 * spacing        # 3x3 conv on the coarser grid
    for _ in range(3):
        radius += spacing            # nearest upsampling
        spacing //= 2
        radius += 2 * spacing + 1 * spacing  # 5x5 then 3x3
    return radius


def group_names(model: Model) -> List[str]:
    return list(model.groups)
