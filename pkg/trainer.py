"""
Three-phase SGD training: context pretrain, depth pretrain, then joint.

Iteration order and every random draw are derived from the configured seed,
and the only mutable random state (a SplitMix64 stream) is stored in the
checkpoint, so a resumed run replays the uninterrupted one exactly.
"""
import logging
import math
import re
import time
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from data_sim import Frame, SamplerConfig, SAMPLER_MODES, augment, band_crop, frames_by_id, load_split, sample_sparse
from errors import ConfigError, NonFiniteLossError
from fusion_net import (
    VARIANTS, Model, ModelConfig, build_model, context_encoder, depth_encoder, depth_pretrain_head,
    forward_for, fuse_late, predict,
)
from graceful_shutdown import GracefulShutdownManager, shutdown_manager
from monitoring import TrainingMonitor
from prng import SplitMix64, derive_seed, generator_for
from tensor_core import ParamGroup, Tensor, backward, l1_loss, sgd_step

logger = logging.getLogger(__name__)

PRETRAINED_VARIANTS = ("inductive", "vanilla")
TRUE_WORDS = ("1", "true", "yes", "on")
FALSE_WORDS = ("0", "false", "no", "off")
# "#" opens a comment only at the start of a line or after whitespace
COMMENT = re.compile(r"(^|\s)#")
PATH_KEYS = ("dataset", "split", "checkpoint", "loss_log")


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    aggregation_window: int = 0
    depth_encoder_layers: int = 3
    model_variant: str = "inductive"
    samples: int = 200
    sampler_mode: str = "uniform"
    # -1 selects the default middle band
    band_top: int = -1
    band_bottom: int = -1
    train_densities: Tuple[int, ...] = ()
    dataset: str = ""
    split: str = "train"
    checkpoint: str = ""
    loss_log: str = ""
    augment: bool = True
    loss_on_observed: bool = True
    context_pretrain_fraction: float = 0.2
    depth_pretrain_fraction: float = 0.2
    lr_step_epochs: int = 0
    lr_gamma: float = 0.1
    context_widths: Tuple[int, ...] = (16, 32, 64)
    context_channels: int = 16
    depth_channels: int = 16
    demo_channels: int = 32

    def validate(self):
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr must be a finite value >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ConfigError(f"only batch_size 1 is supported, got {self.batch_size}")
        if self.sampler_mode not in SAMPLER_MODES:
            raise ConfigError(f"unknown sampler_mode '{self.sampler_mode}', expected one of {SAMPLER_MODES}")
        if self.samples < 0 or any(d < 0 for d in self.train_densities):
            raise ConfigError("sample counts must be >= 0")
        if (self.band_top < 0) != (self.band_bottom < 0):
            raise ConfigError("band_top and band_bottom must be set together")
        if self.band_top >= 0 and self.band_bottom <= self.band_top:
            raise ConfigError(f"empty band [{self.band_top}, {self.band_bottom})")
        for name in ("context_pretrain_fraction", "depth_pretrain_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.context_pretrain_fraction + self.depth_pretrain_fraction > 1.0:
            raise ConfigError("pretraining fractions add up to more than 1")
        if self.lr_step_epochs < 0 or self.lr_gamma <= 0:
            raise ConfigError("lr_step_epochs must be >= 0 and lr_gamma > 0")
        if self.model_variant not in VARIANTS:
            raise ConfigError(f"unknown model_variant '{self.model_variant}', expected one of {VARIANTS}")
        for name in PATH_KEYS:
            value = getattr(self, name)
            if value != value.strip() or "\n" in value or re.search(r"\s#", value):
                raise ConfigError(f"{name} '{value}' would not survive the key=value config text")
        self.model_config().validate()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self.model_variant,
            context_widths=tuple(self.context_widths),
            context_channels=self.context_channels,
            depth_channels=self.depth_channels,
            demo_channels=self.demo_channels,
            depth_encoder_layers=self.depth_encoder_layers,
            aggregation_window=self.aggregation_window,
        )

    def band_rows(self) -> Optional[Tuple[int, int]]:
        return (self.band_top, self.band_bottom) if self.band_top >= 0 else None

    def sampler_config(self, samples: Optional[int] = None, seed: Optional[int] = None) -> SamplerConfig:
        return SamplerConfig(
            samples=self.samples if samples is None else samples,
            seed=self.seed if seed is None else seed,
            mode=self.sampler_mode,
            band_rows=self.band_rows(),
        )

    def to_text(self) -> str:
        """Sorted key=value lines; equal configs give equal bytes"""
        return "".join(f"{name}={_format_value(getattr(self, name))}\n"
                       for name in sorted(f.name for f in fields(self)))

    @classmethod
    def from_text(cls, text: str, overrides: Sequence[str] = ()) -> "TrainConfig":
        values: Dict[str, str] = {}
        for line_number, raw in enumerate(text.splitlines(), start=1):
            line = strip_comment(raw).strip()
            if line:
                key, value = _split_assignment(line, f"line {line_number}")
                values[key] = value
        for override in overrides:
            key, value = _split_assignment(override, f"override '{override}'")
            values[key] = value
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: Dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key '{key}'")
            kwargs[key] = _parse_value(key, value, types[key])
        config = cls(**kwargs)
        config.validate()
        return config


def strip_comment(line: str) -> str:
    match = COMMENT.search(line)
    return line[:match.start()] if match else line


def _split_assignment(line: str, where: str) -> Tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"{where}: expected key=value, got '{line}'")
    key, value = line.split("=", 1)
    key = key.strip()
    if not key or key not in {f.name for f in fields(TrainConfig)}:
        raise ConfigError(f"{where}: unknown config key '{key}'")
    return key, value.strip()


def _parse_value(key: str, value: str, kind):
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered in TRUE_WORDS:
                return True
            if lowered in FALSE_WORDS:
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind is str:
            return value
        return tuple(int(part) for part in value.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"invalid value '{value}' for '{key}'")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def load_config(path: str, overrides: Sequence[str] = ()) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        return TrainConfig.from_text(f.read(), overrides)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: List[Tuple[int, str, float]] = field(default_factory=list)
    interrupted: bool = False


class Trainer:
    """Owns the model, the iteration counter and the sampling stream"""

    def __init__(self, config: TrainConfig, frames: Sequence[Frame], model: Optional[Model] = None,
                 shutdown: Optional[GracefulShutdownManager] = None, monitor: Optional[TrainingMonitor] = None):
        config.validate()
        if not frames:
            raise ConfigError("training needs at least one frame")
        self.config = config
        self.frames = frames_by_id(frames)
        self.model = model if model is not None else build_model(config.model_config(), config.seed)
        self.shutdown = shutdown if shutdown is not None else shutdown_manager
        self.monitor = monitor if monitor is not None else TrainingMonitor()
        self.iteration = 0
        self.stream = SplitMix64(derive_seed(config.seed, "train_stream"))
        self.total_iterations = config.epochs * len(self.frames)
        self.context_end, self.depth_end = self._phase_bounds()

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, frames: Sequence[Frame], config: Optional[TrainConfig] = None,
                        **kwargs) -> "Trainer":
        config = config or TrainConfig.from_text(ckpt.config_text)
        trainer = cls(config, frames, **kwargs)
        ckpt.apply_to(trainer.model)
        trainer.iteration = ckpt.iteration
        trainer.stream.state = ckpt.prng_state
        return trainer

    def _phase_bounds(self) -> Tuple[int, int]:
        if self.config.model_variant not in PRETRAINED_VARIANTS:
            return 0, 0
        context = int(round(self.total_iterations * self.config.context_pretrain_fraction))
        depth = int(round(self.total_iterations * self.config.depth_pretrain_fraction))
        depth = min(depth, self.total_iterations - context)
        return context, context + depth

    def phase_at(self, iteration: int) -> str:
        if iteration < self.context_end:
            return "context"
        if iteration < self.depth_end:
            return "depth"
        return "joint"

    def learning_rate(self, iteration: int) -> float:
        if self.config.lr_step_epochs == 0:
            return self.config.lr
        epoch = iteration // len(self.frames)
        return self.config.lr * self.config.lr_gamma ** (epoch // self.config.lr_step_epochs)

    def frame_at(self, iteration: int) -> Frame:
        epoch, index = divmod(iteration, len(self.frames))
        order = generator_for(self.config.seed, "epoch_order", epoch).permutation(len(self.frames))
        return self.frames[order[index]]

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.from_model(self.model, self.iteration, self.stream.state, self.config.to_text())

    def _trainable(self, phase: str) -> List[ParamGroup]:
        groups = self.model.groups
        if phase == "context":
            head = "prediction" if self.config.model_variant == "inductive" else "fusion"
            return [groups["context_encoder"], groups[head]]
        if phase == "depth":
            return [groups["depth_encoder"]]
        return list(groups.values())

    def _prediction(self, phase: str, rgb: np.ndarray, sparse: np.ndarray, mask) -> Tensor:
        # unclamped head output; the nonnegative clamp is for inference
        model = self.model
        batch, _, height, width = (1,) + rgb.shape
        if phase == "context":
            x = context_encoder(rgb[None], model)
            if self.config.model_variant == "inductive":
                return predict(x, Tensor(np.zeros((batch, model.config.demo_channels, height, width))), model,
                               clamp=False)
            return fuse_late(x, Tensor(np.zeros((batch, model.config.depth_channels, height, width))), model,
                             clamp=False)
        if phase == "depth":
            features, propagated = depth_encoder(sparse[None], mask, model)
            return depth_pretrain_head(features, propagated, model)
        return forward_for(model)(rgb[None], sparse[None], mask, model, clamp=False)

    def _sample_count(self, density_draw: int) -> int:
        densities = self.config.train_densities
        return densities[density_draw % len(densities)] if densities else self.config.samples

    def _largest_parameter(self) -> Tuple[str, float]:
        worst, magnitude = "", -1.0
        for name, tensor in self.model.named_parameters():
            value = float(np.nanmax(np.abs(tensor.data))) if np.isfinite(tensor.data).all() else math.inf
            if value > magnitude:
                worst, magnitude = name, value
        return worst, magnitude

    def step(self) -> Tuple[str, float]:
        """One SGD iteration on one frame; returns (phase, loss)"""
        iteration = self.iteration
        phase = self.phase_at(iteration)
        frame = self.frame_at(iteration)
        sample_seed = self.stream.next_u64()
        augment_seed = self.stream.next_u64()
        density_draw = self.stream.next_u64()

        if self.config.augment:
            frame = augment(frame, augment_seed)
        sampler = self.config.sampler_config(self._sample_count(density_draw), sample_seed)
        scored = band_crop(frame, sampler) if sampler.mode == "band" else frame
        available = scored.valid_count()
        if sampler.samples > available:
            logger.debug(f"iter {iteration}: clipping {sampler.samples} samples to {available} valid pixels")
            sampler = replace(sampler, samples=available)
        scored, sparse, mask = sample_sparse(scored, sampler)

        valid = scored.valid_gt[None]
        if not self.config.loss_on_observed:
            valid = valid * (1.0 - mask.data)

        self.model.zero_grad()
        pred = self._prediction(phase, scored.rgb, sparse, mask)
        loss = l1_loss(pred, scored.depth_gt[None], valid)
        value = float(loss.data)
        if not math.isfinite(value):
            name, magnitude = self._largest_parameter()
            logger.error(f"Non-finite loss at iteration {iteration} ({phase})")
            raise NonFiniteLossError(iteration, name, magnitude, value)

        groups = self._trainable(phase)
        backward(loss, wrt=[tensor for group in groups for tensor in group.tensors()])
        lr = self.learning_rate(iteration)
        for group in groups:
            sgd_step(group, lr, self.config.momentum)
        self.iteration += 1
        return phase, value

    def run(self, loss_log: Optional[str] = None, stop_at: Optional[int] = None) -> TrainResult:
        """Train until the schedule (or `stop_at` iterations) is done or a stop is requested"""
        end = self.total_iterations if stop_at is None else min(stop_at, self.total_iterations)
        losses: List[Tuple[int, str, float]] = []
        interrupted = False
        log_file = open(loss_log, "a" if self.iteration else "w", encoding="utf-8", newline="\n") if loss_log else None
        try:
            with self.shutdown.run_context():
                while self.iteration < end:
                    if self.shutdown.is_shutting_down():
                        logger.warning(f"Stop requested; halting at iteration {self.iteration}")
                        interrupted = True
                        break
                    started = time.perf_counter()
                    iteration = self.iteration
                    phase, value = self.step()
                    losses.append((iteration, phase, value))
                    if log_file:
                        log_file.write(f"{iteration}\t{phase}\t{value!r}\n")
                    self.monitor.record_iteration(phase, value, time.perf_counter() - started)
        finally:
            if log_file:
                log_file.close()
        logger.info(f"Training stopped at iteration {self.iteration}/{self.total_iterations}")
        return TrainResult(self.checkpoint(), losses, interrupted)


def loss_log_path(config: TrainConfig) -> Optional[str]:
    if config.loss_log:
        return config.loss_log
    return f"{config.checkpoint}.loss.tsv" if config.checkpoint else None


def train(config: TrainConfig, resume_from: Optional[str] = None,
          shutdown: Optional[GracefulShutdownManager] = None) -> TrainResult:
    """Load the dataset split, train, and save the checkpoint if a path is configured"""
    if not config.dataset:
        raise ConfigError("dataset path is required for training")
    frames = load_split(config.dataset, config.split)
    logger.info(f"Training {config.model_variant} on {len(frames)} frames for {config.epochs} epochs")
    if resume_from:
        trainer = Trainer.from_checkpoint(load_checkpoint(resume_from), frames, config, shutdown=shutdown)
        logger.info(f"Resuming from {resume_from} at iteration {trainer.iteration}")
    else:
        trainer = Trainer(config, frames, shutdown=shutdown)
    result = trainer.run(loss_log_path(config))
    if config.checkpoint:
        save_checkpoint(result.checkpoint, config.checkpoint)
    return result


def model_from_checkpoint(ckpt: Checkpoint) -> Tuple[Model, TrainConfig]:
    """Rebuild the architecture recorded in the checkpoint and load its weights"""
    config = TrainConfig.from_text(ckpt.config_text)
    model = build_model(config.model_config(), config.seed)
    ckpt.apply_to(model)
    return model, config
