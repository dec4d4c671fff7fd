"""
Synthetic scenes, LIDAR-style sparsification and augmentation, plus the
on-disk dataset layout (PPM/PFM pairs indexed by manifest.tsv).

Every function that draws random numbers takes an explicit seed and builds
its own numpy generator through prng.generator_for, so each stage can be
replayed on its own.
"""
import logging
import math
import os
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Tuple

import numpy as np

from errors import ConfigError, EmptySelectionError, ManifestError, ShapeError
from image_io import read_pfm, read_pfm_size, read_ppm, read_ppm_size, write_pfm, write_ppm
from layers import ObservationMask
from prng import derive_seed, generator_for

logger = logging.getLogger(__name__)

MIN_DEPTH = 0.5
MAX_DEPTH = 10.0
SAMPLER_MODES = ("uniform", "band", "bernoulli")
SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.tsv"

# Flat object colors; every pair differs by a full unit in some channel
PALETTE = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
])
GROUND_COLOR = np.array([0.5, 0.5, 0.5])
# Object depths come from distinct levels, so neighbouring objects differ by >= 0.4 m
OBJECT_LEVELS = np.arange(7) * 0.5 + MIN_DEPTH
OBJECT_JITTER = 0.1
# Ground spans GROUND_NEAR..GROUND_NEAR + GROUND_SPAN before the per-scene lift
GROUND_NEAR = 4.0
GROUND_SPAN = 4.0
SCENE_LIFT_RANGE = (0.0, 2.0)


@dataclass
class Frame:
    """One RGB-D sample: rgb 3xHxW in [0, 1], depth_gt and valid_gt 1xHxW"""
    rgb: np.ndarray
    depth_gt: np.ndarray
    valid_gt: np.ndarray
    id: str

    @property
    def height(self) -> int:
        return self.rgb.shape[1]

    @property
    def width(self) -> int:
        return self.rgb.shape[2]

    def validate(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ShapeError(f"frame '{self.id}': rgb must be 3xHxW, got {self.rgb.shape}", dimension=0)
        for name in ("depth_gt", "valid_gt"):
            arr = getattr(self, name)
            if arr.shape != (1,) + self.rgb.shape[1:]:
                raise ShapeError(f"frame '{self.id}': {name} {arr.shape} not aligned with rgb {self.rgb.shape}")

    def valid_mask(self) -> ObservationMask:
        return ObservationMask(self.valid_gt)

    def valid_count(self) -> int:
        return int(self.valid_gt.sum())


@dataclass
class SamplerConfig:
    samples: int = 200
    seed: int = 0
    mode: str = "uniform"
    band_rows: Optional[Tuple[int, int]] = None

    def validate(self, height: Optional[int] = None):
        if self.mode not in SAMPLER_MODES:
            raise ConfigError(f"unknown sampler mode '{self.mode}', expected one of {SAMPLER_MODES}")
        if self.samples < 0:
            raise ConfigError(f"sample count must be >= 0, got {self.samples}")
        if self.band_rows is not None and height is not None:
            top, bottom = self.band_rows
            if not 0 <= top <= bottom <= height:
                raise ConfigError(f"band rows {self.band_rows} outside a {height}-row image")

    def band_for(self, height: int) -> Tuple[int, int]:
        return self.band_rows if self.band_rows is not None else default_band(height)


def default_band(height: int) -> Tuple[int, int]:
    """Middle quarter of the rows"""
    rows = max(height // 4, 1)
    top = (height - rows) // 2
    return top, top + rows


def depth_shade(depth: np.ndarray) -> np.ndarray:
    """Brightness falls linearly from 1.0 at MIN_DEPTH to 0.4 at MAX_DEPTH"""
    return 1.0 - 0.6 * (depth - MIN_DEPTH) / (MAX_DEPTH - MIN_DEPTH)


def synth_scene(seed: int, height: int = 64, width: int = 64, difficulty: float = 0.5,
                frame_id: Optional[str] = None) -> Frame:
    """
    Ground plane receding 4 m from its bottom row, with 2-6 flat rectangles
    and ellipses in front of it. The whole scene is pushed back by a random lift
    drawn from SCENE_LIFT_RANGE. Each object gets its own palette color, shaded by
    depth relative to that lift, so the image predicts depth only up to the
    lift and the sparse samples have to supply it.

    `difficulty` in [0, 1] widens the object count range and shrinks objects.
    """
    if height % 8 or width % 8:
        raise ShapeError(f"scene size {height}x{width} must be divisible by 8",
                         dimension=1 if height % 8 else 2)
    if not 0.0 <= difficulty <= 1.0:
        raise ConfigError(f"difficulty must lie in [0, 1], got {difficulty}")
    rng = generator_for(seed, "synth_scene")

    lift = rng.uniform(*SCENE_LIFT_RANGE)
    near = GROUND_NEAR + lift
    far = near + GROUND_SPAN
    rows = np.arange(height, dtype=np.float64)[:, None]
    depth = np.broadcast_to(far + (near - far) * rows / max(height - 1, 1), (height, width)).copy()
    label = np.full((height, width), -1, dtype=np.int64)

    max_objects = 2 + int(round(4 * difficulty))
    count = int(rng.integers(2, max_objects + 1))
    levels = rng.permutation(len(OBJECT_LEVELS))[:count]
    object_depths = OBJECT_LEVELS[levels] + lift + rng.uniform(0.0, OBJECT_JITTER, size=count)
    colors = rng.permutation(len(PALETTE))[:count]
    size_scale = 1.0 - 0.5 * difficulty

    yy, xx = np.mgrid[0:height, 0:width]
    # far to near, so nearer objects occlude
    for index in np.argsort(-object_depths, kind="stable"):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        half_h = max(rng.uniform(height / 10, height / 4) * size_scale, 2.0)
        half_w = max(rng.uniform(width / 10, width / 4) * size_scale, 2.0)
        if rng.random() < 0.5:
            inside = (np.abs(yy - cy) <= half_h) & (np.abs(xx - cx) <= half_w)
        else:
            inside = ((yy - cy) / half_h) ** 2 + ((xx - cx) / half_w) ** 2 <= 1.0
        depth[inside] = object_depths[index]
        label[inside] = colors[index]

    depth = np.clip(depth, MIN_DEPTH, MAX_DEPTH)
    base = np.where(label[..., None] >= 0, PALETTE[np.maximum(label, 0)], GROUND_COLOR)
    rgb = (base * depth_shade(depth - lift)[..., None]).transpose(2, 0, 1)
    return Frame(
        rgb=np.ascontiguousarray(rgb),
        depth_gt=depth[None],
        valid_gt=np.ones((1, height, width)),
        id=frame_id if frame_id is not None else f"scene_{seed & 0xFFFFFFFFFFFFFFFF:016x}",
    )


def _scatter(frame: Frame, chosen: np.ndarray) -> Tuple[np.ndarray, ObservationMask]:
    flat = np.zeros(frame.height * frame.width)
    flat[chosen] = 1.0
    mask = flat.reshape(1, frame.height, frame.width)
    sparse = np.where(mask > 0, frame.depth_gt, 0.0)
    return sparse, ObservationMask(mask)


def uniform_sample(frame: Frame, cfg: SamplerConfig) -> Tuple[np.ndarray, ObservationMask]:
    """
    Exactly `cfg.samples` distinct valid pixels, drawn without replacement.

    Returns the sparse depth (1xHxW, zero off the samples) and its mask
    (1x1xHxW). Band mode samples the same way; callers crop first.
    """
    cfg.validate(frame.height)
    if cfg.mode == "bernoulli":
        raise ConfigError("uniform_sample does not serve bernoulli mode; use sample_sparse")
    candidates = np.flatnonzero(frame.valid_gt.reshape(-1) > 0)
    if cfg.samples > candidates.size:
        raise EmptySelectionError(
            f"frame '{frame.id}': {cfg.samples} samples requested, only {candidates.size} valid pixels")
    rng = generator_for(cfg.seed, "uniform_sample")
    chosen = np.sort(rng.choice(candidates, size=cfg.samples, replace=False))
    return _scatter(frame, chosen)


def bernoulli_sample(frame: Frame, cfg: SamplerConfig) -> Tuple[np.ndarray, ObservationMask]:
    """Keep each valid pixel with probability samples / valid count"""
    cfg.validate(frame.height)
    candidates = np.flatnonzero(frame.valid_gt.reshape(-1) > 0)
    if candidates.size == 0:
        raise EmptySelectionError(f"frame '{frame.id}' has no valid pixels to sample")
    probability = min(cfg.samples / candidates.size, 1.0)
    rng = generator_for(cfg.seed, "bernoulli_sample")
    chosen = candidates[rng.random(candidates.size) < probability]
    return _scatter(frame, chosen)


def band_crop(frame: Frame, cfg: SamplerConfig) -> Frame:
    """Invalidate ground truth outside rows [top, bottom)"""
    cfg.validate(frame.height)
    top, bottom = cfg.band_for(frame.height)
    if bottom <= top:
        raise EmptySelectionError(f"band rows [{top}, {bottom}) are empty")
    valid = frame.valid_gt.copy()
    valid[:, :top] = 0.0
    valid[:, bottom:] = 0.0
    return replace(frame, valid_gt=valid)


def sample_sparse(frame: Frame, cfg: SamplerConfig) -> Tuple[Frame, np.ndarray, ObservationMask]:
    """
    Sparsify a frame according to the sampler mode. Returns the frame that
    metrics and losses should use (band-cropped in band mode) together with
    the sparse depth and mask.
    """
    if cfg.mode == "band":
        frame = band_crop(frame, cfg)
    if cfg.mode == "bernoulli":
        sparse, mask = bernoulli_sample(frame, cfg)
    else:
        sparse, mask = uniform_sample(frame, cfg)
    return frame, sparse, mask


@dataclass
class AugmentParams:
    scale: float = 1.0
    flip: bool = False
    angle: float = 0.0
    gain: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self):
        if self.scale < 1.0:
            raise ConfigError(f"augmentation scale must be >= 1, got {self.scale}")

    def is_identity(self) -> bool:
        return (self.scale == 1.0 and not self.flip and self.angle == 0.0
                and tuple(self.gain) == (1.0, 1.0, 1.0) and tuple(self.offset) == (0.0, 0.0, 0.0))


def draw_augment_params(seed: int) -> AugmentParams:
    rng = generator_for(seed, "augment")
    return AugmentParams(
        scale=float(rng.uniform(1.0, 1.5)),
        flip=bool(rng.random() < 0.5),
        angle=float(rng.uniform(-5.0, 5.0)),
        gain=tuple(float(g) for g in rng.uniform(0.9, 1.1, size=3)),
        offset=tuple(float(o) for o in rng.uniform(-0.05, 0.05, size=3)),
    )


def _nearest(coords: np.ndarray) -> np.ndarray:
    return np.floor(coords + 0.5).astype(np.int64)


def _remap(frame: Frame, src_rows: np.ndarray, src_cols: np.ndarray) -> Frame:
    """Nearest-neighbour pull of all three maps; out-of-image sources become invalid"""
    inside = (src_rows >= 0) & (src_rows < frame.height) & (src_cols >= 0) & (src_cols < frame.width)
    r = np.clip(src_rows, 0, frame.height - 1)
    c = np.clip(src_cols, 0, frame.width - 1)
    rgb = np.where(inside, frame.rgb[:, r, c], 0.0)
    valid = np.where(inside, frame.valid_gt[:, r, c], 0.0)
    depth = np.where(valid > 0, frame.depth_gt[:, r, c], 0.0)
    return replace(frame, rgb=rgb, depth_gt=depth, valid_gt=valid)


def apply_augment(frame: Frame, params: AugmentParams) -> Frame:
    """Scale-and-crop, flip, rotate, then color jitter; geometry is shared by all maps"""
    params.validate()
    if params.is_identity():
        return frame
    out = frame
    centre_r, centre_c = (frame.height - 1) / 2.0, (frame.width - 1) / 2.0
    rows, cols = np.mgrid[0:frame.height, 0:frame.width].astype(np.float64)

    if params.scale != 1.0:
        out = _remap(out, _nearest(centre_r + (rows - centre_r) / params.scale),
                     _nearest(centre_c + (cols - centre_c) / params.scale))
        # magnified scene reads as proportionally closer
        out = replace(out, depth_gt=out.depth_gt / params.scale)

    if params.flip:
        out = replace(out, rgb=out.rgb[:, :, ::-1].copy(), depth_gt=out.depth_gt[:, :, ::-1].copy(),
                      valid_gt=out.valid_gt[:, :, ::-1].copy())

    if params.angle != 0.0:
        theta = math.radians(params.angle)
        dr, dc = rows - centre_r, cols - centre_c
        src_r = centre_r + math.cos(theta) * dr - math.sin(theta) * dc
        src_c = centre_c + math.sin(theta) * dr + math.cos(theta) * dc
        out = _remap(out, _nearest(src_r), _nearest(src_c))

    gain = np.asarray(params.gain, dtype=np.float64)[:, None, None]
    offset = np.asarray(params.offset, dtype=np.float64)[:, None, None]
    if np.any(gain != 1.0) or np.any(offset != 0.0):
        out = replace(out, rgb=np.clip(out.rgb * gain + offset, 0.0, 1.0))
    return out


def augment(frame: Frame, seed: int) -> Frame:
    return apply_augment(frame, draw_augment_params(seed))


def split_counts(total: int) -> Tuple[int, int, int]:
    """round(0.8 n) train, round(0.1 n) val, the rest test"""
    train = int(round(0.8 * total))
    val = min(int(round(0.1 * total)), total - train)
    return train, val, total - train - val


def write_dataset(out_dir: str, frames: int, height: int = 64, width: int = 64, seed: int = 0,
                  difficulty: float = 0.5) -> List[str]:
    """Render `frames` scenes into rgb/, depth/ and manifest.tsv; returns frame ids"""
    if frames < 0:
        raise ConfigError(f"frame count must be >= 0, got {frames}")
    os.makedirs(os.path.join(out_dir, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
    train, val, _ = split_counts(frames)
    lines, ids = [], []
    for index in range(frames):
        frame_id = f"frame_{index:05d}"
        frame = synth_scene(derive_seed(seed, "frame", index), height, width, difficulty, frame_id=frame_id)
        rgb_rel = f"rgb/{frame_id}.ppm"
        depth_rel = f"depth/{frame_id}.pfm"
        write_ppm(os.path.join(out_dir, rgb_rel), frame.rgb)
        write_pfm(os.path.join(out_dir, depth_rel), frame.depth_gt)
        split = "train" if index < train else "val" if index < train + val else "test"
        lines.append(f"{frame_id}\t{rgb_rel}\t{depth_rel}\t{split}\n")
        ids.append(frame_id)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8", newline="\n") as f:
        f.writelines(lines)
    logger.info(f"Wrote {frames} frames ({height}x{width}, seed {seed}) to {out_dir}")
    return ids


@dataclass(frozen=True)
class FrameRef:
    """Manifest row; `load` reads the image pair from disk"""
    id: str
    rgb_path: str
    depth_path: str
    split: str

    def load(self) -> Frame:
        rgb = read_ppm(self.rgb_path)
        depth = read_pfm(self.depth_path)
        valid = (np.isfinite(depth) & (depth > 0)).astype(np.float64)
        depth = np.where(valid > 0, depth, 0.0)
        frame = Frame(rgb=rgb, depth_gt=depth, valid_gt=valid, id=self.id)
        frame.validate()
        return frame


def dataset_manifest(directory: str) -> List[FrameRef]:
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise ManifestError(f"no {MANIFEST_NAME} in {directory}")
    refs: List[FrameRef] = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                logger.warning(f"{path}: skipping blank line {line_number}")
                continue
            fields = line.split("\t")
            if len(fields) != 4 or not all(fields):
                raise ManifestError(f"expected 4 tab-separated fields, got {len(fields)}", line_number)
            frame_id, rgb_rel, depth_rel, split = fields
            if split not in SPLITS:
                raise ManifestError(f"unknown split '{split}'", line_number)
            if frame_id in seen:
                raise ManifestError(f"duplicate frame id '{frame_id}'", line_number)
            seen.add(frame_id)
            ref = FrameRef(frame_id, os.path.join(directory, rgb_rel), os.path.join(directory, depth_rel), split)
            for file_path in (ref.rgb_path, ref.depth_path):
                if not os.path.isfile(file_path):
                    raise ManifestError(f"frame '{frame_id}': missing file {file_path}", line_number)
            rgb_size, depth_size = read_ppm_size(ref.rgb_path), read_pfm_size(ref.depth_path)
            if rgb_size != depth_size:
                raise ManifestError(
                    f"frame '{frame_id}': rgb is {rgb_size[0]}x{rgb_size[1]}, "
                    f"depth is {depth_size[0]}x{depth_size[1]}", line_number)
            refs.append(ref)
    logger.debug(f"Loaded manifest {path}: {len(refs)} frames")
    return refs


def load_split(directory: str, split: str) -> List[Frame]:
    frames = [ref.load() for ref in dataset_manifest(directory) if ref.split == split]
    if not frames:
        raise EmptySelectionError(f"no '{split}' frames in {directory}")
    return frames


def frames_by_id(frames: Iterable[Frame]) -> List[Frame]:
    return sorted(frames, key=lambda frame: frame.id)
