"""
Depth completion metrics (RMSE, REL, delta thresholds) and dataset reports.

Dataset figures are pixel-pooled: every valid pixel of every frame counts
once, as if all frames were concatenated.
"""
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from data_sim import Frame, SamplerConfig, frames_by_id, sample_sparse
from errors import EmptySelectionError, InvalidGroundTruthError, ShapeError
from fusion_net import Model, forward_for
from prng import derive_seed
from tensor_core import Tensor

logger = logging.getLogger(__name__)

DELTA_BASE = 1.25
POOLED_ID = "__pooled__"


def _arrays(pred, gt, valid):
    pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    gt = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    valid = np.asarray(getattr(valid, "data", valid), dtype=np.float64)
    if pred.size != gt.size or gt.size != valid.size:
        raise ShapeError(f"metric inputs disagree: pred {pred.shape}, gt {gt.shape}, valid {valid.shape}")
    keep = valid.reshape(-1) > 0
    if not keep.any():
        raise EmptySelectionError("no valid pixels to evaluate")
    return pred.reshape(-1)[keep], gt.reshape(-1)[keep]


def _check_positive(gt: np.ndarray):
    if np.any(gt <= 0):
        raise InvalidGroundTruthError(f"ground truth must be positive at valid pixels, min is {gt.min()}")


def _within(pred: np.ndarray, gt: np.ndarray, j: int) -> np.ndarray:
    # non-positive predictions count as failures
    positive = pred > 0
    safe = np.where(positive, pred, 1.0)
    ratio = np.maximum(safe / gt, gt / safe)
    return positive & (ratio <= DELTA_BASE ** j)


def rmse(pred, gt, valid) -> float:
    p, g = _arrays(pred, gt, valid)
    return float(math.sqrt(np.mean((p - g) ** 2)))


def rel(pred, gt, valid) -> float:
    """Mean absolute relative error"""
    p, g = _arrays(pred, gt, valid)
    _check_positive(g)
    return float(np.mean(np.abs(p - g) / g))


def delta(pred, gt, valid, j: int) -> float:
    """Percentage of valid pixels with max(pred/gt, gt/pred) <= 1.25**j"""
    if j not in (1, 2, 3):
        raise ValueError(f"delta threshold index must be 1, 2 or 3, got {j}")
    p, g = _arrays(pred, gt, valid)
    _check_positive(g)
    return 100.0 * float(np.count_nonzero(_within(p, g, j))) / p.size


@dataclass
class PixelSums:
    """Sufficient statistics for pooled metrics"""
    squared_error: float = 0.0
    relative_error: float = 0.0
    within: List[int] = field(default_factory=lambda: [0, 0, 0])
    pixels: int = 0

    @classmethod
    def of(cls, pred, gt, valid) -> "PixelSums":
        p, g = _arrays(pred, gt, valid)
        _check_positive(g)
        return cls(
            squared_error=float(np.sum((p - g) ** 2)),
            relative_error=float(np.sum(np.abs(p - g) / g)),
            within=[int(np.count_nonzero(_within(p, g, j))) for j in (1, 2, 3)],
            pixels=int(p.size),
        )

    def merge(self, other: "PixelSums"):
        self.squared_error += other.squared_error
        self.relative_error += other.relative_error
        self.within = [a + b for a, b in zip(self.within, other.within)]
        self.pixels += other.pixels

    def metrics(self) -> Dict[str, float]:
        if self.pixels == 0:
            raise EmptySelectionError("no valid pixels were evaluated")
        return {
            "rmse": math.sqrt(self.squared_error / self.pixels),
            "rel": self.relative_error / self.pixels,
            "d1": 100.0 * self.within[0] / self.pixels,
            "d2": 100.0 * self.within[1] / self.pixels,
            "d3": 100.0 * self.within[2] / self.pixels,
        }


@dataclass
class FrameMetrics:
    frame_id: str
    rmse: float
    rel: float
    d1: float
    d2: float
    d3: float
    n_pixels: int


@dataclass
class MetricsReport:
    rmse: float
    rel: float
    delta1: float
    delta2: float
    delta3: float
    pixel_count: int
    frame_count: int
    rows: List[FrameMetrics] = field(default_factory=list)

    @classmethod
    def from_sums(cls, sums: PixelSums, rows: List[FrameMetrics]) -> "MetricsReport":
        m = sums.metrics()
        return cls(rmse=m["rmse"], rel=m["rel"], delta1=m["d1"], delta2=m["d2"], delta3=m["d3"],
                   pixel_count=sums.pixels, frame_count=len(rows), rows=rows)

    def as_dict(self) -> Dict[str, float]:
        data = asdict(self)
        data.pop("rows")
        return data

    def records(self) -> List[Dict]:
        """Per-frame rows followed by the pooled totals"""
        out = [asdict(row) for row in self.rows]
        out.append({"frame_id": POOLED_ID, "rmse": self.rmse, "rel": self.rel, "d1": self.delta1,
                    "d2": self.delta2, "d3": self.delta3, "n_pixels": self.pixel_count,
                    "n_frames": self.frame_count})
        return out

    def format_table(self) -> str:
        lines = [
            f"# pixel-pooled metrics over {self.frame_count} frames, {self.pixel_count} pixels",
            f"{'frame_id':<20} {'rmse':>10} {'rel':>10} {'d1':>8} {'d2':>8} {'d3':>8} {'n_pixels':>9}",
        ]
        for row in self.rows + [FrameMetrics(POOLED_ID, self.rmse, self.rel, self.delta1, self.delta2,
                                             self.delta3, self.pixel_count)]:
            lines.append(f"{row.frame_id:<20} {row.rmse:>10.4f} {row.rel:>10.4f} {row.d1:>8.2f} "
                         f"{row.d2:>8.2f} {row.d3:>8.2f} {row.n_pixels:>9d}")
        return "\n".join(lines) + "\n"

    def write(self, path: str):
        """Newline-delimited JSON at `path`, text table at `path`.txt"""
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for record in self.records():
                f.write(json.dumps(record) + "\n")
        with open(path + ".txt", "w", encoding="utf-8", newline="\n") as f:
            f.write(self.format_table())
        logger.info(f"Wrote report for {self.frame_count} frames to {path}")


ForwardFn = Callable[..., Tensor]


def evaluation_workers() -> int:
    return max(int(os.environ.get("DEPTHFUSE_EVAL_WORKERS", "1")), 1)


def _evaluate_frame(frame: Frame, model: Model, sampler_cfg: SamplerConfig, forward_fn: ForwardFn):
    cfg = replace(sampler_cfg, seed=derive_seed(sampler_cfg.seed, "eval", frame.id))
    scored, sparse, mask = sample_sparse(frame, cfg)
    pred = forward_fn(scored.rgb[None], sparse[None], mask, model)
    sums = PixelSums.of(pred.data[0], scored.depth_gt, scored.valid_gt)
    m = sums.metrics()
    return sums, FrameMetrics(frame.id, m["rmse"], m["rel"], m["d1"], m["d2"], m["d3"], sums.pixels)


def evaluate(model: Model, frames: Sequence[Frame], sampler_cfg: SamplerConfig,
             forward_fn: Optional[ForwardFn] = None, workers: Optional[int] = None) -> MetricsReport:
    """
    Sample each frame with a seed derived from its id, run the model and
    pool the metrics. Frames are accumulated in id order whatever the
    worker count, so reports are reproducible.
    """
    if not frames:
        raise EmptySelectionError("evaluate needs at least one frame")
    forward_fn = forward_fn or forward_for(model)
    ordered = frames_by_id(frames)
    workers = workers or evaluation_workers()

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda f: _evaluate_frame(f, model, sampler_cfg, forward_fn), ordered))
    else:
        results = [_evaluate_frame(f, model, sampler_cfg, forward_fn) for f in ordered]

    total = PixelSums()
    for sums, _ in results:
        total.merge(sums)
    report = MetricsReport.from_sums(total, [row for _, row in results])
    logger.info(f"Evaluated {report.frame_count} frames: rmse={report.rmse:.4f} rel={report.rel:.4f} "
                f"d1={report.delta1:.2f}")
    return report
