"""
Density and architecture sweep.

Each (variant, depth-encoder layers, aggregation window) combination is
trained once with the training density drawn per iteration from the
requested densities, then evaluated at every density on the held-out split.
"""
import json
import logging
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from data_sim import load_split
from errors import ConfigError
from eval_metrics import evaluate
from trainer import TrainConfig, Trainer

logger = logging.getLogger(__name__)

# variants whose forward pass reads the depth encoder / aggregation window
DEPTH_ENCODER_VARIANTS = ("inductive", "vanilla")
WINDOW_VARIANTS = ("inductive",)


@dataclass
class AblationRow:
    variant: str
    depth_layers: int
    window: int
    density: int
    rmse: float
    rel: float
    d1: float
    d2: float
    d3: float
    n_pixels: int


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties"""
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError("spearman needs two equally long sequences of at least two values")

    def ranks(values):
        values = np.asarray(values, dtype=np.float64)
        order = np.argsort(values, kind="stable")
        out = np.empty(len(values))
        out[order] = np.arange(len(values), dtype=np.float64)
        for value in np.unique(values):
            tied = values == value
            out[tied] = out[tied].mean()
        return out

    rx, ry = ranks(xs), ranks(ys)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else 0.0


def _combinations(variants, depth_layers, windows):
    for variant in variants:
        layer_options = depth_layers if variant in DEPTH_ENCODER_VARIANTS else depth_layers[:1]
        window_options = windows if variant in WINDOW_VARIANTS else windows[:1]
        for layers in layer_options:
            for window in window_options:
                yield variant, layers, window


def run_ablation(data_dir: str, densities: Sequence[int], variants: Sequence[str],
                 depth_layers: Sequence[int] = (3,), windows: Sequence[int] = (0,),
                 base_config: Optional[TrainConfig] = None, eval_split: str = "test") -> List[AblationRow]:
    if not densities or not variants:
        raise ConfigError("ablation needs at least one density and one variant")
    densities = sorted(set(int(d) for d in densities))
    base = replace(base_config or TrainConfig(), dataset=data_dir, checkpoint="", loss_log="")
    train_frames = load_split(data_dir, base.split)
    eval_frames = load_split(data_dir, eval_split)

    rows: List[AblationRow] = []
    for variant, layers, window in _combinations(list(variants), list(depth_layers), list(windows)):
        config = replace(base, model_variant=variant, depth_encoder_layers=layers,
                         aggregation_window=window, train_densities=tuple(densities))
        config.validate()
        logger.info(f"Ablation: training {variant} (layers={layers}, window={window})")
        trainer = Trainer(config, train_frames)
        trainer.run()
        for density in densities:
            report = evaluate(trainer.model, eval_frames, config.sampler_config(samples=density))
            rows.append(AblationRow(variant, layers, window, density, report.rmse, report.rel,
                                    report.delta1, report.delta2, report.delta3, report.pixel_count))
    return rows


def density_trends(rows: Sequence[AblationRow]) -> Dict[str, float]:
    """Spearman(density, rmse) per trained combination"""
    grouped: Dict[str, List[AblationRow]] = {}
    for row in rows:
        grouped.setdefault(f"{row.variant}/L{row.depth_layers}/W{row.window}", []).append(row)
    return {key: spearman([r.density for r in group], [r.rmse for r in group])
            for key, group in grouped.items() if len(group) > 1}


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'variant':<14} {'layers':>6} {'window':>6} {'density':>8} {'rmse':>10} {'rel':>10} "
             f"{'d1':>8} {'d2':>8} {'d3':>8}"]
    for r in rows:
        lines.append(f"{r.variant:<14} {r.depth_layers:>6d} {r.window:>6d} {r.density:>8d} {r.rmse:>10.4f} "
                     f"{r.rel:>10.4f} {r.d1:>8.2f} {r.d2:>8.2f} {r.d3:>8.2f}")
    for key, rho in density_trends(rows).items():
        lines.append(f"# {key}: spearman(density, rmse) = {rho:.3f}")
    return "\n".join(lines) + "\n"


def write_ablation_report(rows: Sequence[AblationRow], path: str):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(asdict(row)) + "\n")
    with open(path + ".txt", "w", encoding="utf-8", newline="\n") as f:
        f.write(format_ablation_table(rows))
    logger.info(f"Wrote {len(rows)} ablation rows to {path}")
