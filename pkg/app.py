"""
Command-line entry point: synth, train, eval, infer, gradcheck, ablate.

Library modules raise DepthFuseError subclasses; this module is the one
place that catches them, logs, and turns them into exit codes.
"""

import argparse
import os
import sys
import logging
from typing import List, Optional, Tuple

import numpy as np

from ablation import run_ablation, write_ablation_report, format_ablation_table
from checkpoint import load_checkpoint
from data_sim import SamplerConfig, load_split, write_dataset
from errors import DepthFuseError
from eval_metrics import evaluate
from fusion_net import forward_for
from gradcheck import CHECKS, format_results, run_gradchecks
from graceful_shutdown import shutdown_manager
from image_io import read_pfm, read_ppm, write_pfm
from layers import ObservationMask
from trainer import TrainConfig, load_config, model_from_checkpoint, train

# Configure logging
logging.basicConfig(
    level=os.environ.get('DEPTHFUSE_LOG_LEVEL', 'INFO').upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def _size(text: str) -> Tuple[int, int]:
    try:
        height, width = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got '{text}'")
    return height, width


def _band(text: str) -> Tuple[int, int]:
    try:
        top, bottom = (int(part) for part in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected TOP:BOTTOM, got '{text}'")
    return top, bottom


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _str_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthfuse", description="Inductive late-fusion depth completion")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="render a synthetic dataset with manifest")
    synth.add_argument("--out", required=True)
    synth.add_argument("--frames", type=int, default=50)
    synth.add_argument("--size", type=_size, default=(64, 64), help="HxW, both divisible by 8")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--difficulty", type=float, default=0.5)

    train_cmd = commands.add_parser("train", help="train a model from a key=value config file")
    train_cmd.add_argument("--config", required=True)
    train_cmd.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    train_cmd.add_argument("--resume", help="checkpoint to continue from")

    eval_cmd = commands.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    eval_cmd.add_argument("--checkpoint", required=True)
    eval_cmd.add_argument("--data", required=True)
    eval_cmd.add_argument("--samples", type=int, required=True)
    eval_cmd.add_argument("--band", type=_band, help="TOP:BOTTOM rows; enables band mode")
    eval_cmd.add_argument("--mode", choices=("uniform", "bernoulli"), default="uniform")
    eval_cmd.add_argument("--split", default="test")
    eval_cmd.add_argument("--seed", type=int, default=0, help="base seed for per-frame evaluation sampling")
    eval_cmd.add_argument("--report")

    infer = commands.add_parser("infer", help="complete one sparse depth map")
    infer.add_argument("--checkpoint", required=True)
    infer.add_argument("--rgb", required=True)
    infer.add_argument("--sparse", required=True)
    infer.add_argument("--mask-from-nonzero", action="store_true",
                       help="observe every finite nonzero pixel (default: finite and positive)")
    infer.add_argument("--out", required=True)

    grad = commands.add_parser("gradcheck", help="finite-difference gradient checks")
    grad.add_argument("--module", choices=sorted(CHECKS))

    ablate = commands.add_parser("ablate", help="density / variant sweep")
    ablate.add_argument("--data", required=True)
    ablate.add_argument("--densities", type=_int_list, default=[5, 20, 50, 200])
    ablate.add_argument("--variants", type=_str_list, default=["inductive", "vanilla", "context_only"])
    ablate.add_argument("--depth-layers", type=_int_list, default=[3])
    ablate.add_argument("--windows", type=_int_list, default=[0])
    ablate.add_argument("--config", help="base training config")
    ablate.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    ablate.add_argument("--split", default="test")
    ablate.add_argument("--report")
    return parser


def cmd_synth(args) -> int:
    height, width = args.size
    write_dataset(args.out, args.frames, height, width, args.seed, args.difficulty)
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config, args.override)
    shutdown_manager.install()
    result = train(config, resume_from=args.resume, shutdown=shutdown_manager)
    if result.losses:
        iteration, phase, loss = result.losses[-1]
        print(f"iteration {iteration} [{phase}] loss {loss:.6f}")
    return 0


def cmd_eval(args) -> int:
    model, config = model_from_checkpoint(load_checkpoint(args.checkpoint))
    sampler = SamplerConfig(samples=args.samples, seed=args.seed,
                            mode="band" if args.band else args.mode, band_rows=args.band)
    report = evaluate(model, load_split(args.data, args.split), sampler)
    if args.report:
        report.write(args.report)
    print(report.format_table(), end="")
    return 0


def cmd_infer(args) -> int:
    model, _ = model_from_checkpoint(load_checkpoint(args.checkpoint))
    rgb = read_ppm(args.rgb)
    sparse = read_pfm(args.sparse)
    finite = np.isfinite(sparse)
    observed = finite & (sparse != 0) if args.mask_from_nonzero else finite & (sparse > 0)
    mask = ObservationMask(observed.astype(np.float64))
    sparse = np.where(observed, sparse, 0.0)
    logger.info(f"Completing {args.sparse}: {mask.count()} observed pixels")
    pred = forward_for(model)(rgb[None], sparse[None], mask, model)
    write_pfm(args.out, pred.data[0])
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradchecks(args.module)
    print(format_results(results))
    return 0 if all(result["ok"] for result in results.values()) else 1


def cmd_ablate(args) -> int:
    base = load_config(args.config, args.override) if args.config else TrainConfig.from_text("", args.override)
    rows = run_ablation(args.data, args.densities, args.variants, args.depth_layers, args.windows,
                        base_config=base, eval_split=args.split)
    if args.report:
        write_ablation_report(rows, args.report)
    print(format_ablation_table(rows), end="")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def cli(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; 0 on success, 1 on runtime failure, 2 on usage errors"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        return COMMANDS[args.command](args)
    except DepthFuseError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli())


if __name__ == '__main__':
    main()
