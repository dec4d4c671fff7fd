"""
Finite-difference gradient checks for the autodiff ops, the layers and the
end-to-end model.

Each check builds a small case, reduces its output with a fixed random
projection to a scalar, and compares autodiff gradients with central
differences (step 1e-5, float64).
"""
import logging
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from fusion_net import ModelConfig, build_model, forward_for
from layers import (
    ObservationMask, SparseConvParams, init_residual_block, init_up_projection, masked_avg_pool,
    residual_block, residual_up_projection, sparse_conv,
)
from tensor_core import (
    ParamGroup, Tensor, add, add_bias, apply_mask, backward, concat_channels, conv2d, l1_loss, mul,
    nearest_upsample2x, relu, scale, slice_channels, tensor_sum,
)

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
# gradients smaller than this are compared absolutely
ERROR_FLOOR = 1e-3
# moves every bias off zero so no ReLU sits exactly at its kink
BIAS_JITTER = 0.1

Builder = Callable[[], Tensor]


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ERROR_FLOOR)


def numerical_gradient(loss_fn: Callable[[], float], array: np.ndarray,
                       indices: Sequence[Tuple[int, ...]], step: float = STEP) -> np.ndarray:
    """Central differences of `loss_fn` w.r.t. selected entries of `array`, perturbed in place"""
    grads = np.empty(len(indices))
    for k, index in enumerate(indices):
        original = array[index]
        array[index] = original + step
        plus = loss_fn()
        array[index] = original - step
        minus = loss_fn()
        array[index] = original
        grads[k] = (plus - minus) / (2.0 * step)
    return grads


def _all_indices(shape: Tuple[int, ...]):
    return list(np.ndindex(*shape)) if shape else [()]


def compare_gradients(build: Builder, tensors: Dict[str, Tensor],
                      rng: np.random.Generator) -> Tuple[float, str, int]:
    """Largest relative error over every entry, where it occurred, and how many entries were checked"""
    projection = Tensor(rng.normal(size=build().shape))

    def loss_value() -> float:
        return float(tensor_sum(mul(build(), projection)).data)

    for tensor in tensors.values():
        tensor.grad = None
    backward(tensor_sum(mul(build(), projection)), wrt=list(tensors.values()))

    worst, worst_name, checked = 0.0, "", 0
    for name, tensor in tensors.items():
        indices = _all_indices(tensor.shape)
        checked += len(indices)
        numeric = numerical_gradient(loss_value, tensor.data, indices)
        analytic = np.array([tensor.grad[index] for index in indices])
        for a, n, index in zip(analytic, numeric, indices):
            err = relative_error(float(a), float(n))
            if err > worst:
                worst, worst_name = err, f"{name}{tuple(int(i) for i in index)}"
    return worst, worst_name, checked


def jitter_biases(tensors: Dict[str, Tensor], rng: np.random.Generator):
    for name, tensor in tensors.items():
        if name.endswith("bias"):
            tensor.data += rng.normal(0.0, BIAS_JITTER, size=tensor.shape)


def _leaf(rng: np.random.Generator, *shape: int, away_from_zero: bool = False) -> Tensor:
    data = rng.normal(size=shape)
    if away_from_zero:
        data = np.sign(data) * (0.1 + np.abs(data))
    return Tensor(data, requires_grad=True)


def _run_cases(cases: List[Tuple[str, Builder, Dict[str, Tensor]]], rng: np.random.Generator):
    worst, worst_case, entries = 0.0, "", 0
    for name, build, tensors in cases:
        err, where, checked = compare_gradients(build, tensors, rng)
        entries += checked
        logger.debug(f"gradcheck {name}: max rel err {err:.3e} at {where}")
        if err >= worst:
            worst, worst_case = err, f"{name}:{where}"
    return worst < TOLERANCE, {"max_rel_err": worst, "worst": worst_case, "cases": len(cases), "entries": entries}


def check_tensor_core(seed: int = 0):
    """Every differentiable op in tensor_core"""
    rng = np.random.default_rng(seed)
    x = _leaf(rng, 1, 2, 6, 6)
    w = _leaf(rng, 3, 2, 3, 3)
    b = _leaf(rng, 3)
    a, c = _leaf(rng, 1, 2, 4, 4), _leaf(rng, 1, 2, 4, 4)
    r = _leaf(rng, 1, 3, 4, 4, away_from_zero=True)
    factor = rng.uniform(0.5, 2.0, size=(1, 1, 4, 4))
    keep = (rng.random((1, 1, 4, 4)) < 0.5).astype(np.float64)
    pred = _leaf(rng, 1, 1, 4, 4)
    target = pred.data + np.sign(rng.normal(size=pred.shape)) * rng.uniform(0.5, 1.0, size=pred.shape)
    valid = (rng.random(pred.shape) < 0.7).astype(np.float64)
    valid.flat[0] = 1.0

    cases = [
        ("conv2d", lambda: conv2d(x, w, b, stride=1, pad=1), {"x": x, "w": w, "b": b}),
        ("conv2d_stride2", lambda: conv2d(x, w, b, stride=2, pad=1), {"x": x, "w": w, "b": b}),
        ("conv2d_valid", lambda: conv2d(x, w, None), {"x": x, "w": w}),
        ("add", lambda: add(a, c), {"a": a, "c": c}),
        ("mul", lambda: mul(a, c), {"a": a, "c": c}),
        ("scale", lambda: scale(a, factor), {"a": a}),
        ("apply_mask", lambda: apply_mask(a, keep), {"a": a}),
        ("add_bias", lambda: add_bias(r, b), {"r": r, "b": b}),
        ("relu", lambda: relu(r), {"r": r}),
        ("concat_channels", lambda: concat_channels(a, r), {"a": a, "r": r}),
        ("slice_channels", lambda: slice_channels(r, 1, 3), {"r": r}),
        ("upsample2x", lambda: nearest_upsample2x(a), {"a": a}),
        ("l1_loss", lambda: l1_loss(pred, target, valid), {"pred": pred}),
    ]
    return _run_cases(cases, rng)


def check_layers(seed: int = 0):
    """Sparse convolution, masked pooling and the residual blocks"""
    rng = np.random.default_rng(seed)
    features = _leaf(rng, 1, 2, 8, 8)
    mask = ObservationMask((rng.random((1, 1, 8, 8)) < 0.4).astype(np.float64))
    params = SparseConvParams(_leaf(rng, 3, 2, 3, 3), _leaf(rng, 3))

    group = ParamGroup("check")
    init_residual_block(group, "res", 2, rng)
    init_up_projection(group, "up", 4, rng)
    coarse = _leaf(rng, 1, 4, 4, 4)
    block_params = dict(group.items())
    jitter_biases(block_params, rng)

    cases = [
        ("sparse_conv", lambda: sparse_conv(features, mask, params, pad=1)[0],
         {"features": features, "weight": params.weight, "bias": params.bias}),
        ("sparse_conv_stride2", lambda: sparse_conv(features, mask, params, stride=2, pad=1)[0],
         {"features": features, "weight": params.weight}),
        ("masked_avg_pool_global", lambda: masked_avg_pool(features, mask, 0), {"features": features}),
        ("masked_avg_pool_window4", lambda: masked_avg_pool(features, mask, 4), {"features": features}),
        ("residual_block", lambda: residual_block(features, group, "res"),
         {"features": features, **{k: v for k, v in block_params.items() if k.startswith("res.")}}),
        ("residual_up_projection", lambda: residual_up_projection(coarse, group, "up"),
         {"input": coarse, **{k: v for k, v in block_params.items() if k.startswith("up.")}}),
    ]
    return _run_cases(cases, rng)


def tiny_model_config(variant: str = "inductive") -> ModelConfig:
    return ModelConfig(variant=variant, context_widths=(2, 2, 4), context_channels=2,
                       depth_channels=2, demo_channels=2)


def check_fusion_net(seed: int = 0, variant: str = "inductive", size: int = 8, observed: int = 4):
    """Whole forward pass on a size x size image, checking every entry of every parameter"""
    rng = np.random.default_rng(seed)
    model = build_model(tiny_model_config(variant), seed)
    rgb = rng.uniform(0.0, 1.0, size=(1, 3, size, size))
    mask_data = np.zeros(size * size)
    mask_data[rng.choice(size * size, observed, replace=False)] = 1.0
    mask = ObservationMask(mask_data.reshape(1, 1, size, size))
    sparse = np.where(mask.data > 0, rng.uniform(1.0, 5.0, size=mask.shape), 0.0)
    forward_fn = forward_for(model)

    tensors = dict(model.named_parameters())
    jitter_biases(tensors, rng)
    case = [(f"forward_{variant}", lambda: forward_fn(rgb, sparse, mask, model), tensors)]
    return _run_cases(case, rng)


CHECKS = {
    'tensor_core': check_tensor_core,
    'layers': check_layers,
    'fusion_net': check_fusion_net,
}


def run_gradchecks(module: Optional[str] = None) -> Dict[str, Dict]:
    """Run one suite or all of them; unknown names raise KeyError"""
    names = [module] if module else list(CHECKS)
    results = {}
    for name in names:
        started = time.perf_counter()
        ok, data = CHECKS[name]()
        data["seconds"] = round(time.perf_counter() - started, 2)
        results[name] = {"ok": ok, "data": data}
        logger.info(f"gradcheck {name}: {'OK' if ok else 'FAILED'} max rel err {data['max_rel_err']:.3e}")
    return results


def format_results(results: Dict[str, Dict]) -> str:
    worst = max(result["data"]["max_rel_err"] for result in results.values())
    passed = all(result["ok"] for result in results.values())
    lines = [f"Gradient check: {'PASSED' if passed else 'FAILED'} (max rel err {worst:.3e}, tolerance {TOLERANCE:g})"]
    for name, result in results.items():
        status = "✓" if result["ok"] else "✗"
        data = result["data"]
        lines.append(f"{status} {name}: max rel err {data['max_rel_err']:.3e} at {data['worst']} "
                     f"({data['cases']} cases, {data['entries']} entries, {data['seconds']}s)")
    return "\n".join(lines)
