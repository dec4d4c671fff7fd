"""
Minimal dense tensor with reverse-mode automatic differentiation.

Covers exactly the operations the depth completion networks need: 2D
convolution, ReLU, channel concat/slice, nearest 2x upsampling, elementwise
arithmetic, masked L1 loss and SGD with momentum. Storage is 64-bit numpy.
"""
import logging
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import GraphError, MissingGradientError, ShapeError, EmptySelectionError

logger = logging.getLogger(__name__)

# Normalizer guard for every division on activations
EPSILON = 1e-8


class Tensor:
    """Dense float64 array that records the ops producing it"""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: Tuple["Tensor", ...] = (), _op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op='{self._op}', requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def make_result(data: np.ndarray, parents: Sequence[Tensor], op: str,
                 backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Attach a backward closure only when some parent tracks gradients"""
    for parent in parents:
        if parent._consumed:
            raise GraphError(f"{op}: input comes from a graph already consumed by backward")
    tracked = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=tracked, _parents=tuple(parents) if tracked else (), _op=op)
    if tracked:
        def _backward(grad_out: np.ndarray):
            for parent, grad in zip(parents, backward(grad_out)):
                if grad is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += grad
        out._backward = _backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return
    if len(a.shape) != len(b.shape):
        raise ShapeError(f"{op}: rank {len(a.shape)} != rank {len(b.shape)}")
    for dim, (x, y) in enumerate(zip(a.shape, b.shape)):
        if x != y:
            raise ShapeError(f"{op}: size {x} != {y} at dimension {dim}", dimension=dim)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return make_result(a.data * b.data, (a, b), "mul",
                        lambda g: (g * b.data, g * a.data))


def tensor_sum(x: Tensor) -> Tensor:
    return make_result(np.asarray(x.data.sum()), (x,), "sum",
                        lambda g: (np.full_like(x.data, float(g)),))


def scale(x: Tensor, factor: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcast against x (no gradient to factor)"""
    factor = _as_array(factor)
    try:
        out = x.data * factor
    except ValueError as e:
        raise ShapeError(f"scale: cannot broadcast {factor.shape} against {x.shape}") from e
    if out.shape != x.shape:
        raise ShapeError(f"scale: factor {factor.shape} would change shape {x.shape}")
    return make_result(out, (x,), "scale", lambda g: (g * factor,))


def apply_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero x wherever the broadcast mask is 0; masked positions pass no gradient"""
    mask = _as_array(mask)
    keep = np.broadcast_to(mask > 0, x.shape)
    return make_result(np.where(keep, x.data, 0.0), (x,), "apply_mask", lambda g: (np.where(keep, g, 0.0),))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias of shape (C,) to a BxCxHxW tensor"""
    if x.data.ndim != 4 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {bias.shape} does not match channels of {x.shape}", dimension=1)
    return make_result(x.data + bias.data[None, :, None, None], (x, bias), "add_bias",
                        lambda g: (g, g.sum(axis=(0, 2, 3))))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    active = x.data > 0
    return make_result(np.where(active, x.data, 0.0), (x,), "relu", lambda g: (g * active,))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of BxCxHxW input with OxCxKxK weight"""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be BxCxHxW, got {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be OxCxKxK, got {weight.shape}")
    batch, channels, height, width = x.shape
    out_channels, w_channels, k_h, k_w = weight.shape
    if w_channels != channels:
        raise ShapeError(f"conv2d: input channels {channels} != weight channels {w_channels}", dimension=1)
    if k_h != k_w or k_h % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k_h}x{k_w}", dimension=2)
    if bias is not None and bias.shape != (out_channels,):
        raise ShapeError(f"conv2d: bias {bias.shape} != ({out_channels},)", dimension=0)
    if pad < 0 or stride < 1:
        raise ShapeError(f"conv2d: invalid pad={pad} stride={stride}")
    k = k_h
    # output sizes follow the floor convention for strided convolutions
    for dim, size in ((2, height), (3, width)):
        if size + 2 * pad - k < 0:
            raise ShapeError(
                f"conv2d: size {size} with pad {pad} is smaller than kernel {k} at dimension {dim}",
                dimension=dim)
    out_h = (height + 2 * pad - k) // stride + 1
    out_w = (width + 2 * pad - k) // stride + 1

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # (B, C, H', W', K, K)
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # one row per output pixel (B, H', W'), one column per (C, K, K) tap; reused by backward
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, channels * k * k)
    w_mat = weight.data.reshape(out_channels, -1)
    out = (cols @ w_mat.T).reshape(batch, out_h, out_w, out_channels).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g: np.ndarray):
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        grad_w = (g_mat.T @ cols).reshape(weight.shape)
        grad_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        grad_x = None
        if x.requires_grad:
            grad_cols = (g_mat @ w_mat).reshape(batch, out_h, out_w, channels, k, k)
            grad_padded = np.zeros_like(padded)
            for i in range(k):
                for j in range(k):
                    grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                        grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            grad_x = grad_padded[:, :, pad:pad + height, pad:pad + width] if pad else grad_padded
        return grad_x, grad_w, grad_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, "conv2d", backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels: both inputs must be BxCxHxW")
    for dim in (0, 2, 3):
        if a.shape[dim] != b.shape[dim]:
            raise ShapeError(
                f"concat_channels: size {a.shape[dim]} != {b.shape[dim]} at dimension {dim}", dimension=dim)
    split = a.shape[1]
    return make_result(np.concatenate([a.data, b.data], axis=1), (a, b), "concat",
                        lambda g: (g[:, :split], g[:, split:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: [{start}, {stop}) outside {x.shape[1]} channels", dimension=1)

    def backward(g: np.ndarray):
        grad = np.zeros_like(x.data)
        grad[:, start:stop] = g
        return (grad,)

    return make_result(x.data[:, start:stop].copy(), (x,), "slice", backward)


def nearest_upsample2x(x: Tensor) -> Tensor:
    batch, channels, height, width = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return make_result(out, (x,), "upsample2x",
                        lambda g: (g.reshape(batch, channels, height, 2, width, 2).sum(axis=(3, 5)),))


def l1_loss(pred: Tensor, target, valid) -> Tensor:
    """Mean absolute error over pixels where `valid` is set"""
    target_data = _as_array(target)
    valid_data = _as_array(getattr(valid, "data", valid))
    if pred.shape != target_data.shape:
        raise ShapeError(f"l1_loss: prediction {pred.shape} != target {target_data.shape}")
    if valid_data.shape != pred.shape:
        raise ShapeError(f"l1_loss: valid map {valid_data.shape} != prediction {pred.shape}")
    count = float(valid_data.sum())
    if count == 0:
        raise EmptySelectionError("l1_loss: no valid pixels")
    diff = np.where(valid_data > 0, pred.data - target_data, 0.0)
    loss = np.abs(diff).sum() / count
    return make_result(np.asarray(loss), (pred,), "l1_loss",
                        lambda g: (float(g) * np.sign(diff) / count,))


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None):
    """
    Reverse-mode accumulation from a scalar loss.

    Gradients accumulate into `.grad` of every tracked tensor reachable from
    `loss`. Tensors in `wrt` that the loss does not reach get zero gradients.
    The graph is freed afterwards and every intermediate node is marked
    consumed: a second call on the same loss, or any new op reading one of
    those nodes, is an error. Leaf tensors (parameters, inputs) stay usable.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward called twice on the same graph")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._parents:
            node._consumed = True
        node._backward = None
        node._parents = ()
    loss._consumed = True

    for tensor in wrt or ():
        if tensor.requires_grad and tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.data)


class ParamGroup:
    """Named parameters plus their SGD momentum buffers"""

    def __init__(self, name: str = ""):
        self.name = name
        self._params: Dict[str, Tensor] = {}
        self.momentum: Dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ShapeError(f"parameter '{name}' already registered in group '{self.name}'")
        tensor = Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True)
        self._params[name] = tensor
        self.momentum[name] = np.zeros_like(tensor.data)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> List[Tensor]:
        return list(self._params.values())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for tensor in self._params.values():
            tensor.grad = None


def sgd_step(params: ParamGroup, lr: float, momentum: float) -> ParamGroup:
    """
    v <- momentum*v + g; w <- w - lr*v; then clear the gradients.

    Cleared gradients are None, so stepping again without a new backward
    raises MissingGradientError instead of replaying the momentum.
    """
    for name, tensor in params.items():
        if tensor.grad is None:
            raise MissingGradientError(f"parameter '{params.name}.{name}' has no gradient")
    for name, tensor in params.items():
        velocity = params.momentum[name]
        velocity *= momentum
        velocity += tensor.grad
        tensor.data -= lr * velocity
        tensor.grad = None
    return params
