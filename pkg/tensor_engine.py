"""
Dense float tensors with a gradient tape.

Ops take an optional ``tape``; ``backward`` replays it in reverse. Tensors
created with ``dtype=np.float64`` stay 64-bit through every op.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

TRAIN = "train"
EVAL = "eval"

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99

_tensor_ids = itertools.count(1)


class EngineError(ValueError):
    """Base class for tensor engine failures."""


class ShapeError(EngineError):
    """An operand has the wrong rank or extent."""


class NonFiniteError(EngineError):
    """An op received or produced NaN/Inf."""


class UnsupportedConfigError(EngineError):
    """The op does not implement the requested configuration."""


class BatchNormStateError(EngineError):
    """Eval-mode batch norm was requested before running stats exist."""


class TapeError(EngineError):
    """The gradient tape cannot service the request."""


class Tensor:
    """Dense n-dimensional float array with a unique tape handle."""

    __slots__ = ("data", "id")

    def __init__(self, data, dtype=None):
        if dtype is None:
            dtype = np.float32
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.id = next(_tensor_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape}, dtype={self.data.dtype})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[int, ...]
    output: int
    backward_fn: BackwardFn


class GradTape:
    """Single-owner record of forward ops for one forward/backward pass."""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.gradients: Dict[int, Tensor] = {}

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn) -> None:
        self.nodes.append(TapeNode(op, tuple(t.id for t in inputs), output.id, backward_fn))

    def gradient(self, tensor: Tensor) -> Optional[Tensor]:
        return self.gradients.get(tensor.id)

    def __len__(self):
        return len(self.nodes)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    dilation: int = 1
    stride: int = 1
    padding: int = 0
    transposed: bool = False

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel", "dilation", "stride"):
            if getattr(self, name) < 1:
                raise UnsupportedConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise UnsupportedConfigError(f"padding must be non-negative, got {self.padding}")

    @classmethod
    def same(cls, in_channels: int, out_channels: int, dilation: int = 1, kernel: int = 3) -> "ConvSpec":
        """Stride-1 spec whose output keeps H x W (padding == dilation for 3x3)."""
        return cls(in_channels, out_channels, kernel, dilation, 1, dilation * (kernel - 1) // 2)

    @property
    def effective_kernel(self) -> int:
        return self.kernel + (self.kernel - 1) * (self.dilation - 1)

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        if self.transposed:
            return (self.in_channels, self.out_channels, self.kernel, self.kernel)
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        if self.transposed:
            return (height - 1) * self.stride - 2 * self.padding + self.kernel, \
                (width - 1) * self.stride - 2 * self.padding + self.kernel
        span = self.effective_kernel
        out_h = (height + 2 * self.padding - span) // self.stride + 1
        out_w = (width + 2 * self.padding - span) // self.stride + 1
        if height + 2 * self.padding < span or out_h < 1:
            raise ShapeError(f"height {height} too small for dilated kernel span {span}")
        if width + 2 * self.padding < span or out_w < 1:
            raise ShapeError(f"width {width} too small for dilated kernel span {span}")
        return out_h, out_w


@dataclass
class BatchNormState:
    """Per-channel running statistics, updated in place during training."""

    running_mean: np.ndarray
    running_var: np.ndarray
    ready: bool = False


def _require_rank(t: Tensor, rank: int, what: str) -> None:
    if len(t.shape) != rank:
        raise ShapeError(f"{what} must have rank {rank}, got shape {t.shape}")


def _require_dim(actual: int, expected: int, what: str) -> None:
    if actual != expected:
        raise ShapeError(f"{what} is {actual}, expected {expected}")


def _require_finite(t: Tensor, what: str) -> None:
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"{what} contains non-finite values")


def _require_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise EngineError(f"mode must be '{TRAIN}' or '{EVAL}', got {mode!r}")


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn: BackwardFn,
          tape: Optional[GradTape]) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    result = Tensor(out, dtype=out.dtype)
    if tape is not None:
        tape.record(op, inputs, result, backward_fn)
    return result


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.data.dtype for t in tensors))


def _dilated_windows(padded: np.ndarray, spec: ConvSpec, out_h: int, out_w: int) -> np.ndarray:
    """View of shape (N, C, out_h, out_w, k, k) holding every dilated tap."""
    span = spec.effective_kernel
    windows = np.lib.stride_tricks.sliding_window_view(padded, (span, span), axis=(2, 3))
    s, d = spec.stride, spec.dilation
    return windows[:, :, ::s, ::s, ::d, ::d][:, :, :out_h, :out_w]


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec,
           tape: Optional[GradTape] = None) -> Tensor:
    """Dilated cross-correlation with zero padding (no kernel flip)."""
    if spec.transposed:
        raise UnsupportedConfigError("conv2d called with a transposed spec; use conv2d_transposed")
    _require_rank(x, 4, "conv2d input")
    n, c, h, w = x.shape
    _require_dim(c, spec.in_channels, "conv2d input channel dimension")
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"conv2d weight shape is {weights.shape}, expected {spec.weight_shape}")
    _require_dim(bias.shape[0] if bias.shape else -1, spec.out_channels, "conv2d bias length")
    _require_finite(x, "conv2d input")
    out_h, out_w = spec.output_size(h, w)

    dtype = _result_dtype(x, weights, bias)
    k, d, s, p = spec.kernel, spec.dilation, spec.stride, spec.padding
    padded = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _dilated_windows(padded, spec, out_h, out_w)
    out = np.tensordot(cols, weights.data, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out, dtype=dtype)

    def backward(g):
        grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])).astype(weights.dtype, copy=False)
        grad_b = g.sum(axis=(0, 2, 3)).astype(bias.dtype, copy=False)
        grad_cols = np.tensordot(g, weights.data, axes=([1], [0]))  # N, Ho, Wo, C, k, k
        grad_padded = np.zeros(padded.shape, dtype=dtype)
        row_stop = s * (out_h - 1) + 1
        col_stop = s * (out_w - 1) + 1
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i * d:i * d + row_stop:s, j * d:j * d + col_stop:s] += \
                    grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, p:p + h, p:p + w] if p else grad_padded
        return grad_x.astype(x.dtype, copy=False), grad_w, grad_b

    return _emit("conv2d", (x, weights, bias), out, backward, tape)


def conv2d_transposed(x: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec,
                      tape: Optional[GradTape] = None) -> Tensor:
    """Stride-2, 2x2 transposed convolution doubling H and W."""
    if not spec.transposed or spec.kernel != 2 or spec.stride != 2 or spec.padding != 0 or spec.dilation != 1:
        raise UnsupportedConfigError(
            f"conv2d_transposed supports only kernel=2 stride=2 padding=0, got {spec}"
        )
    _require_rank(x, 4, "conv2d_transposed input")
    n, c, h, w = x.shape
    _require_dim(c, spec.in_channels, "conv2d_transposed input channel dimension")
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"conv2d_transposed weight shape is {weights.shape}, expected {spec.weight_shape}")
    _require_dim(bias.shape[0] if bias.shape else -1, spec.out_channels, "conv2d_transposed bias length")
    _require_finite(x, "conv2d_transposed input")

    dtype = _result_dtype(x, weights, bias)
    co = spec.out_channels
    taps = np.tensordot(x.data, weights.data, axes=([1], [0]))  # N, H, W, Co, 2, 2
    out = taps.transpose(0, 3, 1, 4, 2, 5).reshape(n, co, 2 * h, 2 * w) + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out, dtype=dtype)

    def backward(g):
        blocks = g.reshape(n, co, h, 2, w, 2)
        grad_x = np.tensordot(blocks, weights.data, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        grad_w = np.tensordot(x.data, blocks, axes=([0, 2, 3], [0, 2, 4]))
        grad_b = g.sum(axis=(0, 2, 3))
        return (np.ascontiguousarray(grad_x, dtype=x.dtype),
                grad_w.astype(weights.dtype, copy=False),
                grad_b.astype(bias.dtype, copy=False))

    return _emit("conv2d_transposed", (x, weights, bias), out, backward, tape)


def max_pool2(x: Tensor, tape: Optional[GradTape] = None) -> Tuple[Tensor, np.ndarray]:
    """Disjoint 2x2 max pooling; ties resolve to the first row-major position."""
    _require_rank(x, 4, "max_pool2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even height and width, got {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros(windows.shape, dtype=x.dtype)
        np.put_along_axis(routed, argmax[..., None], g[..., None], axis=-1)
        grad_x = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(grad_x),)

    return _emit("max_pool2", (x,), np.ascontiguousarray(out), backward, tape), argmax


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str,
               tape: Optional[GradTape] = None, eps: float = BN_EPSILON,
               momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalisation over (N, H, W) followed by gamma/beta."""
    _require_mode(mode)
    _require_rank(x, 4, "batch_norm input")
    n, c, h, w = x.shape
    _require_dim(gamma.shape[0] if gamma.shape else -1, c, "batch_norm gamma length")
    _require_dim(beta.shape[0] if beta.shape else -1, c, "batch_norm beta length")
    axes = (0, 2, 3)
    count = n * h * w

    if mode == TRAIN:
        if count < 2:
            raise ShapeError(f"batch_norm in train mode needs N*H*W >= 2, got {count}")
        mean = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        state.running_mean[...] = momentum * state.running_mean + (1.0 - momentum) * mean
        state.running_var[...] = momentum * state.running_var + (1.0 - momentum) * var
        state.ready = True
    else:
        if not state.ready:
            raise BatchNormStateError("batch_norm eval mode used before any train step or loaded stats")
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)

    dtype = _result_dtype(x, gamma, beta)
    inv_std = (1.0 / np.sqrt(var + eps)).reshape(1, c, 1, 1)
    x_hat = ((x.data - mean.reshape(1, c, 1, 1)) * inv_std).astype(dtype)
    out = gamma.data.reshape(1, c, 1, 1) * x_hat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        grad_gamma = (g * x_hat).sum(axis=axes, dtype=np.float64)
        grad_beta = g.sum(axis=axes, dtype=np.float64)
        grad_xhat = g * gamma.data.reshape(1, c, 1, 1)
        if mode == TRAIN:
            centred = grad_xhat - grad_xhat.mean(axis=axes, keepdims=True, dtype=np.float64)
            proj = (grad_xhat * x_hat).mean(axis=axes, keepdims=True, dtype=np.float64)
            grad_x = inv_std * (centred - x_hat * proj)
        else:
            grad_x = grad_xhat * inv_std
        return (grad_x.astype(x.dtype, copy=False),
                grad_gamma.astype(gamma.dtype),
                grad_beta.astype(beta.dtype))

    return _emit("batch_norm", (x, gamma, beta), np.ascontiguousarray(out, dtype=dtype), backward, tape)


def _channel_view(param: np.ndarray, rank: int) -> np.ndarray:
    shape = [1] * rank
    shape[1] = param.shape[0]
    return param.reshape(shape)


def prelu(x: Tensor, alpha: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """x where x > 0, alpha_c * x elsewhere; one learnable slope per channel."""
    if len(x.shape) < 2:
        raise ShapeError(f"prelu input needs a channel axis, got shape {x.shape}")
    _require_dim(alpha.shape[0] if alpha.shape else -1, x.shape[1], "prelu alpha length")
    rank = len(x.shape)
    a = _channel_view(alpha.data, rank)
    positive = x.data > 0
    out = np.where(positive, x.data, a * x.data).astype(_result_dtype(x, alpha), copy=False)
    reduce_axes = tuple(i for i in range(rank) if i != 1)

    def backward(g):
        grad_x = np.where(positive, g, a * g).astype(x.dtype, copy=False)
        grad_alpha = np.where(positive, 0.0, g * x.data).sum(axis=reduce_axes)
        return grad_x, grad_alpha.astype(alpha.dtype, copy=False)

    return _emit("prelu", (x, alpha), out, backward, tape)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], mode: str,
            tape: Optional[GradTape] = None) -> Tensor:
    """Inverted dropout; eval mode and rate 0 return the input unchanged."""
    _require_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise EngineError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == EVAL or rate == 0.0:
        return x
    if rng is None:
        raise EngineError("train-mode dropout needs a seeded generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return _emit("dropout", (x,), out, backward, tape)


def sigmoid(x: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """Logistic function; results are kept strictly inside (0, 1)."""
    info = np.finfo(x.dtype)
    out = np.clip(expit(x.data), info.tiny, 1.0 - info.epsneg).astype(x.dtype, copy=False)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (x,), out, backward, tape)


def add(a: Tensor, b: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        return g.astype(a.dtype, copy=False), g.astype(b.dtype, copy=False)

    return _emit("add", (a, b), out, backward, tape)


def mul(a: Tensor, b: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul operands differ: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g):
        return (g * b.data).astype(a.dtype, copy=False), (g * a.data).astype(b.dtype, copy=False)

    return _emit("mul", (a, b), out, backward, tape)


def concat_channels(tensors: Sequence[Tensor], tape: Optional[GradTape] = None) -> Tensor:
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    first = tensors[0]
    _require_rank(first, 4, "concat_channels input")
    for t in tensors[1:]:
        _require_rank(t, 4, "concat_channels input")
        for axis, label in ((0, "batch"), (2, "height"), (3, "width")):
            _require_dim(t.shape[axis], first.shape[axis], f"concat_channels {label} dimension")
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g):
        return [part.astype(t.dtype, copy=False) for part, t in zip(np.split(g, bounds, axis=1), tensors)]

    return _emit("concat_channels", tuple(tensors), out, backward, tape)


def mse_loss(pred: Tensor, target: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """Mean of squared differences over every element of the batch."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss operands differ: {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    count = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=_result_dtype(pred, target))

    def backward(g):
        scaled = (2.0 / count) * diff * np.asarray(g, dtype=np.float64).item()
        return scaled.astype(pred.dtype), (-scaled).astype(target.dtype)

    return _emit("mse_loss", (pred, target), out, backward, tape)


def backward(tape: GradTape, loss: Tensor) -> Dict[int, Tensor]:
    """Reverse sweep from a scalar loss; gradients at fan-out points are summed.

    Tensors with no path to ``loss`` get no entry in the result.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(node.output == loss.id for node in tape.nodes):
        raise TapeError(f"loss tensor {loss.id} was not produced on this tape")

    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        upstream = grads.get(node.output)
        if upstream is None:
            continue
        for tensor_id, grad in zip(node.inputs, node.backward_fn(upstream)):
            if grad is None:
                continue
            if tensor_id in grads:
                grads[tensor_id] = grads[tensor_id] + grad
            else:
                grads[tensor_id] = grad
    tape.gradients = {tid: Tensor(g, dtype=g.dtype) for tid, g in grads.items()}
    logger.debug(f"backward visited {len(tape.nodes)} nodes, {len(grads)} gradients")
    return tape.gradients


__all__ = [
    "TRAIN",
    "EVAL",
    "Tensor",
    "GradTape",
    "TapeNode",
    "ConvSpec",
    "BatchNormState",
    "conv2d",
    "conv2d_transposed",
    "max_pool2",
    "batch_norm",
    "prelu",
    "dropout",
    "sigmoid",
    "add",
    "mul",
    "concat_channels",
    "mse_loss",
    "backward",
]
