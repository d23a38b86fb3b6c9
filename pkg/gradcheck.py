from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd

from network import ModelSpec, build_model, forward
from tensor_engine import (
    EVAL,
    TRAIN,
    BatchNormState,
    ConvSpec,
    GradTape,
    Tensor,
    add,
    backward,
    batch_norm,
    concat_channels,
    conv2d,
    conv2d_transposed,
    dropout,
    max_pool2,
    mse_loss,
    mul,
    prelu,
    sigmoid,
)

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-3
OP_STEP = 1e-3
MODEL_TOLERANCE = 1e-2
MODEL_STEP = 1e-5

Builder = Callable[[List[Tensor], Optional[GradTape]], Tensor]


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(numeric: np.ndarray, analytic: np.ndarray, floor: float = 1e-12) -> float:
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), floor)
    return float(np.abs(numeric - analytic).max(initial=0.0) / scale)


def numeric_gradient(f: Callable[[], float], array: np.ndarray, h: float) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    for idx in np.ndindex(array.shape):
        saved = array[idx]
        array[idx] = saved + h
        plus = f()
        array[idx] = saved - h
        minus = f()
        array[idx] = saved
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def check_gradients(name: str, build: Builder, arrays: Sequence[np.ndarray],
                    tolerance: float = OP_TOLERANCE, h: float = OP_STEP) -> GradCheckResult:
    tensors = [Tensor(np.array(a, dtype=np.float64), dtype=np.float64) for a in arrays]
    tape = GradTape()
    loss = build(tensors, tape)
    grads = backward(tape, loss)

    def evaluate() -> float:
        return build(tensors, None).item()

    worst = 0.0
    for t in tensors:
        analytic = grads[t.id].data if t.id in grads else np.zeros_like(t.data)
        worst = max(worst, relative_error(numeric_gradient(evaluate, t.data, h), analytic))
    result = GradCheckResult(name, worst, tolerance)
    logger.debug(f"gradcheck {name}: max relative error {worst:.3e}")
    return result


def _reduce(out: Tensor, tape: Optional[GradTape]) -> Tensor:
    target = np.random.default_rng(99).uniform(-1.0, 1.0, size=out.shape)
    return mse_loss(out, Tensor(target, dtype=np.float64), tape)


def _conv_case(spec: ConvSpec, size: int, rng: np.random.Generator):
    arrays = [rng.standard_normal((2, spec.in_channels, size, size)),
              rng.standard_normal(spec.weight_shape) * 0.5,
              rng.standard_normal(spec.out_channels)]

    def build(ts, tape):
        op = conv2d_transposed if spec.transposed else conv2d
        return _reduce(op(ts[0], ts[1], ts[2], spec, tape), tape)

    return build, arrays


def _spaced(shape, rng: np.random.Generator) -> np.ndarray:
    """Distinct values at least 0.1 apart, so small perturbations never reorder them."""
    return rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1


def _away_from_zero(shape, rng: np.random.Generator) -> np.ndarray:
    values = rng.uniform(0.1, 1.5, size=shape)
    return values * rng.choice([-1.0, 1.0], size=shape)


def run_op_suite(seed: int = 0) -> List[GradCheckResult]:
    rng = np.random.default_rng(seed)
    cases = []
    for d in (1, 2, 5):
        cases.append((f"conv2d d={d}", *_conv_case(ConvSpec.same(2, 3, dilation=d), 12, rng)))
    cases.append(("conv2d 1x1", *_conv_case(ConvSpec(3, 2, kernel=1), 6, rng)))
    cases.append(("conv2d stride 2", *_conv_case(ConvSpec(2, 2, kernel=3, stride=2, padding=1), 8, rng)))
    cases.append(("conv2d_transposed", *_conv_case(ConvSpec(3, 2, kernel=2, stride=2, transposed=True), 4, rng)))

    cases.append(("max_pool2", lambda ts, tape: _reduce(max_pool2(ts[0], tape)[0], tape),
                  [_spaced((2, 2, 4, 4), rng)]))

    def bn(mode):
        def build(ts, tape):
            c = ts[0].shape[1]
            state = BatchNormState(np.full(c, 0.2), np.full(c, 1.5), ready=mode == EVAL)
            return _reduce(batch_norm(ts[0], ts[1], ts[2], state, mode, tape), tape)
        return build

    bn_arrays = [rng.standard_normal((3, 2, 4, 4)), rng.uniform(0.5, 1.5, 2), rng.standard_normal(2)]
    cases.append(("batch_norm train", bn(TRAIN), bn_arrays))
    cases.append(("batch_norm eval", bn(EVAL), bn_arrays))

    cases.append(("prelu", lambda ts, tape: _reduce(prelu(ts[0], ts[1], tape), tape),
                  [_away_from_zero((2, 3, 4, 4), rng), rng.uniform(0.1, 0.5, 3)]))
    cases.append(("dropout",
                  lambda ts, tape: _reduce(dropout(ts[0], 0.3, np.random.default_rng(7), TRAIN, tape), tape),
                  [rng.standard_normal((2, 2, 4, 4))]))
    cases.append(("sigmoid", lambda ts, tape: _reduce(sigmoid(ts[0], tape), tape),
                  [rng.standard_normal((2, 2, 4, 4)) * 2.0]))
    cases.append(("add", lambda ts, tape: _reduce(add(ts[0], ts[1], tape), tape),
                  [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 2, 3, 3))]))
    cases.append(("mul", lambda ts, tape: _reduce(mul(ts[0], ts[1], tape), tape),
                  [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 2, 3, 3))]))
    cases.append(("concat_channels", lambda ts, tape: _reduce(concat_channels([ts[0], ts[1]], tape), tape),
                  [rng.standard_normal((2, 1, 3, 3)), rng.standard_normal((2, 3, 3, 3))]))
    cases.append(("mse_loss", lambda ts, tape: mse_loss(ts[0], ts[1], tape),
                  [rng.standard_normal((2, 1, 3, 3)), rng.standard_normal((2, 1, 3, 3))]))

    return [check_gradients(name, build, arrays) for name, build, arrays in cases]


def run_model_check(seed: int = 0, size: int = 16, probes: int = 4) -> List[GradCheckResult]:
    """Tape vs finite-difference gradient for a few scalar parameters of a tiny float64 network."""
    spec = ModelSpec(base_channels=2, channel_cap=16)
    params = build_model(spec, seed).astype(np.float64)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0.0, 1.0, size=(2, 1, size, size)), dtype=np.float64)
    target = Tensor(rng.uniform(0.0, 1.0, size=(2, 1, size, size)), dtype=np.float64)

    def loss(tape: Optional[GradTape]) -> Tensor:
        out = forward(params, spec, x, TRAIN, tape, np.random.default_rng(seed + 1))
        return mse_loss(out, target, tape)

    tape = GradTape()
    grads = backward(tape, loss(tape))

    names = params.learnable_names()
    picks = [names[i] for i in rng.choice(len(names), size=min(probes, len(names)), replace=False)]
    results = []
    for name in sorted(picks):
        tensor = params[name]
        flat = int(rng.integers(tensor.size))
        idx = np.unravel_index(flat, tensor.shape)
        analytic = grads[tensor.id].data[idx] if tensor.id in grads else 0.0
        saved = tensor.data[idx]
        tensor.data[idx] = saved + MODEL_STEP
        plus = loss(None).item()
        tensor.data[idx] = saved - MODEL_STEP
        minus = loss(None).item()
        tensor.data[idx] = saved
        numeric = (plus - minus) / (2.0 * MODEL_STEP)
        error = relative_error(np.array([numeric]), np.array([analytic]), floor=1e-6)
        results.append(GradCheckResult(f"model {name}{list(idx)}", error, MODEL_TOLERANCE))
    return results


def run_gradcheck_suite(seed: int = 0) -> List[GradCheckResult]:
    results = run_op_suite(seed) + run_model_check(seed)
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"Gradient check failed for: {', '.join(failed)}")
    else:
        logger.info(f"All {len(results)} gradient checks passed")
    return results


def results_frame(results: Sequence[GradCheckResult]) -> pd.DataFrame:
    return pd.DataFrame(
        [{"check": r.name, "max_rel_error": r.max_rel_error, "tolerance": r.tolerance, "passed": r.passed}
         for r in results],
        columns=["check", "max_rel_error", "tolerance", "passed"],
    )


__all__ = [
    "GradCheckResult",
    "relative_error",
    "numeric_gradient",
    "check_gradients",
    "run_op_suite",
    "run_model_check",
    "run_gradcheck_suite",
    "results_frame",
]
