"""Dilated encoder-decoder denoising network and its named parameters."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from tensor_engine import (
    EVAL,
    TRAIN,
    BatchNormState,
    ConvSpec,
    GradTape,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    conv2d_transposed,
    dropout,
    max_pool2,
    prelu,
    sigmoid,
)

logger = logging.getLogger(__name__)

PRELU_INIT = 0.25
BUFFER_SUFFIXES = ("running_mean", "running_var")
DECODER_CONVS = 2

Shape = Tuple[int, ...]


@dataclass(frozen=True)
class ModelSpec:
    base_channels: int = 32
    channel_cap: int = 256
    encoder_blocks: int = 4
    decoder_blocks: int = 3
    dilations: Tuple[int, ...] = (1, 2, 5)
    dropout_rate: float = 0.3
    input_channels: int = 1
    output_channels: int = 1

    def validate(self) -> "ModelSpec":
        if self.base_channels < 1 or self.channel_cap < self.base_channels:
            raise ValueError(
                f"need 1 <= base_channels <= channel_cap, got {self.base_channels} and {self.channel_cap}"
            )
        if self.encoder_blocks < 1:
            raise ValueError(f"encoder_blocks must be positive, got {self.encoder_blocks}")
        if self.decoder_blocks != self.encoder_blocks - 1:
            raise ValueError(
                f"decoder_blocks must equal encoder_blocks - 1 ({self.encoder_blocks - 1}), got {self.decoder_blocks}"
            )
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ValueError(f"dilations must be positive integers, got {self.dilations}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.input_channels < 1 or self.output_channels < 1:
            raise ValueError("input_channels and output_channels must be positive")
        return self

    @property
    def size_divisor(self) -> int:
        return 2 ** (self.encoder_blocks - 1)

    def channels(self) -> List[int]:
        """Encoder widths: base * 2**i, capped."""
        return [min(self.base_channels * 2 ** i, self.channel_cap) for i in range(self.encoder_blocks)]


class ModelParams:
    """Ordered name -> Tensor map of weights, BN statistics and PReLU slopes."""

    def __init__(self, tensors: Mapping[str, Tensor], stats_ready: bool = False):
        self.tensors: Dict[str, Tensor] = dict(sorted(tensors.items()))
        self.stats_ready = stats_ready

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def learnable_names(self) -> List[str]:
        return [name for name in self.tensors if not is_buffer(name)]

    def astype(self, dtype) -> "ModelParams":
        """Deep copy with every tensor converted to ``dtype``."""
        return ModelParams({name: Tensor(t.data.copy(), dtype=dtype) for name, t in self.tensors.items()},
                           self.stats_ready)

    def batch_norm_state(self, prefix: str) -> BatchNormState:
        return BatchNormState(self.tensors[f"{prefix}.running_mean"].data,
                              self.tensors[f"{prefix}.running_var"].data,
                              self.stats_ready)


@dataclass
class ForwardHooks:
    """Test seams into the forward pass.

    ``zero_skips`` names encoder blocks whose copy into the decoder is
    replaced with zeros. ``bypass_batch_norm`` skips every batch norm.
    Intermediate outputs land in ``captured`` keyed by block name.
    """

    zero_skips: FrozenSet[str] = frozenset()
    bypass_batch_norm: bool = False
    captured: Dict[str, Tensor] = field(default_factory=dict)


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def _conv_unit_shapes(shapes: Dict[str, Shape], prefix: str, index: int, cin: int, cout: int) -> None:
    shapes[f"{prefix}.conv{index}.weight"] = (cout, cin, 3, 3)
    shapes[f"{prefix}.conv{index}.bias"] = (cout,)
    for leaf in ("gamma", "beta", "running_mean", "running_var"):
        shapes[f"{prefix}.bn{index}.{leaf}"] = (cout,)
    shapes[f"{prefix}.prelu{index}.alpha"] = (cout,)


def parameter_shapes(spec: ModelSpec) -> Dict[str, Shape]:
    """Every tensor name a ModelSpec implies, with its shape, sorted by name."""
    spec.validate()
    widths = spec.channels()
    shapes: Dict[str, Shape] = {}

    cin = spec.input_channels
    for block in range(1, spec.encoder_blocks + 1):
        cout = widths[block - 1]
        for index in range(1, len(spec.dilations) + 1):
            _conv_unit_shapes(shapes, f"enc{block}", index, cin, cout)
            cin = cout

    for block in range(1, spec.decoder_blocks + 1):
        prefix = f"dec{block}"
        target = widths[spec.encoder_blocks - 1 - block]
        shapes[f"{prefix}.up.weight"] = (cin, target, 2, 2)
        shapes[f"{prefix}.up.bias"] = (target,)
        shapes[f"{prefix}.proj.weight"] = (target, 2 * target, 1, 1)
        shapes[f"{prefix}.proj.bias"] = (target,)
        for index in range(1, DECODER_CONVS + 1):
            _conv_unit_shapes(shapes, prefix, index, target, target)
        cin = target

    shapes["head.weight"] = (spec.output_channels, cin, 1, 1)
    shapes["head.bias"] = (spec.output_channels,)
    return dict(sorted(shapes.items()))


def _initial_value(name: str, shape: Shape, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "weight":
        # transposed conv outputs each receive in_channels terms; regular convs Ci*k*k
        fan_in = shape[0] if ".up." in name else int(np.prod(shape[1:]))
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    if leaf in ("gamma", "running_var"):
        return np.ones(shape)
    if leaf == "alpha":
        return np.full(shape, PRELU_INIT)
    return np.zeros(shape)


def build_model(spec: ModelSpec, rng: Union[np.random.Generator, int]) -> ModelParams:
    """He-normal conv weights, zero biases, unit gamma, PReLU slopes 0.25."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    shapes = parameter_shapes(spec)
    tensors = {name: Tensor(_initial_value(name, shape, rng)) for name, shape in shapes.items()}
    params = ModelParams(tensors)
    logger.info(
        f"Built model: channels {spec.channels()}, {len(params.learnable_names())} learnable tensors, "
        f"{count_parameters(spec)} scalars"
    )
    return params


def count_parameters(spec: ModelSpec) -> int:
    return sum(int(np.prod(shape)) for name, shape in parameter_shapes(spec).items() if not is_buffer(name))


def parameter_iter(params: ModelParams,
                   gradients: Optional[Mapping[int, Tensor]] = None
                   ) -> List[Tuple[str, Tensor, Optional[Tensor]]]:
    """(name, tensor, gradient) for learnable tensors in lexicographic order."""
    gradients = gradients or {}
    return [(name, params[name], gradients.get(params[name].id)) for name in params.learnable_names()]


def _conv_unit(params: ModelParams, prefix: str, index: int, h: Tensor, dilation: int, mode: str,
               tape: Optional[GradTape], rng: Optional[np.random.Generator], rate: float,
               hooks: Optional[ForwardHooks]) -> Tensor:
    weight = params[f"{prefix}.conv{index}.weight"]
    spec = ConvSpec.same(weight.shape[1], weight.shape[0], dilation=dilation)
    h = conv2d(h, weight, params[f"{prefix}.conv{index}.bias"], spec, tape)
    if not (hooks and hooks.bypass_batch_norm):
        bn = f"{prefix}.bn{index}"
        h = batch_norm(h, params[f"{bn}.gamma"], params[f"{bn}.beta"], params.batch_norm_state(bn), mode, tape)
    h = prelu(h, params[f"{prefix}.prelu{index}.alpha"], tape)
    return dropout(h, rate, rng, mode, tape)


def _decoder_block(params: ModelParams, prefix: str, h: Tensor, skip: Tensor, mode: str,
                   tape: Optional[GradTape], rng: Optional[np.random.Generator], rate: float,
                   hooks: Optional[ForwardHooks]) -> Tensor:
    up_w = params[f"{prefix}.up.weight"]
    up_spec = ConvSpec(up_w.shape[0], up_w.shape[1], kernel=2, stride=2, transposed=True)
    h = conv2d_transposed(h, up_w, params[f"{prefix}.up.bias"], up_spec, tape)
    h = concat_channels([skip, h], tape)
    proj_w = params[f"{prefix}.proj.weight"]
    projected = conv2d(h, proj_w, params[f"{prefix}.proj.bias"],
                       ConvSpec(proj_w.shape[1], proj_w.shape[0], kernel=1), tape)
    if hooks is not None:
        hooks.captured[f"{prefix}.proj"] = projected
    h = projected
    for index in range(1, DECODER_CONVS + 1):
        h = _conv_unit(params, prefix, index, h, 1, mode, tape, rng, rate, hooks)
    return add(h, projected, tape)


def check_input(spec: ModelSpec, x: Tensor) -> None:
    if len(x.shape) != 4:
        raise ShapeError(f"network input must be N x C x H x W, got shape {x.shape}")
    _, c, h, w = x.shape
    if c != spec.input_channels:
        raise ShapeError(f"network input channel dimension is {c}, expected {spec.input_channels}")
    div = spec.size_divisor
    if h % div or w % div:
        raise ShapeError(f"input height/width {h}x{w} must be divisible by {div}")


def forward(params: ModelParams, spec: ModelSpec, x: Tensor, mode: str = EVAL,
            tape: Optional[GradTape] = None, rng: Optional[np.random.Generator] = None,
            hooks: Optional[ForwardHooks] = None) -> Tensor:
    """Denoise ``x`` (N x 1 x H x W in [0, 1]); output has the input's shape."""
    check_input(spec, x)
    if x.data.min() < 0.0 or x.data.max() > 1.0:
        raise ValueError("network input values must lie in [0, 1]")
    rate = spec.dropout_rate
    if mode == TRAIN and rate > 0.0 and rng is None:
        raise ValueError("train-mode forward needs a seeded generator for dropout")

    skips: List[Tensor] = []
    h = x
    for block in range(1, spec.encoder_blocks + 1):
        if block > 1:
            h, _ = max_pool2(h, tape)
        for index, dilation in enumerate(spec.dilations, start=1):
            h = _conv_unit(params, f"enc{block}", index, h, dilation, mode, tape, rng, rate, hooks)
        if hooks is not None:
            hooks.captured[f"enc{block}"] = h
        skips.append(h)

    for block in range(1, spec.decoder_blocks + 1):
        source = spec.encoder_blocks - block
        skip = skips[source - 1]
        if hooks is not None and f"enc{source}" in hooks.zero_skips:
            skip = Tensor(np.zeros_like(skip.data), dtype=skip.dtype)
        h = _decoder_block(params, f"dec{block}", h, skip, mode, tape, rng, rate, hooks)
        if hooks is not None:
            hooks.captured[f"dec{block}"] = h

    head_w = params["head.weight"]
    h = conv2d(h, head_w, params["head.bias"], ConvSpec(head_w.shape[1], head_w.shape[0], kernel=1), tape)
    out = sigmoid(h, tape)
    if mode == TRAIN:
        params.stats_ready = True
    return out


def make_denoiser(params: ModelParams, spec: ModelSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Eval-mode callable mapping an N x 1 x H x W batch to its denoised batch."""

    def denoise(batch: np.ndarray) -> np.ndarray:
        return forward(params, spec, Tensor(batch), EVAL).data

    return denoise


def effective_receptive_field(dilations: Sequence[int], kernel: int = 3) -> int:
    """Side of the input span seen by a stack of stride-1 dilated convs."""
    return 1 + sum((kernel - 1) * d for d in dilations)


def receptive_field_support(dilations: Sequence[int], kernel: int = 3, size: Optional[int] = None) -> np.ndarray:
    """Boolean map of outputs touched by a one-hot probe through the conv stack.

    By symmetry of all-ones kernels this equals the input span influencing
    the centre output.
    """
    side = effective_receptive_field(dilations, kernel)
    size = size or side + 4
    probe = np.zeros((1, 1, size, size))
    probe[0, 0, size // 2, size // 2] = 1.0
    h = Tensor(probe, dtype=np.float64)
    for d in dilations:
        spec = ConvSpec.same(1, 1, dilation=d, kernel=kernel)
        h = conv2d(h, Tensor(np.ones(spec.weight_shape), dtype=np.float64), Tensor(np.zeros(1), dtype=np.float64), spec)
    return h.data[0, 0] != 0.0


__all__ = [
    "ModelSpec",
    "ModelParams",
    "ForwardHooks",
    "parameter_shapes",
    "build_model",
    "count_parameters",
    "parameter_iter",
    "forward",
    "make_denoiser",
    "effective_receptive_field",
    "receptive_field_support",
]
