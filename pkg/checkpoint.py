"""
Binary checkpoint container.

Layout (little-endian throughout)::

    b"FPDN"                      magic
    u16                          format version
    u32 x4                       base_channels, channel_cap, encoder_blocks, decoder_blocks
    u8, u32 x n                  dilation count, dilations
    f64                          dropout_rate
    u32 x2                       input_channels, output_channels
    u8                           flags: bit0 BN stats ready, bit1 train state present
    table                        parameters and BN running stats
    [train state]                epoch u32, step u64, best_val f64, best_train f64,
                                 epochs_since_improvement u32, rng state (u32 length + JSON),
                                 Adam m table, Adam v table

A table is a u32 count followed by entries of
``u16 name length, name, u8 dtype code, u8 rank, u32 dims..., float32 payload``.
"""
from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from typing import Dict, Optional, Tuple

import numpy as np

from network import ModelParams, ModelSpec, parameter_shapes
from tensor_engine import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"FPDN"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 1

FLAG_STATS_READY = 0x01
FLAG_TRAIN_STATE = 0x02


class CheckpointError(Exception):
    """Base class for unreadable or incompatible checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class CheckpointWriteError(OSError):
    pass


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.blob):
            raise TruncatedCheckpointError(
                f"checkpoint truncated at byte {len(self.blob)}: needed {count} bytes at offset {self.offset}"
            )
        chunk = self.blob[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str):
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values


def _pack_table(table: Dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(table))]
    for name, array in table.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", DTYPE_FLOAT32, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


def _read_table(reader: _Reader) -> Dict[str, np.ndarray]:
    table: Dict[str, np.ndarray] = {}
    for _ in range(reader.unpack("<I")):
        name = reader.take(reader.unpack("<H")).decode("utf-8")
        dtype_code, rank = reader.unpack("<BB")
        if dtype_code != DTYPE_FLOAT32:
            raise CheckpointError(f"tensor {name}: unknown dtype code {dtype_code}")
        dims = reader.unpack(f"<{rank}I") if rank else ()
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        count = int(np.prod(dims)) if dims else 1
        payload = reader.take(4 * count)
        table[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return table


def _pack_spec(spec: ModelSpec) -> bytes:
    return b"".join([
        struct.pack("<4I", spec.base_channels, spec.channel_cap, spec.encoder_blocks, spec.decoder_blocks),
        struct.pack("<B", len(spec.dilations)),
        struct.pack(f"<{len(spec.dilations)}I", *spec.dilations),
        struct.pack("<d", spec.dropout_rate),
        struct.pack("<2I", spec.input_channels, spec.output_channels),
    ])


def _read_spec(reader: _Reader) -> ModelSpec:
    base, cap, enc, dec = reader.unpack("<4I")
    n_dil = reader.unpack("<B")
    dilations = reader.unpack(f"<{n_dil}I") if n_dil else ()
    dilations = (dilations,) if isinstance(dilations, int) else tuple(dilations)
    dropout_rate = reader.unpack("<d")
    cin, cout = reader.unpack("<2I")
    return ModelSpec(base, cap, enc, dec, dilations, dropout_rate, cin, cout)


def encode_checkpoint(params: ModelParams, spec: ModelSpec, state=None) -> bytes:
    flags = (FLAG_STATS_READY if params.stats_ready else 0) | (FLAG_TRAIN_STATE if state is not None else 0)
    parts = [
        MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        _pack_spec(spec),
        struct.pack("<B", flags),
        _pack_table({name: t.data for name, t in params.tensors.items()}),
    ]
    if state is not None:
        rng_state = json.dumps(state.rng.bit_generator.state, sort_keys=True).encode("utf-8")
        parts.extend([
            struct.pack("<IQddI", state.epoch, state.step, state.best_val_loss, state.best_train_loss,
                        state.epochs_since_improvement),
            struct.pack("<I", len(rng_state)),
            rng_state,
            _pack_table(dict(sorted(state.m.items()))),
            _pack_table(dict(sorted(state.v.items()))),
        ])
    return b"".join(parts)


def _check_against(table: Dict[str, np.ndarray], expected: Dict[str, Tuple[int, ...]], label: str) -> None:
    for name in sorted(set(table) | set(expected)):
        have = table[name].shape if name in table else None
        want = expected.get(name)
        if have != want:
            raise ShapeMismatchError(f"parameter {name}: checkpoint has shape {have}, {label} expects {want}")


def decode_checkpoint(blob: bytes, expected_spec: Optional[ModelSpec] = None):
    """Parse a checkpoint; returns (params, spec, state or None)."""
    reader = _Reader(blob)
    if reader.take(len(MAGIC)) != MAGIC:
        raise BadMagicError("not a checkpoint: bad magic bytes")
    version = reader.unpack("<H")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    spec = _read_spec(reader)
    try:
        spec.validate()
    except ValueError as exc:
        raise CheckpointError(f"checkpoint holds an invalid model spec: {exc}") from exc
    flags = reader.unpack("<B")
    table = _read_table(reader)
    _check_against(table, parameter_shapes(spec), "its own spec")
    if expected_spec is not None and expected_spec != spec:
        _check_against(table, parameter_shapes(expected_spec), "the requested spec")

    state = None
    if flags & FLAG_TRAIN_STATE:
        state = _read_train_state(reader, table)
    if reader.offset != len(blob):
        raise CheckpointError(f"unexpected trailing data at byte {reader.offset}")

    params = ModelParams({name: Tensor(array) for name, array in table.items()},
                         stats_ready=bool(flags & FLAG_STATS_READY))
    return params, spec, state


def _read_train_state(reader: _Reader, table: Dict[str, np.ndarray]):
    from trainer import TrainState

    epoch, step, best_val, best_train, waiting = reader.unpack("<IQddI")
    rng_blob = reader.take(reader.unpack("<I"))
    try:
        rng_state = json.loads(rng_blob.decode("utf-8"))
        bit_generator = getattr(np.random, rng_state["bit_generator"])()
        bit_generator.state = rng_state
    except (ValueError, KeyError, AttributeError, TypeError) as exc:
        raise CheckpointError(f"corrupt generator state: {exc}") from exc
    m = _read_table(reader)
    v = _read_table(reader)
    learnable = {name: arr.shape for name, arr in table.items() if not name.endswith(("running_mean", "running_var"))}
    _check_against(m, learnable, "the Adam first moments")
    _check_against(v, learnable, "the Adam second moments")
    return TrainState(epoch=epoch, step=step, m=m, v=v, best_val_loss=best_val, best_train_loss=best_train,
                      epochs_since_improvement=waiting, rng=np.random.Generator(bit_generator))


def save_checkpoint(path: str, params: ModelParams, spec: ModelSpec, state=None) -> None:
    """Write atomically: a temp file in the target directory, then rename."""
    blob = encode_checkpoint(params, spec, state)
    directory = os.path.dirname(os.path.abspath(path))
    tmp_path = None
    try:
        fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=f".{os.path.basename(path)}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
        tmp_path = None
    except OSError as exc:
        raise CheckpointWriteError(f"could not write checkpoint {path}: {exc}") from exc
    finally:
        if tmp_path is not None and os.path.exists(tmp_path):
            os.remove(tmp_path)
    logger.info(f"Saved checkpoint to {path} ({len(blob)} bytes)")


def load_checkpoint(path: str, expected_spec: Optional[ModelSpec] = None):
    with open(path, "rb") as f:
        blob = f.read()
    params, spec, state = decode_checkpoint(blob, expected_spec)
    logger.info(f"Loaded checkpoint {path}: channels {spec.channels()}, train state {'yes' if state else 'no'}")
    return params, spec, state


__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "CheckpointError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedCheckpointError",
    "ShapeMismatchError",
    "CheckpointWriteError",
    "encode_checkpoint",
    "decode_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]
