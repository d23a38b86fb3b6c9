import logging
import os
from typing import Tuple

import numpy as np

logger = logging.getLogger(__name__)

PGM_MAGIC = b"P5"
MAXVAL = 255
WHITESPACE = b" \t\r\n\x0b\x0c"


class PgmError(ValueError):
    """Malformed PGM data; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.reason = message
        self.offset = offset


def _next_token(blob: bytes, pos: int) -> Tuple[bytes, int]:
    """Return the next header token and the position just after it.

    ``#`` starts a comment that runs to the end of the line.
    """
    while pos < len(blob):
        byte = blob[pos:pos + 1]
        if byte in WHITESPACE:
            pos += 1
        elif byte == b"#":
            end = blob.find(b"\n", pos)
            pos = len(blob) if end < 0 else end + 1
        else:
            break
    start = pos
    while pos < len(blob) and blob[pos:pos + 1] not in WHITESPACE and blob[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PgmError("unexpected end of header", start)
    return blob[start:pos], pos


def _header_int(blob: bytes, pos: int, what: str) -> Tuple[int, int]:
    token, end = _next_token(blob, pos)
    if not token.isdigit():
        raise PgmError(f"expected {what}, found {token[:16]!r}", end - len(token))
    return int(token), end


def parse_pgm(blob: bytes) -> Tuple[np.ndarray, int]:
    """Decode binary PGM bytes into (H x W pixel array, maxval)."""
    if blob[:2] != PGM_MAGIC:
        raise PgmError(f"not a binary PGM: magic {blob[:2]!r}", 0)
    pos = 2
    width, pos = _header_int(blob, pos, "width")
    height, pos = _header_int(blob, pos, "height")
    maxval, pos = _header_int(blob, pos, "maxval")
    if width < 1 or height < 1:
        raise PgmError(f"bad dimensions {width}x{height}", pos)
    if not 0 < maxval < 65536:
        raise PgmError(f"maxval {maxval} out of range", pos)
    if pos >= len(blob) or blob[pos:pos + 1] not in WHITESPACE:
        raise PgmError("missing whitespace after maxval", pos)
    pos += 1

    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    expected = width * height * dtype.itemsize
    payload = blob[pos:pos + expected]
    if len(payload) < expected:
        raise PgmError(f"pixel data truncated: need {expected} bytes, have {len(payload)}", pos + len(payload))
    pixels = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    if pixels.max(initial=0) > maxval:
        raise PgmError(f"pixel value above maxval {maxval}", pos)
    return pixels.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def read_pgm(path: str) -> Tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        blob = f.read()
    try:
        return parse_pgm(blob)
    except PgmError as exc:
        raise PgmError(f"{path}: {exc.reason}", exc.offset) from exc


def write_pgm(path: str, pixels: np.ndarray) -> None:
    """Write an H x W uint8 array as binary PGM with maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {pixels.shape}")
    if pixels.dtype != np.uint8:
        raise ValueError(f"write_pgm expects uint8 pixels, got {pixels.dtype}")
    height, width = pixels.shape
    header = f"P5\n{width} {height}\n{MAXVAL}\n".encode("ascii")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(pixels).tobytes())


def to_unit(pixels: np.ndarray, maxval: int = MAXVAL) -> np.ndarray:
    """Integer pixels to float32 in [0, 1] (v / maxval)."""
    return (np.asarray(pixels, dtype=np.float32) / np.float32(maxval)).astype(np.float32)


def quantize(image: np.ndarray) -> np.ndarray:
    """Float image in [0, 1] to uint8 via round(v * 255)."""
    return np.rint(np.clip(image, 0.0, 1.0) * MAXVAL).astype(np.uint8)


def load_image(path: str) -> np.ndarray:
    """Read a PGM as a 1 x H x W float32 array in [0, 1]."""
    pixels, maxval = read_pgm(path)
    return to_unit(pixels, maxval)[None]


def save_image(path: str, image: np.ndarray) -> None:
    """Quantize a 1 x H x W (or H x W) [0, 1] image and write it as PGM."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[0]
    write_pgm(path, quantize(image))


def reflect_pad_to_multiple(image: np.ndarray, multiple: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Reflect-pad the last two axes up to the next multiple; returns (padded, original H x W)."""
    height, width = image.shape[-2:]
    pad_h = -height % multiple
    pad_w = -width % multiple
    if pad_h == 0 and pad_w == 0:
        return image, (height, width)
    widths = [(0, 0)] * (image.ndim - 2) + [(0, pad_h), (0, pad_w)]
    logger.debug(f"Reflect-padding {height}x{width} to {height + pad_h}x{width + pad_w}")
    return np.pad(image, widths, mode="reflect"), (height, width)


def crop(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    return image[..., :size[0], :size[1]]


__all__ = [
    "PgmError",
    "parse_pgm",
    "read_pgm",
    "write_pgm",
    "to_unit",
    "quantize",
    "load_image",
    "save_image",
    "reflect_pad_to_multiple",
    "crop",
]
