"""Synthetic fingerprint pairs, degradation recipes and the on-disk dataset layout."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft, ndimage

from image_helpers import PgmError, load_image, save_image

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)
SIZE_MULTIPLE = 8
MANIFEST_NAME = "manifest.txt"

GROWTH_ITERATIONS = 6
ORIENTATION_BINS = 16
RIDGE_GAIN = 2.5
INK_FLOOR = 0.1
INK_RANGE = 0.85
BACKGROUND = 1.0

MAX_ROTATION_DEG = 15.0
SCALE_RANGE = (0.9, 1.1)


class DatasetError(ValueError):
    pass


# kind -> {param: (low, high, integer?)}
DEGRADATIONS: Dict[str, Dict[str, Tuple[float, float, bool]]] = {
    "background_blend": {"strength": (0.0, 1.0, False)},
    "gaussian_blur": {"sigma": (0.0, 10.0, False)},
    "speckle": {"rate": (0.0, 1.0, False)},
    "scratch_occlusion": {"count": (0, 50, True), "width": (1, 16, True)},
    "contrast_jitter": {"range": (0.0, 0.99, False)},
}


@dataclass(frozen=True)
class DegradationStep:
    kind: str
    probability: float
    params: Tuple[Tuple[str, float], ...] = ()

    def validate(self) -> "DegradationStep":
        if self.kind not in DEGRADATIONS:
            raise ValueError(f"unknown degradation {self.kind!r}; expected one of {sorted(DEGRADATIONS)}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"{self.kind}: probability must lie in [0, 1], got {self.probability}")
        given = dict(self.params)
        for name in given:
            if name not in DEGRADATIONS[self.kind]:
                raise ValueError(f"{self.kind}: unknown parameter {name!r}")
        for name, (low, high, integer) in DEGRADATIONS[self.kind].items():
            if name not in given:
                raise ValueError(f"{self.kind}: missing parameter {name!r}")
            value = given[name]
            if not low <= value <= high or (integer and value != int(value)):
                kind = "an integer" if integer else "a number"
                raise ValueError(f"{self.kind}: {name} must be {kind} in [{low}, {high}], got {value}")
        return self

    def param(self, name: str) -> float:
        return dict(self.params)[name]


def step(kind: str, probability: float = 1.0, **params: float) -> DegradationStep:
    return DegradationStep(kind, probability, tuple(sorted(params.items()))).validate()


DEFAULT_RECIPE: Tuple[DegradationStep, ...] = (
    step("background_blend", 0.8, strength=0.35),
    step("gaussian_blur", 0.5, sigma=1.0),
    step("speckle", 0.7, rate=0.05),
    step("scratch_occlusion", 0.5, count=2, width=2),
    step("contrast_jitter", 0.7, range=0.3),
)


def parse_recipe(text: str) -> Tuple[DegradationStep, ...]:
    """Parse ``kind:key=value:p=prob,...``; an empty string is an empty recipe."""
    steps = []
    for chunk in filter(None, (part.strip() for part in text.split(","))):
        kind, *fields = chunk.split(":")
        probability = 1.0
        params = {}
        for item in fields:
            key, sep, value = item.partition("=")
            if not sep:
                raise ValueError(f"recipe entry {chunk!r}: expected key=value, got {item!r}")
            try:
                number = float(value)
            except ValueError:
                raise ValueError(f"recipe entry {chunk!r}: {key} is not a number: {value!r}") from None
            if key.strip() == "p":
                probability = number
            else:
                params[key.strip()] = number
        steps.append(step(kind.strip(), probability, **params))
    return tuple(steps)


def format_recipe(recipe: Sequence[DegradationStep]) -> str:
    def fmt(value: float) -> str:
        return f"{value:g}"

    return ",".join(
        ":".join([s.kind] + [f"{k}={fmt(v)}" for k, v in s.params] + [f"p={fmt(s.probability)}"]) for s in recipe
    )


@dataclass
class GenConfig:
    count: int = 100
    size: Tuple[int, int] = (64, 64)
    seed: int = 0
    ridge_frequency: float = 0.1
    orientation_smoothness: float = 8.0
    recipe: Tuple[DegradationStep, ...] = DEFAULT_RECIPE

    def validate(self) -> "GenConfig":
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        h, w = self.size
        if h < 16 or w < 16 or h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
            raise ValueError(f"size {h}x{w} must be at least 16 and divisible by {SIZE_MULTIPLE}")
        if not 0.0 < self.ridge_frequency < 0.5:
            raise ValueError(f"ridge_frequency must lie in (0, 0.5), got {self.ridge_frequency}")
        if self.orientation_smoothness <= 0.0:
            raise ValueError(f"orientation_smoothness must be positive, got {self.orientation_smoothness}")
        for s in self.recipe:
            s.validate()
        return self


@dataclass
class SamplePair:
    id: str
    clean: np.ndarray
    noisy: np.ndarray


def sample_id(index: int) -> str:
    return f"fp_{index:05d}"


# --- clean print synthesis -------------------------------------------------

def orientation_field(shape: Tuple[int, int], smoothness: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth ridge-normal angles in [0, pi), from low-passed doubled-angle noise."""
    angles = rng.uniform(0.0, np.pi, size=shape)
    cos2 = ndimage.gaussian_filter(np.cos(2 * angles), smoothness, mode="wrap")
    sin2 = ndimage.gaussian_filter(np.sin(2 * angles), smoothness, mode="wrap")
    return np.mod(0.5 * np.arctan2(sin2, cos2), np.pi)


@lru_cache(maxsize=8)
def gabor_bank(shape: Tuple[int, int], frequency: float, bins: int = ORIENTATION_BINS) -> np.ndarray:
    """Real FFTs of circularly centred Gabor kernels, one per orientation bin."""
    h, w = shape
    sigma = 3.0 / (2.0 * frequency) * math.sqrt(1.0 / (6.0 * math.log(10.0)))
    y = (np.fft.fftfreq(h) * h)[:, None]
    x = (np.fft.fftfreq(w) * w)[None, :]
    envelope = np.exp(-(x ** 2 + y ** 2) / (2.0 * sigma ** 2))
    bank = []
    for k in range(bins):
        t = np.pi * k / bins
        kernel = envelope * np.cos(2.0 * np.pi * frequency * (x * np.cos(t) + y * np.sin(t)))
        response = fft.rfft2(kernel)
        response[0, 0] = 0.0
        bank.append(response)
    return np.stack(bank)


def grow_ridges(theta: np.ndarray, frequency: float, rng: np.random.Generator,
                iterations: int = GROWTH_ITERATIONS) -> np.ndarray:
    """Iteratively filter noise so each pixel keeps the response of its own orientation bin."""
    shape = theta.shape
    bank = gabor_bank(shape, frequency)
    bins = len(bank)
    selector = (np.rint(theta / np.pi * bins).astype(int) % bins)[None]
    pattern = rng.standard_normal(shape)
    for _ in range(iterations):
        responses = fft.irfft2(fft.rfft2(pattern)[None] * bank, s=shape)
        pattern = np.take_along_axis(responses, selector, axis=0)[0]
        pattern /= np.abs(pattern).max() + 1e-12
    return pattern


def pad_mask(shape: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Soft elliptical fingertip footprint, 1 inside and 0 outside."""
    h, w = shape
    cy = h / 2.0 + rng.uniform(-0.05, 0.05) * h
    cx = w / 2.0 + rng.uniform(-0.05, 0.05) * w
    ry = rng.uniform(0.38, 0.46) * h
    rx = rng.uniform(0.30, 0.38) * w
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return 0.5 * (1.0 - np.tanh((r - 1.0) / 0.05))


def clean_print(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    size = tuple(cfg.size)
    theta = orientation_field(size, cfg.orientation_smoothness, rng)
    pattern = grow_ridges(theta, cfg.ridge_frequency, rng)
    pattern /= pattern.std() + 1e-12
    valleys = 0.5 * (1.0 - np.tanh(RIDGE_GAIN * pattern))
    ink = INK_FLOOR + INK_RANGE * valleys
    mask = pad_mask(size, rng)
    return mask * ink + (1.0 - mask) * BACKGROUND


# --- degradations ----------------------------------------------------------

def _background_blend(img: np.ndarray, s: DegradationStep, rng: np.random.Generator) -> np.ndarray:
    texture = ndimage.gaussian_filter(rng.standard_normal(img.shape), rng.uniform(2.0, 8.0), mode="wrap")
    texture = (texture - texture.min()) / (np.ptp(texture) + 1e-12)
    h, w = img.shape
    angle = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = (np.cos(angle) * xx / w + np.sin(angle) * yy / h)
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    background = 0.25 + 0.5 * (0.7 * texture + 0.3 * ramp)
    strength = s.param("strength")
    return (1.0 - strength) * img + strength * background


def _gaussian_blur(img: np.ndarray, s: DegradationStep, rng: np.random.Generator) -> np.ndarray:
    return ndimage.gaussian_filter(img, s.param("sigma"), mode="reflect")


def _speckle(img: np.ndarray, s: DegradationStep, rng: np.random.Generator) -> np.ndarray:
    hit = rng.random(img.shape) < s.param("rate")
    values = rng.random(img.shape)
    return np.where(hit, values, img)


def _scratch_occlusion(img: np.ndarray, s: DegradationStep, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = img.copy()
    for _ in range(int(s.param("count"))):
        y0, y1 = rng.uniform(0, h, size=2)
        x0, x1 = rng.uniform(0, w, size=2)
        shade = rng.uniform(0.0, 0.3) if rng.random() < 0.5 else rng.uniform(0.8, 1.0)
        dy, dx = y1 - y0, x1 - x0
        length2 = dy * dy + dx * dx + 1e-12
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / length2, 0.0, 1.0)
        distance = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
        out[distance <= s.param("width") / 2.0] = shade
    return out


def _contrast_jitter(img: np.ndarray, s: DegradationStep, rng: np.random.Generator) -> np.ndarray:
    r = s.param("range")
    gain = 1.0 + rng.uniform(-r, r)
    shift = rng.uniform(-r, r) * 0.25
    return (img - 0.5) * gain + 0.5 + shift


_APPLY = {
    "background_blend": _background_blend,
    "gaussian_blur": _gaussian_blur,
    "speckle": _speckle,
    "scratch_occlusion": _scratch_occlusion,
    "contrast_jitter": _contrast_jitter,
}


def degrade(clean: np.ndarray, recipe: Sequence[DegradationStep], rng: np.random.Generator) -> np.ndarray:
    """Apply each step with its probability; one draw per step whether or not it fires."""
    img = clean.copy()
    for s in recipe:
        if rng.random() < s.probability:
            img = np.clip(_APPLY[s.kind](img, s, rng), 0.0, 1.0)
    return img


def generate_pair(cfg: GenConfig, index: int) -> SamplePair:
    rng = np.random.default_rng([cfg.seed, index])
    clean = np.clip(clean_print(cfg, rng), 0.0, 1.0)
    noisy = degrade(clean, cfg.recipe, rng)
    return SamplePair(sample_id(index), clean[None].astype(np.float32), noisy[None].astype(np.float32))


# --- splits and manifest ---------------------------------------------------

def split_sizes(count: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Tuple[int, int, int]:
    """Floor the train and val shares; the remainder goes to test."""
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_train = math.floor(count * fractions[0] + 1e-9)
    n_val = math.floor(count * fractions[1] + 1e-9)
    return n_train, n_val, count - n_train - n_val


def assign_splits(ids: Sequence[str], fractions: Sequence[float], seed: int) -> Dict[str, str]:
    n_train, n_val, _ = split_sizes(len(ids), fractions)
    order = np.random.default_rng([seed]).permutation(len(ids))
    splits = {}
    for rank, position in enumerate(order):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        splits[ids[position]] = split
    return dict(sorted(splits.items()))


@dataclass
class DatasetManifest:
    root: str
    splits: Dict[str, str]
    size: Tuple[int, int]
    seed: int
    fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS
    extra: Dict[str, str] = field(default_factory=dict)

    def clean_path(self, sample: str) -> str:
        return os.path.join(self.root, "clean", f"{sample}.pgm")

    def noisy_path(self, sample: str) -> str:
        return os.path.join(self.root, "noisy", f"{sample}.pgm")

    def ids(self, split: Optional[str] = None) -> List[str]:
        return sorted(i for i, s in self.splits.items() if split is None or s == split)

    def load_pair(self, sample: str) -> SamplePair:
        try:
            return SamplePair(sample, load_image(self.clean_path(sample)), load_image(self.noisy_path(sample)))
        except (OSError, PgmError) as exc:
            raise DatasetError(f"cannot read pair {sample}: {exc}") from exc

    def load_pairs(self, split: str) -> List[SamplePair]:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [self.load_pair(sample) for sample in self.ids(split)]

    def write(self) -> None:
        lines = [
            f"#size={self.size[0]}x{self.size[1]}",
            f"#seed={self.seed}",
            "#fractions=" + ",".join(f"{f:g}" for f in self.fractions),
        ]
        lines += [f"#{key}={value}" for key, value in sorted(self.extra.items())]
        lines += [f"{sample},{split}" for sample, split in sorted(self.splits.items())]
        with open(os.path.join(self.root, MANIFEST_NAME), "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")


def write_dataset(cfg: GenConfig, root: str,
                  fractions: Sequence[float] = DEFAULT_FRACTIONS) -> DatasetManifest:
    cfg.validate()
    ids = [sample_id(index) for index in range(cfg.count)]
    manifest = DatasetManifest(root, assign_splits(ids, fractions, cfg.seed), tuple(cfg.size), cfg.seed,
                               tuple(fractions), {"recipe": format_recipe(cfg.recipe)})
    for sub in ("clean", "noisy"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    for index in range(cfg.count):
        pair = generate_pair(cfg, index)
        save_image(manifest.clean_path(pair.id), pair.clean)
        save_image(manifest.noisy_path(pair.id), pair.noisy)
        if (index + 1) % 100 == 0:
            logger.info(f"Generated {index + 1}/{cfg.count} pairs")
    manifest.write()
    counts = {split: len(manifest.ids(split)) for split in SPLITS}
    logger.info(f"Wrote {cfg.count} pairs to {root}: {counts}")
    return manifest


def _parse_header(key: str, value: str) -> object:
    if key == "size":
        h, _, w = value.lower().partition("x")
        return int(h), int(w)
    if key == "seed":
        return int(value)
    if key == "fractions":
        return tuple(float(v) for v in value.split(","))
    return value


def load_dataset(root: str) -> DatasetManifest:
    path = os.path.join(root, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc

    header: Dict[str, object] = {}
    splits: Dict[str, str] = {}
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            try:
                header[key.strip()] = _parse_header(key.strip(), value.strip())
            except ValueError as exc:
                raise DatasetError(f"{path}:{number}: bad header {line!r}: {exc}") from exc
            continue
        sample, _, split = line.partition(",")
        if split not in SPLITS:
            raise DatasetError(f"{path}:{number}: expected 'id,split' with split in {SPLITS}, got {line!r}")
        if sample in splits:
            raise DatasetError(f"{path}:{number}: duplicate id {sample}")
        splits[sample] = split

    for key in ("size", "seed"):
        if key not in header:
            raise DatasetError(f"{path}: missing #{key}= header")
    extra = {k: str(v) for k, v in header.items() if k not in ("size", "seed", "fractions")}
    manifest = DatasetManifest(root, dict(sorted(splits.items())), header["size"], header["seed"],
                               header.get("fractions", DEFAULT_FRACTIONS), extra)

    missing = [s for s in manifest.ids()
               if not (os.path.isfile(manifest.clean_path(s)) and os.path.isfile(manifest.noisy_path(s)))]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise DatasetError(f"{len(missing)} ids lack a clean/noisy image pair: {shown}")
    for split in SPLITS:
        if not manifest.ids(split):
            logger.warning(f"Split '{split}' of dataset {root} is empty")
    return manifest


# --- augmentation and batching ---------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    angle_deg: float = 0.0
    scale: float = 1.0
    flip_h: bool = False
    flip_v: bool = False

    @property
    def is_warp_identity(self) -> bool:
        return self.angle_deg == 0.0 and self.scale == 1.0


def sample_augment_params(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        angle_deg=rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG),
        scale=rng.uniform(*SCALE_RANGE),
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
    )


def apply_augment(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Rotate and scale about the centre (bilinear, white fill), then flip."""
    plane = np.asarray(image, dtype=np.float64)[0]
    if not params.is_warp_identity:
        a = math.radians(params.angle_deg)
        inverse = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]]) / params.scale
        centre = (np.array(plane.shape, dtype=np.float64) - 1.0) / 2.0
        plane = ndimage.affine_transform(plane, inverse, offset=centre - inverse @ centre,
                                         order=1, mode="constant", cval=BACKGROUND)
    if params.flip_h:
        plane = plane[:, ::-1]
    if params.flip_v:
        plane = plane[::-1, :]
    return np.clip(plane, 0.0, 1.0)[None].astype(np.float32)


def augment(pair: SamplePair, rng: np.random.Generator) -> SamplePair:
    params = sample_augment_params(rng)
    return SamplePair(pair.id, apply_augment(pair.clean, params), apply_augment(pair.noisy, params))


def iter_pair_batches(pairs: Sequence[SamplePair], batch_size: int, rng: Optional[np.random.Generator],
                      shuffle: bool = True, augmented: bool = False) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield (noisy, clean) batches of shape B x 1 x H x W; the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if (shuffle or augmented) and rng is None:
        raise ValueError("shuffling or augmenting needs a seeded generator")
    order = rng.permutation(len(pairs)) if shuffle else np.arange(len(pairs))
    for start in range(0, len(order), batch_size):
        batch = [pairs[i] for i in order[start:start + batch_size]]
        if augmented:
            batch = [augment(pair, rng) for pair in batch]
        shapes = {pair.clean.shape for pair in batch} | {pair.noisy.shape for pair in batch}
        if len(shapes) != 1:
            raise DatasetError(f"batch mixes image shapes {sorted(shapes)}: {[p.id for p in batch]}")
        yield (np.stack([p.noisy for p in batch]).astype(np.float32, copy=False),
               np.stack([p.clean for p in batch]).astype(np.float32, copy=False))


def batch_iter(manifest: DatasetManifest, split: str, batch_size: int,
               rng: Optional[np.random.Generator]) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Train batches are shuffled and augmented; val/test come in id order untouched."""
    pairs = manifest.load_pairs(split)
    if not pairs:
        raise DatasetError(f"split '{split}' is empty")
    training = split == "train"
    return iter_pair_batches(pairs, batch_size, rng, shuffle=training, augmented=training)


__all__ = [
    "DatasetError",
    "DegradationStep",
    "DEFAULT_RECIPE",
    "parse_recipe",
    "format_recipe",
    "GenConfig",
    "SamplePair",
    "generate_pair",
    "split_sizes",
    "assign_splits",
    "DatasetManifest",
    "write_dataset",
    "load_dataset",
    "AugmentParams",
    "sample_augment_params",
    "apply_augment",
    "augment",
    "iter_pair_batches",
    "batch_iter",
]
