import os
import math
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.signal import convolve2d

from image_helpers import crop, quantize, reflect_pad_to_multiple, write_pgm

logger = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

Denoiser = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SsimConfig:
    """Multi-scale SSIM settings. ``scales=1`` gives plain single-scale SSIM.

    ``alpha`` defaults to the last used beta, as in the usual MS-SSIM weighting.
    """

    scales: int = 5
    betas: Tuple[float, ...] = MS_SSIM_WEIGHTS
    gammas: Tuple[float, ...] = MS_SSIM_WEIGHTS
    alpha: Optional[float] = None
    window_size: int = 11
    sigma: float = 1.5
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    def validate(self) -> "SsimConfig":
        if self.scales < 1:
            raise ValueError(f"scales must be >= 1, got {self.scales}")
        if len(self.betas) < self.scales or len(self.gammas) < self.scales:
            raise ValueError(f"need {self.scales} betas and gammas, got {len(self.betas)} and {len(self.gammas)}")
        exponents = list(self.betas[:self.scales]) + list(self.gammas[:self.scales])
        if self.alpha is not None:
            exponents.append(self.alpha)
        if min(exponents) <= 0.0:
            raise ValueError("SSIM exponents must be positive")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be a positive odd integer, got {self.window_size}")
        if self.sigma <= 0.0 or self.dynamic_range <= 0.0:
            raise ValueError("sigma and dynamic_range must be positive")
        return self

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2.0

    def exponents(self, scales: int) -> Tuple[np.ndarray, np.ndarray, float]:
        """(betas, gammas, alpha) for ``scales`` levels, each list renormalised to sum 1."""
        betas = np.asarray(self.betas[:scales], dtype=np.float64)
        gammas = np.asarray(self.gammas[:scales], dtype=np.float64)
        betas = betas / betas.sum()
        gammas = gammas / gammas.sum()
        alpha = float(betas[-1]) if self.alpha is None else self.alpha
        return betas, gammas, alpha


def mse(reference: np.ndarray, test: np.ndarray) -> float:
    reference, test = _check_pair(reference, test)
    diff = reference - test
    return float(np.mean(diff * diff))


def psnr(reference: np.ndarray, test: np.ndarray, dr: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, summed over channels of a C x H x W pair.

    Returns ``math.inf`` when a channel matches exactly.
    """
    if dr <= 0:
        raise ValueError(f"dynamic range must be positive, got {dr}")
    reference, test = _check_pair(reference, test)
    if reference.ndim == 2:
        reference, test = reference[None], test[None]
    total = 0.0
    for ref_channel, test_channel in zip(reference, test):
        diff = ref_channel - test_channel
        channel_mse = float(np.mean(diff * diff))
        if channel_mse == 0.0:
            return math.inf
        total += 10.0 * math.log10(dr * dr / channel_mse)
    return total


def _check_pair(reference: np.ndarray, test: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise ValueError(f"image shapes differ: {reference.shape} vs {test.shape}")
    return reference, test


def _as_plane(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ValueError(f"SSIM needs a single-channel image, got shape {image.shape}")
    return image


@lru_cache(maxsize=None)
def gaussian_window(size: int, sigma: float) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def usable_scales(shape: Tuple[int, int], cfg: SsimConfig) -> int:
    """Largest scale count <= cfg.scales whose coarsest level still fits a window."""
    side = min(shape)
    scales = cfg.scales
    while scales >= 1 and side < cfg.window_size * 2 ** (scales - 1):
        scales -= 1
    if scales < 1:
        raise ValueError(f"image {shape[0]}x{shape[1]} is smaller than the {cfg.window_size}px SSIM window")
    if scales < cfg.scales:
        _warn_reduced_scales(tuple(shape), cfg.scales, scales)
    return scales


@lru_cache(maxsize=None)
def _warn_reduced_scales(shape: Tuple[int, int], requested: int, used: int) -> None:
    logger.warning(f"SSIM on {shape[0]}x{shape[1]} images: using {used} of {requested} scales")


def _downsample(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[0] // 2, image.shape[1] // 2
    return image[:2 * h, :2 * w].reshape(h, 2, w, 2).mean(axis=(1, 3))


def ssim_components(x: np.ndarray, y: np.ndarray, cfg: SsimConfig) -> Tuple[float, float, float]:
    """Spatial means of luminance, contrast and structure maps at one scale."""
    window = gaussian_window(cfg.window_size, cfg.sigma)

    def filt(img):
        return convolve2d(img, window, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    sigma_xy = np.sqrt(np.maximum(var_x, 0.0) * np.maximum(var_y, 0.0))

    luminance = (2.0 * mu_x * mu_y + cfg.c1) / (mu_x * mu_x + mu_y * mu_y + cfg.c1)
    contrast = (2.0 * sigma_xy + cfg.c2) / (var_x + var_y + cfg.c2)
    structure = (cov + cfg.c3) / (sigma_xy + cfg.c3)
    return float(luminance.mean()), float(contrast.mean()), float(structure.mean())


def ssim(reference: np.ndarray, test: np.ndarray, cfg: Optional[SsimConfig] = None) -> float:
    """Multi-scale SSIM of two single-channel images (H x W or 1 x H x W).

    Component means are clamped at zero before exponentiation, so strongly
    anti-correlated images score 0.
    """
    cfg = (cfg or SsimConfig()).validate()
    x, y = _as_plane(reference), _as_plane(test)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    scales = usable_scales(x.shape, cfg)
    if np.array_equal(x, y):
        return 1.0
    betas, gammas, alpha = cfg.exponents(scales)

    score = 1.0
    for level in range(scales):
        luminance, contrast, structure = ssim_components(x, y, cfg)
        score *= max(contrast, 0.0) ** betas[level] * max(structure, 0.0) ** gammas[level]
        if level == scales - 1:
            score *= max(luminance, 0.0) ** alpha
        else:
            x, y = _downsample(x), _downsample(y)
    return float(score)


@dataclass
class ImageMetrics:
    id: str
    psnr: float
    ssim: float
    mse: float
    baseline_psnr: float
    baseline_ssim: float
    baseline_mse: float


@dataclass
class MetricReport:
    images: List[ImageMetrics] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)

    def _mean(self, attr: str) -> float:
        if not self.images:
            return math.nan
        return float(np.mean([getattr(m, attr) for m in self.images]))

    @property
    def psnr_db(self) -> float:
        return self._mean("psnr")

    @property
    def ssim(self) -> float:
        return self._mean("ssim")

    @property
    def mse(self) -> float:
        return self._mean("mse")

    @property
    def baseline_psnr(self) -> float:
        return self._mean("baseline_psnr")

    @property
    def baseline_ssim(self) -> float:
        return self._mean("baseline_ssim")

    @property
    def baseline_mse(self) -> float:
        return self._mean("baseline_mse")

    def to_frame(self) -> pd.DataFrame:
        columns = ["id", "psnr", "ssim", "mse", "baseline_psnr", "baseline_ssim", "baseline_mse"]
        return pd.DataFrame([vars(m) for m in self.images], columns=columns)

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)
        logger.info(f"Wrote per-image metrics for {len(self.images)} images to {path}")

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "PSNR (dB)": [self.baseline_psnr, self.psnr_db, self.psnr_db - self.baseline_psnr],
                "SSIM": [self.baseline_ssim, self.ssim, self.ssim - self.baseline_ssim],
            },
            index=pd.Index(["noisy input", "denoised", "delta"], name="method"),
        )

    def format_table(self) -> str:
        table = self.summary_frame().to_string(float_format=lambda v: f"{v:.4f}")
        footer = f"\n{len(self.images)} images"
        if self.skipped:
            footer += f", {len(self.skipped)} skipped (size mismatch)"
        return table + footer


def denoise_image(model: Denoiser, image: np.ndarray, size_divisor: int = 8) -> np.ndarray:
    """Run ``model`` on one 1 x H x W image, reflect-padding to the size divisor."""
    padded, original = reflect_pad_to_multiple(image, size_divisor)
    out = model(padded[None].astype(np.float32))[0]
    return crop(out, original)


def evaluate_dataset(model: Denoiser, pairs: Sequence, cfg: Optional[SsimConfig] = None,
                     size_divisor: int = 8, save_dir: Optional[str] = None) -> MetricReport:
    """Per-image PSNR/SSIM/MSE of denoised vs clean, with the noisy-vs-clean baseline."""
    cfg = cfg or SsimConfig()
    report = MetricReport()
    if save_dir:
        os.makedirs(save_dir, exist_ok=True)
    for pair in pairs:
        if pair.clean.shape != pair.noisy.shape:
            logger.warning(f"Pair {pair.id} has mismatched sizes {pair.clean.shape} vs {pair.noisy.shape}, skipping.")
            report.skipped.append(pair.id)
            continue
        denoised = denoise_image(model, pair.noisy, size_divisor)
        if save_dir:
            write_pgm(os.path.join(save_dir, f"{pair.id}.pgm"), quantize(denoised[0]))
        report.images.append(ImageMetrics(
            id=pair.id,
            psnr=psnr(pair.clean, denoised, cfg.dynamic_range),
            ssim=ssim(pair.clean, denoised, cfg),
            mse=mse(pair.clean, denoised),
            baseline_psnr=psnr(pair.clean, pair.noisy, cfg.dynamic_range),
            baseline_ssim=ssim(pair.clean, pair.noisy, cfg),
            baseline_mse=mse(pair.clean, pair.noisy),
        ))
    logger.info(
        f"Evaluated {len(report.images)} pairs: PSNR {report.psnr_db:.4f} dB (baseline {report.baseline_psnr:.4f}), "
        f"SSIM {report.ssim:.4f} (baseline {report.baseline_ssim:.4f})"
    )
    return report


__all__ = [
    "SsimConfig",
    "mse",
    "psnr",
    "ssim",
    "usable_scales",
    "ImageMetrics",
    "MetricReport",
    "denoise_image",
    "evaluate_dataset",
]
