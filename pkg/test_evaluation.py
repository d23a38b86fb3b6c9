import math
import os
import shutil
import tempfile
import unittest

import numpy as np
import pandas as pd
import pytest

from evaluation import (
    MS_SSIM_WEIGHTS,
    MetricReport,
    SsimConfig,
    denoise_image,
    evaluate_dataset,
    mse,
    psnr,
    ssim,
    usable_scales,
)
from fingerprint_data import GenConfig, SamplePair, generate_pair, parse_recipe
from image_helpers import read_pgm


def textured(size, seed=0):
    """Smooth-ish test card in [0.2, 0.8] with structure at several scales."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = 0.5 + 0.2 * np.sin(2 * np.pi * 6 * xx) * np.cos(2 * np.pi * 4 * yy)
    return np.clip(base + 0.05 * rng.standard_normal((size, size)), 0.2, 0.8)


class TestPsnr(unittest.TestCase):

    def test_constant_offset(self):
        ref = np.zeros((1, 8, 8))
        self.assertAlmostEqual(psnr(ref, ref + 0.5), 6.0206, places=4)

    def test_identical_is_infinite(self):
        img = textured(16)[None]
        self.assertEqual(psnr(img, img), math.inf)

    def test_consistent_with_mse(self):
        a, b = textured(32, 1)[None], textured(32, 2)[None]
        self.assertAlmostEqual(psnr(a, b), 10 * math.log10(1.0 / mse(a, b)), places=9)

    def test_dynamic_range_scales_result(self):
        a, b = np.zeros((1, 4, 4)), np.full((1, 4, 4), 0.1)
        self.assertAlmostEqual(psnr(a, b, dr=2.0) - psnr(a, b), 20 * math.log10(2.0), places=9)

    def test_noise_ladder(self):
        image = textured(64)[None]
        noise = np.random.default_rng(3).standard_normal(image.shape)
        ladder = (0.01, 0.05, 0.1, 0.2)
        scores = [psnr(image, image + eps * noise) for eps in ladder]
        self.assertTrue(all(a > b for a, b in zip(scores, scores[1:])), scores)
        # scaling the same noise by eps moves PSNR by exactly 20 log10 of the ratio
        for eps, score in zip(ladder[1:], scores[1:]):
            self.assertAlmostEqual(scores[0] - score, 20 * math.log10(eps / ladder[0]), places=9)

    def test_bad_arguments(self):
        with self.assertRaises(ValueError):
            psnr(np.zeros((1, 4, 4)), np.ones((1, 4, 4)), dr=0.0)
        with self.assertRaises(ValueError):
            psnr(np.zeros((1, 4, 4)), np.ones((1, 4, 5)))


class TestSsim(unittest.TestCase):

    def setUp(self):
        self.image = textured(176)
        self.noise = np.random.default_rng(9).standard_normal(self.image.shape)

    def test_identity(self):
        self.assertEqual(ssim(self.image, self.image), 1.0)
        self.assertEqual(ssim(self.image[None], self.image[None]), 1.0)

    def test_symmetric(self):
        other = self.image + 0.05 * self.noise
        self.assertAlmostEqual(ssim(self.image, other), ssim(other, self.image), places=12)

    def test_inverted_image_scores_low(self):
        self.assertLess(ssim(self.image, 1.0 - self.image), 0.5)

    def test_more_noise_lower_score(self):
        scores = [ssim(self.image, self.image + eps * self.noise) for eps in (0.01, 0.02, 0.05, 0.1, 0.2)]
        self.assertTrue(all(a > b for a, b in zip(scores, scores[1:])), scores)
        self.assertTrue(all(0.0 <= s < 1.0 for s in scores))

    def test_weights_renormalised(self):
        betas, gammas, alpha = SsimConfig().exponents(5)
        self.assertAlmostEqual(betas.sum(), 1.0, places=12)
        self.assertAlmostEqual(gammas.sum(), 1.0, places=12)
        self.assertAlmostEqual(alpha, MS_SSIM_WEIGHTS[-1] / sum(MS_SSIM_WEIGHTS), places=12)
        self.assertAlmostEqual(SsimConfig().exponents(2)[0].sum(), 1.0, places=12)

    def test_scale_count_follows_image_size(self):
        cfg = SsimConfig()
        self.assertEqual(usable_scales((176, 176), cfg), 5)
        self.assertEqual(usable_scales((64, 64), cfg), 3)
        self.assertEqual(usable_scales((16, 40), cfg), 1)
        with self.assertRaises(ValueError):
            usable_scales((10, 10), cfg)

    def test_invalid_config(self):
        with self.assertRaises(ValueError):
            ssim(self.image, self.image, SsimConfig(window_size=10))
        with self.assertRaises(ValueError):
            ssim(self.image, self.image, SsimConfig(scales=6))

    def test_multichannel_rejected(self):
        with self.assertRaises(ValueError):
            ssim(np.zeros((3, 16, 16)), np.zeros((3, 16, 16)))


def patch_on_blank(size, patch, offset):
    image = np.zeros((size, size))
    image[offset:offset + patch.shape[0], offset:offset + patch.shape[1]] = patch
    return image


@pytest.mark.parametrize("size, first, second, cfg", [
    # a shift of 16 keeps the 2x2 pooling grid aligned at all five scales
    (368, 160, 176, SsimConfig()),
    (64, 20, 27, SsimConfig(scales=1)),
])
def test_translating_both_images_leaves_score_unchanged(size, first, second, cfg):
    rng = np.random.default_rng(5)
    clean = rng.uniform(0.2, 0.8, size=(32, 32) if cfg.scales > 1 else (16, 16))
    noisy = clean + 0.1 * rng.standard_normal(clean.shape)
    scores = [ssim(patch_on_blank(size, clean, offset), patch_on_blank(size, noisy, offset), cfg)
              for offset in (first, second)]
    assert 0.0 < scores[0] < 1.0
    assert abs(scores[0] - scores[1]) < 1e-9


def test_mean_baseline_psnr_falls_with_speckle_rate():
    means = []
    for rate in (0.05, 0.1, 0.2):
        cfg = GenConfig(count=20, size=(32, 32), seed=2, recipe=parse_recipe(f"speckle:rate={rate}"))
        pairs = [generate_pair(cfg, index) for index in range(cfg.count)]
        means.append(np.mean([psnr(p.clean, p.noisy) for p in pairs]))
    assert means[0] > means[1] > means[2]


def identity_model(batch):
    return batch.copy()


class TestEvaluateDataset(unittest.TestCase):

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        rng = np.random.default_rng(0)
        self.pairs = []
        for index in range(3):
            clean = textured(24, index)[None].astype(np.float32)
            noisy = np.clip(clean + 0.1 * rng.standard_normal(clean.shape), 0, 1).astype(np.float32)
            self.pairs.append(SamplePair(f"fp_{index:05d}", clean, noisy))

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_identity_model_matches_baseline(self):
        report = evaluate_dataset(identity_model, self.pairs, SsimConfig(scales=1))
        self.assertEqual(len(report.images), 3)
        for m in report.images:
            self.assertEqual(m.psnr, m.baseline_psnr)
            self.assertEqual(m.ssim, m.baseline_ssim)
            self.assertEqual(m.mse, m.baseline_mse)
        summary = report.summary_frame()
        self.assertEqual(summary.loc["delta", "PSNR (dB)"], 0.0)
        self.assertIn("noisy input", report.format_table())

    def test_oracle_model_is_perfect(self):
        lookup = {p.noisy.tobytes(): p.clean for p in self.pairs}

        def oracle(batch):
            # 24 is a multiple of 8, so the batch holds the raw noisy image
            return np.stack([lookup[img.tobytes()] for img in batch])

        report = evaluate_dataset(oracle, self.pairs, SsimConfig(scales=1))
        self.assertEqual(report.psnr_db, math.inf)
        self.assertEqual(report.ssim, 1.0)
        self.assertEqual(report.mse, 0.0)

    def test_mismatched_pair_is_skipped(self):
        bad = SamplePair("fp_broken", np.zeros((1, 24, 24), np.float32), np.zeros((1, 16, 16), np.float32))
        report = evaluate_dataset(identity_model, self.pairs + [bad], SsimConfig(scales=1))
        self.assertEqual(report.skipped, ["fp_broken"])
        self.assertEqual(len(report.images), 3)
        self.assertIn("1 skipped", report.format_table())

    def test_csv_and_saved_images(self):
        save_dir = os.path.join(self.test_dir, "denoised")
        report = evaluate_dataset(identity_model, self.pairs, SsimConfig(scales=1), save_dir=save_dir)
        csv_path = os.path.join(self.test_dir, "metrics.csv")
        report.to_csv(csv_path)
        frame = pd.read_csv(csv_path)
        self.assertEqual(list(frame["id"]), [p.id for p in self.pairs])
        self.assertIn("baseline_ssim", frame.columns)
        pixels, maxval = read_pgm(os.path.join(save_dir, "fp_00000.pgm"))
        self.assertEqual(pixels.shape, (24, 24))
        self.assertEqual(maxval, 255)


def test_denoise_image_pads_and_crops():
    seen = []

    def model(batch):
        seen.append(batch.shape)
        return batch

    image = np.random.default_rng(0).uniform(size=(1, 20, 30)).astype(np.float32)
    out = denoise_image(model, image, size_divisor=8)
    assert seen == [(1, 1, 24, 32)]
    np.testing.assert_array_equal(out, image)


def test_empty_report_means_are_nan():
    report = MetricReport()
    assert math.isnan(report.psnr_db)
    assert report.to_frame().empty


@pytest.mark.parametrize("shape", [(16, 16), (1, 16, 16)])
def test_mse_accepts_planes_and_stacks(shape):
    assert mse(np.zeros(shape), np.full(shape, 0.5)) == pytest.approx(0.25)


if __name__ == '__main__':
    unittest.main()
