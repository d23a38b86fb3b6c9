import argparse
import filecmp
import logging
import os

import pandas as pd

from Fingerprint_Denoiser import EXIT_OK, main as cli_main
from fingerprint_data import GenConfig, generate_pair
from network import ModelSpec, build_model
from trainer import TrainConfig, fit

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

MIN_PSNR_GAIN = 2.0
MIN_SSIM_GAIN = 0.03
MIN_OVERFIT_RATIO = 10.0


def run_once(workdir: str, count: int, seed: int, max_epochs: int, base_channels: int) -> pd.DataFrame:
    """generate -> train -> eval in ``workdir``; returns the per-image test metrics."""
    data_dir = os.path.join(workdir, "data")
    ckpt = os.path.join(workdir, "model.fpdn")
    metrics = os.path.join(workdir, "metrics_test.csv")
    steps = [
        ["generate", "--out", data_dir, "--count", str(count), "--size", "64x64", "--seed", str(seed), "--force"],
        ["train", "--data", data_dir, "--out", ckpt, "--seed", str(seed), "--base-channels", str(base_channels),
         "--max-epochs", str(max_epochs), "--force"],
        ["eval", "--data", data_dir, "--ckpt", ckpt, "--split", "test", "--csv", metrics],
    ]
    for argv in steps:
        code = cli_main(argv)
        if code != EXIT_OK:
            raise RuntimeError(f"'{' '.join(argv[:1])}' failed with exit code {code}")
    return pd.read_csv(metrics)


def overfit_ratio(seed: int, base_channels: int, epochs: int = 200) -> float:
    """First-epoch over last-epoch train MSE when fitting four pairs with a constant learning rate."""
    gen = GenConfig(count=4, size=(64, 64), seed=seed)
    pairs = [generate_pair(gen, index) for index in range(gen.count)]
    spec = ModelSpec(base_channels=base_channels)
    cfg = TrainConfig(batch_size=4, dropout_rate=0.0, augment=False, max_epochs=epochs, lr_halve_every=epochs,
                      early_stop_monitor="train", early_stop_patience=epochs, seed=seed, image_size=gen.size)
    reports, _ = fit(build_model(spec, seed), spec, cfg, pairs, pairs)
    return reports[0].train_mse / reports[-1].train_mse


def main(workdir: str, count: int, seed: int, max_epochs: int, base_channels: int, repeat: bool,
         overfit: bool) -> bool:
    frame = run_once(os.path.join(workdir, "run1"), count, seed, max_epochs, base_channels)
    psnr_gain = frame["psnr"].mean() - frame["baseline_psnr"].mean()
    ssim_gain = frame["ssim"].mean() - frame["baseline_ssim"].mean()
    logger.info(f"Test PSNR gain over noisy input: {psnr_gain:.4f} dB (need >= {MIN_PSNR_GAIN})")
    logger.info(f"Test SSIM gain over noisy input: {ssim_gain:.4f} (need >= {MIN_SSIM_GAIN})")
    ok = psnr_gain >= MIN_PSNR_GAIN and ssim_gain >= MIN_SSIM_GAIN

    if overfit:
        ratio = overfit_ratio(seed, base_channels)
        logger.info(f"Overfit smoke test: train MSE fell {ratio:.1f}x (need >= {MIN_OVERFIT_RATIO})")
        ok = ok and ratio >= MIN_OVERFIT_RATIO

    if repeat:
        run_once(os.path.join(workdir, "run2"), count, seed, max_epochs, base_channels)
        for name in ("model.fpdn", "model_epochs.csv", "metrics_test.csv"):
            same = filecmp.cmp(os.path.join(workdir, "run1", name), os.path.join(workdir, "run2", name),
                               shallow=False)
            logger.info(f"{name}: {'identical' if same else 'DIFFERS'} across runs")
            ok = ok and same

    if ok:
        logger.info("Desk experiment passed")
    else:
        logger.error("Desk experiment failed")
    return ok


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Desk-scale generate/train/evaluate experiment.")
    parser.add_argument("workdir", help="Directory for datasets, checkpoints and logs")
    parser.add_argument("--count", type=int, default=500, help="Number of generated pairs")
    parser.add_argument("--seed", type=int, default=0, help="Seed shared by generation and training")
    parser.add_argument("--max-epochs", type=int, default=30, help="Epoch cap for training")
    parser.add_argument("--base-channels", type=int, default=8, help="Width of the first encoder block")
    parser.add_argument("--repeat", action="store_true", help="Run twice and compare outputs byte for byte")
    parser.add_argument("--overfit", action="store_true", help="Also fit four pairs for 200 epochs")
    args = parser.parse_args()
    raise SystemExit(0 if main(args.workdir, args.count, args.seed, args.max_epochs, args.base_channels,
                               args.repeat, args.overfit) else 1)
