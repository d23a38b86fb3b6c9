import argparse
import logging
import os
import sys
from typing import Callable, Dict, List, Optional

import numpy as np

from checkpoint import CheckpointError, load_checkpoint
from config_helpers import (
    ConfigError,
    RunConfig,
    apply_overrides,
    format_size,
    load_run_config,
    log_effective,
    parse_size,
    to_gen_config,
    to_model_spec,
    to_ssim_config,
    to_train_config,
)
from evaluation import denoise_image, evaluate_dataset, psnr, ssim
from fingerprint_data import SPLITS, DatasetError, load_dataset, parse_recipe, split_sizes, write_dataset
from gradcheck import results_frame, run_gradcheck_suite
from image_helpers import PgmError, load_image, save_image
from network import build_model, count_parameters, effective_receptive_field, make_denoiser, receptive_field_support
from tensor_engine import BatchNormStateError
from trainer import NumericError, fit, truncate_log

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5
EXIT_VERIFY = 6

DEFAULTS = RunConfig()


class UsageError(Exception):
    pass


def _csv_ints(text: str):
    return tuple(int(v) for v in text.split(","))


def _csv_floats(text: str):
    return tuple(float(v) for v in text.split(","))


def _recipe(text: str) -> str:
    try:
        parse_recipe(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))
    return text


def _default(key: str) -> str:
    value = getattr(DEFAULTS, key)
    if key == "size":
        return format_size(value)
    if isinstance(value, tuple):
        return ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
    return str(value)


def _add_config_flags(parser: argparse.ArgumentParser, keys: List[str]) -> None:
    """Flags that override RunConfig keys; each defaults to None so the config file wins unless given."""
    specs: Dict[str, tuple] = {
        "count": (int, "number of pairs to generate"),
        "size": (parse_size, "image size HxW"),
        "seed": (int, "random seed"),
        "recipe": (_recipe, "degradation recipe 'kind:key=value:p=prob,...' ('' for none)"),
        "ridge_frequency": (float, "ridge frequency in cycles/pixel"),
        "fractions": (_csv_floats, "train,val,test split fractions"),
        "base_channels": (int, "channels of the first encoder block"),
        "dilations": (_csv_ints, "dilation rates of the encoder conv units"),
        "dropout_rate": (float, "dropout rate during training"),
        "initial_lr": (float, "initial Adam learning rate"),
        "batch_size": (int, "mini-batch size"),
        "max_epochs": (int, "maximum number of epochs"),
        "early_stop_patience": (int, "epochs without improvement before stopping"),
        "early_stop_monitor": (str, "loss watched by early stopping: val or train"),
        "ssim_scales": (int, "number of MS-SSIM scales"),
    }
    for key in keys:
        kind, text = specs[key]
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind, default=None,
                            help=f"{text} (default: {_default(key)})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fingerprint-denoise",
                                     description="Dilated encoder-decoder denoising of fingerprint images")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging (default: off)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic clean/noisy dataset")
    gen.add_argument("--out", required=True, help="dataset directory")
    gen.add_argument("--config", help="key = value configuration file (default: none)")
    gen.add_argument("--force", action="store_true", help="overwrite an existing dataset (default: off)")
    _add_config_flags(gen, ["count", "size", "seed", "recipe", "ridge_frequency", "fractions"])

    train = sub.add_parser("train", help="train a model on a dataset")
    train.add_argument("--data", required=True, help="dataset directory")
    train.add_argument("--out", required=True, help="checkpoint path")
    train.add_argument("--config", help="key = value configuration file (default: none)")
    train.add_argument("--log", help="per-epoch CSV log (default: <checkpoint stem>_epochs.csv)")
    train.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out (default: off)")
    train.add_argument("--force", action="store_true", help="overwrite an existing checkpoint (default: off)")
    _add_config_flags(train, ["seed", "base_channels", "dilations", "dropout_rate", "initial_lr", "batch_size",
                              "max_epochs", "early_stop_patience", "early_stop_monitor", "ssim_scales"])

    ev = sub.add_parser("eval", help="report PSNR/SSIM of a checkpoint on a dataset split")
    ev.add_argument("--data", required=True, help="dataset directory")
    ev.add_argument("--ckpt", help="checkpoint path")
    ev.add_argument("--split", default="test", choices=SPLITS, help="split to evaluate (default: test)")
    ev.add_argument("--config", help="configuration file; its model keys must match the checkpoint (default: none)")
    ev.add_argument("--csv", help="per-image metrics CSV (default: <data>/metrics_<split>.csv)")
    ev.add_argument("--save-images", dest="save_images", help="write denoised PGMs here (default: none)")
    ev.add_argument("--identity-model", dest="identity_model", action="store_true",
                    help="evaluate output = input instead of a checkpoint (default: off)")
    _add_config_flags(ev, ["ssim_scales"])

    den = sub.add_parser("denoise", help="denoise one PGM image")
    den.add_argument("--ckpt", required=True, help="checkpoint path")
    den.add_argument("--in", dest="input", required=True, help="input PGM")
    den.add_argument("--out", dest="output", required=True, help="output PGM")

    grad = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    grad.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")

    rf = sub.add_parser("receptive-field", help="print the input support of a dilated conv stack")
    rf.add_argument("--dilations", type=_csv_ints, default=DEFAULTS.dilations,
                    help=f"dilation rates (default: {_default('dilations')})")
    rf.add_argument("--kernel", type=int, default=3, help="kernel size (default: 3)")
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    overrides = {key: getattr(args, key) for key in vars(DEFAULTS) if hasattr(args, key)}
    cfg = apply_overrides(cfg, overrides)
    log_effective(cfg)
    return cfg


def _check_divisible(size, divisor: int) -> None:
    if size[0] % divisor or size[1] % divisor:
        raise UsageError(f"image size {format_size(size)} must be divisible by {divisor}")


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    spec = to_model_spec(cfg)
    _check_divisible(cfg.size, spec.size_divisor)
    gen_cfg = to_gen_config(cfg)
    try:
        split_sizes(gen_cfg.count, cfg.fractions)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if os.path.exists(os.path.join(args.out, "manifest.txt")) and not args.force:
        raise UsageError(f"{args.out} already holds a dataset; pass --force to overwrite")

    manifest = write_dataset(gen_cfg, args.out, cfg.fractions)
    ssim_cfg = to_ssim_config(cfg)
    psnrs, ssims = [], []
    for sample in manifest.ids():
        pair = manifest.load_pair(sample)
        psnrs.append(psnr(pair.clean, pair.noisy, ssim_cfg.dynamic_range))
        ssims.append(ssim(pair.clean, pair.noisy, ssim_cfg))
    sizes = "/".join(str(len(manifest.ids(s))) for s in SPLITS)
    print(f"{gen_cfg.count} pairs ({sizes} train/val/test) in {args.out}")
    print(f"noisy baseline: PSNR {np.mean(psnrs):.4f} dB, SSIM {np.mean(ssims):.4f}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    manifest = load_dataset(args.data)
    if tuple(cfg.size) != tuple(manifest.size):
        logger.info(f"Using dataset image size {format_size(manifest.size)}")
        cfg = apply_overrides(cfg, {"size": tuple(manifest.size)})
    spec = to_model_spec(cfg)
    train_cfg = to_train_config(cfg)
    _check_divisible(manifest.size, spec.size_divisor)

    state = None
    if args.resume:
        params, spec, state = load_checkpoint(args.out)
        if state is None:
            raise CheckpointError(f"{args.out} holds no training state to resume from")
        logger.info(f"Resuming after epoch {state.epoch} (best val loss {state.best_val_loss:.6f})")
    elif os.path.exists(args.out) and not args.force:
        raise UsageError(f"{args.out} exists; pass --resume to continue or --force to overwrite")
    else:
        params = build_model(spec, cfg.seed)
    logger.info(f"Model has {count_parameters(spec)} parameters")

    train_set = manifest.load_pairs("train")
    val_set = manifest.load_pairs("val")
    if not train_set:
        raise UsageError(f"train split of {args.data} is empty")
    if not val_set:
        raise UsageError(f"val split of {args.data} is empty; the checkpoint follows the validation loss")

    log_path = args.log or os.path.splitext(args.out)[0] + "_epochs.csv"
    if args.resume:
        truncate_log(log_path, state.epoch)
    elif os.path.exists(log_path):
        os.remove(log_path)
    reports, state = fit(params, spec, train_cfg, train_set, val_set, args.out, log_path, state,
                         to_ssim_config(cfg))
    if reports:
        best = min(reports, key=lambda r: r.val_mse)
        print(f"trained {len(reports)} epochs; best val MSE {best.val_mse:.6f} at epoch {best.epoch}; "
              f"checkpoint {args.out}, log {log_path}")
    else:
        print(f"nothing to do: checkpoint already at epoch {state.epoch} of {train_cfg.max_epochs}")
    return EXIT_OK


def _identity(batch: np.ndarray) -> np.ndarray:
    return batch


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    manifest = load_dataset(args.data)
    pairs = manifest.load_pairs(args.split)
    if not pairs:
        raise UsageError(f"split '{args.split}' of {args.data} is empty")

    model: Callable[[np.ndarray], np.ndarray]
    if args.identity_model:
        model, divisor = _identity, 1
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt unless --identity-model is given")
        expected = to_model_spec(cfg) if args.config else None
        params, spec, _ = load_checkpoint(args.ckpt, expected)
        model, divisor = make_denoiser(params, spec), spec.size_divisor

    report = evaluate_dataset(model, pairs, to_ssim_config(cfg), divisor, args.save_images)
    report.to_csv(args.csv or os.path.join(args.data, f"metrics_{args.split}.csv"))
    print(report.format_table())
    return EXIT_OK


def cmd_denoise(args: argparse.Namespace) -> int:
    params, spec, _ = load_checkpoint(args.ckpt)
    image = load_image(args.input)
    out = denoise_image(make_denoiser(params, spec), image, spec.size_divisor)
    save_image(args.output, out)
    logger.info(f"Denoised {args.input} -> {args.output} (PSNR vs input {psnr(image, out):.2f} dB)")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_gradcheck_suite(args.seed)
    print(results_frame(results).to_string(index=False, float_format=lambda v: f"{v:.3e}"))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_receptive_field(args: argparse.Namespace) -> int:
    support = receptive_field_support(args.dilations, args.kernel)
    rows, cols = np.nonzero(support)
    side = effective_receptive_field(args.dilations, args.kernel)
    print(f"dilations {','.join(map(str, args.dilations))}: {side}x{side} receptive field "
          f"(support {rows.max() - rows.min() + 1}x{cols.max() - cols.min() + 1})")
    for row in support:
        print("".join("#" if v else "." for v in row))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "denoise": cmd_denoise,
    "gradcheck": cmd_gradcheck,
    "receptive-field": cmd_receptive_field,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Console script entry point for the fingerprint denoiser."""
    logging.basicConfig(level=logging.INFO)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        return COMMANDS[args.command](args)
    except (CheckpointError, BatchNormStateError) as exc:
        logger.error(f"Checkpoint error: {exc}")
        return EXIT_CHECKPOINT
    except NumericError as exc:
        logger.error(f"Numeric failure: {exc}")
        return EXIT_NUMERIC
    except (DatasetError, PgmError, OSError) as exc:
        logger.error(f"I/O error: {exc}")
        return EXIT_IO
    except (UsageError, ConfigError, ValueError) as exc:
        logger.error(f"Invalid usage: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
