"""Command-line entry point: ``freqlens {train,attack,sweep,spectrum}``.

Every command reads one JSON config (``--config``); flags override config
fields. Exit codes: 0 success, 1 runtime failure, 2 config/validation failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, derive_seed, load_config

log = logging.getLogger("freqlens")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class CheckpointMismatchError(ValueError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, metavar="PATH", help="JSON run config")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--threads", type=int, help="cap BLAS worker threads (env FREQLENS_THREADS)")
    p.add_argument("--out", metavar="DIR", help="override output_dir")
    p.add_argument("--subset", type=int, metavar="N", help="evaluate on the first N test images")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freqlens", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a standard or adversarial model")
    _common(p)
    p.add_argument("--mode", choices=("standard", "adversarial"))

    p = sub.add_parser("attack", help="craft and export adversarial sets")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--pixel", choices=("u8", "f64"), default="u8", help="container pixel encoding")

    p = sub.add_parser("sweep", help="bandwidth (filter) or frequency-swap (merge) sweep")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--kind", choices=("filter", "merge"), default="filter")

    p = sub.add_parser("spectrum", help="log-amplitude difference maps")
    _common(p)
    p.add_argument("--ckpt-std", required=True, metavar="PATH")
    p.add_argument("--ckpt-adv", metavar="PATH")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed", "must be >= 0")
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if args.subset is not None:
        if args.subset < 1:
            raise ConfigError("--subset", "must be >= 1")
        cfg = replace(cfg, subset=args.subset)
    return cfg


def _thread_limit(args):
    n = args.threads
    if n is None and os.environ.get("FREQLENS_THREADS"):
        try:
            n = int(os.environ["FREQLENS_THREADS"])
        except ValueError:
            raise ConfigError("FREQLENS_THREADS", "expected an integer") from None
    if n is None:
        return nullcontext()
    if n < 1:
        raise ConfigError("--threads", "must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def load_data(cfg: RunConfig, split: str):
    from .harness import load_cifar10, synth_dataset

    ds = cfg.dataset
    if ds.source == "cifar10":
        path = Path(ds.path)
        if not path.is_dir() and split == "train":
            raise ConfigError("dataset.path", "training needs the cifar-10-batches-bin directory")
        return load_cifar10(path, split)
    n = ds.n_train if split == "train" else ds.n_test
    return synth_dataset(derive_seed(cfg.seed, f"data-{split}"), n, ds.num_classes, ds.shape, split)


def _load_ckpt(cfg: RunConfig, path):
    from .models import CheckpointError, load_checkpoint

    path = Path(path)
    if not path.exists():
        raise ConfigError("--checkpoint", f"file not found: {path}")
    try:
        params = load_checkpoint(path)
    except CheckpointError as exc:
        raise CheckpointMismatchError(f"{path}: {exc}") from None
    if params.arch != cfg.arch or tuple(params.input_shape) != tuple(cfg.dataset.shape) \
            or params.num_classes != cfg.dataset.num_classes:
        raise CheckpointMismatchError(
            f"{path}: checkpoint is {params.arch} {params.input_shape} with {params.num_classes} classes, "
            f"config expects {cfg.arch} {tuple(cfg.dataset.shape)} with {cfg.dataset.num_classes} classes"
        )
    return params


def _test_set(cfg: RunConfig):
    return load_data(cfg, "test").subset(cfg.subset)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(cfg: RunConfig, args) -> int:
    from .attacks import run_attack
    from .models import evaluate, init_model, save_checkpoint
    from .training import train, write_metrics_csv

    tcfg = cfg.train_config(args.mode)
    train_set = load_data(cfg, "train")
    test_set = _test_set(cfg)
    params = init_model(cfg.arch, cfg.dataset.shape, cfg.dataset.num_classes, derive_seed(cfg.seed, "init"))
    result = train(params, train_set, tcfg)
    out = _out_dir(cfg)
    stem = f"{cfg.arch}_{tcfg.mode}"
    ckpt = save_checkpoint(result.params, out / f"{stem}.ckpt")
    metrics = write_metrics_csv(out / f"{stem}_metrics.csv", result.metrics)
    clean = evaluate(result.params, test_set)
    adv = run_attack(result.params, test_set.images, test_set.labels, cfg.attack)
    robust = float((~adv.success).mean())
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {metrics}")
    print(f"clean_acc={clean:.4f} robust_acc={robust:.4f} ({cfg.attack.kind}, n={len(test_set)})")
    return EXIT_OK


def cmd_attack(cfg: RunConfig, args) -> int:
    from .attacks import run_attack
    from .harness import write_image_container

    params = _load_ckpt(cfg, args.checkpoint)
    test_set = _test_set(cfg)
    out = _out_dir(cfg)
    stem = Path(args.checkpoint).stem
    for i, acfg in enumerate(cfg.attacks):
        res = run_attack(params, test_set.images, test_set.labels, acfg)
        path = write_image_container(out / f"{stem}_adv{i}_{acfg.kind}.bin", res.adversarial,
                                     test_set.labels, args.pixel, test_set.num_classes)
        print(f"{path}: robust_acc={float((~res.success).mean()):.4f} "
              f"mean_norm={float(res.achieved_norm.mean()):.5f}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    from .harness import bandwidth_sweep, generate_adversarial, swap_sweep

    params = _load_ckpt(cfg, args.checkpoint)
    test_set = _test_set(cfg)
    out = _out_dir(cfg)
    stem = Path(args.checkpoint).stem
    adv = generate_adversarial(params, test_set, cfg.attack).adversarial
    meta = {"checkpoint": Path(args.checkpoint).name, "subset": cfg.subset, "seed": cfg.seed}
    if args.kind == "filter":
        results = [bandwidth_sweep(params, test_set, cfg.attack, cfg.scales, adv=adv, metadata=meta)]
    else:
        results = list(swap_sweep(params, test_set, cfg.attack, cfg.scales, adv=adv, metadata=meta))
    for res in results:
        print(res.write_csv(out / f"{stem}_sweep_{res.kind}.csv"))
    return EXIT_OK


def cmd_spectrum(cfg: RunConfig, args) -> int:
    from .harness import spectrum_report

    std = _load_ckpt(cfg, args.ckpt_std)
    adv = None
    if args.ckpt_adv:
        adv = _load_ckpt(cfg, args.ckpt_adv)
    else:
        log.warning("no --ckpt-adv given; emitting only the standard-model map")
    test_set = load_data(cfg, "test")
    n = cfg.sample_n
    if n > len(test_set):
        log.warning("sample_n=%d exceeds the %d available test images; clamping", n, len(test_set))
        n = len(test_set)
    report = spectrum_report(std, adv, test_set, cfg.attack, n)
    for path in report.write(_out_dir(cfg)).values():
        print(path)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "sweep": cmd_sweep, "spectrum": cmd_spectrum}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        with _thread_limit(args):
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointMismatchError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
