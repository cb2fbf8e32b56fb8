from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, NoReturn, Optional, Sequence

from PIL import Image as PILImage

from condl.config import LoggingConfig, Settings, resolve_config_path
from condl.selftest import run_selftest
from condl.services.analytics import AnalyticsTracker
from condl.services.checkpoint import file_digest, load_checkpoint, model_from_checkpoint
from condl.services.dataset import load_pair, open_dataset, write_dataset
from condl.services.evaluation import (
    emit_baseline_report,
    emit_report,
    emit_stride_sweep,
    evaluate_dataset,
    evaluate_random_baseline,
    stride_dir_name,
    sweep_strides,
)
from condl.services.matching import extract_matches, write_matches_csv
from condl.services.model import extract_feature_batch, pair_tensor
from condl.services.synthgen import Image, generate_dataset, load_source_images
from condl.services.trainer import overfit_check, train

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
STRIDE_CHOICES = (2, 4, 8, 16)


class UsageError(Exception):
    pass


class CondlArgumentParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def setup_logging(config: LoggingConfig) -> None:
    level = getattr(logging, config.level.upper(), logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT)
    if config.file:
        config.file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(config.file, encoding="utf-8")
        file_handler.setLevel(level)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(file_handler)


def _stride_list(text: str) -> List[int]:
    try:
        strides = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    bad = [stride for stride in strides if stride not in STRIDE_CHOICES]
    if not strides or bad:
        raise argparse.ArgumentTypeError(f"strides must be drawn from {STRIDE_CHOICES}, got {text!r}")
    return strides


def build_parser() -> CondlArgumentParser:
    common = CondlArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="settings YAML (default: config/settings.yaml or the example)")

    parser = CondlArgumentParser(prog="condl", description="Dense contrastive descriptor matching toolkit.")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", parents=[common], help="generate a synthetic pair dataset")
    source = gen.add_mutually_exclusive_group(required=True)
    source.add_argument("--src-dir", type=Path, help="directory of source photographs")
    source.add_argument("--procedural", action="store_true", help="use built-in procedural textures")
    gen.add_argument("--count", type=int, help="number of pairs (default: synthesis.train_count)")
    gen.add_argument("--size", type=int, help="square image size in px (default: synthesis.image_size)")
    gen.add_argument("--seed", type=int, help="base seed (default: synthesis.seed)")
    gen.add_argument("--out", type=Path, required=True)

    tr = commands.add_parser("train", parents=[common], help="train the descriptor network")
    tr.add_argument("--data", type=Path, required=True)
    tr.add_argument("--out", type=Path, required=True)
    tr.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    tr.add_argument("--epochs", type=int, help="override training.epochs")

    ov = commands.add_parser("overfit", parents=[common], help="overfit a fresh model on one pair")
    ov.add_argument("--data", type=Path, required=True)
    ov.add_argument("--pair-id", type=int, default=0)
    ov.add_argument("--max-steps", type=int, default=500)

    mt = commands.add_parser("match", parents=[common], help="match two images with a trained checkpoint")
    mt.add_argument("--checkpoint", type=Path, required=True)
    mt.add_argument("--image-a", type=Path, required=True)
    mt.add_argument("--image-b", type=Path, required=True)
    mt.add_argument("--stride", type=int, help="grid stride in px (default: matching.stride_px)")
    mt.add_argument(
        "--mutual",
        action=argparse.BooleanOptionalAction,
        help="keep mutual nearest neighbours only (default: matching.mutual_only)",
    )
    mt.add_argument("--score-min", type=float)
    mt.add_argument("--out", type=Path, required=True, help="CSV file for the matches")

    ev = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True)
    sampling = ev.add_mutually_exclusive_group()
    sampling.add_argument("--stride", type=int, choices=STRIDE_CHOICES)
    sampling.add_argument(
        "--strides",
        type=_stride_list,
        help="comma-separated strides to compare in one run, e.g. 2,4,8",
    )
    ev.add_argument(
        "--mutual",
        action=argparse.BooleanOptionalAction,
        help="keep mutual nearest neighbours only (default: evaluation.mutual)",
    )
    ev.add_argument("--ransac-threshold", type=float)
    ev.add_argument("--seed", type=int, help="base RANSAC seed")
    ev.add_argument("--workers", type=int)
    ev.add_argument(
        "--baseline",
        choices=("random",),
        help="also score a random matcher with the model's match counts",
    )
    ev.add_argument("--out", type=Path, required=True)

    st = commands.add_parser("selftest", parents=[common], help="run the built-in property suites")
    st.add_argument("--seeds", type=int, default=20)

    return parser


def _positive(name: str, value: Optional[int]) -> None:
    if value is not None and value < 1:
        raise UsageError(f"{name} must be >= 1, got {value}")


def _cmd_gen_data(args: argparse.Namespace, settings: Settings) -> int:
    synthesis = settings.synthesis
    _positive("--count", args.count)
    count = args.count if args.count is not None else synthesis.train_count
    size = args.size if args.size is not None else synthesis.image_size
    if size < 16:
        raise UsageError(f"--size must be >= 16, got {size}")
    seed = args.seed if args.seed is not None else synthesis.seed
    sources: List[Image] = []
    if args.src_dir is not None:
        sources = load_source_images(args.src_dir, size)
        if not sources:
            raise FileNotFoundError(f"no images found in {args.src_dir}")
    pairs = generate_dataset(count, size, synthesis.distortion, seed, sources)
    manifest = asyncio.run(write_dataset(pairs, args.out, seed=seed))
    print(f"wrote {manifest.count} pairs ({manifest.width}×{manifest.height}) to {args.out}")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    _positive("--epochs", args.epochs)
    cfg = settings.training if args.epochs is None else replace(settings.training, epochs=args.epochs)
    result = train(
        args.data,
        cfg,
        args.out,
        model_cfg=settings.model,
        matching=settings.matching,
        resume=args.resume,
        analytics=AnalyticsTracker(),
    )
    print(f"trained {result.steps} steps; latest checkpoint {result.checkpoint}")
    return EXIT_OK


def _cmd_overfit(args: argparse.Namespace, settings: Settings) -> int:
    _positive("--max-steps", args.max_steps)
    index = open_dataset(args.data)
    if args.pair_id not in index.ids:
        raise UsageError(f"--pair-id {args.pair_id} is not in {args.data} ({len(index)} pairs)")
    pair = load_pair(args.data, args.pair_id, index.manifest)
    report = overfit_check(
        pair, settings.training, args.max_steps, model_cfg=settings.model, matching=settings.matching
    )
    status = "converged" if report.converged else "did not converge"
    print(
        f"{status} after {report.steps} steps: loss {report.final_loss:.4f}, "
        f"grid accuracy {report.accuracy:.3f}"
    )
    return EXIT_OK


def _read_image(path: Path) -> Image:
    with PILImage.open(path) as raw:
        return Image.from_pil(raw)


def _cmd_match(args: argparse.Namespace, settings: Settings) -> int:
    _positive("--stride", args.stride)
    ckpt = load_checkpoint(args.checkpoint)
    params = model_from_checkpoint(ckpt)
    image_a = _read_image(args.image_a)
    image_b = _read_image(args.image_b)
    fa, fb = extract_feature_batch(params, pair_tensor(image_a, image_b), training=False)
    matches = extract_matches(
        fa,
        fb,
        args.stride or settings.matching.stride_px,
        settings.matching.mutual_only if args.mutual is None else args.mutual,
        args.score_min if args.score_min is not None else settings.matching.score_min,
        normalize=ckpt.normalize_descriptors,
        max_entries=settings.matching.max_similarity_entries,
    )
    asyncio.run(write_matches_csv(matches, args.out))
    print(f"wrote {len(matches)} matches to {args.out}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace, settings: Settings) -> int:
    _positive("--workers", args.workers)
    cfg = settings.evaluation
    ransac = cfg.ransac
    if args.ransac_threshold is not None:
        ransac = replace(ransac, threshold_px=args.ransac_threshold)
    if args.seed is not None:
        ransac = replace(ransac, seed=args.seed)
    cfg = replace(
        cfg,
        stride_px=args.stride or cfg.stride_px,
        mutual=cfg.mutual if args.mutual is None else args.mutual,
        workers=args.workers or cfg.workers,
        ransac=ransac,
    )
    ckpt = load_checkpoint(args.checkpoint)
    params = model_from_checkpoint(ckpt)
    matching = replace(
        settings.matching, temperature=ckpt.temperature, normalize_descriptors=ckpt.normalize_descriptors
    )
    digest = file_digest(args.checkpoint)
    analytics = AnalyticsTracker()

    if args.strides:
        results = sweep_strides(
            params,
            args.data,
            cfg,
            args.strides,
            matching=matching,
            checkpoint_digest=digest,
            analytics=analytics,
        )
        asyncio.run(emit_stride_sweep(results, args.out))
        runs = [(args.out / stride_dir_name(stride), stride, *result) for stride, result in results.items()]
    else:
        summary, records = evaluate_dataset(
            params, args.data, cfg, matching=matching, checkpoint_digest=digest, analytics=analytics
        )
        asyncio.run(emit_report(summary, records, args.out))
        runs = [(args.out, cfg.stride_px, summary, records)]

    for out_dir, stride, summary, records in runs:
        print(
            f"stride {stride}: evaluated {summary.pairs_evaluated}/{summary.pairs_total} pairs, "
            f"{summary.ransac_failures} RANSAC failures, median MCE {summary.median_mce_px}"
        )
        if args.baseline == "random":
            baseline, baseline_records = evaluate_random_baseline(
                args.data,
                replace(cfg, stride_px=stride),
                counts={record.pair_id: record.n_matches for record in records},
                analytics=analytics,
            )
            asyncio.run(emit_baseline_report(summary, baseline, baseline_records, out_dir))
            print(
                f"stride {stride}: random matcher mean inlier fraction "
                + ", ".join(f"{t.mean_fraction:.4f}@{t.threshold_px:g}px" for t in baseline.thresholds)
            )
    return EXIT_OK


def _cmd_selftest(args: argparse.Namespace, settings: Settings) -> int:
    _positive("--seeds", args.seeds)
    results = run_selftest(args.seeds)
    for result in results:
        mark = "PASS" if result.passed else "FAIL"
        print(f"[{mark}] {result.name}: {result.detail} ({result.elapsed_s:.1f}s)")
    return EXIT_OK if all(result.passed for result in results) else EXIT_FAILURE


COMMANDS: Dict[str, Callable[[argparse.Namespace, Settings], int]] = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "overfit": _cmd_overfit,
    "match": _cmd_match,
    "eval": _cmd_eval,
    "selftest": _cmd_selftest,
}


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE

    try:
        settings = Settings.load(resolve_config_path(args.config))
    except (OSError, ValueError) as exc:
        print(f"condl: cannot load settings: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    setup_logging(settings.logging)

    try:
        return COMMANDS[args.command](args, settings)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"condl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        LOGGER.warning("command_interrupted", extra={"command": args.command})
        return EXIT_FAILURE
    except Exception as exc:
        LOGGER.error("command_failed", extra={"command": args.command}, exc_info=True)
        print(f"condl {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
