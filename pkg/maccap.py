import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from utils.logging import get_logger, log_command_failure, setup_logging
from utils.config import ConfigManager, RunConfig, deep_merge
from utils.errors import ConfigurationException, MacCapException
from utils.resilience import RunLock

# Load environment variables
load_dotenv()

# Setup logging
logger = setup_logging(log_level=os.getenv('LOG_LEVEL', 'INFO'))
main_logger = get_logger('cli')

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

# Held-out synthetic captions for evaluation are drawn with this seed offset
EVAL_SEED_OFFSET = 1000


class UsageError(Exception):
    """Invalid command-line input detected after parsing."""


def get_version() -> str:
    version_file = Path(__file__).parent / "VERSION"
    try:
        return version_file.read_text().strip()
    except OSError:
        return "0.0.0"


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------

def _put(overrides: Dict, path: Tuple[str, ...], value):
    if value is None:
        return
    node = overrides
    for key in path[:-1]:
        node = node.setdefault(key, {})
    node[path[-1]] = value


def overrides_from_args(args: argparse.Namespace) -> Dict:
    """Map canonical flags onto RunConfig fields; unset flags leave file/defaults alone."""
    o: Dict = {}
    get = lambda name: getattr(args, name, None)

    _put(o, ("backbone", "backend"), get("backend"))
    _put(o, ("lm", "backend"), get("backend"))
    _put(o, ("train", "noise", "sigma"), get("sigma"))
    inference_sigma = get("inference_sigma") if get("inference_sigma") is not None else get("sigma")
    _put(o, ("sampling", "inference_sigma"), inference_sigma)
    _put(o, ("train", "noise", "n_cr"), get("n_cr"))
    _put(o, ("sampling", "n_cr"), get("n_cr"))
    _put(o, ("train", "adaptor", "n_q"), get("n_q"))
    _put(o, ("sampling", "samples"), get("samples"))
    _put(o, ("sampling", "n_beams"), get("beams"))
    _put(o, ("sampling", "max_len"), get("max_len"))
    for path in (("seed",), ("train", "seed"), ("sampling", "seed"), ("synthetic", "seed")):
        _put(o, path, get("seed"))
    _put(o, ("paths", "corpus"), get("corpus"))
    _put(o, ("paths", "checkpoint"), get("checkpoint"))
    _put(o, ("paths", "manifest"), get("manifest"))
    _put(o, ("paths", "out_dir"), get("out_dir"))
    _put(o, ("workers",), get("workers"))
    _put(o, ("sampling", "workers"), get("workers"))
    _put(o, ("train", "noise", "distribution"), get("distribution"))
    _put(o, ("sampling", "distribution"), get("distribution"))
    _put(o, ("sampling", "aggregate"), get("aggregate"))
    _put(o, ("sampling", "length_normalize"), get("length_normalize"))
    _put(o, ("sampling", "keep_candidates"), get("keep_candidates"))
    _put(o, ("train", "epochs"), get("epochs"))
    _put(o, ("train", "batch_size"), get("batch_size"))
    _put(o, ("train", "learning_rate"), get("lr"))
    _put(o, ("synthetic", "n_pairs"), get("pairs"))
    _put(o, ("synthetic", "gap_sigma"), get("gap_sigma"))
    _put(o, ("synthetic", "patch_noise_sigma"), get("patch_noise_sigma"))
    _put(o, ("synthetic", "n_low_noise"), get("low_noise_patches"))
    _put(o, ("synthetic", "low_noise_sigma"), get("low_noise_sigma"))
    return o


def derive_config(config: RunConfig, updates: Dict) -> RunConfig:
    return RunConfig.model_validate(deep_merge(config.model_dump(), updates))


def build_stack(config: RunConfig):
    from backbone import load_backbone
    from langmodel import ToyTokenizer, load_language_model

    tokenizer = ToyTokenizer.build(config.backbone.vocab_size)
    backbone = load_backbone(config.backbone, config.paths.asset_dir, tokenizer)
    lm = load_language_model(config.lm, config.paths.asset_dir, tokenizer)
    return backbone, lm


def load_adaptor(config: RunConfig, backbone, lm):
    from checkpoint import load_checkpoint

    if not config.paths.checkpoint:
        raise UsageError("--checkpoint is required")
    return load_checkpoint(config.paths.checkpoint, backbone.spec, lm.spec)


def training_corpus(args, config: RunConfig, lm):
    from langmodel import synthetic_captions
    from training import corpus_from_captions, load_corpus

    if config.paths.corpus:
        return load_corpus(config.paths.corpus, lm.tokenizer, config.train.max_words)
    n = getattr(args, "synthetic_corpus", None)
    if n:
        captions = synthetic_captions(n, seed=config.seed)
        return corpus_from_captions(captions, lm.tokenizer, config.train.max_words, f"synthetic:{n}")
    raise UsageError("a caption corpus is required (--corpus or --synthetic-corpus)")


def synthetic_eval_pairs(backbone, config: RunConfig, n: int):
    from backbone.synthetic import generate_synthetic_pairs
    from langmodel import synthetic_captions

    seed = config.synthetic.seed + EVAL_SEED_OFFSET
    cfg = config.synthetic.model_copy(update={"n_pairs": n, "seed": seed})
    return generate_synthetic_pairs(backbone, cfg, synthetic_captions(n, seed=seed))


def caption_synthetic(captioner, pairs):
    from metrics import EvalSet

    results = [captioner.describe(p.patches, image_id=f"synthetic-{i}") for i, p in enumerate(pairs)]
    eval_set = EvalSet.from_pairs((r.caption, [p.caption]) for r, p in zip(results, pairs))
    return results, eval_set


def write_eval_set(eval_set, path: Path) -> Path:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for candidate, refs in eval_set.items:
            f.write(json.dumps({"candidate": candidate, "references": list(refs)}, ensure_ascii=False))
            f.write("\n")
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_analyze(args, config: RunConfig, out_dir: Path) -> int:
    from backbone import load_backbone
    from backbone.synthetic import generate_synthetic_pairs
    from gap_analysis import (
        gap_distribution, linear_projection_2d, pairs_from_manifest, pairs_from_synthetic,
        plot_histogram, stats_rows, write_histogram_csv, write_scatter_csv, write_stats_csv,
    )

    backbone = load_backbone(config.backbone, config.paths.asset_dir)
    if config.paths.manifest:
        pairs = pairs_from_manifest(backbone, config.paths.manifest)
    elif config.backbone.backend == "toy":
        pairs = pairs_from_synthetic(backbone, generate_synthetic_pairs(backbone, config.synthetic))
    else:
        raise UsageError("analyze with the real backend needs --manifest")

    rows = stats_rows(pairs, args.mix)
    hist_global = gap_distribution(pairs, "global")
    hist_patch = gap_distribution(pairs, "patch")
    rows.append({"stat": "pooled_mean", "mode": "global_gap", "value": hist_global.pooled_mean, "n_pairs": len(pairs)})
    rows.append({"stat": "pooled_mean", "mode": "patch_gap", "value": hist_patch.pooled_mean, "n_pairs": len(pairs)})

    write_stats_csv(rows, out_dir / "stats.csv")
    write_histogram_csv(hist_global, out_dir / "hist_global.csv")
    write_histogram_csv(hist_patch, out_dir / "hist_patch.csv")
    if args.scatter:
        coords, labels = linear_projection_2d(pairs)
        write_scatter_csv(coords, labels, out_dir / "scatter.csv")
    if args.plot:
        plot_histogram(hist_global, out_dir / "hist_global.png", "global gap")
        plot_histogram(hist_patch, out_dir / "hist_patch.png", "patch gap")

    main_logger.info(
        f"Analyzed {len(pairs)} pairs: global gap mean {hist_global.pooled_mean:.5f}, "
        f"patch gap mean {hist_patch.pooled_mean:.5f}"
    )
    return EXIT_OK


def cmd_train(args, config: RunConfig, out_dir: Path) -> int:
    from training import train

    backbone, lm = build_stack(config)
    corpus = training_corpus(args, config, lm)
    checkpoint_path = Path(config.paths.checkpoint) if config.paths.checkpoint else out_dir / "adaptor.ckpt"

    _, report = train(corpus, config.train, backbone, lm, checkpoint_path=checkpoint_path)
    report.write(out_dir / "train_report.json")
    main_logger.info(f"Training finished: loss {report.losses[0]:.4f} -> {report.losses[-1]:.4f}")
    return EXIT_OK


def cmd_caption(args, config: RunConfig, out_dir: Path) -> int:
    from inference import Captioner, caption_manifest, write_caption_results

    backbone, lm = build_stack(config)
    captioner = Captioner(backbone, lm, load_adaptor(config, backbone, lm), config.sampling)
    out_path = out_dir / "captions.jsonl"

    if config.paths.manifest:
        results = caption_manifest(captioner, config.paths.manifest, out_path, config.workers)
    elif args.synthetic_images:
        pairs = synthetic_eval_pairs(backbone, config, args.synthetic_images)
        results, eval_set = caption_synthetic(captioner, pairs)
        write_caption_results(results, out_path, config.sampling.keep_candidates)
        write_eval_set(eval_set, out_dir / "eval_set.jsonl")
    else:
        raise UsageError("caption needs --manifest or --synthetic-images")

    main_logger.info(f"Captioned {len(results)} images into {out_path}")
    return EXIT_OK


def cmd_vqa(args, config: RunConfig, out_dir: Path) -> int:
    from inference import Captioner
    from vqa import read_candidates, read_vqa_items, run_vqa, write_vqa_items, write_vqa_report

    backbone, lm = build_stack(config)
    captioner = Captioner(backbone, lm, load_adaptor(config, backbone, lm), config.sampling)
    items = read_vqa_items(args.questions)
    candidates = read_candidates(args.candidates)

    report, results = run_vqa(items, captioner, lm, backbone, candidates,
                              max_len=args.answer_len, n_beams=config.sampling.n_beams,
                              length_normalize=config.sampling.length_normalize)
    write_vqa_report(report, out_dir / "vqa_report.json")
    if args.dump_items:
        write_vqa_items(results, out_dir / "vqa_items.jsonl")

    main_logger.info(f"VQA on {report['n_items']} items: top1 {report['top1']:.3f}, top10 {report['top10']:.3f}")
    return EXIT_OK


def cmd_eval(args, config: RunConfig, out_dir: Path) -> int:
    from metrics import evaluate_captions, read_eval_set, write_metrics

    scores = evaluate_captions(read_eval_set(args.predictions), cider_d=args.cider_d, scale_10=args.scale_10)
    write_metrics(scores, out_dir / "metrics.json")
    main_logger.info(f"Metrics: {scores}")
    return EXIT_OK


INFERENCE_PRESETS = ("cls", "subregion", "subregion+sampling")


def parse_grid(sweep: str, values: Optional[str], n_patches: int) -> List:
    """Grid values for a sweep; raises UsageError for anything unusable."""
    from training import NOISE_PRESETS

    if sweep == "presets":
        return list(NOISE_PRESETS)
    if sweep == "inference":
        return list(INFERENCE_PRESETS)
    if not values or not values.strip():
        raise UsageError(f"--values is required for the {sweep} sweep")

    try:
        grid = [float(v) for v in values.split(",")]
    except ValueError:
        raise UsageError(f"Unparsable grid '{values}'")

    if sweep == "sigma":
        if any(v < 0 or not math.isfinite(v) for v in grid):
            raise UsageError("sigma values must be finite and non-negative")
        return grid
    if any(v != int(v) or not 1 <= v <= n_patches for v in grid):
        raise UsageError(f"patch counts must be integers in [1, {n_patches}]")
    return [int(v) for v in grid]


def sweep_config(config: RunConfig, sweep: str, value) -> RunConfig:
    """The run configuration for one grid value of a sweep."""
    from training import preset_noise_config

    if sweep == "sigma":
        return derive_config(config, {"train": {"noise": {"sigma": value}}})
    if sweep == "patches":
        return derive_config(config, {"sampling": {"n_cr": value}})
    if sweep == "presets":
        noise = preset_noise_config(value, config.train.noise)
        return derive_config(config, {"train": {"noise": noise.model_dump()}})

    # Inference modes share one trained adaptor
    if value == "subregion+sampling":
        return config
    updates = {"sampling": {"samples": 1, "inference_sigma": 0.0}}
    if value == "cls":
        updates["sampling"]["aggregate"] = "cls"
    return derive_config(config, updates)


def cmd_ablate(args, config: RunConfig, out_dir: Path) -> int:
    import torch

    from inference import Captioner
    from metrics import evaluate_captions
    from backbone.common import normalize_rows
    from training import image_side_loss, train

    grid = parse_grid(args.sweep, args.values, config.backbone.n_patches)
    backbone, lm = build_stack(config)
    corpus = training_corpus(args, config, lm)
    eval_pairs = synthetic_eval_pairs(backbone, config, args.eval_images)

    eval_globals = normalize_rows(torch.stack([backbone.project_patches(p.patches).global_row for p in eval_pairs]))
    limit = lm.spec.max_gen_len - 1
    eval_targets = [lm.encode(p.caption)[:limit] + [lm.spec.eos_id] for p in eval_pairs]

    trained = {}

    def adaptor_for(run_config: RunConfig):
        key = run_config.train.model_dump_json()
        if key not in trained:
            trained[key] = train(corpus, run_config.train, backbone, lm)[0]
        return trained[key]

    rows = []
    for value in grid:
        run_config = sweep_config(config, args.sweep, value)
        adaptor = adaptor_for(run_config)
        captioner = Captioner(backbone, lm, adaptor, run_config.sampling)
        _, eval_set = caption_synthetic(captioner, eval_pairs)
        scores = evaluate_captions(eval_set)

        n_cr = run_config.train.noise.n_cr
        region_rows = eval_globals[:, None, :].expand(-1, n_cr, -1)
        rows.append({
            "sweep": args.sweep,
            "value": value,
            "config_hash": run_config.config_hash(),
            "bleu1": scores["bleu1"],
            "bleu4": scores["bleu4"],
            "cider": scores["cider"],
            "rouge_l": scores["rouge_l"],
            "image_side_loss": image_side_loss(adaptor, lm, region_rows, eval_targets),
        })
        main_logger.info(f"Ablation {args.sweep}={value}: {rows[-1]}")

    out_path = out_dir / f"ablate_{args.sweep}.csv"
    with open(out_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    main_logger.info(f"Wrote {len(rows)} ablation rows to {out_path}")
    return EXIT_OK


def cmd_dump_fixtures(args, config: RunConfig, out_dir: Path) -> int:
    from backbone import load_backbone
    from backbone.synthetic import dump_synthetic_pairs, generate_synthetic_pairs

    if config.backbone.backend != "toy":
        raise UsageError("fixtures are generated with the toy backend only")
    backbone = load_backbone(config.backbone)
    path = dump_synthetic_pairs(generate_synthetic_pairs(backbone, config.synthetic), out_dir / "fixtures.jsonl")
    main_logger.info(f"Wrote {config.synthetic.n_pairs} synthetic pairs to {path}")
    return EXIT_OK


COMMANDS = {
    "analyze": cmd_analyze,
    "train": cmd_train,
    "caption": cmd_caption,
    "vqa": cmd_vqa,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "dump-fixtures": cmd_dump_fixtures,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (flags override it)")
    common.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")
    common.add_argument("--log-dir", help="Also write log files to this directory")
    common.add_argument("--backend", choices=["toy", "real"], help="Backbone and language model backend")
    common.add_argument("--sigma", type=float, help="Training noise std")
    common.add_argument("--inference-sigma", type=float, help="Inference noise std (default: --sigma)")
    common.add_argument("--n-cr", type=int, help="Region sequence length")
    common.add_argument("--n-q", type=int, help="Number of adaptor queries")
    common.add_argument("--samples", type=int, help="Sampled captions per image")
    common.add_argument("--beams", type=int, help="Beam width")
    common.add_argument("--max-len", type=int, help="Maximum caption length in tokens")
    common.add_argument("--seed", type=int, help="Run seed")
    common.add_argument("--corpus", help="Caption corpus (text lines or JSON lines)")
    common.add_argument("--checkpoint", help="Adaptor checkpoint path")
    common.add_argument("--manifest", help="Image manifest (JSON lines)")
    common.add_argument("--out-dir", help="Output directory")
    common.add_argument("--workers", type=int, help="Worker threads")
    common.add_argument("--distribution", choices=["gaussian", "uniform"], help="Noise distribution")
    common.add_argument("--aggregate", choices=["sum", "mean", "cls"], help="Subregion aggregation")
    common.add_argument("--length-normalize", action="store_true", default=None,
                        help="Rank beams by per-token log-probability")
    return common


def _train_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--epochs", type=int, help="Training epochs")
    parser.add_argument("--batch-size", type=int, help="Training batch size")
    parser.add_argument("--lr", type=float, help="Learning rate")
    parser.add_argument("--synthetic-corpus", type=int, help="Train on N generated captions")


def _synthetic_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--pairs", type=int, help="Number of synthetic pairs")
    parser.add_argument("--gap-sigma", type=float, help="Std of the synthetic global gap")
    parser.add_argument("--patch-noise-sigma", type=float, help="Std of synthetic patch noise")
    parser.add_argument("--low-noise-patches", type=int, help="Patches per pair with low noise")
    parser.add_argument("--low-noise-sigma", type=float, help="Std of the low-noise patches")


def build_parser() -> argparse.ArgumentParser:
    version = get_version()
    parser = argparse.ArgumentParser(
        prog="maccap",
        description=f"MacCap zero-shot captioning toolkit v{version}",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""Examples:
  %(prog)s analyze --backend toy --pairs 1000 --gap-sigma 0.05
  %(prog)s train --synthetic-corpus 512 --epochs 30 --out-dir runs/toy
  %(prog)s caption --checkpoint runs/toy/adaptor.ckpt --synthetic-images 16
  %(prog)s eval --predictions runs/toy/eval_set.jsonl
  %(prog)s ablate --sweep sigma --values 0,0.016,0.1 --synthetic-corpus 256
        """
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {version}")
    sub = parser.add_subparsers(dest="command")
    common = _common_parser()

    analyze = sub.add_parser("analyze", parents=[common], help="Modality gap analysis")
    _synthetic_flags(analyze)
    analyze.add_argument("--mix", choices=["best", "average"], default="best", help="Mix representation")
    analyze.add_argument("--scatter", action="store_true", help="Export a 2D linear projection")
    analyze.add_argument("--plot", action="store_true", help="Render histogram plots")

    train = sub.add_parser("train", parents=[common], help="Text-only adaptor training")
    _train_flags(train)

    caption = sub.add_parser("caption", parents=[common], help="Caption images")
    caption.add_argument("--synthetic-images", type=int, help="Caption N held-out synthetic images")
    caption.add_argument("--keep-candidates", action="store_true", default=None, help="Keep all sampled candidates")
    _synthetic_flags(caption)

    vqa = sub.add_parser("vqa", parents=[common], help="Zero-shot VQA")
    vqa.add_argument("--questions", required=True, help="VQA items (JSON lines)")
    vqa.add_argument("--candidates", required=True, help="Answer candidates, one per line")
    vqa.add_argument("--answer-len", type=int, default=None, help="Maximum answer length in tokens")
    vqa.add_argument("--dump-items", action="store_true", help="Write per-item results")

    evaluate = sub.add_parser("eval", parents=[common], help="Caption metrics")
    evaluate.add_argument("--predictions", required=True, help="JSON lines {candidate, references}")
    evaluate.add_argument("--cider-d", action="store_true", help="Use CIDEr-D clipping")
    evaluate.add_argument("--scale-10", action="store_true", help="Multiply CIDEr by 10")

    ablate = sub.add_parser("ablate", parents=[common], help="Ablation sweeps")
    ablate.add_argument("--sweep", required=True, choices=["sigma", "patches", "presets", "inference"])
    ablate.add_argument("--values", help="Comma-separated grid for sigma/patches sweeps")
    ablate.add_argument("--eval-images", type=int, default=16, help="Held-out synthetic images")
    _train_flags(ablate)
    _synthetic_flags(ablate)
    ablate.set_defaults(synthetic_corpus=256)

    fixtures = sub.add_parser("dump-fixtures", parents=[common], help="Write synthetic pair fixtures")
    _synthetic_flags(fixtures)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    if args.verbose or args.log_dir:
        setup_logging(
            log_level="DEBUG" if args.verbose else os.getenv('LOG_LEVEL', 'INFO'),
            log_dir=args.log_dir,
            command=args.command,
        )
        main_logger.debug("Verbose logging enabled")

    try:
        manager = ConfigManager(args.config)
        manager.load_file()
        config = manager.resolve(overrides_from_args(args))
    except ConfigurationException as e:
        main_logger.error(f"Configuration error: {e}")
        return EXIT_USAGE

    out_dir = Path(config.paths.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with RunLock(out_dir):
            config.write(out_dir / "run_config.json")
            main_logger.info(f"Running {args.command} (config {config.config_hash()[:12]}) into {out_dir}")
            return COMMANDS[args.command](args, config, out_dir)
    except UsageError as e:
        main_logger.error(f"Usage error: {e}")
        return EXIT_USAGE
    except (MacCapException, OSError) as e:
        log_command_failure(main_logger, args.command, e, with_traceback=args.verbose)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        main_logger.info("Received interrupt signal, shutting down...")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
