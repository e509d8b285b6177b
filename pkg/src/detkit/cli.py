"""``detkit`` command line: ingest, merge-pseudo, gen-instructions, run-inference, evaluate, diagnose.

Exit status: 0 success, 1 input or validation error, 2 partial inference failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from . import __version__
from .dda import adjust_dataset, distribution_shift_report, load_pseudo_labels
from .detmodel import DetkitError, ValidationError, dataset_stats, dataset_to_coco, load_coco_json, load_results
from .evaluator import EvalConfig, correctness_flags, evaluate
from .instructgen import DEFAULT_TEMPLATE, GenConfig, export_conversations, generate_conversations, shuffle_epoch
from .orchestrator import (
    ENDPOINT_ENV,
    EndpointConfig,
    HttpModelClient,
    InferenceConfig,
    SimModelConfig,
    SimulatedModelClient,
    run_dataset,
)
from .report import bar_chart_svg, csv_text
from .tokencodec import TokenCodecConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("detkit")

EXIT_OK, EXIT_INPUT, EXIT_PARTIAL = 0, 1, 2


class UsageError(DetkitError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_file(args, name: str) -> Path:
    if Path(name).name != name:
        raise UsageError(f"output name {name!r} must be a bare file name; files go under --out-dir")
    return Path(args.out_dir) / name


def _write_manifest(args, inputs: Sequence[str | Path], started: str) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func" and not k.startswith("_")}
    manifest = {
        "command": args.command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs if p},
        "tool_version": __version__,
        "seed": args.seed,
        "timestamps": {"started": started, "finished": _now()},
    }
    (Path(args.out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _codec(args) -> TokenCodecConfig:
    return TokenCodecConfig(
        mode=args.codec,
        coord_precision=args.coord_precision,
        coord_bins=args.coord_bins,
        score_bins=args.score_bins,
    )


def cmd_ingest(args) -> int:
    ds = load_coco_json(args.annotations)
    stats = dataset_stats(ds)
    _out_file(args, args.stats_name).write_text(stats.to_csv())
    crowd = sum(1 for a in ds.annotations if a.iscrowd)
    print(
        f"{stats.total_images} images, {stats.total_boxes} boxes, "
        f"{stats.mean_boxes_per_image:.1f} boxes/image"
    )
    print(f"crowd boxes: {crowd}; degenerate boxes dropped: {len(ds.warnings)}; categories: {len(ds.categories)}")
    return EXIT_OK


def cmd_merge_pseudo(args) -> int:
    ds = load_coco_json(args.gt)
    pseudo = load_pseudo_labels(args.pseudo, ds)
    adjusted = adjust_dataset(ds, pseudo.detections, args.iou_threshold, class_wise=not args.class_agnostic)
    _out_file(args, args.out).write_text(json.dumps(dataset_to_coco(adjusted)) + "\n")
    report = distribution_shift_report(dataset_stats(ds), dataset_stats(adjusted))
    _out_file(args, "shift_report.csv").write_text(report.to_csv())
    _out_file(args, "shift_report.svg").write_text(report.to_svg())
    print(
        f"boxes/image {report.mean_before:.2f} -> {report.mean_after:.2f} "
        f"(delta {round(report.delta, 4):+}); pseudo records rejected: {len(pseudo.warnings)}"
    )
    return EXIT_OK


def cmd_gen_instructions(args) -> int:
    ds = load_coco_json(args.annotations)
    cfg = GenConfig(seed=args.seed, round_cap=args.cap, codec=_codec(args), prompt_template=args.template)
    records = generate_conversations(ds, cfg)
    if args.epoch is not None:
        records = shuffle_epoch(records, args.epoch, args.seed)
    n = export_conversations(records, _out_file(args, args.out), ds.categories)
    pos = sum(len(r.positives) for r in records)
    neg = sum(len(r.negatives) for r in records)
    print(f"{n} conversation records, {pos} positive turns, {neg} negative turns")
    return EXIT_OK


def _parse_sampling(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--sampling expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def cmd_run_inference(args) -> int:
    ds = load_coco_json(args.dataset)
    codec = _codec(args)
    cfg = InferenceConfig(prompt_template=args.template, sampling=_parse_sampling(args.sampling))
    inputs = [args.dataset]
    if args.simulate:
        with open(args.simulate, "rb") as fh:
            sim = tomllib.load(fh)
        sim.setdefault("seed", args.seed)
        client = SimulatedModelClient(ds, SimModelConfig.from_mapping(sim), codec, args.template)
        inputs.append(args.simulate)
    else:
        try:
            endpoint = EndpointConfig.from_env(
                args.endpoint,
                timeout=args.timeout,
                retries=args.retries,
                sampling=cfg.sampling,
                image_root=args.image_root,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        client = HttpModelClient(endpoint)
    report = run_dataset(client, ds, codec, cfg, parallelism=args.parallelism)
    report.write(args.out_dir, _out_file(args, args.out).name)
    s = report.summary()
    print(
        f"{s['images']} images, {s['requests']} requests, {s['predictions']} predictions, "
        f"{s['parse_errors']} parse errors, {len(s['failed_images'])} failed images"
    )
    args._inputs = inputs
    return EXIT_PARTIAL if report.partial_failure else EXIT_OK


def _fmt(v) -> str:
    return "undefined" if v is None else f"{v:.4f}"


def cmd_evaluate(args) -> int:
    ds = load_coco_json(args.dataset)
    preds = load_results(args.predictions, ds).detections
    cfg = EvalConfig(score_threshold=args.score_threshold, max_dets_scope=args.max_dets_scope)
    res = evaluate(preds, ds, cfg, workers=args.workers)
    doc = {"metrics": res.summary(), "counts": res.counts, "per_category": {str(k): v for k, v in res.per_category.items()}}
    _out_file(args, "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    rows = [(c, ds.categories.name(c), res.per_category[c]) for c in ds.categories.ids]
    _out_file(args, "per_category.csv").write_text(csv_text(["category_id", "name", "ap"], rows))
    pr_rows = []
    for k, c in enumerate(ds.categories.ids):
        for t, thr in enumerate(cfg.iou_thresholds):
            if res.precision[t, 0, k] < 0:
                continue
            for r, rec in enumerate(cfg.recall_thresholds):
                pr_rows.append((c, thr, round(float(rec), 2), float(res.precision[t, r, k])))
    _out_file(args, "pr_curves.csv").write_text(csv_text(["category_id", "iou_threshold", "recall", "precision"], pr_rows))
    print("  ".join(f"{k} {_fmt(v)}" for k, v in res.summary().items()))
    return EXIT_OK


def box_count_histograms(ds, preds) -> tuple[dict[int, int], dict[int, int]]:
    """Images per boxes-per-image bucket, for ground truth and for predictions."""
    gt_n = Counter(a.image_id for a in ds.annotations)
    pr_n = Counter(p.image_id for p in preds)
    gt_h = Counter(gt_n.get(im.image_id, 0) for im in ds.images)
    pr_h = Counter(pr_n.get(im.image_id, 0) for im in ds.images)
    return dict(sorted(gt_h.items())), dict(sorted(pr_h.items()))


def cmd_diagnose(args) -> int:
    ds = load_coco_json(args.dataset)
    preds = load_results(args.predictions, ds).detections
    if args.score_threshold is not None:
        preds = [p for p in preds if p.score >= args.score_threshold]
    gt_h, pr_h = box_count_histograms(ds, preds)
    buckets = sorted(set(gt_h) | set(pr_h))
    _out_file(args, "box_histogram.csv").write_text(
        csv_text(["bucket", "ground_truth", "predictions"], [(b, gt_h.get(b, 0), pr_h.get(b, 0)) for b in buckets])
    )
    _out_file(args, "box_histogram.svg").write_text(
        bar_chart_svg({"ground truth": gt_h, "predictions": pr_h}, title="Boxes per image: ground truth vs predictions")
    )
    totals = correctness_flags(preds, ds).totals()
    _out_file(args, "correctness.csv").write_text(csv_text(["flag", "count"], list(totals.items())))
    print(", ".join(f"{k} {v}" for k, v in totals.items()))
    return EXIT_OK


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("global")
    g.add_argument("--out-dir", default="out", help="directory receiving every output file (default: out)")
    g.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    g.add_argument("--config", help="TOML file whose keys set defaults for this command's flags")
    g.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _codec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--codec", choices=["plain", "extra_vocab"], default="plain", help="box text encoding (default: plain)")
    p.add_argument("--coord-precision", type=int, default=3, help="decimals per coordinate in plain mode (default: 3)")
    p.add_argument("--coord-bins", type=int, default=1000, help="coordinate tokens in extra_vocab mode (default: 1000)")
    p.add_argument("--score-bins", type=int, default=100, help="score tokens in extra_vocab mode (default: 100)")
    p.add_argument("--template", default=DEFAULT_TEMPLATE, help="prompt template containing <category>")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="detkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"detkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="load a COCO annotation file and report box statistics")
    p.add_argument("annotations", help="COCO-style annotation JSON")
    p.add_argument("--stats-name", default="stats.csv", help="histogram CSV file name (default: stats.csv)")
    _common(p)
    p.set_defaults(func=cmd_ingest, _inputs_attr=("annotations",))

    p = sub.add_parser("merge-pseudo", help="merge detector pseudo-labels into ground truth")
    p.add_argument("--gt", required=True, help="COCO-style ground-truth annotation JSON")
    p.add_argument("--pseudo", required=True, help="pseudo-labels in COCO results format")
    p.add_argument("--iou-threshold", type=float, default=0.5, help="merge NMS IoU threshold (default: 0.5)")
    p.add_argument("--class-agnostic", action="store_true", help="suppress across categories too")
    p.add_argument("--out", default="adjusted_annotations.json", help="output annotation file name")
    _common(p)
    p.set_defaults(func=cmd_merge_pseudo, _inputs_attr=("gt", "pseudo"))

    p = sub.add_parser("gen-instructions", help="build class-specific instruction conversations")
    p.add_argument("--annotations", required=True, help="COCO-style (optionally adjusted) annotation JSON")
    p.add_argument("--cap", type=int, default=80, help="max turns per image (80 for COCO, 365 for Objects365)")
    p.add_argument("--epoch", type=int, help="also apply the per-epoch turn/box shuffle for this epoch")
    p.add_argument("--out", default="conversations.jsonl", help="output file name (default: conversations.jsonl)")
    _codec_flags(p)
    _common(p)
    p.set_defaults(func=cmd_gen_instructions, _inputs_attr=("annotations",))

    p = sub.add_parser("run-inference", help="query a model once per (image, category)")
    p.add_argument("--dataset", required=True, help="COCO-style annotation JSON listing the images")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--endpoint", help=f"model endpoint URL (overridden by ${ENDPOINT_ENV})")
    src.add_argument("--simulate", help="TOML file of simulated-model settings")
    p.add_argument("--parallelism", type=int, default=1, help="max in-flight images (default: 1)")
    p.add_argument("--timeout", type=float, default=60.0, help="per-request timeout in seconds")
    p.add_argument("--retries", type=int, default=2, help="retries per request")
    p.add_argument("--sampling", action="append", metavar="KEY=VALUE", help="opaque sampling option passed to the endpoint")
    p.add_argument("--image-root", help="send image bytes (base64) read from this directory")
    p.add_argument("--out", default="predictions.json", help="predictions file name (default: predictions.json)")
    _codec_flags(p)
    _common(p)
    p.set_defaults(func=cmd_run_inference, _inputs_attr=("dataset", "simulate"))

    p = sub.add_parser("evaluate", help="COCO-protocol metrics for a predictions file")
    p.add_argument("--dataset", required=True, help="COCO-style annotation JSON")
    p.add_argument("--predictions", required=True, help="predictions in COCO results format")
    p.add_argument("--score-threshold", type=float, help="drop predictions below this score (default: keep all)")
    p.add_argument("--max-dets-scope", choices=["image_category", "image"], default="image_category",
                   help="where the 100-detection cap applies (default: image_category, as the COCO tool)")
    p.add_argument("--workers", type=int, default=1, help="evaluation threads")
    _common(p)
    p.set_defaults(func=cmd_evaluate, _inputs_attr=("dataset", "predictions"))

    p = sub.add_parser("diagnose", help="box-count histograms and per-box correctness totals")
    p.add_argument("--dataset", required=True, help="COCO-style annotation JSON")
    p.add_argument("--predictions", required=True, help="predictions in COCO results format")
    p.add_argument("--score-threshold", type=float, help="drop predictions below this score before counting")
    _common(p)
    p.set_defaults(func=cmd_diagnose, _inputs_attr=("dataset", "predictions"))
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """Load --config TOML (flat keys, or a table named after the command) as flag defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or not known.command:
        return
    with open(known.config, "rb") as fh:
        doc = tomllib.load(fh)
    section = doc.get(known.command, {})
    flat = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    values = {k.replace("-", "_"): v for k, v in {**flat, **section}.items()}
    subparser = parser._subparsers._group_actions[0].choices.get(known.command)
    if subparser is None:
        return
    dests = {a.dest for a in subparser._actions}
    unknown = sorted(set(values) - dests)
    if unknown:
        raise UsageError(f"{known.config}: unknown key(s) for {known.command}: {', '.join(unknown)}")
    subparser.set_defaults(**values)
    for action in subparser._actions:
        if action.dest in values:
            action.required = False


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (OSError, tomllib.TOMLDecodeError, DetkitError) as exc:
        print(f"detkit: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started = _now()
    try:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        code = args.func(args)
        inputs = getattr(args, "_inputs", None) or [getattr(args, a) for a in args._inputs_attr if getattr(args, a, None)]
        _write_manifest(args, inputs, started)
    except ValidationError as exc:
        print(f"detkit: validation error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DetkitError, OSError, ValueError, tomllib.TOMLDecodeError) as exc:
        print(f"detkit: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return code


if __name__ == "__main__":
    sys.exit(main())
