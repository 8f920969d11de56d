"""Batch driver: generate bundles, detect, auto-split, compute metrics, serve.

All commands exit 0 on success and nonzero on any domain error, write
machine-readable JSON reports, and are deterministic for a fixed --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .bundle import (
    BundleAnnotations,
    PatchBundle,
    PatchMeta,
    read_bundle,
    read_detection_report,
    write_bundle,
    write_detection_report,
)
from .detection import DetectionConfig, detect, top_activated_indices
from .errors import ProtosplitError, ValidationError
from .metrics import accuracy, part_purity, pattern_purity
from .model import corpus_activations
from .pipeline import (
    SplitRecord,
    auto_split,
    concept_sets_from_labels,
    pooled_dataset,
    split_and_finetune,
)
from .splitting import SplitHyperparams
from .synthetic import SynthConfig, generate_bank, render_thumbnails

SPLIT_REPORT_VERSION = 1
METRICS_REPORT_VERSION = 1


def _write_json(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _load_hyper(path: str | None) -> SplitHyperparams:
    if path is None:
        return SplitHyperparams()
    overrides = json.loads(Path(path).read_text())
    return SplitHyperparams(**overrides)


def cmd_generate(args) -> int:
    cfg = SynthConfig(
        feature_width=args.feature_width,
        num_prototypes=args.prototypes,
        num_classes=args.classes,
        parts=args.parts,
        patches_per_part=args.patches_per_part,
        entangled_count=args.entangled,
        cluster_spread=args.spread,
        rng_seed=args.seed,
    )
    bank, corpus, gt = generate_bank(cfg)
    thumbnails = {} if args.no_thumbnails else render_thumbnails(gt, corpus)
    patches = [
        PatchMeta(p.image_id, p.location[0], p.location[1], p.thumbnail_ref) for p in corpus
    ]
    annotations = BundleAnnotations(
        patch_parts=[gt.parts_of_row(row) for row in range(len(corpus))],
        image_classes=gt.image_classes,
        entangled=gt.entangled,
    )
    grid_h = max(m.h for m in patches) + 1
    bundle = PatchBundle(
        features=np.stack([p.feature for p in corpus]),
        kernels=bank.kernels,
        head=bank.head,
        patches=patches,
        class_names=bank.class_names,
        grid_h=grid_h,
        grid_w=2,
        thumbnails=thumbnails,
        annotations=annotations,
    )
    write_bundle(bundle, args.out)
    print(f"wrote bundle with {len(corpus)} patches, {bank.num_prototypes} prototypes -> {args.out}")
    return 0


def _detection_config(args) -> DetectionConfig:
    return DetectionConfig(
        patch_set_size=args.patch_set_size,
        dedup_per_image=not args.no_dedup,
        delta_min=args.delta_min,
        delta_max=args.delta_max,
        delta_step=args.delta_step,
        q=args.q,
    )


def cmd_detect(args) -> int:
    bundle = read_bundle(args.bundle)
    result = detect(bundle.to_corpus(), bundle.to_bank(), _detection_config(args))
    write_detection_report(result, args.report)
    flagged = result.flagged()
    print(
        f"delta*={result.delta_star:.4f} flagged={len(flagged)} of {len(result.reports)}"
        f" -> {args.report}"
    )
    return 0


def cmd_split(args) -> int:
    bundle = read_bundle(args.bundle)
    detection = read_detection_report(args.report)
    corpus = bundle.to_corpus()
    bank = bundle.to_bank()
    hyper = _load_hyper(args.hyper)
    image_classes = bundle.annotations.image_classes if bundle.annotations else {}

    records: list[SplitRecord] = []
    if args.auto:
        outcome = auto_split(
            corpus, bank, detection, args.top,
            hyper=hyper, seed=args.seed, image_classes=image_classes, q=args.q,
        )
        bank = outcome.bank
        records = outcome.records
    else:
        label_doc = json.loads(Path(args.labels).read_text())
        for proto_str, labels in sorted(label_doc.items(), key=lambda kv: int(kv[0])):
            e = int(proto_str)
            served = detection.patch_sets.get(e)
            if served is None:
                raise ValidationError(f"prototype {e} has no patch set in the detection report")
            sets = concept_sets_from_labels(
                {int(k): v for k, v in labels.items()}, served, e, corpus, bank, q=args.q
            )
            bank, result, finetune = split_and_finetune(
                corpus, bank, e, sets,
                hyper=hyper, seed=args.seed, image_classes=image_classes, q=args.q,
            )
            records.append(SplitRecord.from_parts(result, finetune is not None))

    write_bundle(bundle.with_bank(bank), args.out)
    report = {
        "version": SPLIT_REPORT_VERSION,
        "seed": args.seed,
        "q": args.q,
        "mode": "auto" if args.auto else "labels",
        "records": [asdict(r) for r in records],
    }
    _write_json(args.split_report, report)
    done = sum(1 for r in records if r.converged)
    print(f"split {len(records)} prototypes ({done} converged) -> {args.out}")
    return 0


def cmd_metrics(args) -> int:
    bundle = read_bundle(args.bundle)
    if bundle.annotations is None:
        raise ValidationError("metrics need a bundle with a ground-truth sidecar")
    corpus = bundle.to_corpus()
    bank = bundle.to_bank()
    acts = corpus_activations(corpus, bank)
    parts_by_row = bundle.annotations.patch_parts

    per_prototype = []
    for d in range(bank.num_prototypes):
        rows, _short = top_activated_indices(acts, corpus, d, args.top_k)
        patterns = [parts_by_row[r] for r in rows if parts_by_row[r] is not None]
        if not patterns:
            continue
        per_prototype.append(
            {
                "prototype_id": d,
                "pattern_purity": pattern_purity(patterns),
                "part_purity": part_purity(patterns),
            }
        )

    if not per_prototype:
        raise ValidationError("no prototype has annotated patches in its top set")

    doc = {
        "version": METRICS_REPORT_VERSION,
        "top_k": args.top_k,
        "per_prototype": per_prototype,
        "mean_pattern_purity_all": float(
            np.mean([p["pattern_purity"] for p in per_prototype])
        ),
        "mean_part_purity_all": float(np.mean([p["part_purity"] for p in per_prototype])),
    }

    split_channels = None
    if args.split_report:
        split_doc = json.loads(Path(args.split_report).read_text())
        split_channels = sorted(
            c for r in split_doc["records"] for c in (r["prototype_id"], r["new_channel"])
        )
    elif args.channels:
        split_channels = sorted(int(c) for c in args.channels.split(","))
    if split_channels is not None:
        by_id = {p["prototype_id"]: p for p in per_prototype}
        subset = [by_id[c] for c in split_channels if c in by_id]
        doc["split_channels"] = split_channels
        doc["mean_pattern_purity_split"] = float(
            np.mean([p["pattern_purity"] for p in subset])
        ) if subset else None
        doc["mean_part_purity_split"] = float(
            np.mean([p["part_purity"] for p in subset])
        ) if subset else None

    if bundle.annotations.image_classes:
        samples = pooled_dataset(corpus, bank, bundle.annotations.image_classes)
        doc["accuracy"] = accuracy(bank, samples)

    _write_json(args.out, doc)
    print(f"metrics over {len(per_prototype)} prototypes -> {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_app

    host, _, port = args.addr.rpartition(":")
    app = build_app(
        bundle_path=args.bundle,
        report_path=args.report,
        log_path=args.log,
        workers=args.workers,
        q=args.q,
        seed=args.seed,
        detection_config=_detection_config(args),
        hyper=_load_hyper(args.hyper),
    )
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protosplit")
    parser.add_argument("--seed", type=int, default=0, help="global determinism seed")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic ground-truth bundle")
    g.add_argument("--out", required=True)
    g.add_argument("--feature-width", type=int, default=32)
    g.add_argument("--prototypes", type=int, default=64)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--parts", type=int, default=16)
    g.add_argument("--patches-per-part", type=int, default=40)
    g.add_argument("--entangled", type=int, default=8)
    g.add_argument("--spread", type=float, default=0.05)
    g.add_argument("--no-thumbnails", action="store_true")
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("detect", help="find inconsistent prototypes")
    d.add_argument("--bundle", required=True)
    d.add_argument("--report", required=True)
    d.add_argument("--q", type=int, default=2)
    d.add_argument("--delta-min", type=float, default=0.05)
    d.add_argument("--delta-max", type=float, default=0.95)
    d.add_argument("--delta-step", type=float, default=0.05)
    d.add_argument("--patch-set-size", type=int, default=10)
    d.add_argument("--no-dedup", action="store_true")
    d.set_defaults(func=cmd_detect)

    s = sub.add_parser("split", help="split flagged prototypes")
    s.add_argument("--bundle", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--out", required=True)
    mode = s.add_mutually_exclusive_group(required=True)
    mode.add_argument("--auto", action="store_true", help="use the detected cliques as concepts")
    mode.add_argument("--labels", help="JSON file: prototype id -> {patch row -> A|B|SomethingElse}")
    s.add_argument("--top", type=int, default=10, help="auto mode: split the N most dissimilar")
    s.add_argument("--q", type=int, default=2)
    s.add_argument("--hyper", help="JSON file overriding split hyperparameter defaults")
    s.add_argument("--split-report", default="split_report.json")
    s.set_defaults(func=cmd_split)

    m = sub.add_parser("metrics", help="purity and accuracy over an annotated bundle")
    m.add_argument("--bundle", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--top-k", type=int, default=10)
    m.add_argument("--split-report", help="restricts the split aggregation to these channels")
    m.add_argument("--channels", help="comma-separated channel list (alternative to --split-report)")
    m.set_defaults(func=cmd_metrics)

    v = sub.add_parser("serve", help="run the interactive labeling service")
    v.add_argument("--bundle", required=True)
    v.add_argument("--addr", default="127.0.0.1:8000")
    v.add_argument("--report", help="precomputed detection report to load")
    v.add_argument("--log", default="session_log.jsonl")
    v.add_argument("--workers", type=int, default=2)
    v.add_argument("--q", type=int, default=2)
    v.add_argument("--delta-min", type=float, default=0.05)
    v.add_argument("--delta-max", type=float, default=0.95)
    v.add_argument("--delta-step", type=float, default=0.05)
    v.add_argument("--patch-set-size", type=int, default=10)
    v.add_argument("--no-dedup", action="store_true")
    v.add_argument("--hyper", help="JSON file overriding split hyperparameter defaults")
    v.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ProtosplitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
