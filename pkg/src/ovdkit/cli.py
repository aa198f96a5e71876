"""Command-line surface.

Every subcommand reads an optional YAML config plus dotted overrides,
writes a manifest into its output directory before producing anything
else, and exits 0 on success or 2 with a one-line ``error: ...`` on
operator mistakes (missing files, malformed configs).

The cache root for default data/checkpoint locations comes from the
``CORA_KIT_CACHE`` environment variable (default ``~/.cache/cora_kit``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .backbone import embed_classes, load_backbone, pretrain_dual_encoder, save_backbone
from .checkpoint import config_hash
from .config import ConfigError, apply_overrides, build, load_config, resolved_dict
from .data import (
    CocoFormatError,
    generate_synthetic,
    load_benchmark,
    load_coco_json,
    make_pretrain_corpus,
    save_benchmark,
    save_coco_json,
)
from .evaluation import (
    DetectorBundle,
    detect,
    detections_to_results,
    eval_generalized,
    eval_localization,
    export_pseudo_labels,
    load_detections_json,
    raw_boxes,
    results_to_detections,
    run_detector,
    save_detections_json,
)
from .localizer import load_localizer
from .pipeline import matchable_fraction, train_detector
from .region_classifier import (
    RegionClassifier,
    eval_region_classification,
    load_prompt,
    relabel_dataset,
    save_prompt,
    train_region_prompts,
)

DROPOUT_SWEEP = (0.0, 0.1, 0.2, 0.3, 0.5)


def cache_root() -> Path:
    return Path(os.environ.get("CORA_KIT_CACHE", Path.home() / ".cache" / "cora_kit"))


def _write_manifest(out_dir: Path, command: str, cfg: dict, **extra) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": resolved_dict(cfg),
    }
    manifest["config_hash"] = config_hash(manifest["config"])
    manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def _update_manifest(out_dir: Path, manifest: dict, **extra) -> None:
    manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))


def _load_stack(args, cfg) -> tuple:
    """Load benchmark, backbone, classifier (with prompts when given), table."""
    bench = load_benchmark(args.data)
    encoder = load_backbone(args.backbone)
    classifier_cfg = build(cfg, "classifier")
    if getattr(args, "prompts", None):
        prompt, prompt_cfg = load_prompt(args.prompts)
        classifier = RegionClassifier(encoder, prompt=prompt, config=prompt_cfg)
    else:
        classifier = RegionClassifier(encoder, config=classifier_cfg)
    vocab = bench.train.vocab
    table = embed_classes(encoder, vocab.names, novel=vocab.novel)
    return bench, encoder, classifier, table


def cmd_gen_data(args, cfg) -> int:
    data_cfg = build(cfg, "data", **({"seed": args.seed} if args.seed is not None else {}))
    out = Path(args.out or cache_root() / "benchmark")
    manifest = _write_manifest(out, "gen-data", cfg, seed=data_cfg.seed)
    bench = generate_synthetic(data_cfg)
    save_benchmark(bench, out)
    _update_manifest(
        out,
        manifest,
        splits={k: len(v) for k, v in bench.splits().items()},
        train_hash=bench.train.content_hash(),
    )
    print(f"benchmark written to {out}")
    return 0


def cmd_pretrain_backbone(args, cfg) -> int:
    bcfg = build(cfg, "backbone", **({"seed": args.seed} if args.seed is not None else {}))
    bench = load_benchmark(args.data)
    out = Path(args.out or cache_root() / "backbone")
    manifest = _write_manifest(out, "pretrain-backbone", cfg, seed=bcfg.seed)
    corpus = make_pretrain_corpus(
        bench.train.vocab.names, bcfg.crops_per_class, bcfg.crop_size, seed=bcfg.seed
    )
    encoder = pretrain_dual_encoder(corpus, bcfg)
    ckpt = out / "backbone.ckpt"
    save_backbone(ckpt, encoder)
    _update_manifest(out, manifest, checkpoint=str(ckpt), corpus_size=len(corpus))
    print(f"backbone written to {ckpt}")
    return 0


def cmd_train_prompts(args, cfg) -> int:
    bench, encoder, classifier, table = _load_stack(args, cfg)
    pcfg = build(cfg, "prompt", **({"seed": args.seed} if args.seed is not None else {}))
    out = Path(args.out or cache_root() / "prompts")
    manifest = _write_manifest(
        out, "train-prompts", cfg, seed=pcfg.seed, dataset_hash=bench.train.content_hash()
    )
    prompt = train_region_prompts(
        bench.train, encoder, table, pcfg, classifier_config=classifier.config, log=print
    )
    ckpt = out / "prompts.ckpt"
    save_prompt(ckpt, prompt, classifier.config)
    report = eval_region_classification(
        bench.val, RegionClassifier(encoder, prompt=prompt, config=classifier.config), table
    )
    _update_manifest(
        out,
        manifest,
        checkpoint=str(ckpt),
        region_cls_novel_map=report.novel_ap,
        region_cls_base_map=report.base_ap,
    )
    print(f"prompts written to {ckpt}")
    print(f"region classification mAP: novel {report.novel_ap:.4f} base {report.base_ap:.4f}")
    return 0


def cmd_relabel(args, cfg) -> int:
    bench, encoder, classifier, table = _load_stack(args, cfg)
    out = Path(args.out or cache_root() / "relabel")
    manifest = _write_manifest(out, "relabel", cfg, dataset_hash=bench.train.content_hash())
    relabeled = relabel_dataset(bench.train, classifier)
    save_coco_json(relabeled, out / "train_relabeled.json")
    bench.train.vocab.save(out / "vocab.txt")
    changed = sum(
        1
        for a, b in zip(bench.train.records, relabeled.records)
        for x, y in zip(a.labels, b.labels)
        if x != y
    )
    # anchor matchability before/after, measured on init-distribution anchors
    from .localizer import initial_anchor_boxes

    loc_cfg = build(cfg, "localizer")
    torch.manual_seed(0)
    anchors = initial_anchor_boxes(loc_cfg.num_queries)
    frac_before = matchable_fraction(bench.train, classifier, table, anchors)
    frac_after = matchable_fraction(relabeled, classifier, table, anchors)
    _update_manifest(
        out, manifest,
        changed_labels=changed,
        matchable_fraction_before=frac_before,
        matchable_fraction_after=frac_after,
    )
    print(f"relabeled annotations written to {out / 'train_relabeled.json'} "
          f"({changed} labels changed)")
    print(f"gt fraction with a same-label pre-matched anchor: "
          f"{frac_before:.4f} -> {frac_after:.4f}")
    return 0


def cmd_train_detector(args, cfg) -> int:
    bench, encoder, classifier, table = _load_stack(args, cfg)
    tcfg = build(cfg, "train", **({"seed": args.seed} if args.seed is not None else {}))
    out = Path(args.out or cache_root() / "detector")
    result = train_detector(
        bench.train,
        encoder,
        classifier,
        table,
        tcfg,
        localizer_cfg=build(cfg, "localizer"),
        loss_weights=build(cfg, "loss"),
        val_set=bench.val,
        inference_cfg=build(cfg, "inference"),
        augment_cfg=build(cfg, "augment"),
        out_dir=out,
        log=print,
    )
    print(f"run artifacts in {out}; final metrics {result.manifest.get('final_metrics')}")
    return 0


def _bundle(args, cfg) -> tuple:
    bench, encoder, classifier, table = _load_stack(args, cfg)
    localizer = load_localizer(args.detector)
    localizer.eval()
    return bench, DetectorBundle(classifier=classifier, table=table, localizer=localizer)


def cmd_detect(args, cfg) -> int:
    from .plots import draw_detections

    bench, bundle = _bundle(args, cfg)
    icfg = build(cfg, "inference")
    out = Path(args.out or cache_root() / "detect")
    manifest = _write_manifest(out, "detect", cfg, split=args.split, image=args.image)
    vocab = bench.train.vocab
    class_indices = list(range(len(vocab)))
    if args.image:
        import matplotlib.image as mpimg

        arr = mpimg.imread(args.image)
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        img = torch.tensor(arr[..., :3], dtype=torch.float32).permute(2, 0, 1)
        dets = detect(bundle, img, class_indices, icfg)
        rows = [
            {
                "image_id": 0,
                "category_id": d.class_index + 1,
                "bbox": [
                    (d.box[0].item() - d.box[2].item() / 2) * img.shape[2],
                    (d.box[1].item() - d.box[3].item() / 2) * img.shape[1],
                    d.box[2].item() * img.shape[2],
                    d.box[3].item() * img.shape[1],
                ],
                "score": d.score,
            }
            for d in dets
        ]
    else:
        dataset = bench.splits()[args.split]
        detections = run_detector(bundle, dataset, class_indices, icfg)
        rows = detections_to_results(detections, dataset)
        if args.overlays:
            n = min(args.overlays, len(dataset.records))
            for i in range(n):
                draw_detections(
                    dataset, i, detections[dataset.records[i].image_id],
                    out / f"overlay_{dataset.records[i].image_id:06d}.png",
                )
    save_detections_json(out / "detections.json", rows)
    _update_manifest(out, manifest, detections=len(rows))
    print(f"{len(rows)} detections written to {out / 'detections.json'}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    bench = load_benchmark(args.data)
    dataset = bench.splits()[args.split]
    out = Path(args.out or cache_root() / "evaluate")
    manifest = _write_manifest(out, "evaluate", cfg, protocol=args.protocol, split=args.split)
    icfg = build(cfg, "inference")
    if args.protocol == "region-cls":
        _, encoder, classifier, table = _load_stack(args, cfg)
        report = eval_region_classification(dataset, classifier, table)
    elif args.detections:
        rows = load_detections_json(args.detections)
        detections = results_to_detections(rows, dataset)
        if args.protocol == "localization":
            boxes = {iid: torch.stack([d.box for d in ds]) if ds else torch.zeros(0, 4)
                     for iid, ds in detections.items()}
            report = eval_localization(dataset, boxes)
        else:
            report = eval_generalized(dataset, detections)
    else:
        bench, bundle = _bundle(args, cfg)
        if args.protocol == "localization":
            report = eval_localization(dataset, raw_boxes(bundle, dataset))
        else:
            detections = run_detector(
                bundle, dataset, list(range(len(bench.train.vocab))), icfg
            )
            report = eval_generalized(dataset, detections)
    report.save_json(out / "report.json")
    (out / "report.txt").write_text(report.summary() + "\n")
    _update_manifest(
        out, manifest,
        novel_ap=report.novel_ap, base_ap=report.base_ap, all_ap=report.all_ap,
    )
    print(report.summary())
    return 0


def cmd_pseudo_label(args, cfg) -> int:
    bench, bundle = _bundle(args, cfg)
    icfg = build(cfg, "inference")
    out = Path(args.out or cache_root() / "pseudo")
    manifest = _write_manifest(out, "pseudo-label", cfg, threshold=args.threshold)
    vocab = bench.train.vocab
    if args.classes:
        targets = [vocab.index(n) for n in args.classes]
    else:
        targets = vocab.novel_indices()
    doc = export_pseudo_labels(
        bench.train, bundle, targets, icfg, score_threshold=args.threshold
    )
    path = out / "pseudo_annotations.json"
    path.write_text(json.dumps(doc, indent=1))
    _update_manifest(out, manifest, annotations=len(doc["annotations"]))
    print(f"{len(doc['annotations'])} pseudo-labels written to {path}")
    return 0


def cmd_ablate(args, cfg) -> int:
    from .plots import plot_ablation, plot_dropout_sweep, save_csv

    bench, encoder, classifier, table = _load_stack(args, cfg)
    out = Path(args.out or cache_root() / "ablate")
    manifest = _write_manifest(out, "ablate", cfg)
    base_train = build(cfg, "train")
    variants = [
        ("plain-detr", {"conditioning": False, "per_class_matching": False}),
        ("conditioning-only", {"per_class_matching": False}),
        ("full-no-relabel", {"clip_aligned_labeling": False}),
        ("full", {}),
    ]
    rows = []
    for name, changes in variants:
        tcfg = build(cfg, "train", **changes)
        res = train_detector(
            bench.train, encoder, classifier, table, tcfg,
            localizer_cfg=build(cfg, "localizer"), loss_weights=build(cfg, "loss"),
            val_set=bench.val, inference_cfg=build(cfg, "inference"),
            augment_cfg=build(cfg, "augment"), out_dir=out / name, log=print,
        )
        rows.append({"variant": name, **res.manifest["final_metrics"]})
        print(f"[ablate] {name}: {res.manifest['final_metrics']}")
    sweep_rows = []
    for p in DROPOUT_SWEEP:
        tcfg = build(cfg, "train", class_dropout_p=p)
        res = train_detector(
            bench.train, encoder, classifier, table, tcfg,
            localizer_cfg=build(cfg, "localizer"), loss_weights=build(cfg, "loss"),
            val_set=bench.val, inference_cfg=build(cfg, "inference"),
            augment_cfg=build(cfg, "augment"), out_dir=out / f"dropout-{p}", log=print,
        )
        sweep_rows.append({"p": p, **res.manifest["final_metrics"]})
        print(f"[ablate] p={p}: {res.manifest['final_metrics']}")
    save_csv(rows, out / "ablation.csv")
    save_csv(sweep_rows, out / "dropout_sweep.csv")
    plot_ablation(rows, out / "ablation.png")
    plot_dropout_sweep(sweep_rows, out / "dropout_sweep.png")
    _update_manifest(out, manifest, ablation=rows, dropout_sweep=sweep_rows)
    print(f"ablation artifacts in {out}")
    return 0


def cmd_plot(args, cfg) -> int:
    from .plots import load_manifest, plot_ablation, plot_dropout_sweep, plot_training_curves, save_csv

    out = Path(args.out or cache_root() / "plots")
    manifest = _write_manifest(out, "plot", cfg, runs=[str(r) for r in args.runs])
    made = []
    for run in args.runs:
        run = Path(run)
        m = load_manifest(run)
        if m.get("epochs"):
            png = out / f"{run.name}_training.png"
            plot_training_curves(m, png)
            save_csv(m["epochs"], out / f"{run.name}_training.csv")
            made.append(str(png))
        if m.get("ablation"):
            plot_ablation(m["ablation"], out / f"{run.name}_ablation.png")
            save_csv(m["ablation"], out / f"{run.name}_ablation.csv")
            made.append(str(out / f"{run.name}_ablation.png"))
        if m.get("dropout_sweep"):
            plot_dropout_sweep(m["dropout_sweep"], out / f"{run.name}_dropout.png")
            save_csv(m["dropout_sweep"], out / f"{run.name}_dropout.csv")
            made.append(str(out / f"{run.name}_dropout.png"))
    _update_manifest(out, manifest, figures=made)
    print(f"{len(made)} figures written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovdkit", description="open-vocabulary shape detection toolkit"
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, model=False, detector=False):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int, default=None, help="override the stage seed")
        p.add_argument("--out", help="output directory")
        if data:
            p.add_argument("--data", required=True, help="benchmark directory")
        if model:
            p.add_argument("--backbone", required=True, help="backbone checkpoint")
            p.add_argument("--prompts", help="region prompt checkpoint")
        if detector:
            p.add_argument("--detector", required=True, help="localizer checkpoint")

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    common(p, data=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-backbone", help="contrastively pretrain the dual encoder")
    common(p)
    p.set_defaults(func=cmd_pretrain_backbone)

    p = sub.add_parser("train-prompts", help="train region prompts on base classes")
    common(p, model=True)
    p.set_defaults(func=cmd_train_prompts)

    p = sub.add_parser("relabel", help="align training labels with the region classifier")
    common(p, model=True)
    p.set_defaults(func=cmd_relabel)

    p = sub.add_parser("train-detector", help="train the localizer")
    common(p, model=True)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("detect", help="run detection on a split or one image")
    common(p, model=True, detector=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--image", help="path to a PNG image instead of a split")
    p.add_argument("--overlays", type=int, default=0,
                   help="render this many overlay images")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="evaluate a detector or detection dump")
    common(p, model=True, detector=False)
    p.add_argument("--detector", help="localizer checkpoint")
    p.add_argument("--protocol", default="generalized",
                   choices=["generalized", "localization", "region-cls"])
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--detections", help="COCO results-format JSON to score offline")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pseudo-label", help="export pseudo boxes for target classes")
    common(p, model=True, detector=True)
    p.add_argument("--classes", nargs="*", help="target class names (default: novel)")
    p.add_argument("--threshold", type=float, default=0.3)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("ablate", help="run the ablation grid and dropout sweep")
    common(p, model=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render figures from run manifests")
    common(p, data=False)
    p.add_argument("--runs", nargs="+", required=True, help="run directories")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, args.overrides)
        if args.command == "evaluate" and args.protocol != "region-cls" \
                and not args.detections and not args.detector:
            raise ConfigError("evaluate needs --detector or --detections")
        return args.func(args, cfg)
    except (ConfigError, CocoFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
