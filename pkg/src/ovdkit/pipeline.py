"""Detector training orchestration.

Per step: sample a batch, augment, split classes by dropout, forward
with pre-matching restricted to the active group, per-class
post-matching per decoder layer, clip gradients, step, update the EMA
shadow. Evaluation always runs on the EMA weights. Novel-class
annotations never reach any loss; the pipeline asserts it on every
iteration.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .backbone import ClassEmbeddingTable, DualEncoder
from .checkpoint import config_hash
from .data import AugmentConfig, DetectionDataset, augment
from .evaluation import DetectorBundle, InferenceConfig, eval_generalized, run_detector
from .localizer import Localizer, LocalizerConfig, forward_image, save_localizer
from .matching import LossWeights, MatchingConfig, total_loss
from .region_classifier import RegionClassifier, relabel_dataset


@dataclass
class TrainConfig:
    epochs: int = 35
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    grad_clip: float = 0.1
    class_dropout_p: float = 0.2
    ema_decay: float = 0.99996
    seed: int = 0
    # ablation switches
    conditioning: bool = True
    per_class_matching: bool = True
    clip_aligned_labeling: bool = True
    # mechanics
    use_augment: bool = True
    accumulate_dropout_passes: bool = True  # both groups share one optimizer step
    eval_interval: int = 0  # epochs between EMA val evals; 0 = final only
    checkpoint_interval: int = 1  # epochs between checkpoint writes

    def __post_init__(self):
        if not 0 <= self.class_dropout_p <= 1:
            raise ValueError("class dropout probability must be in [0, 1]")
        if not 0 < self.ema_decay < 1:
            raise ValueError("EMA decay must be in (0, 1)")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def class_dropout_split(
    base_classes: list[int],
    gt_labels: list[int],
    p: float,
    rng: np.random.Generator,
) -> list[tuple[list[int], list[int]]]:
    """Split the class list and ground truths into complementary groups.

    With probability 1-p returns the identity pair (all classes, all
    gts). Otherwise every class lands in one of two groups with equal
    probability and each ground truth follows its label. A draw that
    empties one group degenerates to the identity pair, keeping every
    returned pair trainable.
    """
    if not base_classes:
        raise ValueError("base class set is empty")
    all_gts = list(range(len(gt_labels)))
    if rng.uniform() >= p:
        return [(list(base_classes), all_gts)]
    sides = rng.integers(0, 2, len(base_classes))
    g1 = [c for c, s in zip(base_classes, sides) if s == 0]
    g2 = [c for c, s in zip(base_classes, sides) if s == 1]
    if not g1 or not g2:
        return [(list(base_classes), all_gts)]
    in_g1 = set(g1)
    gts1 = [i for i, l in enumerate(gt_labels) if l in in_g1]
    gts2 = [i for i in all_gts if i not in set(gts1)]
    return [(g1, gts1), (g2, gts2)]


def ema_update(shadow: dict[str, Tensor], live: dict[str, Tensor], decay: float) -> dict[str, Tensor]:
    """One exponential-moving-average step: shadow <- d*shadow + (1-d)*live."""
    out = {}
    for name, s in shadow.items():
        l = live[name]
        if s.shape != l.shape:
            raise ValueError(f"EMA shape mismatch for {name}: {s.shape} vs {l.shape}")
        out[name] = decay * s + (1 - decay) * l.detach()
    return out


class Ema:
    """Shadow copy of trainable parameters, updated once per optimizer step."""

    def __init__(self, module: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {
            k: v.detach().clone() for k, v in module.state_dict().items()
        }

    def update(self, module: nn.Module) -> None:
        self.shadow = ema_update(self.shadow, module.state_dict(), self.decay)

    def materialize(self, module: nn.Module) -> nn.Module:
        out = copy.deepcopy(module)
        out.load_state_dict(self.shadow)
        return out


def matchable_fraction(
    dataset: DetectionDataset,
    classifier: RegionClassifier,
    table: ClassEmbeddingTable,
    anchor_boxes: Tensor,
) -> float:
    """Fraction of ground truths with at least one same-label pre-matched anchor."""
    from .localizer import pre_match

    base = dataset.vocab.base_indices()
    total, matched = 0, 0
    with torch.no_grad():
        for i, rec in enumerate(dataset.records):
            if not rec.labels:
                continue
            fm = classifier.encoder.encode_image_early(dataset.image(i))
            labels = set(pre_match(classifier, fm, anchor_boxes, table, base).tolist())
            for l in rec.labels:
                total += 1
                matched += l in labels
    return matched / max(total, 1)


@dataclass
class TrainResult:
    localizer: Localizer
    ema_localizer: Localizer
    manifest: dict
    history: list[dict] = field(default_factory=list)


def _prematch_cosines(
    classifier: RegionClassifier, fm, anchor_boxes: Tensor, table: ClassEmbeddingTable
) -> Tensor:
    """Anchor-to-class cosine matrix, computed once per image per step."""
    with torch.no_grad():
        emb = classifier.embed_regions(fm, anchor_boxes)
        v = nn.functional.normalize(emb, dim=-1)
        return v @ table.embeddings.to(v.dtype).t()


def _labels_from_cosines(cos: Tensor, active: list[int]) -> Tensor:
    local = np.argmax(cos[:, active].numpy(), axis=1)
    return torch.tensor([active[int(k)] for k in local], dtype=torch.long)


def train_detector(
    train_set: DetectionDataset,
    encoder: DualEncoder,
    classifier: RegionClassifier,
    table: ClassEmbeddingTable,
    cfg: TrainConfig,
    localizer_cfg: LocalizerConfig | None = None,
    loss_weights: LossWeights | None = None,
    val_set: DetectionDataset | None = None,
    inference_cfg: InferenceConfig | None = None,
    out_dir: str | Path | None = None,
    augment_cfg: AugmentConfig | None = None,
    log=print,
) -> TrainResult:
    """Train the localizer on base-class annotations; everything else frozen."""
    t_start = time.time()
    localizer_cfg = localizer_cfg or LocalizerConfig()
    loss_weights = loss_weights or LossWeights()
    augment_cfg = augment_cfg or AugmentConfig()
    inference_cfg = inference_cfg or InferenceConfig()
    if not cfg.conditioning and cfg.per_class_matching:
        raise ValueError("per-class post-matching requires query conditioning")

    backbone_before = encoder.parameter_checksum()
    torch.manual_seed(cfg.seed)
    localizer = Localizer(
        localizer_cfg, encoder.config.channels[-1], encoder.config.embed_dim
    )
    if cfg.clip_aligned_labeling:
        train_set = relabel_dataset(train_set, classifier)
    base_classes = train_set.vocab.base_indices()
    base_set = set(base_classes)
    match_cfg = MatchingConfig(per_class=cfg.per_class_matching)

    manifest = {
        "kind": "train-detector",
        "config": {
            "train": cfg.to_dict(),
            "localizer": localizer_cfg.to_dict(),
            "loss_weights": asdict(loss_weights),
            "augment": asdict(augment_cfg),
            "inference": inference_cfg.to_dict(),
        },
        "dataset_hash": train_set.content_hash(),
        "vocab": train_set.vocab.names,
        "novel": train_set.vocab.novel,
        "epochs": [],
    }
    manifest["config_hash"] = config_hash(manifest["config"])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))

    params = [p for p in localizer.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    ema = Ema(localizer, cfg.ema_decay)
    history = []
    best_novel = -1.0

    def ema_bundle() -> DetectorBundle:
        shadow = ema.materialize(localizer)
        shadow.eval()
        return DetectorBundle(classifier=classifier, table=table, localizer=shadow)

    def run_val(tag: str) -> dict:
        if val_set is None:
            return {}
        dets = run_detector(
            ema_bundle(), val_set, list(range(len(table))), inference_cfg,
            conditioning=cfg.conditioning,
        )
        report = eval_generalized(val_set, dets)
        log(
            f"  [{tag}] EMA val AP50 novel {report.novel_ap:.4f} "
            f"base {report.base_ap:.4f} all {report.all_ap:.4f}"
        )
        return {
            "novel_ap": report.novel_ap,
            "base_ap": report.base_ap,
            "all_ap": report.all_ap,
        }

    n = len(train_set.records)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 11, epoch]).permutation(n)
        epoch_loss, nb = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            losses = []
            for idx in batch:
                rec = train_set.records[idx]
                image = train_set.image(int(idx))
                boxes, labels = rec.boxes.to(torch.float32), list(rec.labels)
                if any(l not in base_set for l in labels):
                    raise AssertionError(
                        f"novel-class annotation reached training (image {rec.image_id})"
                    )
                rng = np.random.default_rng([cfg.seed, 13, epoch, int(idx)])
                if cfg.use_augment:
                    image, boxes, labels = augment(image, boxes, labels, rng, augment_cfg)
                pairs = class_dropout_split(base_classes, labels, cfg.class_dropout_p, rng)
                fm = encoder.encode_image_early(image)
                cos = (
                    _prematch_cosines(classifier, fm, localizer.anchor_boxes().detach(), table)
                    if cfg.conditioning
                    else None
                )
                image_loss = None
                for active, gt_idx in pairs:
                    pm_labels = (
                        _labels_from_cosines(cos, active) if cfg.conditioning else None
                    )
                    result = forward_image(
                        localizer, classifier, table, image, active,
                        conditioning=cfg.conditioning, fm=fm, labels=pm_labels,
                    )
                    gt_b = boxes[gt_idx] if len(gt_idx) else torch.zeros(0, 4)
                    gt_l = torch.tensor([labels[i] for i in gt_idx], dtype=torch.long)
                    pred_labels = (
                        result.labels
                        if result.labels is not None
                        else torch.zeros(localizer_cfg.num_queries, dtype=torch.long)
                    )
                    lb = total_loss(
                        gt_b,
                        gt_l,
                        result.decode.layer_boxes,
                        [torch.sigmoid(l) for l in result.decode.layer_logits],
                        pred_labels,
                        loss_weights,
                        match_cfg,
                    )
                    image_loss = lb.total if image_loss is None else image_loss + lb.total
                losses.append(image_loss)
            batch_loss = torch.stack(losses).mean()
            if not torch.isfinite(batch_loss):
                if out_dir is not None:
                    torch.save(
                        {"batch": batch.tolist(), "epoch": epoch},
                        out_dir / "nan_dump.pt",
                    )
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} batch {start // cfg.batch_size}"
                )
            opt.zero_grad(set_to_none=True)
            batch_loss.backward()
            nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            ema.update(localizer)
            epoch_loss += batch_loss.item()
            nb += 1
        entry = {"epoch": epoch + 1, "loss": epoch_loss / max(nb, 1)}
        log(f"epoch {epoch + 1}/{cfg.epochs}: loss {entry['loss']:.4f}")
        if cfg.eval_interval and (epoch + 1) % cfg.eval_interval == 0:
            metrics = run_val(f"epoch {epoch + 1}")
            entry.update(metrics)
            if out_dir is not None and metrics.get("novel_ap", -1) > best_novel:
                best_novel = metrics["novel_ap"]
                save_localizer(out_dir / "best-ema.ckpt", ema.materialize(localizer))
        history.append(entry)
        manifest["epochs"] = history
        if out_dir is not None and (epoch + 1) % cfg.checkpoint_interval == 0:
            save_localizer(out_dir / f"epoch-{epoch + 1:03d}.ckpt", localizer)
            (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))

    final_metrics = run_val("final")
    manifest["final_metrics"] = final_metrics
    manifest["runtime_seconds"] = time.time() - t_start
    ema_loc = ema.materialize(localizer)
    ema_loc.eval()
    if out_dir is not None:
        save_localizer(out_dir / "final-ema.ckpt", ema_loc, extra={"ema": True})
        if best_novel < 0 or (
            final_metrics and final_metrics.get("novel_ap", -1) >= best_novel
        ):
            save_localizer(out_dir / "best-ema.ckpt", ema_loc, extra={"ema": True})
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    if encoder.parameter_checksum() != backbone_before:
        raise AssertionError("detector training modified the frozen backbone")
    return TrainResult(
        localizer=localizer, ema_localizer=ema_loc, manifest=manifest, history=history
    )
