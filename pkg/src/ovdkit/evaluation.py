"""End-to-end inference, score fusion, AP50 evaluation, pseudo-labels.

Detection scores fuse the query's matchability with the region
classifier's verdict on the refined box. The novel-class boost
multiplies cosines before temperature scaling; the generalized
protocol queries base and novel classes jointly and reports per-group
AP50 with 101-point interpolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .backbone import ClassEmbeddingTable
from .data import DetectionDataset
from .geometry import box_to_corners, nms, pairwise_iou
from .localizer import ForwardResult, Localizer, forward_image
from .metrics import EvalReport, ap_101
from .region_classifier import RegionClassifier


@dataclass
class InferenceConfig:
    temperature: float = 0.01
    novel_boost: float = 8.0
    raw_cosine: bool = False  # literal fusion: matchability times cosine
    nms_threshold: float = 0.5
    class_agnostic_nms: bool = False
    top_k_per_query: int = 1
    max_detections: int = 100
    score_threshold: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Detection:
    box: Tensor  # [4] normalized cxcywh
    class_index: int
    score: float


@dataclass
class DetectorBundle:
    """Everything inference needs: frozen encoder+prompt, table, localizer."""

    classifier: RegionClassifier
    table: ClassEmbeddingTable
    localizer: Localizer


def fuse_scores(
    match_probs: Tensor,
    embeddings: Tensor,
    table: ClassEmbeddingTable,
    class_indices: list[int],
    cfg: InferenceConfig,
) -> Tensor:
    """Per-class fused scores [N, K]: matchability times classification.

    Cosines of novel classes are multiplied by the boost factor before
    the temperature softmax (a boost of 1.0 is a no-op). The raw_cosine
    flag skips the softmax and multiplies boosted cosines directly.
    """
    if len(class_indices) == 0:
        raise ValueError("queried class set is empty")
    v = nn.functional.normalize(embeddings, dim=-1)
    cos = v @ table.embeddings[list(class_indices)].to(v.dtype).t()
    if cfg.novel_boost != 1.0:
        boost = torch.tensor(
            [cfg.novel_boost if table.novel[c] else 1.0 for c in class_indices],
            dtype=cos.dtype,
        )
        cos = cos * boost
    if cfg.raw_cosine:
        cls_scores = cos
    else:
        cls_scores = torch.softmax(cos / cfg.temperature, dim=-1)
    return match_probs[:, None] * cls_scores


def detect(
    bundle: DetectorBundle,
    image: Tensor,
    class_indices: list[int],
    cfg: InferenceConfig | None = None,
    conditioning: bool = True,
) -> list[Detection]:
    """Detect objects of the queried classes in one image."""
    cfg = cfg or InferenceConfig()
    if len(class_indices) == 0:
        raise ValueError("queried class set is empty")
    with torch.no_grad():
        result = forward_image(
            bundle.localizer,
            bundle.classifier,
            bundle.table,
            image,
            class_indices,
            conditioning=conditioning,
        )
        boxes = result.decode.layer_boxes[-1]
        probs = result.decode.probs(-1)
        emb = bundle.classifier.embed_regions(result.fm, boxes)
        scores = fuse_scores(probs, emb, bundle.table, class_indices, cfg)
    k = min(cfg.top_k_per_query, len(class_indices))
    top_scores, top_idx = scores.topk(k, dim=1)
    cand_boxes, cand_labels, cand_scores = [], [], []
    for q in range(len(boxes)):
        for j in range(k):
            s = top_scores[q, j].item()
            if s < cfg.score_threshold:
                continue
            cand_boxes.append(boxes[q])
            cand_labels.append(class_indices[int(top_idx[q, j])])
            cand_scores.append(s)
    if not cand_boxes:
        return []
    cb = torch.stack(cand_boxes)
    cl = torch.tensor(cand_labels)
    cs = torch.tensor(cand_scores, dtype=torch.float64)
    keep = nms(cb, cl, cs, cfg.nms_threshold, class_agnostic=cfg.class_agnostic_nms)
    keep = keep[: cfg.max_detections]
    return [
        Detection(box=cb[i], class_index=int(cl[i]), score=float(cs[i]))
        for i in keep.tolist()
    ]


def run_detector(
    bundle: DetectorBundle,
    dataset: DetectionDataset,
    class_indices: list[int],
    cfg: InferenceConfig | None = None,
    conditioning: bool = True,
) -> dict[int, list[Detection]]:
    """Detections for every image in the dataset, keyed by image id."""
    out = {}
    for i, rec in enumerate(dataset.records):
        out[rec.image_id] = detect(
            bundle, dataset.image(i), class_indices, cfg, conditioning=conditioning
        )
    return out


def raw_boxes(
    bundle: DetectorBundle, dataset: DetectionDataset, conditioning: bool = True
) -> dict[int, Tensor]:
    """Final-layer refined boxes per image, before any classification or NMS."""
    base = bundle.table.base_indices() or list(range(len(bundle.table)))
    out = {}
    with torch.no_grad():
        for i, rec in enumerate(dataset.records):
            result = forward_image(
                bundle.localizer,
                bundle.classifier,
                bundle.table,
                dataset.image(i),
                base,
                conditioning=conditioning,
            )
            out[rec.image_id] = result.decode.layer_boxes[-1]
    return out


# ---------------------------------------------------------------------------
# evaluation protocols


def _greedy_class_flags(
    dets: list[tuple[int, Tensor, float]],  # (image_id, box, score), one class
    gts: dict[int, Tensor],  # image_id -> [G, 4], one class
    iou_threshold: float,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Score-ordered TP/FP flags for one class under greedy IoU matching."""
    n_pos = sum(len(b) for b in gts.values())
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], i))
    matched: dict[int, set[int]] = {}
    scores, flags = [], []
    gt_corners = {iid: box_to_corners(b) for iid, b in gts.items() if len(b)}
    for i in order:
        iid, box, score = dets[i]
        scores.append(score)
        hit = False
        if iid in gt_corners:
            ious = pairwise_iou(box_to_corners(box[None]).to(torch.float64),
                                gt_corners[iid].to(torch.float64))[0]
            used = matched.setdefault(iid, set())
            best_j, best_iou = -1, -1.0
            for j in range(len(ious)):
                if j in used:
                    continue
                v = ious[j].item()
                if v >= iou_threshold and v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0:
                used.add(best_j)
                hit = True
        flags.append(hit)
    return np.array(scores), np.array(flags, dtype=bool), n_pos


def eval_generalized(
    dataset: DetectionDataset,
    detections: dict[int, list[Detection]],
    iou_threshold: float = 0.5,
    protocol: str = "generalized",
) -> EvalReport:
    """Per-class AP50 over every class with ground truth in the dataset."""
    vocab = dataset.vocab
    per_class_ap, counts = {}, {}
    n_dets = sum(len(v) for v in detections.values())
    for c, name in enumerate(vocab.names):
        gts = {}
        for rec in dataset.records:
            idx = [j for j, l in enumerate(rec.labels) if l == c]
            if idx:
                gts[rec.image_id] = rec.boxes[idx]
        n_pos = sum(len(b) for b in gts.values())
        counts[name] = n_pos
        if n_pos == 0:
            continue
        dets = [
            (iid, d.box, d.score)
            for iid, dlist in sorted(detections.items())
            for d in dlist
            if d.class_index == c
        ]
        scores, flags, _ = _greedy_class_flags(dets, gts, iou_threshold)
        per_class_ap[name] = ap_101(scores, flags, n_pos)
    return EvalReport(
        protocol=protocol,
        per_class_ap=per_class_ap,
        novel_classes=vocab.novel_names(),
        gt_counts=counts,
        prediction_count=n_dets,
    )


def eval_localization(
    dataset: DetectionDataset,
    boxes_per_image: dict[int, Tensor],
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Localization-only protocol: labels and scores come from the gts.

    Each predicted box takes the label of its highest-IoU ground truth
    and that IoU as its score; predicted classes and confidences never
    enter. Class-agnostic NMS removes duplicates.
    """
    detections: dict[int, list[Detection]] = {}
    for rec in dataset.records:
        boxes = boxes_per_image.get(rec.image_id)
        dets: list[Detection] = []
        if boxes is not None and len(rec.labels):
            gt_c = box_to_corners(rec.boxes)
            ious = pairwise_iou(box_to_corners(boxes).to(gt_c.dtype), gt_c)
            best = ious.numpy().argmax(axis=1)
            scores = ious.numpy().max(axis=1)
            # deterministic order from boxes alone keeps the protocol
            # independent of any predicted scores
            order = sorted(
                range(len(boxes)),
                key=lambda i: (-scores[i], *boxes[i].tolist()),
            )
            ob = torch.stack([boxes[i] for i in order])
            ol = torch.tensor([rec.labels[int(best[i])] for i in order])
            os_ = torch.tensor([scores[i] for i in order], dtype=torch.float64)
            keep = nms(ob, ol, os_, iou_threshold, class_agnostic=True)
            dets = [
                Detection(box=ob[i], class_index=int(ol[i]), score=float(os_[i]))
                for i in keep.tolist()
            ]
        detections[rec.image_id] = dets
    return eval_generalized(
        dataset, detections, iou_threshold, protocol="localization-only"
    )


# ---------------------------------------------------------------------------
# pseudo-labels and detection dumps


def export_pseudo_labels(
    dataset: DetectionDataset,
    bundle: DetectorBundle,
    target_classes: list[int],
    cfg: InferenceConfig | None = None,
    score_threshold: float = 0.3,
) -> dict:
    """COCO-format annotations from detections of the target classes."""
    cfg = cfg or InferenceConfig()
    detections = run_detector(bundle, dataset, target_classes, cfg)
    images, annotations = [], []
    ann_id = 1
    for rec in dataset.records:
        images.append(
            {
                "id": rec.image_id,
                "width": rec.width,
                "height": rec.height,
                "file_name": rec.file_name or f"img_{rec.image_id:06d}.png",
            }
        )
        for det in detections[rec.image_id]:
            if det.score < score_threshold:
                continue
            cx, cy, w, h = det.box.tolist()
            bbox = [
                (cx - w / 2) * rec.width,
                (cy - h / 2) * rec.height,
                w * rec.width,
                h * rec.height,
            ]
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": rec.image_id,
                    "category_id": det.class_index + 1,
                    "bbox": bbox,
                    "area": bbox[2] * bbox[3],
                    "iscrowd": 0,
                    "pseudo": True,
                    "score": det.score,
                }
            )
            ann_id += 1
    return {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(dataset.vocab.names)],
    }


def detections_to_results(
    detections: dict[int, list[Detection]], dataset: DetectionDataset
) -> list[dict]:
    """COCO results-format list: image_id, category_id, bbox, score."""
    size = {rec.image_id: (rec.width, rec.height) for rec in dataset.records}
    rows = []
    for iid in sorted(detections):
        W, H = size[iid]
        for det in detections[iid]:
            cx, cy, w, h = det.box.tolist()
            rows.append(
                {
                    "image_id": iid,
                    "category_id": det.class_index + 1,
                    "bbox": [(cx - w / 2) * W, (cy - h / 2) * H, w * W, h * H],
                    "score": det.score,
                }
            )
    return rows


def results_to_detections(
    rows: list[dict], dataset: DetectionDataset
) -> dict[int, list[Detection]]:
    size = {rec.image_id: (rec.width, rec.height) for rec in dataset.records}
    out: dict[int, list[Detection]] = {rec.image_id: [] for rec in dataset.records}
    for row in rows:
        iid = row["image_id"]
        if iid not in size:
            raise ValueError(f"detection references unknown image id {iid}")
        W, H = size[iid]
        x, y, w, h = row["bbox"]
        box = torch.tensor(
            [(x + w / 2) / W, (y + h / 2) / H, w / W, h / H], dtype=torch.float64
        )
        out[iid].append(
            Detection(box=box, class_index=row["category_id"] - 1, score=row["score"])
        )
    return out


def save_detections_json(path: str | Path, rows: list[dict]) -> None:
    Path(path).write_text(json.dumps(rows, indent=1))


def load_detections_json(path: str | Path) -> list[dict]:
    return json.loads(Path(path).read_text())
