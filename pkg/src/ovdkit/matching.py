"""Per-class bipartite post-matching and the detection loss.

Ground truths are assigned one-to-one to predictions that carry the
same pre-matched label, class by class, by solving a linear assignment
on a focal + L1 + GIoU cost. Ground truths of classes with no
pre-matched prediction are ignored. The loss combines positive-target
focal on matched predictions, negative-target focal on everything
unmatched, and box losses on matched pairs, per decoder layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .geometry import box_to_corners, pairwise_giou

EPS = 1e-8


@dataclass
class LossWeights:
    focal: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass
class MatchingConfig:
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # cost-style focal (positive minus negative term) in the matching cost;
    # False uses the plain positive focal loss instead
    cost_form_focal: bool = True
    per_class: bool = True  # False: vanilla one-to-one matching over all pairs
    # optional label equivalence (similar-class relaxation): class -> group id
    label_groups: dict[int, int] | None = None

    def group_of(self, label: int) -> int:
        if self.label_groups is None:
            return label
        return self.label_groups.get(label, label)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (gt index, prediction index)
    ignored_gts: list[int]
    by_class: dict[int, list[tuple[int, int]]] = field(default_factory=dict)


def focal_loss(p: Tensor, target: Tensor, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise focal loss on probabilities; targets in {0, 1}."""
    p = p.clamp(EPS, 1 - EPS)
    p_t = torch.where(target > 0.5, p, 1 - p)
    alpha_t = torch.where(
        target > 0.5,
        torch.as_tensor(alpha, dtype=p.dtype),
        torch.as_tensor(1 - alpha, dtype=p.dtype),
    )
    return -alpha_t * (1 - p_t) ** gamma * torch.log(p_t)


def focal_cost(p: Tensor, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Cost-style focal for a positive target: positive minus negative term."""
    p = p.clamp(EPS, 1 - EPS)
    pos = alpha * (1 - p) ** gamma * (-torch.log(p))
    neg = (1 - alpha) * p**gamma * (-torch.log(1 - p))
    return pos - neg


def match_cost(
    gt_boxes: Tensor,
    pred_boxes: Tensor,
    pred_probs: Tensor,
    weights: LossWeights,
    cfg: MatchingConfig,
) -> Tensor:
    """Assignment cost matrix [G, P]: classification plus box terms."""
    if cfg.cost_form_focal:
        cls = focal_cost(pred_probs, cfg.focal_alpha, cfg.focal_gamma)
    else:
        cls = focal_loss(
            pred_probs, torch.ones_like(pred_probs), cfg.focal_alpha, cfg.focal_gamma
        )
    l1 = torch.cdist(gt_boxes, pred_boxes, p=1)
    g = pairwise_giou(box_to_corners(gt_boxes), box_to_corners(pred_boxes))
    return weights.focal * cls[None, :] + weights.l1 * l1 + weights.giou * (1 - g)


def per_class_assign(
    gt_labels: Tensor,
    gt_boxes: Tensor,
    pred_labels: Tensor,
    pred_boxes: Tensor,
    pred_probs: Tensor,
    weights: LossWeights | None = None,
    cfg: MatchingConfig | None = None,
) -> MatchResult:
    """Optimal one-to-one assignment, restricted to equal pre-matched labels.

    With cfg.per_class off, a single class-blind assignment is solved
    instead. With cfg.label_groups set, classes in the same group are
    interchangeable during matching.
    """
    weights = weights or LossWeights()
    cfg = cfg or MatchingConfig()
    G, P = len(gt_boxes), len(pred_boxes)
    if G == 0:
        return MatchResult(pairs=[], ignored_gts=[])
    with torch.no_grad():
        if not cfg.per_class:
            cost = match_cost(gt_boxes, pred_boxes, pred_probs, weights, cfg)
            rows, cols = linear_sum_assignment(cost.numpy())
            pairs = list(zip(rows.tolist(), cols.tolist()))
            matched = {g for g, _ in pairs}
            return MatchResult(
                pairs=pairs,
                ignored_gts=[g for g in range(G) if g not in matched],
                by_class={-1: pairs},
            )
        gt_groups: dict[int, list[int]] = {}
        for i, l in enumerate(gt_labels.tolist()):
            gt_groups.setdefault(cfg.group_of(l), []).append(i)
        pred_groups: dict[int, list[int]] = {}
        for j, l in enumerate(pred_labels.tolist()):
            pred_groups.setdefault(cfg.group_of(l), []).append(j)
        pairs, by_class = [], {}
        for key, gids in gt_groups.items():
            pids = pred_groups.get(key, [])
            if not pids:
                continue
            cost = match_cost(
                gt_boxes[gids], pred_boxes[pids], pred_probs[pids], weights, cfg
            )
            rows, cols = linear_sum_assignment(cost.numpy())
            cls_pairs = [(gids[r], pids[c]) for r, c in zip(rows.tolist(), cols.tolist())]
            by_class[key] = cls_pairs
            pairs.extend(cls_pairs)
    matched = {g for g, _ in pairs}
    return MatchResult(
        pairs=sorted(pairs),
        ignored_gts=[g for g in range(G) if g not in matched],
        by_class=by_class,
    )


@dataclass
class LossBreakdown:
    focal: list[Tensor]
    l1: list[Tensor]
    giou: list[Tensor]
    matched_counts: list[int]
    total: Tensor

    def scalars(self) -> dict:
        return {
            "focal": [float(x) for x in self.focal],
            "l1": [float(x) for x in self.l1],
            "giou": [float(x) for x in self.giou],
            "matched": self.matched_counts,
            "total": float(self.total),
        }


def total_loss(
    gt_boxes: Tensor,
    gt_labels: Tensor,
    layer_boxes: list[Tensor],
    layer_probs: list[Tensor],
    pred_labels: Tensor,
    weights: LossWeights | None = None,
    cfg: MatchingConfig | None = None,
) -> LossBreakdown:
    """Per-layer matched loss; post-matching is re-run on each layer's boxes.

    Matched pairs get positive-target focal plus L1 and GIoU losses;
    unmatched predictions get negative-target focal; ignored ground
    truths contribute nothing. Each layer normalizes by its matched
    count (floor one).
    """
    from .geometry import giou as giou_fn

    weights = weights or LossWeights()
    cfg = cfg or MatchingConfig()
    focal_terms, l1_terms, giou_terms, counts = [], [], [], []
    for boxes, probs in zip(layer_boxes, layer_probs):
        match = per_class_assign(
            gt_labels, gt_boxes, pred_labels, boxes.detach(), probs.detach(), weights, cfg
        )
        norm = max(1, len(match.pairs))
        target = torch.zeros_like(probs)
        if match.pairs:
            pidx = torch.tensor([p for _, p in match.pairs], dtype=torch.long)
            gidx = torch.tensor([g for g, _ in match.pairs], dtype=torch.long)
            target[pidx] = 1.0
            l1 = (gt_boxes[gidx] - boxes[pidx]).abs().sum() / norm
            gv = (1 - giou_fn(gt_boxes[gidx], boxes[pidx])).sum() / norm
        else:
            l1 = boxes.sum() * 0.0
            gv = boxes.sum() * 0.0
        fl = focal_loss(probs, target, cfg.focal_alpha, cfg.focal_gamma).sum() / norm
        for name, val in (("focal", fl), ("l1", l1), ("giou", gv)):
            if not torch.isfinite(val):
                raise RuntimeError(
                    f"non-finite {name} loss (matched {len(match.pairs)}, "
                    f"gts {len(gt_boxes)}, preds {len(boxes)})"
                )
        focal_terms.append(fl)
        l1_terms.append(l1)
        giou_terms.append(gv)
        counts.append(len(match.pairs))
    total = sum(
        weights.focal * f + weights.l1 * l + weights.giou * g
        for f, l, g in zip(focal_terms, l1_terms, giou_terms)
    )
    return LossBreakdown(
        focal=focal_terms, l1=l1_terms, giou=giou_terms, matched_counts=counts, total=total
    )


