"""Box arithmetic and region pooling.

Boxes are tensors of shape [..., 4] in normalized (cx, cy, w, h) form:
centers in [0, 1], extents in (0, 1], all relative to image size. Corner
form (x0, y0, x1, y1) is computed on demand and clamped to the unit
square. All functions are pure and differentiable where stated.
"""

from __future__ import annotations

import torch
from torch import Tensor


def validate_boxes(boxes: Tensor, what: str = "box") -> None:
    """Raise ValueError if any box violates the normalized cxcywh contract."""
    if boxes.numel() == 0:
        return
    b = boxes.reshape(-1, 4)
    if not torch.isfinite(b).all():
        raise ValueError(f"{what}: non-finite coordinates")
    cx, cy, w, h = b.unbind(-1)
    bad = (cx < 0) | (cx > 1) | (cy < 0) | (cy > 1) | (w <= 0) | (w > 1) | (h <= 0) | (h > 1)
    if bad.any():
        idx = bad.nonzero(as_tuple=True)[0][:5].tolist()
        raise ValueError(f"{what}: invalid normalized boxes at indices {idx}")


def box_to_corners(boxes: Tensor) -> Tensor:
    """Convert (cx, cy, w, h) to (x0, y0, x1, y1), clamped to [0, 1]."""
    cx, cy, w, h = boxes.unbind(-1)
    corners = torch.stack(
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1
    )
    return corners.clamp(0.0, 1.0)


def corners_to_box(corners: Tensor) -> Tensor:
    """Convert (x0, y0, x1, y1) to (cx, cy, w, h)."""
    x0, y0, x1, y1 = corners.unbind(-1)
    return torch.stack(
        [(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1
    )


def _corner_area(corners: Tensor) -> Tensor:
    return (corners[..., 2] - corners[..., 0]) * (corners[..., 3] - corners[..., 1])


def pairwise_iou(corners_a: Tensor, corners_b: Tensor) -> Tensor:
    """IoU matrix [N, M] between two sets of corner-form boxes."""
    area_a = _corner_area(corners_a)
    area_b = _corner_area(corners_b)
    lt = torch.max(corners_a[:, None, :2], corners_b[None, :, :2])
    rb = torch.min(corners_a[:, None, 2:], corners_b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def pairwise_giou(corners_a: Tensor, corners_b: Tensor) -> Tensor:
    """Generalized IoU matrix [N, M] between two sets of corner-form boxes."""
    area_a = _corner_area(corners_a)
    area_b = _corner_area(corners_b)
    lt = torch.max(corners_a[:, None, :2], corners_b[None, :, :2])
    rb = torch.min(corners_a[:, None, 2:], corners_b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    lt_hull = torch.min(corners_a[:, None, :2], corners_b[None, :, :2])
    rb_hull = torch.max(corners_a[:, None, 2:], corners_b[None, :, 2:])
    hull = (rb_hull - lt_hull).prod(dim=-1)
    return inter / union - (hull - union) / hull


def iou(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise IoU of cxcywh boxes with broadcasting; result in [0, 1]."""
    ca, cb = box_to_corners(a), box_to_corners(b)
    lt = torch.max(ca[..., :2], cb[..., :2])
    rb = torch.min(ca[..., 2:], cb[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = _corner_area(ca) + _corner_area(cb) - inter
    return inter / union


def giou(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise generalized IoU of cxcywh boxes; result in (-1, 1]."""
    ca, cb = box_to_corners(a), box_to_corners(b)
    lt = torch.max(ca[..., :2], cb[..., :2])
    rb = torch.min(ca[..., 2:], cb[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = _corner_area(ca) + _corner_area(cb) - inter
    lt_hull = torch.min(ca[..., :2], cb[..., :2])
    rb_hull = torch.max(ca[..., 2:], cb[..., 2:])
    hull = (rb_hull[..., 0] - lt_hull[..., 0]) * (rb_hull[..., 1] - lt_hull[..., 1])
    return inter / union - (hull - union) / hull


def nms(
    boxes: Tensor,
    labels: Tensor,
    scores: Tensor,
    iou_threshold: float,
    class_agnostic: bool = False,
) -> Tensor:
    """Greedy non-maximum suppression, class-wise by default.

    Returns indices of surviving detections sorted by descending score;
    ties break by input index. A detection is suppressed when its IoU
    with an already kept detection of the same class exceeds the
    threshold (any kept detection when class_agnostic).
    """
    if boxes.numel() == 0:
        return torch.empty(0, dtype=torch.long)
    corners = box_to_corners(boxes)
    order = torch.argsort(scores, descending=True, stable=True)
    keep: list[int] = []
    for i in order.tolist():
        suppressed = False
        for j in keep:
            if not class_agnostic and labels[i] != labels[j]:
                continue
            if pairwise_iou(corners[i : i + 1], corners[j : j + 1]).item() > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            keep.append(i)
    return torch.tensor(keep, dtype=torch.long)


def _bilinear_sample(fmap: Tensor, ys: Tensor, xs: Tensor) -> Tensor:
    """Sample fmap [C, H, W] at per-box row/col coordinates.

    ys: [N, Sy], xs: [N, Sx]; samples lie on the outer product grid.
    Coordinates are in cell units (cell j center at j) and are clamped
    to the map borders. Returns [N, C, Sy, Sx], differentiable in fmap.
    """
    C, H, W = fmap.shape
    N, Sy = ys.shape
    Sx = xs.shape[1]
    Y = ys.clamp(0, H - 1)
    X = xs.clamp(0, W - 1)
    # cell j center sits at coordinate j; grid_sample with
    # align_corners=False puts it at (2j + 1)/size - 1
    gx = (2 * X + 1) / W - 1
    gy = (2 * Y + 1) / H - 1
    grid = torch.stack(
        [
            gx[:, None, :].expand(N, Sy, Sx),
            gy[:, :, None].expand(N, Sy, Sx),
        ],
        dim=-1,
    ).reshape(1, N * Sy, Sx, 2)
    out = torch.nn.functional.grid_sample(
        fmap[None], grid, mode="bilinear", padding_mode="border", align_corners=False
    )
    return out.reshape(C, N, Sy, Sx).permute(1, 0, 2, 3)


def roi_align(
    fmap: Tensor, boxes: Tensor, output_size: int, samples_per_bin: int = 2
) -> Tensor:
    """Average-pool bilinear samples of fmap inside each box.

    fmap: [C, H, W]; boxes: [N, 4] normalized cxcywh over the full map
    extent. Each of the output_size x output_size bins averages
    samples_per_bin^2 bilinearly interpolated samples placed at regular
    fractions of the bin. Returns [N, C, S, S]; differentiable with
    respect to fmap. Degenerate boxes collapse onto single sample
    points and remain valid.
    """
    if boxes.ndim == 1:
        boxes = boxes[None]
    C, H, W = fmap.shape
    N = boxes.shape[0]
    S, m = output_size, samples_per_bin
    corners = box_to_corners(boxes).to(fmap.dtype)
    x0 = corners[:, 0] * W - 0.5
    x1 = corners[:, 2] * W - 0.5
    y0 = corners[:, 1] * H - 0.5
    y1 = corners[:, 3] * H - 0.5
    # sample k of bin j sits at fraction (j + (k + 0.5) / m) / S of the box
    steps = (torch.arange(S * m, dtype=fmap.dtype) + 0.5) / m / S
    px = x0[:, None] + steps[None, :] * (x1 - x0)[:, None]
    py = y0[:, None] + steps[None, :] * (y1 - y0)[:, None]
    vals = _bilinear_sample(fmap, py, px)
    return vals.reshape(N, C, S, m, S, m).mean(dim=(3, 5))
