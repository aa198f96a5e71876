import numpy as np
import pytest
import torch

from ovdkit.geometry import (
    box_to_corners,
    corners_to_box,
    giou,
    iou,
    nms,
    pairwise_giou,
    pairwise_iou,
    roi_align,
    validate_boxes,
)


def B(*vals):
    return torch.tensor(vals, dtype=torch.float64)


def random_boxes(n, rng):
    cx = rng.uniform(0, 1, n)
    cy = rng.uniform(0, 1, n)
    w = rng.uniform(0.02, 1, n)
    h = rng.uniform(0.02, 1, n)
    return torch.tensor(np.stack([cx, cy, w, h], axis=1))


class TestConversions:
    def test_full_image_box(self):
        assert torch.equal(box_to_corners(B(0.5, 0.5, 1, 1)), B(0, 0, 1, 1))

    def test_centered_half_box(self):
        assert torch.allclose(box_to_corners(B(0.5, 0.5, 0.5, 0.5)), B(0.25, 0.25, 0.75, 0.75))

    def test_clamps_negative_corner(self):
        # (0.1, 0.1, 0.4, 0.4) -> raw corners (-0.1, -0.1, 0.3, 0.3), clamped at 0
        got = box_to_corners(B(0.1, 0.1, 0.4, 0.4))
        assert torch.allclose(got, B(0.0, 0.0, 0.3, 0.3))

    def test_roundtrip_when_inside(self):
        rng = np.random.default_rng(0)
        cx = rng.uniform(0.3, 0.7, 50)
        cy = rng.uniform(0.3, 0.7, 50)
        w = rng.uniform(0.05, 0.5, 50)
        h = rng.uniform(0.05, 0.5, 50)
        boxes = torch.tensor(np.stack([cx, cy, w, h], axis=1))
        assert torch.allclose(corners_to_box(box_to_corners(boxes)), boxes)

    def test_validate_rejects_bad(self):
        with pytest.raises(ValueError):
            validate_boxes(B(0.5, 0.5, 0.0, 0.1))
        with pytest.raises(ValueError):
            validate_boxes(B(1.5, 0.5, 0.1, 0.1))
        with pytest.raises(ValueError):
            validate_boxes(torch.tensor([0.5, 0.5, float("nan"), 0.1]))
        validate_boxes(B(0.5, 0.5, 1.0, 1.0))


class TestIoU:
    def test_identical(self):
        a = B(0.5, 0.5, 0.4, 0.2)
        assert iou(a, a).item() == pytest.approx(1.0, abs=1e-12)

    def test_disjoint(self):
        a = B(0.1, 0.1, 0.1, 0.1)
        b = B(0.8, 0.8, 0.1, 0.1)
        assert iou(a, b).item() == 0.0

    def test_one_seventh(self):
        # corners (0,0,.2,.2) vs (.1,.1,.3,.3): oracle = rasterization on a
        # fine grid counting covered cells, frozen to the exact value 1/7
        a = corners_to_box(B(0.0, 0.0, 0.2, 0.2))
        b = corners_to_box(B(0.1, 0.1, 0.3, 0.3))
        n = 3000
        ys, xs = np.mgrid[0:n, 0:n]
        cy, cx = (ys + 0.5) / n, (xs + 0.5) / n
        in_a = (cx < 0.2) & (cy < 0.2)
        in_b = (cx >= 0.1) & (cx < 0.3) & (cy >= 0.1) & (cy < 0.3)
        raster = (in_a & in_b).sum() / (in_a | in_b).sum()
        assert raster == pytest.approx(1 / 7, abs=1e-3)
        assert iou(a, b).item() == pytest.approx(1 / 7, abs=1e-9)

    def test_pairwise_matches_elementwise(self):
        rng = np.random.default_rng(1)
        a, b = random_boxes(8, rng), random_boxes(5, rng)
        mat = pairwise_iou(box_to_corners(a), box_to_corners(b))
        for i in range(8):
            for j in range(5):
                assert mat[i, j].item() == pytest.approx(iou(a[i], b[j]).item(), abs=1e-12)


class TestGIoU:
    def test_identical(self):
        a = B(0.3, 0.6, 0.2, 0.2)
        assert giou(a, a).item() == pytest.approx(1.0, abs=1e-12)

    def test_adjacent_zero(self):
        # hull of two adjacent 0.1x0.1 squares equals their union -> giou = iou = 0
        a = corners_to_box(B(0.0, 0.0, 0.1, 0.1))
        b = corners_to_box(B(0.1, 0.0, 0.2, 0.1))
        assert giou(a, b).item() == pytest.approx(0.0, abs=1e-12)

    def test_separated_minus_third(self):
        # hull 0.3x0.1 = 0.03, union 0.02, inter 0 -> 0 - 0.01/0.03 = -1/3
        a = corners_to_box(B(0.0, 0.0, 0.1, 0.1))
        b = corners_to_box(B(0.2, 0.0, 0.3, 0.1))
        assert giou(a, b).item() == pytest.approx(-1 / 3, abs=1e-12)

    def test_properties_random_pairs(self):
        rng = np.random.default_rng(2)
        a, b = random_boxes(500, rng), random_boxes(500, rng)
        i_ab, i_ba = iou(a, b), iou(b, a)
        g_ab, g_ba = giou(a, b), giou(b, a)
        assert torch.allclose(i_ab, i_ba)
        assert torch.allclose(g_ab, g_ba)
        assert (g_ab > -1).all()
        assert (g_ab <= i_ab + 1e-12).all()
        assert (i_ab <= 1).all()

    def test_containment_equality(self):
        rng = np.random.default_rng(3)
        outer = random_boxes(100, rng)
        oc = box_to_corners(outer)
        # shrink inside the outer box
        t = torch.tensor(rng.uniform(0.1, 0.9, (100, 2)))
        cx = oc[:, 0] + t[:, 0] * (oc[:, 2] - oc[:, 0])
        cy = oc[:, 1] + t[:, 1] * (oc[:, 3] - oc[:, 1])
        w = torch.minimum(cx - oc[:, 0], oc[:, 2] - cx) * 0.9
        h = torch.minimum(cy - oc[:, 1], oc[:, 3] - cy) * 0.9
        inner = torch.stack([cx, cy, 2 * w, 2 * h], dim=1)
        assert torch.allclose(giou(outer, inner), iou(outer, inner))

    def test_pairwise_matches_elementwise(self):
        rng = np.random.default_rng(4)
        a, b = random_boxes(6, rng), random_boxes(7, rng)
        mat = pairwise_giou(box_to_corners(a), box_to_corners(b))
        for i in range(6):
            for j in range(7):
                assert mat[i, j].item() == pytest.approx(giou(a[i], b[j]).item(), abs=1e-12)


class TestNMS:
    def test_single_survives(self):
        keep = nms(B(0.5, 0.5, 0.2, 0.2)[None], torch.tensor([0]), torch.tensor([0.7]), 0.5)
        assert keep.tolist() == [0]

    def test_dominance_same_class(self):
        boxes = torch.stack([B(0.5, 0.5, 0.2, 0.2), B(0.51, 0.5, 0.2, 0.2)])
        keep = nms(boxes, torch.tensor([0, 0]), torch.tensor([0.9, 0.8]), 0.5)
        assert keep.tolist() == [0]

    def test_different_classes_both_survive(self):
        # class-wise oracle: per-class greedy suppression keeps both
        boxes = torch.stack([B(0.5, 0.5, 0.2, 0.2), B(0.51, 0.5, 0.2, 0.2)])
        keep = nms(boxes, torch.tensor([0, 1]), torch.tensor([0.9, 0.8]), 0.5)
        assert keep.tolist() == [0, 1]
        keep_agnostic = nms(
            boxes, torch.tensor([0, 1]), torch.tensor([0.9, 0.8]), 0.5, class_agnostic=True
        )
        assert keep_agnostic.tolist() == [0]

    def test_output_sorted_by_score(self):
        rng = np.random.default_rng(5)
        boxes = random_boxes(40, rng)
        labels = torch.tensor(rng.integers(0, 3, 40))
        scores = torch.tensor(rng.uniform(0, 1, 40))
        keep = nms(boxes, labels, scores, 0.5)
        kept_scores = scores[keep]
        assert (kept_scores[:-1] >= kept_scores[1:]).all()

    def test_idempotent(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            n = rng.integers(1, 30)
            boxes = random_boxes(n, rng)
            labels = torch.tensor(rng.integers(0, 4, n))
            scores = torch.tensor(rng.uniform(0, 1, n))
            keep = nms(boxes, labels, scores, 0.5)
            keep2 = nms(boxes[keep], labels[keep], scores[keep], 0.5)
            assert keep2.tolist() == list(range(len(keep)))


class TestRoiAlign:
    def test_constant_map(self):
        fm = torch.full((3, 8, 8), 4.5, dtype=torch.float64)
        out = roi_align(fm, B(0.4, 0.6, 0.3, 0.5), 7)
        assert torch.allclose(out, torch.full((1, 3, 7, 7), 4.5, dtype=torch.float64))

    def test_2x2_full_box(self):
        # bilinear oracle: S=1 with 2x2 samples lands exactly on the four
        # cell centers of the 2x2 map -> mean(1, 2, 3, 4) = 2.5
        fm = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]], dtype=torch.float64)
        out = roi_align(fm, B(0.5, 0.5, 1, 1), 1)
        assert out.item() == pytest.approx(2.5, abs=1e-12)

    def test_point_box_at_cell_center(self):
        fm = torch.arange(16, dtype=torch.float64).reshape(1, 4, 4)
        # cell (row 2, col 1) center in normalized coords: ((1+.5)/4, (2+.5)/4)
        box = B(1.5 / 4, 2.5 / 4, 1e-9, 1e-9)
        out = roi_align(fm, box, 3)
        assert torch.allclose(out, torch.full((1, 1, 3, 3), 9.0, dtype=torch.float64))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        fm = torch.tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
        boxes = random_boxes(3, rng)
        proj = torch.tensor(rng.normal(size=(3, 2, 4, 4)))
        out = (roi_align(fm, boxes, 4) * proj).sum()
        out.backward()
        grad = fm.grad.clone()
        eps = 1e-6
        fd = torch.zeros_like(grad)
        with torch.no_grad():
            flat = fm.reshape(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + eps
                up = (roi_align(fm, boxes, 4) * proj).sum()
                flat[k] = orig - eps
                dn = (roi_align(fm, boxes, 4) * proj).sum()
                flat[k] = orig
                fd.reshape(-1)[k] = (up - dn) / (2 * eps)
        rel = (grad - fd).norm() / fd.norm()
        assert rel.item() <= 1e-4

    def test_output_shape(self):
        fm = torch.randn(5, 12, 10)
        out = roi_align(fm, torch.rand(6, 4) * 0.4 + 0.3, 7)
        assert out.shape == (6, 5, 7, 7)
