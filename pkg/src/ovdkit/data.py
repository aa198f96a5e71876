"""Synthetic base/novel benchmark, COCO-format I/O, and augmentation.

Classes are (color, shape) composites such as "red circle", so the text
side has compositional structure to generalize over: every color and
every shape of a novel class also occurs in some base class. Train
images render base objects with annotations, plus unannotated novel
objects and off-vocabulary distractors; val/test annotate base and
novel alike. The withheld novel boxes on the train split are kept in a
side channel that no training code reads; they exist only so exported
pseudo-labels can be scored.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .backbone import COLOR_TOKENS, SHAPE_TOKENS
from .geometry import pairwise_iou, box_to_corners

logger = logging.getLogger(__name__)

COLOR_RGB = {
    "red": (0.82, 0.13, 0.13),
    "green": (0.12, 0.65, 0.20),
    "blue": (0.15, 0.28, 0.82),
    "yellow": (0.85, 0.78, 0.12),
}
# hollow gray shapes outside the vocabulary; rendered, never annotated
DISTRACTOR_KINDS = ("ring", "frame")
DISTRACTOR_GRAY = (0.55, 0.55, 0.55)


@dataclass
class Vocabulary:
    names: list[str]
    novel: list[bool]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate class names")
        if len(self.novel) != len(self.names):
            raise ValueError("novel flags must match names")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def base_indices(self) -> list[int]:
        return [i for i, v in enumerate(self.novel) if not v]

    def novel_indices(self) -> list[int]:
        return [i for i, v in enumerate(self.novel) if v]

    def base_names(self) -> list[str]:
        return [self.names[i] for i in self.base_indices()]

    def novel_names(self) -> list[str]:
        return [self.names[i] for i in self.novel_indices()]

    def save(self, path: str | Path) -> None:
        lines = [
            name + (" #novel" if nov else "")
            for name, nov in zip(self.names, self.novel)
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        names, novel = [], []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if "#" in line:
                name, tag = line.split("#", 1)
                names.append(name.strip())
                novel.append(tag.strip() == "novel")
            else:
                names.append(line)
                novel.append(False)
        return cls(names=names, novel=novel)


@dataclass
class ShapeSpec:
    shape: str
    color: str
    cx: float
    cy: float
    w: float
    h: float
    shade: float = 1.0

    def box(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]


@dataclass
class Scene:
    width: int
    height: int
    background: float
    noise_seed: int
    noise_amp: float
    shapes: list[ShapeSpec] = field(default_factory=list)
    distractors: list[ShapeSpec] = field(default_factory=list)


@dataclass
class ImageRecord:
    image_id: int
    width: int
    height: int
    boxes: Tensor  # [n, 4] normalized cxcywh
    labels: list[int]  # vocabulary indices
    original_labels: list[int] | None = None  # provenance after relabeling
    scene: Scene | None = None
    file_name: str | None = None
    abs_bboxes: list[list[float]] | None = None  # raw COCO bbox, for exact re-export
    withheld_boxes: Tensor | None = None  # hidden novel gts on the train split
    withheld_labels: list[int] | None = None


class DetectionDataset:
    """A vocabulary plus per-image ground truths and render sources."""

    def __init__(self, vocab: Vocabulary, records: list[ImageRecord], cache_images: int = 512):
        self.vocab = vocab
        self.records = records
        self._cache: dict[int, Tensor] = {}
        self._cache_cap = cache_images

    def __len__(self) -> int:
        return len(self.records)

    def image(self, idx: int) -> Tensor:
        rec = self.records[idx]
        if rec.image_id in self._cache:
            return self._cache[rec.image_id]
        if rec.scene is None:
            raise ValueError(
                f"image {rec.image_id} has no render source (file-backed datasets "
                "carry annotations only)"
            )
        img = render_scene(rec.scene)
        if len(self._cache) >= self._cache_cap:
            self._cache.pop(next(iter(self._cache)))
        self._cache[rec.image_id] = img
        return img

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(",".join(self.vocab.names).encode())
        h.update(bytes(self.vocab.novel))
        for rec in self.records:
            h.update(str(rec.image_id).encode())
            h.update(np.asarray(rec.boxes, dtype=np.float64).tobytes())
            h.update(np.asarray(rec.labels, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


@dataclass
class SyntheticConfig:
    colors: tuple[str, ...] = COLOR_TOKENS
    shapes: tuple[str, ...] = SHAPE_TOKENS
    # one novel class per color and per shape (the "diagonal"), so novel
    # concepts recombine parts the base classes cover
    novel_classes: tuple[str, ...] = (
        "red triangle",
        "green circle",
        "blue cross",
        "yellow square",
    )
    image_size: int = 128
    train_images: int = 2000
    val_images: int = 150
    test_images: int = 150
    base_objects: tuple[int, int] = (1, 3)  # per train image
    novel_objects: tuple[int, int] = (0, 2)  # per train image, unannotated
    eval_objects: tuple[int, int] = (2, 4)  # per val/test image, all classes
    distractors: tuple[int, int] = (0, 2)
    size_range: tuple[float, float] = (0.16, 0.42)  # fraction of image side
    max_overlap: float = 0.3
    noise_amp: float = 0.06
    placement_retries: int = 20
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def class_names(self) -> list[str]:
        return [f"{c} {s}" for c in self.colors for s in self.shapes]

    def vocabulary(self) -> Vocabulary:
        names = self.class_names()
        missing = set(self.novel_classes) - set(names)
        if missing:
            raise ValueError(f"novel classes not in the color x shape product: {missing}")
        novel = [n in self.novel_classes for n in names]
        if sum(novel) < 1 or len(names) - sum(novel) < 2:
            raise ValueError("need at least 2 base and 1 novel class")
        return Vocabulary(names=names, novel=novel)


@dataclass
class SyntheticBenchmark:
    train: DetectionDataset
    val: DetectionDataset
    test: DetectionDataset
    config: SyntheticConfig

    def splits(self) -> dict[str, DetectionDataset]:
        return {"train": self.train, "val": self.val, "test": self.test}


# ---------------------------------------------------------------------------
# rendering


def _inside_mask(spec: ShapeSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Boolean inside test on normalized coordinates, vectorized."""
    dx = xs - spec.cx
    dy = ys - spec.cy
    hw, hh = spec.w / 2, spec.h / 2
    if spec.shape == "circle":
        return (dx / hw) ** 2 + (dy / hh) ** 2 <= 1.0
    if spec.shape == "square":
        return (np.abs(dx) <= hw) & (np.abs(dy) <= hh)
    if spec.shape == "triangle":
        # upright isoceles: apex at top edge of the box
        inside_y = (dy >= -hh) & (dy <= hh)
        half_width_at_y = hw * (dy + hh) / (2 * hh)
        return inside_y & (np.abs(dx) <= half_width_at_y)
    if spec.shape == "cross":
        t = 0.34
        bar_h = (np.abs(dx) <= hw) & (np.abs(dy) <= hh * t)
        bar_v = (np.abs(dx) <= hw * t) & (np.abs(dy) <= hh)
        return bar_h | bar_v
    if spec.shape == "ring":
        r2 = (dx / hw) ** 2 + (dy / hh) ** 2
        return (r2 <= 1.0) & (r2 >= 0.55**2)
    if spec.shape == "frame":
        inner = 0.62
        outer = (np.abs(dx) <= hw) & (np.abs(dy) <= hh)
        hole = (np.abs(dx) <= hw * inner) & (np.abs(dy) <= hh * inner)
        return outer & ~hole
    raise ValueError(f"unknown shape {spec.shape!r}")


def _alpha(spec: ShapeSpec, W: int, H: int, ss: int = 3) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] via ss x ss supersampling."""
    n = ss
    off = (np.arange(n) + 0.5) / n
    xs = (np.arange(W)[:, None] + off[None, :]).reshape(-1) / W
    ys = (np.arange(H)[:, None] + off[None, :]).reshape(-1) / H
    gx, gy = np.meshgrid(xs, ys)
    inside = _inside_mask(spec, gx, gy)
    inside = inside.reshape(H, n, W, n).mean(axis=(1, 3))
    return inside.astype(np.float32)


def render_scene(scene: Scene) -> Tensor:
    """Render a scene to a [3, H, W] float tensor in [0, 1]."""
    H, W = scene.height, scene.width
    rng = np.random.default_rng(scene.noise_seed)
    img = np.full((H, W, 3), scene.background, dtype=np.float32)
    # mild diagonal gradient plus pixel noise for background texture
    gy, gx = np.mgrid[0:H, 0:W]
    grad = ((gx / W + gy / H) / 2 - 0.5) * 0.08
    img += grad[:, :, None].astype(np.float32)
    img += rng.normal(0, scene.noise_amp, (H, W, 3)).astype(np.float32)
    for spec in list(scene.shapes) + list(scene.distractors):
        if spec.color in COLOR_RGB:
            rgb = np.array(COLOR_RGB[spec.color], dtype=np.float32)
        else:
            rgb = np.array(DISTRACTOR_GRAY, dtype=np.float32)
        rgb = np.clip(rgb * spec.shade, 0, 1)
        a = _alpha(spec, W, H)[:, :, None]
        img = img * (1 - a) + rgb[None, None, :] * a
    img = np.clip(img, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))


def _shape_extent(shape: str, size: float) -> tuple[float, float]:
    if shape == "triangle":
        return size, 0.9 * size
    return size, size


def _place_shapes(
    rng: np.random.Generator,
    class_names: Sequence[str],
    count: int,
    cfg: SyntheticConfig,
    placed: list[list[float]],
    weights: np.ndarray | None = None,
) -> list[ShapeSpec]:
    specs = []
    for _ in range(count):
        name = class_names[rng.choice(len(class_names), p=weights)]
        color, shape = name.split()
        for _ in range(cfg.placement_retries):
            size = rng.uniform(*cfg.size_range)
            w, h = _shape_extent(shape, size)
            cx = rng.uniform(w / 2 + 0.02, 1 - w / 2 - 0.02)
            cy = rng.uniform(h / 2 + 0.02, 1 - h / 2 - 0.02)
            cand = [cx, cy, w, h]
            if placed:
                ious = pairwise_iou(
                    box_to_corners(torch.tensor([cand])),
                    box_to_corners(torch.tensor(placed)),
                )
                if ious.max().item() > cfg.max_overlap:
                    continue
            placed.append(cand)
            specs.append(
                ShapeSpec(shape=shape, color=color, cx=cx, cy=cy, w=w, h=h,
                          shade=float(rng.uniform(0.85, 1.15)))
            )
            break
        else:
            logger.info("skipped object after %d placement retries", cfg.placement_retries)
    return specs


def _place_distractors(
    rng: np.random.Generator, count: int, cfg: SyntheticConfig, placed: list[list[float]]
) -> list[ShapeSpec]:
    specs = []
    for _ in range(count):
        kind = DISTRACTOR_KINDS[rng.choice(len(DISTRACTOR_KINDS))]
        for _ in range(cfg.placement_retries):
            size = rng.uniform(cfg.size_range[0], 0.8 * cfg.size_range[1])
            cx = rng.uniform(size / 2 + 0.02, 1 - size / 2 - 0.02)
            cy = rng.uniform(size / 2 + 0.02, 1 - size / 2 - 0.02)
            cand = [cx, cy, size, size]
            if placed:
                ious = pairwise_iou(
                    box_to_corners(torch.tensor([cand])),
                    box_to_corners(torch.tensor(placed)),
                )
                if ious.max().item() > cfg.max_overlap:
                    continue
            placed.append(cand)
            specs.append(
                ShapeSpec(kind, "gray", cx, cy, size, size, float(rng.uniform(0.8, 1.2)))
            )
            break
    return specs


def _record_from_scene(
    image_id: int, scene: Scene, vocab: Vocabulary, annotate_novel: bool
) -> ImageRecord:
    boxes, labels, hid_boxes, hid_labels = [], [], [], []
    for spec in scene.shapes:
        name = f"{spec.color} {spec.shape}"
        idx = vocab.index(name)
        if vocab.novel[idx] and not annotate_novel:
            hid_boxes.append(spec.box())
            hid_labels.append(idx)
        else:
            boxes.append(spec.box())
            labels.append(idx)
    return ImageRecord(
        image_id=image_id,
        width=scene.width,
        height=scene.height,
        boxes=torch.tensor(boxes, dtype=torch.float64).reshape(-1, 4),
        labels=labels,
        scene=scene,
        withheld_boxes=(
            torch.tensor(hid_boxes, dtype=torch.float64).reshape(-1, 4) if hid_boxes else None
        ),
        withheld_labels=hid_labels or None,
    )


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticBenchmark:
    """Deterministically generate the three-way synthetic benchmark."""
    if not (64 <= cfg.image_size <= 512):
        raise ValueError("image_size outside backbone bounds [64, 512]")
    vocab = cfg.vocabulary()
    base = vocab.base_names()
    names = vocab.names
    datasets = {}
    next_id = 0
    for split, n_images in (
        ("train", cfg.train_images),
        ("val", cfg.val_images),
        ("test", cfg.test_images),
    ):
        records = []
        for i in range(n_images):
            rng = np.random.default_rng([cfg.seed, {"train": 0, "val": 1, "test": 2}[split], i])
            scene = Scene(
                width=cfg.image_size,
                height=cfg.image_size,
                background=float(rng.uniform(0.3, 0.7)),
                noise_seed=int(rng.integers(2**31)),
                noise_amp=cfg.noise_amp,
            )
            placed: list[list[float]] = []
            if split == "train":
                n_base = int(rng.integers(cfg.base_objects[0], cfg.base_objects[1] + 1))
                n_novel = int(rng.integers(cfg.novel_objects[0], cfg.novel_objects[1] + 1))
                scene.shapes = _place_shapes(rng, base, n_base, cfg, placed)
                scene.shapes += _place_shapes(rng, vocab.novel_names(), n_novel, cfg, placed)
            else:
                n_obj = int(rng.integers(cfg.eval_objects[0], cfg.eval_objects[1] + 1))
                scene.shapes = _place_shapes(rng, names, n_obj, cfg, placed)
            n_dis = int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))
            scene.distractors = _place_distractors(rng, n_dis, cfg, placed)
            records.append(
                _record_from_scene(next_id, scene, vocab, annotate_novel=split != "train")
            )
            next_id += 1
        datasets[split] = DetectionDataset(vocab, records)
    return SyntheticBenchmark(config=cfg, **datasets)


def make_pretrain_corpus(
    class_names: Sequence[str],
    crops_per_class: int = 140,
    crop_size: int = 56,
    noise_amp: float = 0.04,
    seed: int = 0,
) -> list[tuple[Tensor, str]]:
    """Single-object crops with cleanish backgrounds for contrastive pretraining."""
    corpus = []
    for ci, name in enumerate(class_names):
        color, shape = name.split()
        for k in range(crops_per_class):
            rng = np.random.default_rng([seed, 7, ci, k])
            size = rng.uniform(0.4, 0.9)
            w, h = _shape_extent(shape, size)
            cx = 0.5 + rng.uniform(-0.12, 0.12)
            cy = 0.5 + rng.uniform(-0.12, 0.12)
            scene = Scene(
                width=crop_size,
                height=crop_size,
                background=float(rng.uniform(0.3, 0.7)),
                noise_seed=int(rng.integers(2**31)),
                noise_amp=noise_amp,
                shapes=[ShapeSpec(shape, color, cx, cy, w, h, float(rng.uniform(0.85, 1.15)))],
            )
            corpus.append((render_scene(scene), name))
    return corpus


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    resize_range: tuple[int, int] = (96, 160)
    max_long_side: int = 266
    crop_prob: float = 0.3
    crop_scale: tuple[float, float] = (0.6, 1.0)


def augment(
    image: Tensor,
    boxes: Tensor,
    labels: list[int],
    rng: np.random.Generator,
    cfg: AugmentConfig,
) -> tuple[Tensor, Tensor, list[int]]:
    """Random flip, short-side resize, and crop; boxes follow the image."""
    if rng.uniform() < cfg.flip_prob:
        image = image.flip(-1)
        if len(boxes):
            boxes = boxes.clone()
            boxes[:, 0] = 1 - boxes[:, 0]
    short = int(rng.integers(cfg.resize_range[0], cfg.resize_range[1] + 1))
    H, W = image.shape[-2:]
    scale = short / min(H, W)
    if scale * max(H, W) > cfg.max_long_side:
        scale = cfg.max_long_side / max(H, W)
    nh, nw = max(8, round(H * scale)), max(8, round(W * scale))
    image = torch.nn.functional.interpolate(
        image[None], size=(nh, nw), mode="bilinear", align_corners=False
    )[0]
    # normalized boxes are invariant to aspect-preserving resize
    if rng.uniform() < cfg.crop_prob:
        fw = rng.uniform(*cfg.crop_scale)
        fh = rng.uniform(*cfg.crop_scale)
        cw, ch = max(8, int(nw * fw)), max(8, int(nh * fh))
        x0 = int(rng.integers(0, nw - cw + 1))
        y0 = int(rng.integers(0, nh - ch + 1))
        image = image[:, y0 : y0 + ch, x0 : x0 + cw]
        if len(boxes):
            corners = box_to_corners(boxes)
            px = torch.tensor([x0 / nw, y0 / nh, x0 / nw, y0 / nh], dtype=boxes.dtype)
            span = torch.tensor([cw / nw, ch / nh, cw / nw, ch / nh], dtype=boxes.dtype)
            local = ((corners - px) / span).clamp(0, 1)
            w = local[:, 2] - local[:, 0]
            h = local[:, 3] - local[:, 1]
            keep = (w > 1e-3) & (h > 1e-3)
            boxes = torch.stack(
                [
                    (local[:, 0] + local[:, 2]) / 2,
                    (local[:, 1] + local[:, 3]) / 2,
                    w,
                    h,
                ],
                dim=1,
            )[keep]
            labels = [l for l, k in zip(labels, keep.tolist()) if k]
    return image, boxes, labels


# ---------------------------------------------------------------------------
# COCO-format I/O


class CocoFormatError(ValueError):
    pass


def save_coco_json(dataset: DetectionDataset, path: str | Path) -> None:
    """Write annotations in COCO format (bbox = absolute [x, y, w, h])."""
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
        for j, label in enumerate(rec.labels):
            if rec.abs_bboxes is not None:
                bbox = rec.abs_bboxes[j]
            else:
                cx, cy, w, h = rec.boxes[j].tolist()
                bbox = [
                    (cx - w / 2) * rec.width,
                    (cy - h / 2) * rec.height,
                    w * rec.width,
                    h * rec.height,
                ]
            ann = {
                "id": ann_id,
                "image_id": rec.image_id,
                "category_id": label + 1,
                "bbox": bbox,
                "area": bbox[2] * bbox[3],
                "iscrowd": 0,
            }
            if rec.original_labels is not None:
                ann["original_category_id"] = rec.original_labels[j] + 1
            annotations.append(ann)
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [
            {"id": i + 1, "name": n} for i, n in enumerate(dataset.vocab.names)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_coco_json(path: str | Path, vocab_path: str | Path | None = None) -> DetectionDataset:
    """Load COCO-format annotations; boxes become normalized cxcywh.

    The base/novel split comes from a sidecar vocabulary file (one class
    per line, '#novel' suffix); without one, every category is base.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CocoFormatError(f"{path}: malformed JSON ({e})") from e
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise CocoFormatError(f"{path}: missing top-level key {key!r}")
    cat_names = {c["id"]: c["name"] for c in doc["categories"]}
    if vocab_path is not None:
        vocab = Vocabulary.load(vocab_path)
        missing = set(cat_names.values()) - set(vocab.names)
        if missing:
            raise CocoFormatError(f"{path}: categories missing from vocabulary: {missing}")
    else:
        vocab = Vocabulary(names=list(cat_names.values()), novel=[False] * len(cat_names))
    by_image: dict[int, list[dict]] = {}
    for ann in doc["annotations"]:
        if ann["category_id"] not in cat_names:
            raise CocoFormatError(
                f"{path}: annotation {ann.get('id')} has unknown category id "
                f"{ann['category_id']}"
            )
        by_image.setdefault(ann["image_id"], []).append(ann)
    records = []
    for img in doc["images"]:
        W, H = img["width"], img["height"]
        boxes, labels, originals, raw = [], [], [], []
        has_original = False
        for ann in by_image.get(img["id"], []):
            x, y, w, h = ann["bbox"]
            if w <= 0 or h <= 0:
                raise CocoFormatError(
                    f"{path}: degenerate box in annotation {ann.get('id')} "
                    f"(image {img['id']}): bbox {ann['bbox']}"
                )
            if x < -1e-6 or y < -1e-6 or x + w > W + 1e-6 or y + h > H + 1e-6:
                raise CocoFormatError(
                    f"{path}: box outside image in annotation {ann.get('id')} "
                    f"(image {img['id']}): bbox {ann['bbox']} vs size {(W, H)}"
                )
            boxes.append([(x + w / 2) / W, (y + h / 2) / H, w / W, h / H])
            labels.append(vocab.index(cat_names[ann["category_id"]]))
            raw.append([x, y, w, h])
            if "original_category_id" in ann:
                has_original = True
                originals.append(vocab.index(cat_names[ann["original_category_id"]]))
            else:
                originals.append(labels[-1])
        records.append(
            ImageRecord(
                image_id=img["id"],
                width=W,
                height=H,
                boxes=torch.tensor(boxes, dtype=torch.float64).reshape(-1, 4),
                labels=labels,
                original_labels=originals if has_original else None,
                file_name=img.get("file_name"),
                abs_bboxes=raw,
            )
        )
    return DetectionDataset(vocab, records)


# ---------------------------------------------------------------------------
# benchmark persistence (annotations as COCO files plus a scene sidecar)


def save_benchmark(bench: SyntheticBenchmark, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench.train.vocab.save(out / "vocab.txt")
    scenes: dict[str, list[dict]] = {}
    for split, ds in bench.splits().items():
        save_coco_json(ds, out / f"{split}.json")
        entries = []
        for rec in ds.records:
            entry = {"image_id": rec.image_id, "scene": asdict(rec.scene)}
            if rec.withheld_labels is not None:
                entry["withheld"] = {
                    "boxes": rec.withheld_boxes.tolist(),
                    "labels": rec.withheld_labels,
                }
            entries.append(entry)
        scenes[split] = entries
    (out / "scenes.json").write_text(json.dumps(scenes))
    (out / "benchmark.json").write_text(json.dumps(bench.config.to_dict(), indent=1))


def load_benchmark(in_dir: str | Path) -> SyntheticBenchmark:
    src = Path(in_dir)
    cfg_dict = json.loads((src / "benchmark.json").read_text())
    for k, v in cfg_dict.items():
        if isinstance(v, list):
            cfg_dict[k] = tuple(v)
    cfg = SyntheticConfig(**cfg_dict)
    scenes = json.loads((src / "scenes.json").read_text())
    splits = {}
    for split in ("train", "val", "test"):
        ds = load_coco_json(src / f"{split}.json", src / "vocab.txt")
        by_id = {e["image_id"]: e for e in scenes[split]}
        for rec in ds.records:
            entry = by_id[rec.image_id]
            sd = dict(entry["scene"])
            sd["shapes"] = [ShapeSpec(**s) for s in sd["shapes"]]
            sd["distractors"] = [ShapeSpec(**s) for s in sd["distractors"]]
            rec.scene = Scene(**sd)
            if "withheld" in entry:
                rec.withheld_boxes = torch.tensor(
                    entry["withheld"]["boxes"], dtype=torch.float64
                ).reshape(-1, 4)
                rec.withheld_labels = entry["withheld"]["labels"]
        splits[split] = ds
    return SyntheticBenchmark(config=cfg, **splits)
