"""Static report figures rendered from run manifests."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .data import DetectionDataset


def save_csv(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    if not rows:
        path.write_text("")
        return
    keys = list(rows[0])
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def plot_training_curves(manifest: dict, out_png: str | Path) -> None:
    epochs = manifest.get("epochs", [])
    if not epochs:
        return
    xs = [e["epoch"] for e in epochs]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, [e["loss"] for e in epochs], marker="o", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    evals = [(e["epoch"], e["novel_ap"]) for e in epochs if "novel_ap" in e]
    if evals:
        ax2 = ax.twinx()
        ax2.plot(*zip(*evals), marker="s", color="tab:green", label="novel AP50 (EMA)")
        ax2.set_ylabel("novel AP50")
        ax2.set_ylim(0, 1)
    ax.set_title("detector training")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_ablation(rows: list[dict], out_png: str | Path) -> None:
    """Bar chart of novel AP50 per ablation variant."""
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [r["variant"] for r in rows]
    vals = [r["novel_ap"] for r in rows]
    ax.bar(range(len(rows)), vals, color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("novel AP50")
    ax.set_ylim(0, max(vals + [0.01]) * 1.25)
    for i, v in enumerate(vals):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    ax.set_title("anchor pre-matching ablation")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_dropout_sweep(rows: list[dict], out_png: str | Path) -> None:
    if not rows:
        return
    rows = sorted(rows, key=lambda r: r["p"])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r["p"] for r in rows], [r["novel_ap"] for r in rows], marker="o")
    ax.set_xlabel("class dropout probability p")
    ax.set_ylabel("novel AP50")
    ax.set_title("class dropout sweep")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def draw_detections(
    dataset: DetectionDataset,
    index: int,
    detections,
    out_png: str | Path,
    score_floor: float = 0.05,
) -> None:
    """Render an image with detection boxes and labels."""
    img = dataset.image(index).permute(1, 2, 0).numpy()
    H, W = img.shape[:2]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(img)
    for det in detections:
        if det.score < score_floor:
            continue
        cx, cy, w, h = det.box.tolist()
        x0, y0 = (cx - w / 2) * W, (cy - h / 2) * H
        ax.add_patch(
            plt.Rectangle(
                (x0, y0), w * W, h * H, fill=False, edgecolor="white", linewidth=1.5
            )
        )
        ax.text(
            x0,
            max(y0 - 2, 0),
            f"{dataset.vocab.names[det.class_index]} {det.score:.2f}",
            color="white",
            fontsize=7,
            backgroundcolor="black",
        )
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def load_manifest(run_dir: str | Path) -> dict:
    return json.loads((Path(run_dir) / "manifest.json").read_text())
