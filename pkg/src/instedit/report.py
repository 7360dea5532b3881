"""Report rendering: matplotlib figures written to files next to CSV output."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.patches as patches
import matplotlib.pyplot as plt
import numpy as np

from .geometry import Shift
from .scene import DetectedObject


def write_csv(path: Path, rows: list[dict]) -> Path:
    """Delimited output; one header row from the union of keys."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return path


def _show(ax, image: np.ndarray, title: str) -> None:
    ax.imshow(np.clip((image.transpose(1, 2, 0) + 1.0) / 2.0, 0, 1))
    ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])


def _draw_box(ax, box, size: int, color: str, label: str = "") -> None:
    rect = patches.Rectangle(
        (box.x1 * size, box.y1 * size),
        box.width * size,
        box.height * size,
        linewidth=1.2,
        edgecolor=color,
        facecolor="none",
    )
    ax.add_patch(rect)
    if label:
        ax.text(
            box.x1 * size,
            max(0.0, box.y1 * size - 1.5),
            label,
            fontsize=7,
            color=color,
        )


def save_detection_figure(
    image: np.ndarray, detections: list[DetectedObject], path: Path
) -> Path:
    size = image.shape[-1]
    fig, ax = plt.subplots(figsize=(4, 4))
    _show(ax, image, "detections")
    for d in detections:
        tag = f"{' '.join(d.descriptor.attributes)} {d.descriptor.label} #{d.instance_id}"
        _draw_box(ax, d.box, size, "white", tag.strip())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def save_edit_figure(
    original: np.ndarray,
    edited: np.ndarray,
    edited_box,
    shift: Shift,
    metrics: dict | None,
    path: Path,
) -> Path:
    size = original.shape[-1]
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    _show(axes[0], original, "original")
    _show(axes[1], edited, "edited")
    _draw_box(axes[0], edited_box, size, "white")
    cx, cy = edited_box.center
    axes[0].annotate(
        "",
        xy=((cx + shift.dx) * size, (cy + shift.dy) * size),
        xytext=(cx * size, cy * size),
        arrowprops=dict(arrowstyle="->", color="white", lw=1.5),
    )
    if metrics and metrics.get("displacement_achieved") is not None:
        fig.suptitle(
            f"displacement error {metrics['displacement_achieved']:.3f}, "
            f"preservation mse {metrics['preservation_mse']:.4f}",
            fontsize=9,
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def save_ablation_figure(
    original: np.ndarray,
    features_image: np.ndarray | None,
    attention_image: np.ndarray | None,
    comparison: dict,
    path: Path,
) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    _show(axes[0], original, "original")
    if features_image is not None:
        mse = comparison.get("mse_features")
        _show(axes[1], features_image, f"feature preserve (mse {mse:.4f})")
    if attention_image is not None:
        mse = comparison.get("mse_attention")
        _show(axes[2], attention_image, f"attention preserve (mse {mse:.4f})")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def save_loss_curve(losses: list[float], path: Path, window: int = 10) -> Path:
    from .training import smoothed

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(losses, alpha=0.3, label="loss")
    ax.plot(smoothed(losses, window), label=f"smoothed ({window})")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.legend(fontsize=8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path
