"""Post-process reporting: CSV plus SVG charts rendered from the
metrics log, the bench table, and inference triptychs.

Everything renders headless (Agg) and lands next to the delimited
output so a run directory is self-describing.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .errors import ValidationError  # noqa: E402
from .metrics import BatchMetrics  # noqa: E402
from .nn.params import Tensor  # noqa: E402


def write_metrics_csv(records: list[BatchMetrics], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "loss", "acc", "iou"])
        for r in records:
            writer.writerow([r.step, r.epoch, repr(r.loss),
                             repr(r.pixel_accuracy), repr(r.iou)])


def build_metrics_figure(records: list[BatchMetrics]):
    """Loss on top, accuracy/IoU below, against training step.

    The x-axis spans exactly [1, max step].
    """
    if not records:
        raise ValidationError("no metrics records to chart")
    ordered = sorted(records, key=lambda r: r.step)
    steps = [r.step for r in ordered]
    right = max(steps)
    fig, (ax_loss, ax_rate) = plt.subplots(
        2, 1, sharex=True, figsize=(8, 6), constrained_layout=True)
    ax_loss.plot(steps, [r.loss for r in ordered], color="tab:red", label="loss")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(loc="upper right")
    ax_rate.plot(steps, [r.pixel_accuracy for r in ordered],
                 color="tab:blue", label="pixel accuracy")
    ax_rate.plot(steps, [r.iou for r in ordered],
                 color="tab:green", label="IoU")
    ax_rate.set_xlabel("step")
    ax_rate.set_ylabel("rate")
    ax_rate.set_ylim(0.0, 1.0)
    ax_rate.legend(loc="lower right")
    ax_rate.set_xlim(1, right if right > 1 else 1 + 1e-6)
    return fig


def render_metrics_report(records: list[BatchMetrics],
                          out_dir: str | Path,
                          stem: str = "metrics") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    svg_path = out / f"{stem}.svg"
    write_metrics_csv(records, csv_path)
    fig = build_metrics_figure(records)
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
    return csv_path, svg_path


BENCH_COLUMNS = ["features", "steps", "payload_bytes_up", "payload_bytes_down",
                 "bytes_per_step", "bytes_per_epoch", "steps_per_s"]


def render_bench_report(rows: list[dict], out_dir: str | Path,
                        stem: str = "bench") -> tuple[Path, Path]:
    if not rows:
        raise ValidationError("no bench rows to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in BENCH_COLUMNS])
    ordered = sorted(rows, key=lambda r: r["features"])
    fig, ax = plt.subplots(figsize=(7, 4.5), constrained_layout=True)
    ax.plot([r["features"] for r in ordered],
            [r["bytes_per_step"] for r in ordered],
            marker="o", color="tab:purple")
    ax.set_xlabel("boundary features")
    ax.set_ylabel("wire bytes per step")
    ax.grid(True, alpha=0.3)
    svg_path = out / f"{stem}.svg"
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
    return csv_path, svg_path


def _to_rgb8_panel(image: Tensor) -> np.ndarray:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    return arr.transpose(1, 2, 0)


def _mask_panel(mask: Tensor) -> np.ndarray:
    gray = (np.clip(mask[0], 0.0, 1.0) * 255.0).astype(np.uint8)
    return np.stack([gray, gray, gray], axis=-1)


def triptych(image: Tensor, truth: Tensor | None, pred: Tensor) -> Image.Image:
    """Side by side: input, ground truth when present, prediction."""
    panels = [_to_rgb8_panel(image)]
    if truth is not None:
        panels.append(_mask_panel(truth))
    panels.append(_mask_panel(pred))
    heights = {p.shape[0] for p in panels}
    if len(heights) != 1:
        raise ValidationError("triptych panels have mismatched heights")
    gap = np.full((panels[0].shape[0], 4, 3), 255, dtype=np.uint8)
    glued = panels[0]
    for panel in panels[1:]:
        glued = np.concatenate([glued, gap, panel], axis=1)
    return Image.fromarray(glued, mode="RGB")


def save_mask_png(mask: Tensor, path: str | Path) -> None:
    """Binary mask as an 8-bit grayscale PNG holding only 0 and 255."""
    arr = np.where(mask[0] > 0.5, 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
