"""Rendered outputs: benchmark-style tables (CSV + aligned text) and
qualitative matplotlib figures written as PNG files.

Figures render headlessly (Agg) and carry no varying metadata, so a fixed
run and seed reproduce identical bytes.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from . import bodymodel as bm
from .datagen import MultimodalSample
from .networks import IMAGE_SIZE, hard_silhouette, rasterize_silhouette, scale_camera
from .pyramid import COVER_ORDER, CoarseFineResult

_STRATA_LABELS = {"cover2": "Cover 2", "cover1": "Cover 1", "uncover": "Uncover"}


def _fmt(x) -> str:
    return "" if x is None else f"{x:.2f}"


def table_joint_errors(level_reports: dict[int, dict]) -> list[list[str]]:
    """Benchmark layout: one row per fusion level, MPJPE and reconstruction
    error split by cover condition (Cover 2, Cover 1, Uncover)."""
    header = ["method"]
    for metric in ("mpjpe_mm", "rec_err_mm"):
        tag = "MPJPE" if metric == "mpjpe_mm" else "Rec. Error"
        header += [f"{tag} {_STRATA_LABELS[c]}" for c in COVER_ORDER]
    rows = [header]
    for k in sorted(level_reports):
        strata = level_reports[k]["strata"]
        row = [f"Ours (k = {k})"]
        for metric in ("mpjpe_mm", "rec_err_mm"):
            row += [_fmt(strata[c][metric]) if c in strata else "absent" for c in COVER_ORDER]
        rows.append(row)
    return rows


def table_segmentation(report: dict, param_count: int) -> list[list[str]]:
    """Foreground/background segmentation layout: accuracy, F1, parameters."""
    overall = report["overall"]
    return [
        ["method", "Accuracy (%)", "F1", "Parameters (M)"],
        [
            "Ours",
            _fmt(100.0 * overall["seg_accuracy"]),
            f"{overall['seg_f1']:.3f}",
            f"{param_count / 1e6:.2f}",
        ],
    ]


def table_ablation(rows: dict[str, dict]) -> list[list[str]]:
    """Modality-contribution layout: reconstruction error per cover type for
    single modalities and fused variants (with / without the pyramid)."""
    out = [["inputs"] + [_STRATA_LABELS[c] for c in COVER_ORDER]]
    for label, report in rows.items():
        strata = report["strata"]
        out.append(
            [label] + [_fmt(strata[c]["rec_err_mm"]) if c in strata else "absent" for c in COVER_ORDER]
        )
    return out


def write_csv(rows: list[list[str]], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def read_csv(path: str | Path) -> list[list[str]]:
    with open(path, newline="") as f:
        return [row for row in csv.reader(f)]


def format_text_table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

_SAVEFIG = {"dpi": 110, "metadata": {"Software": None}}


def _imshow(ax, img, title: str, cmap="viridis"):
    if img.ndim == 3 and img.shape[0] in (1, 3):
        img = np.transpose(img, (1, 2, 0)).squeeze()
    ax.imshow(np.asarray(img), cmap=None if img.ndim == 3 else cmap, vmin=0, vmax=1)
    ax.set_title(title, fontsize=7)
    ax.axis("off")


def _joint_overlay(ax, img, pred_2d, gt_2d, title: str):
    _imshow(ax, img, title, cmap="gray")
    ax.scatter(gt_2d[:, 0], gt_2d[:, 1], s=6, c="lime", marker="o", linewidths=0)
    ax.scatter(pred_2d[:, 0], pred_2d[:, 1], s=6, c="red", marker="x", linewidths=0.8)


def fig_qualitative(
    sample: MultimodalSample,
    result: CoarseFineResult,
    pred_2d: np.ndarray,
    path: str | Path,
) -> None:
    """Input modalities, reconstructed depth/IR, silhouette, and predicted vs
    ground-truth joints for one sample."""
    fig, axes = plt.subplots(2, 4, figsize=(9, 5))
    _imshow(axes[0, 0], sample.depth[0], f"depth ({sample.cover_type})")
    _imshow(axes[0, 1], sample.ir[0], "IR")
    _imshow(axes[0, 2], sample.pm[0], "pressure")
    _imshow(axes[0, 3], sample.rgb, "RGB")
    _imshow(axes[1, 0], result.recon.depth_uncovered.detach().numpy()[0], "recon depth (uncov)")
    _imshow(axes[1, 1], result.recon.ir_uncovered.detach().numpy()[0], "recon IR (uncov)")
    _imshow(axes[1, 2], result.mask_full.detach().numpy(), "predicted silhouette", cmap="gray")
    _joint_overlay(axes[1, 3], sample.uncovered_depth[0], pred_2d, sample.joints14_2d,
                   "joints: pred x / gt o")
    fig.suptitle(sample.sample_id, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def fig_before_after(
    sample: MultimodalSample,
    template,
    result: CoarseFineResult,
    path: str | Path,
    mask_size: int = 112,
) -> None:
    """Estimated body silhouette before (coarse) and after (fine) the
    reconstruction cycle, with the reference mask at the bottom."""
    fig, axes = plt.subplots(3, 1, figsize=(3.2, 8))
    with torch.no_grad():
        for ax, pred, label in ((axes[0], result.coarse, "before reconstruction"),
                                (axes[1], result.fine, "after reconstruction")):
            cam = scale_camera(pred.cam, mask_size / IMAGE_SIZE)
            soft = rasterize_silhouette(pred.mesh.vertices, template.faces, cam, size=mask_size)
            _imshow(ax, hard_silhouette(soft).numpy(), label, cmap="gray")
    _imshow(axes[2], sample.mask_gt, "reference", cmap="gray")
    fig.suptitle(sample.sample_id, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def fig_loss_curve(training_log: list[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot([r["epoch"] for r in training_log], [r["loss"] for r in training_log], lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
