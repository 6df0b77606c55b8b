"""Figure rendering for evaluation reports.

Every report-writing CLI path saves a figure next to its delimited text
output.  All figures use the Agg backend and land atomically via a
temp-file rename, matching the text outputs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import geometry  # noqa: E402
from .data import atomic_write  # noqa: E402
from .metrics import NvsReport, align_trajectories, _camera_centers  # noqa: E402


def _save(fig, path: str | Path):
    atomic_write(path, lambda p: fig.savefig(p, format="png", dpi=110,
                                             bbox_inches="tight"))
    plt.close(fig)


def plot_nvs_report(report: NvsReport, path: str | Path):
    """Per-frame PSNR bars with the mean line, SSIM on a twin axis."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(len(report.frame_ids))
    ax.bar(x, report.psnr_values, color="#4878cf", label="PSNR")
    ax.axhline(report.mean_psnr, color="#4878cf", linestyle="--", linewidth=1,
               label=f"mean {report.mean_psnr:.2f} dB")
    ax.set_xticks(x, [str(i) for i in report.frame_ids])
    ax.set_xlabel("test frame")
    ax.set_ylabel("PSNR (dB)")
    ax2 = ax.twinx()
    ax2.plot(x, report.ssim_values, "o-", color="#d65f5f", label="SSIM")
    ax2.set_ylabel("SSIM")
    ax2.set_ylim(0.0, 1.0)
    h1, l1 = ax.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax.legend(h1 + h2, l1 + l2, loc="lower right", fontsize=8)
    ax.set_title("novel-view synthesis quality")
    _save(fig, path)


def plot_trajectories(est, gt, path: str | Path):
    """Top-down (x, z) camera centers: aligned estimate vs ground truth."""
    aligned, _ = align_trajectories(est, gt)
    gt_poses = gt if isinstance(gt, list) else gt.integer_poses()
    c_est = _camera_centers(aligned)
    c_gt = _camera_centers(gt_poses)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(c_gt[:, 0], c_gt[:, 2], "o-", color="#6acc65", label="ground truth",
            markersize=3)
    ax.plot(c_est[:, 0], c_est[:, 2], "x--", color="#4878cf", label="estimate",
            markersize=4)
    ax.set_xlabel("x (world units)")
    ax.set_ylabel("z (world units)")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize=8)
    ax.set_title("camera trajectory (top-down, similarity-aligned)")
    _save(fig, path)


def plot_estimated_trajectory(est, path: str | Path):
    """Top-down camera path when no ground truth is available."""
    poses = est if isinstance(est, list) else est.integer_poses()
    c = _camera_centers(poses)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(c[:, 0], c[:, 2], "x--", color="#4878cf", markersize=4)
    ax.set_xlabel("x (world units)")
    ax.set_ylabel("z (world units)")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title("estimated camera trajectory (top-down)")
    _save(fig, path)


def plot_loss_curve(losses: list[float], path: str | Path,
                    title: str = "training loss"):
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(np.arange(len(losses)), losses, linewidth=0.8, color="#4878cf")
    ax.set_xlabel("iteration")
    ax.set_ylabel("photometric loss")
    ax.set_yscale("log")
    ax.set_title(title)
    _save(fig, path)


def plot_ablation(rows: list[dict], path: str | Path):
    """Horizontal bar chart of mean PSNR per ablation grid cell."""
    labels = [r["label"] for r in rows]
    values = [r["psnr"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 0.35 * len(rows) + 1.2))
    y = np.arange(len(rows))
    ax.barh(y, values, color="#4878cf")
    ax.set_yticks(y, labels, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("mean test PSNR (dB)")
    ax.set_title("ablation grid")
    _save(fig, path)
