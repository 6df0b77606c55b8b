"""Image-quality (PSNR, SSIM) and trajectory (ATE, RPE) metrics.

ATE is computed after a closed-form similarity (rotation + translation +
scale) alignment of camera centers, so it is invariant to the global
gauge a monocular pipeline cannot observe.  RPE uses step delta = 1 by
default and reports translation in world units, rotation in degrees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate2d

from . import geometry
from .errors import (DegenerateConfiguration, DimensionMismatch, ImageTooSmall,
                     LengthMismatch)
from .geometry import Pose

PSNR_CAP_DB = 99.0


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on the [0, 1] range, capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP_DB / 10.0):
        return PSNR_CAP_DB
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    coords = np.arange(window) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    """Mean windowed SSIM (valid windows, channel-averaged) on [0, 1] images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if min(a.shape[0], a.shape[1]) < window:
        raise ImageTooSmall(f"min side {min(a.shape[:2])} < window {window}")
    kernel = _gaussian_kernel(window, sigma)

    values = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = correlate2d(x, kernel, mode="valid")
        mu_y = correlate2d(y, kernel, mode="valid")
        sxx = correlate2d(x * x, kernel, mode="valid") - mu_x ** 2
        syy = correlate2d(y * y, kernel, mode="valid") - mu_y ** 2
        sxy = correlate2d(x * y, kernel, mode="valid") - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


# -- trajectory metrics -----------------------------------------------------

def _as_pose_list(traj) -> list[Pose]:
    if hasattr(traj, "integer_poses"):
        return traj.integer_poses()
    return list(traj)


@dataclass(frozen=True)
class SimilarityTransform:
    """y = scale * R @ x + t."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def _camera_centers(poses: list[Pose]) -> np.ndarray:
    return np.stack([p.camera_center() for p in poses])


def umeyama_alignment(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity transform mapping src points onto dst."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.shape[0] < 3:
        raise LengthMismatch("need two equal point sets of length >= 3")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / src.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    # collinear (or coincident) centers leave the rotation underdetermined
    spread = np.linalg.svd(xs, compute_uv=False)
    if spread[0] < 1e-12 or spread[1] / spread[0] < 1e-9:
        raise DegenerateConfiguration("camera centers are collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = (xs ** 2).sum() / src.shape[0]
    scale = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - scale * R @ mu_s
    return SimilarityTransform(scale, R, t)


def align_trajectories(est, gt) -> tuple[list[Pose], SimilarityTransform]:
    """Similarity-align estimated camera centers onto ground truth.

    Returns the aligned estimated trajectory (poses with remapped centers
    and rotations) and the transform used.
    """
    est_p = _as_pose_list(est)
    gt_p = _as_pose_list(gt)
    if len(est_p) != len(gt_p):
        raise LengthMismatch(f"trajectory lengths differ: {len(est_p)} vs {len(gt_p)}")
    sim = umeyama_alignment(_camera_centers(est_p), _camera_centers(gt_p))
    aligned = []
    for p in est_p:
        center = sim.apply(p.camera_center())
        R = p.rotation_matrix() @ sim.rotation.T
        aligned.append(Pose.from_rt(R, -R @ center))
    return aligned, sim


def ate(est, gt) -> float:
    """RMSE of camera-center distances after similarity alignment."""
    aligned, _ = align_trajectories(est, gt)
    gt_p = _as_pose_list(gt)
    d = _camera_centers(aligned) - _camera_centers(gt_p)
    return float(np.sqrt(np.mean(np.sum(d ** 2, axis=1))))


def rpe(est, gt, delta: int = 1) -> tuple[float, float]:
    """Relative pose error: (RPE_t world units, RPE_r degrees), RMSE over steps."""
    est_p = _as_pose_list(est)
    gt_p = _as_pose_list(gt)
    if len(est_p) != len(gt_p):
        raise LengthMismatch(f"trajectory lengths differ: {len(est_p)} vs {len(gt_p)}")
    if len(est_p) < delta + 1:
        raise LengthMismatch(f"need at least {delta + 1} poses for delta={delta}")
    t_errs, r_errs = [], []
    for i in range(len(est_p) - delta):
        rel_gt = geometry.compose(geometry.invert(gt_p[i]), gt_p[i + delta])
        rel_est = geometry.compose(geometry.invert(est_p[i]), est_p[i + delta])
        err = geometry.compose(geometry.invert(rel_gt), rel_est)
        t_errs.append(np.linalg.norm(err.t))
        r_errs.append(np.degrees(err.rotation_angle()))
    return (float(np.sqrt(np.mean(np.square(t_errs)))),
            float(np.sqrt(np.mean(np.square(r_errs)))))


# -- reports ----------------------------------------------------------------

@dataclass
class NvsReport:
    """Per-frame and mean novel-view-synthesis quality."""

    frame_ids: list[int]
    psnr_values: list[float]
    ssim_values: list[float]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))

    def kv_lines(self) -> list[str]:
        lines = [f"mean_psnr\t{self.mean_psnr:.6f}", f"mean_ssim\t{self.mean_ssim:.6f}"]
        for fid, p, s in zip(self.frame_ids, self.psnr_values, self.ssim_values):
            lines.append(f"frame_{fid}_psnr\t{p:.6f}")
            lines.append(f"frame_{fid}_ssim\t{s:.6f}")
        return lines

    def table(self) -> str:
        rows = [f"{'frame':>8} {'psnr_db':>10} {'ssim':>8}"]
        for fid, p, s in zip(self.frame_ids, self.psnr_values, self.ssim_values):
            rows.append(f"{fid:>8d} {p:>10.3f} {s:>8.4f}")
        rows.append(f"{'mean':>8} {self.mean_psnr:>10.3f} {self.mean_ssim:>8.4f}")
        return "\n".join(rows)


@dataclass
class PoseReport:
    """Trajectory accuracy after similarity alignment.

    Units: ATE and RPE_t in world units, RPE_r in degrees; alignment is a
    similarity transform (monocular scale gauge), RPE step delta = 1.
    """

    ate: float
    rpe_t: float
    rpe_r: float
    alignment_scale: float

    def kv_lines(self) -> list[str]:
        return [
            f"ate_world_units\t{self.ate:.9f}",
            f"rpe_t_world_units\t{self.rpe_t:.9f}",
            f"rpe_r_degrees\t{self.rpe_r:.9f}",
            f"alignment_scale\t{self.alignment_scale:.9f}",
            "alignment\tsimilarity (rotation+translation+scale) on camera centers",
            "rpe_delta\t1",
        ]


def evaluate_nvs(rendered: list[np.ndarray], targets: list[np.ndarray],
                 frame_ids: list[int]) -> NvsReport:
    ps = [psnr(r, t) for r, t in zip(rendered, targets)]
    ss = [ssim(r, t) for r, t in zip(rendered, targets)]
    return NvsReport(list(frame_ids), ps, ss)


def evaluate_pose(est, gt) -> PoseReport:
    _, sim = align_trajectories(est, gt)
    t_err, r_err = rpe(est, gt)
    return PoseReport(ate=ate(est, gt), rpe_t=t_err, rpe_r=r_err,
                      alignment_scale=sim.scale)
