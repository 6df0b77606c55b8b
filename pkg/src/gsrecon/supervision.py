"""Photometric losses and multi-source retraining.

The training loss mixes L1 with a structural-dissimilarity term,
``(1 - lambda) * L1 + lambda * (1 - SSIM) / 2``.  Retraining after a merge
draws each iteration's target from the original frames or from one of two
augmentation pools (pseudo-views rendered by pre-merge base models at
geodesically interpolated poses; interpolated frames at half indices).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import geometry, splat
from .errors import DimensionMismatch, MissingPose
from .geometry import CameraIntrinsics, Pose


@dataclass(frozen=True)
class LossConfig:
    """Weights and constants for the photometric loss."""

    lam: float = 0.2                  # D-SSIM mixing weight
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    c1: float = 0.01 ** 2             # on [0, 1] dynamic range
    c2: float = 0.03 ** 2

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


def _gaussian_kernel(window: int, sigma: float, dtype, device=None) -> torch.Tensor:
    half = (window - 1) / 2.0
    coords = torch.arange(window, dtype=dtype, device=device) - half
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] @ g[None, :]


def ssim_torch(a: torch.Tensor, b: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Mean windowed SSIM over valid windows and channels; (H, W, 3) inputs."""
    win = cfg.ssim_window
    kernel = _gaussian_kernel(win, cfg.ssim_sigma, a.dtype, a.device)
    weight = kernel.expand(3, 1, win, win)

    def filt(x):
        return torch.nn.functional.conv2d(x, weight, groups=3)

    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)
    mu_x = filt(x)
    mu_y = filt(y)
    sigma_x = filt(x * x) - mu_x * mu_x
    sigma_y = filt(y * y) - mu_y * mu_y
    sigma_xy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + cfg.c1) * (2 * sigma_xy + cfg.c2)
    den = (mu_x ** 2 + mu_y ** 2 + cfg.c1) * (sigma_x + sigma_y + cfg.c2)
    return (num / den).mean()


def photometric_loss_torch(rendered: torch.Tensor, target: torch.Tensor,
                           cfg: LossConfig) -> torch.Tensor:
    l1 = (rendered - target).abs().mean()
    if cfg.lam == 0.0:
        return l1
    d_ssim = (1.0 - ssim_torch(rendered, target, cfg)) / 2.0
    return (1.0 - cfg.lam) * l1 + cfg.lam * d_ssim


def photometric_loss(rendered: np.ndarray, target: np.ndarray,
                     cfg: LossConfig | None = None) -> float:
    """(1 - lambda) L1 + lambda (1 - SSIM)/2 between two (H, W, 3) images."""
    cfg = cfg or LossConfig()
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise DimensionMismatch(f"image shapes differ: {rendered.shape} vs {target.shape}")
    with torch.no_grad():
        return float(photometric_loss_torch(torch.from_numpy(rendered),
                                            torch.from_numpy(target), cfg))


# -- supervision sources ----------------------------------------------------

@dataclass(frozen=True)
class SupervisionSource:
    """Tagged origin of one training target, with its pose in the model frame.

    kind: 'original' | 'pseudo' | 'interpolated'.  For pseudo-views, `tau`
    is the interpolation parameter and `base_id` names the owning base model.
    """

    kind: str
    pose: Pose
    image: np.ndarray
    frame_index: float | None = None
    base_id: int | None = None
    tau: float | None = None


def make_pseudo_views(base_a: splat.GaussianModel, base_b: splat.GaussianModel,
                      traj, segments, k: CameraIntrinsics,
                      n_per_gap: int, rng: np.random.Generator,
                      merged_anchor: int) -> list[SupervisionSource]:
    """Render pseudo-views from two pre-merge base models.

    For each adjacent real-frame pose pair inside a base model's own segment,
    sample `n_per_gap` values of tau uniformly in (0, 1), interpolate the
    pose geodesically, render the owning model there, and express the pose
    relative to the merged model's anchor frame.
    """
    sources = []
    anchor_pose = traj.pose_at(merged_anchor)
    for base_id, (model, seg) in enumerate(((base_a, segments[0]), (base_b, segments[1]))):
        model_anchor_pose = traj.pose_at(model.anchor_frame)
        for i in range(seg.start, seg.end - 1):
            pa = traj.pose_at(i)
            pb = traj.pose_at(i + 1)
            for _ in range(n_per_gap):
                tau = float(rng.uniform(0.0, 1.0))
                pose_world = geometry.interpolate_pose(pa, pb, tau)
                # render in the base model's own frame
                pose_in_base = geometry.compose(pose_world, geometry.invert(model_anchor_pose))
                image = splat.render(model, k, pose_in_base)
                pose_in_merged = geometry.compose(pose_world, geometry.invert(anchor_pose))
                sources.append(SupervisionSource(
                    kind="pseudo", pose=pose_in_merged, image=image,
                    frame_index=i + tau, base_id=base_id, tau=tau))
    return sources


def interpolated_frame_sources(frames_half: dict[float, np.ndarray], traj,
                               anchor: int) -> list[SupervisionSource]:
    """Pair each interpolated (half-index) frame with its chained pose."""
    anchor_pose = traj.pose_at(anchor)
    sources = []
    for idx in sorted(frames_half):
        if not traj.has(idx):
            raise MissingPose(f"no chained pose for half index {idx}")
        pose = geometry.compose(traj.pose_at(idx), geometry.invert(anchor_pose))
        sources.append(SupervisionSource(kind="interpolated", pose=pose,
                                         image=frames_half[idx], frame_index=idx))
    return sources


# -- retraining -------------------------------------------------------------

@dataclass
class RetrainConfig:
    iterations_per_frame: int = 300
    densify_interval: int = 100
    loss: LossConfig = field(default_factory=LossConfig)
    source_probability: float = 0.5   # chance of drawing from the augmentation pool
    lr_scale: float = 1.0
    dtype: str = "float32"
    max_gaussians: int | None = None
    grad_threshold: float = 2e-4
    lr_decay: bool = False


def retrain(model: splat.GaussianModel,
            originals: list[SupervisionSource],
            pseudo: list[SupervisionSource],
            interpolated: list[SupervisionSource],
            k: CameraIntrinsics,
            cfg: RetrainConfig,
            rng: np.random.Generator,
            extent: float,
            log: list[str] | None = None) -> splat.GaussianModel:
    """Two-phase multi-source fine-tuning of a merged model.

    Phase 1 mixes originals with pseudo-views, phase 2 originals with
    interpolated frames; each phase runs iterations_per_frame x n_originals
    iterations and draws the augmentation pool with `source_probability`.
    """
    if not originals:
        raise ValueError("originals must be nonempty")
    n_iters = cfg.iterations_per_frame * len(originals)
    trainer = splat.GaussianTrainer(
        model, k, loss_cfg=cfg.loss, extent=extent,
        densify_interval=cfg.densify_interval,
        grad_threshold=cfg.grad_threshold, max_gaussians=cfg.max_gaussians,
        rng=rng, lr_scale=cfg.lr_scale, dtype=cfg.dtype,
        total_iterations=2 * n_iters if cfg.lr_decay else None)
    for phase, pool in ((1, pseudo), (2, interpolated)):
        for _ in range(n_iters):
            use_pool = bool(pool) and rng.uniform() < cfg.source_probability
            src = pool[rng.integers(len(pool))] if use_pool else \
                originals[rng.integers(len(originals))]
            loss = trainer.step(src.pose, src.image)
            if log is not None:
                log.append(f"phase {phase}\t{src.kind}\t{loss:.6f}")
    return trainer.snapshot()
