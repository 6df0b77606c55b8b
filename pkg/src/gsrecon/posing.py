"""Per-frame model fitting and photometric relative-pose estimation.

The trajectory is built without any feature matching: each frame gets a
small Gaussian model seeded from depth and refined photometrically, then
the transform to the next frame is found by minimizing the photometric
loss over a 6-DoF camera twist.  Absolute poses come from chaining the
relative transforms; the first pose is always the identity.  Optional
bridging inserts a synthesized midpoint frame between each pair and
composes the two half-step transforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import geometry, splat
from .data import DepthMap, constant_depth
from .errors import Diverged, EmptyDepth, MissingPose, TooFewFrames
from .geometry import CameraIntrinsics, Pose
from .supervision import LossConfig, photometric_loss_torch


@dataclass
class PoseEstimationConfig:
    # per-frame model fitting
    fit_iterations: int = 150
    fit_max_points: int = 2000
    fit_densify: bool = False
    fit_opacity: float = 0.8
    fit_scale_factor: float = 0.6     # of the pixel spacing at the seed depth
    # pairwise twist optimization
    pair_iterations: int = 300
    rotation_lr: float = 5e-3
    translation_lr: float = 1e-2
    patience: int = 40                # early stop: iterations without improvement
    tolerance: float = 1e-6           # minimum improvement that resets patience
    divergence_factor: float = 10.0   # loss blow-up that aborts a pair
    divergence_floor: float = 1e-4    # reference loss floor for the blow-up test
    # shared
    loss: LossConfig = field(default_factory=LossConfig)
    dtype: str = "float32"
    constant_depth: float = 2.5       # fallback when no depth source exists
    seed: int = 0


class Trajectory:
    """Chained camera poses keyed by frame index; half indices allowed.

    The pose at index 0 is the identity by construction.  `relatives`
    keeps the estimated pairwise transforms that produced the chain.
    """

    def __init__(self, items: list[tuple[float, Pose]],
                 relatives: dict[tuple[float, float], Pose] | None = None):
        self._poses = {float(i): p for i, p in items}
        self.relatives = dict(relatives or {})

    @staticmethod
    def from_poses(poses: list[Pose]) -> "Trajectory":
        return Trajectory([(float(i), p) for i, p in enumerate(poses)])

    def indices(self) -> list[float]:
        return sorted(self._poses)

    def has(self, index: float) -> bool:
        return float(index) in self._poses

    def pose_at(self, index: float) -> Pose:
        try:
            return self._poses[float(index)]
        except KeyError:
            raise MissingPose(f"no pose for frame index {index}")

    def integer_indices(self) -> list[int]:
        return [int(i) for i in self.indices() if float(i).is_integer()]

    def integer_poses(self) -> list[Pose]:
        return [self._poses[float(i)] for i in self.integer_indices()]

    def set_pose(self, index: float, pose: Pose):
        self._poses[float(index)] = pose

    def items(self) -> list[tuple[float, Pose]]:
        return [(i, self._poses[i]) for i in self.indices()]

    def __len__(self) -> int:
        return len(self._poses)


# -- per-frame model fitting -------------------------------------------------

def seed_model_from_depth(image: np.ndarray, k: CameraIntrinsics,
                          depth: DepthMap, max_points: int,
                          opacity: float = 0.8, scale_factor: float = 0.6,
                          anchor_frame: int = 0) -> splat.GaussianModel:
    """Unproject a subsampled depth grid into an initial Gaussian model."""
    valid = depth.valid
    if not valid.any():
        raise EmptyDepth("depth map has no valid pixels")
    h, w = valid.shape
    stride = max(1, int(np.ceil(np.sqrt(valid.sum() / max(max_points, 1)))))
    vs, us = np.mgrid[stride // 2:h:stride, stride // 2:w:stride]
    vs, us = vs.ravel(), us.ravel()
    keep = valid[vs, us]
    if not keep.any():
        # the grid may step over a sparse mask; fall back to all valid pixels
        vs, us = np.nonzero(valid)
        sel = np.linspace(0, vs.size - 1, min(max_points, vs.size)).astype(int)
        vs, us = vs[sel], us[sel]
    else:
        vs, us = vs[keep], us[keep]
    z = depth.values[vs, us]
    positions = np.stack([(us - k.cx) * z / k.fx, (vs - k.cy) * z / k.fy, z], axis=1)
    s = np.maximum(scale_factor * z * stride / k.fx, 1e-4)
    log_scales = np.log(np.stack([s, s, s], axis=1))
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (z.size, 1))
    logit = float(np.log(opacity / (1.0 - opacity)))
    opacity_logits = np.full(z.size, logit)
    colors = np.asarray(image, dtype=np.float64)[vs, us]
    return splat.GaussianModel(positions, log_scales, rotations, opacity_logits,
                               colors, anchor_frame=anchor_frame)


def fit_single_frame(image: np.ndarray, k: CameraIntrinsics, depth: DepthMap,
                     cfg: PoseEstimationConfig | None = None,
                     anchor_frame: int = 0) -> splat.GaussianModel:
    """Fit a Gaussian model to one frame, anchored to that frame's camera.

    The model lives in the frame's own camera coordinates, so it renders
    back under the identity pose.
    """
    cfg = cfg or PoseEstimationConfig()
    model = seed_model_from_depth(image, k, depth, cfg.fit_max_points,
                                  cfg.fit_opacity, cfg.fit_scale_factor,
                                  anchor_frame)
    trainer = splat.GaussianTrainer(
        model, k, loss_cfg=cfg.loss, dtype=cfg.dtype,
        densify=cfg.fit_densify,
        rng=np.random.default_rng(cfg.seed))
    identity = Pose.identity()
    for _ in range(cfg.fit_iterations):
        trainer.step(identity, image)
    return trainer.snapshot()


# -- pairwise relative pose --------------------------------------------------

def estimate_relative_pose(model: splat.GaussianModel, target: np.ndarray,
                           k: CameraIntrinsics,
                           cfg: PoseEstimationConfig | None = None,
                           init: Pose | None = None,
                           pair_index: int | None = None) -> tuple[Pose, float]:
    """Camera transform from the model's frame to the target frame.

    Minimizes the photometric loss of rendering `model` under exp(twist)
    against `target` with Adam; returns (pose, final loss).  Raises
    Diverged when the loss is non-finite or blows up past
    `divergence_factor` times its initial value.
    """
    cfg = cfg or PoseEstimationConfig()
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    tensors = splat._model_tensors(model, dtype)
    tgt = torch.from_numpy(np.asarray(target, dtype=np.float64)).to(dtype)
    init_twist = geometry.log_se3(init) if init is not None else np.zeros(6)
    w = torch.tensor(init_twist[:3], dtype=dtype, requires_grad=True)
    u = torch.tensor(init_twist[3:], dtype=dtype, requires_grad=True)
    opt = torch.optim.Adam([
        {"params": [w], "lr": cfg.rotation_lr},
        {"params": [u], "lr": cfg.translation_lr},
    ], eps=1e-15)

    best_loss = np.inf
    best_twist = init_twist.copy()
    initial_loss = None
    stale = 0
    for _ in range(cfg.pair_iterations):
        opt.zero_grad(set_to_none=True)
        R, t = splat._exp_se3_torch(torch.cat([w, u]))
        img = splat._render_torch(*tensors, R, t, k, (0.0, 0.0, 0.0))
        loss = photometric_loss_torch(img, tgt, cfg.loss)
        value = float(loss.detach())
        if initial_loss is None:
            initial_loss = value
        if value < best_loss - cfg.tolerance:
            best_loss = value
            best_twist = np.concatenate([w.detach().numpy(), u.detach().numpy()]).astype(np.float64)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        if best_loss <= cfg.tolerance:
            break   # already at a photometric optimum; nothing left to gain
        if not np.isfinite(value) or value > cfg.divergence_factor * max(
                initial_loss, cfg.divergence_floor):
            raise Diverged(f"pair optimization diverged (loss {value:.4g} "
                           f"from {initial_loss:.4g})", pair_index=pair_index)
        if not loss.requires_grad:
            break   # nothing renders from this pose; no gradient signal
        loss.backward()
        opt.step()
    return geometry.exp_se3(best_twist), float(best_loss)


# -- full-sequence estimation ------------------------------------------------

def _depth_or_fallback(depths, i, k, cfg, log):
    if depths is not None and i < len(depths) and depths[i] is not None:
        return depths[i]
    if log is not None:
        log.append(f"frame {i}\tdepth fallback constant {cfg.constant_depth:g}")
    return constant_depth(k, cfg.constant_depth)


def estimate_trajectory(frames: list[np.ndarray], k: CameraIntrinsics,
                        cfg: PoseEstimationConfig | None = None,
                        depths: list[DepthMap | None] | None = None,
                        midpoints=None,
                        log: list[str] | None = None) -> Trajectory:
    """Chain photometric relative poses over a frame sequence.

    With a `midpoints` provider (``midpoint(i, frame_a, frame_b)``), each
    step is bridged through a synthesized half-index frame and the two
    half-step transforms are composed; the half-index poses are recorded
    in the returned trajectory alongside the integer ones.
    """
    cfg = cfg or PoseEstimationConfig()
    n = len(frames)
    if n < 2:
        raise TooFewFrames(f"trajectory estimation needs >= 2 frames, got {n}")
    rels: list[Pose] = []
    half_rels: dict[float, Pose] = {}  # i -> T_{i -> i+0.5}
    relatives: dict[tuple[float, float], Pose] = {}
    for i in range(n - 1):
        depth_i = _depth_or_fallback(depths, i, k, cfg, log)
        model_i = fit_single_frame(frames[i], k, depth_i, cfg, anchor_frame=i)
        if midpoints is not None:
            mid = midpoints.midpoint(i, frames[i], frames[i + 1])
            t1, loss1 = estimate_relative_pose(model_i, mid, k, cfg, pair_index=i)
            # carry the same fitted model into the midpoint camera frame; a
            # refit against the synthesized frame would only add its artifacts
            model_mid = splat.transform_model(model_i, t1)
            t2, loss2 = estimate_relative_pose(model_mid, frames[i + 1], k, cfg,
                                               pair_index=i)
            rel = geometry.compose(t2, t1)
            half_rels[i] = t1
            relatives[(i, i + 0.5)] = t1
            relatives[(i + 0.5, i + 1.0)] = t2
            if log is not None:
                log.append(f"pair {i}\tbridged\tloss {loss1:.6f} {loss2:.6f}")
        else:
            rel, loss = estimate_relative_pose(model_i, frames[i + 1], k, cfg,
                                               pair_index=i)
            if log is not None:
                log.append(f"pair {i}\tdirect\tloss {loss:.6f}")
        relatives[(float(i), float(i + 1))] = rel
        rels.append(rel)
    poses = geometry.chain_relative_poses(rels)
    items = [(float(i), p) for i, p in enumerate(poses)]
    for i, t1 in half_rels.items():
        items.append((i + 0.5, geometry.compose(t1, poses[i])))
    return Trajectory(items, relatives)
