"""Segment partitioning, per-segment base training, importance-scored
merging, and the training schedules built from them.

A depth-``levels`` hierarchy trains ``2**levels`` base models on motion-
partitioned segments, then merges them pairwise.  Each merge keeps the
top ceil(gamma * n) Gaussians of each side by importance (accumulated
absolute gradient of the rendered pixel sum), aligns the right side into
the left side's anchor frame, and fine-tunes the union on original,
pseudo-view and interpolated supervision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import geometry, posing, splat, supervision
from .data import DepthMap
from .errors import InfeasiblePartition
from .geometry import CameraIntrinsics, Pose
from .supervision import LossConfig, RetrainConfig, SupervisionSource


@dataclass(frozen=True)
class Segment:
    """Half-open frame range [start, end); the anchor is the first frame."""

    start: int
    end: int

    @property
    def anchor(self) -> int:
        return self.start

    def __len__(self) -> int:
        return self.end - self.start

    def frames(self) -> range:
        return range(self.start, self.end)


@dataclass
class HierarchyConfig:
    levels: int = 2
    gamma: float = 0.5                 # kept fraction per side at each merge
    iterations_per_frame: int = 300
    polish_per_frame: int = 0          # uniform-replay iterations after all frames join
    retrain_iterations_per_frame: int | None = None  # defaults to iterations_per_frame
    retrain_lr_scale: float = 0.3      # gentler fine-tuning after a merge
    retrain_densify_interval: int = 0  # 0: no density control while retraining
    lr_decay: bool = False             # decay step sizes over each training run
    densify_interval: int = 100
    overlap: int = 1                   # shared frames between adjacent segments
    min_segment: int = 2
    equal_partition: bool = False      # ignore motion, cut at equal lengths
    seed_points: int = 300             # depth-seeded Gaussians per base model
    max_gaussians: int | None = None
    grad_threshold: float = 2e-4
    n_pseudo_per_gap: int = 1
    source_probability: float = 0.5
    importance_aggregate: str = "sum"  # sum | max | opacity
    loss: LossConfig = field(default_factory=LossConfig)
    dtype: str = "float32"
    lr_scale: float = 1.0
    seed: int = 0

    def retrain_config(self) -> RetrainConfig:
        iters = (self.retrain_iterations_per_frame
                 if self.retrain_iterations_per_frame is not None
                 else self.iterations_per_frame)
        return RetrainConfig(iterations_per_frame=iters,
                             densify_interval=self.retrain_densify_interval,
                             loss=self.loss,
                             source_probability=self.source_probability,
                             lr_scale=self.lr_scale * self.retrain_lr_scale,
                             dtype=self.dtype,
                             max_gaussians=self.max_gaussians,
                             grad_threshold=self.grad_threshold,
                             lr_decay=self.lr_decay)


# -- partitioning ------------------------------------------------------------

def motion_magnitudes(traj, n_frames: int, extent: float = 1.0) -> np.ndarray:
    """Per-gap motion: rotation angle plus translation over scene extent."""
    mags = np.zeros(n_frames - 1)
    for i in range(n_frames - 1):
        ang, dist = geometry.geodesic_distance(traj.pose_at(i), traj.pose_at(i + 1))
        mags[i] = ang + dist / max(extent, 1e-9)
    return mags


def partition(traj, n_frames: int, levels: int, overlap: int = 1,
              min_segment: int = 2, extent: float = 1.0,
              equal: bool = False) -> list[Segment]:
    """Split [0, n) into 2**levels segments cut at the largest camera motions.

    Adjacent segments share `overlap` frames (each segment extends back over
    the previous one's tail).  Ties between equal motion magnitudes break
    toward equal-length segments.  Raises InfeasiblePartition when the
    min-segment constraint cannot be met.
    """
    m = 2 ** levels
    if m == 1:
        if n_frames < min_segment:
            raise InfeasiblePartition(
                f"{n_frames} frames < min segment length {min_segment}")
        return [Segment(0, n_frames)]

    gap_interior = max(1, min_segment - overlap)
    last_slack = max(1, min_segment - overlap)
    if n_frames < min_segment + (m - 2) * gap_interior + last_slack:
        raise InfeasiblePartition(
            f"cannot cut {n_frames} frames into {m} segments of >= {min_segment}")

    ideal = [round(j * n_frames / m) for j in range(1, m)]
    if equal:
        cuts = sorted(ideal)
    else:
        mags = motion_magnitudes(traj, n_frames, extent)
        top = mags.max() if mags.size else 0.0
        quantum = max(top * 1e-9, 1e-30)

        def key(gap):
            cut = gap + 1
            return (-round(mags[gap] / quantum),
                    min(abs(cut - i) for i in ideal), cut)

        cuts = []
        for gap in sorted(range(n_frames - 1), key=key):
            cut = gap + 1
            if cut < min_segment or n_frames - cut < last_slack:
                continue
            if any(abs(cut - c) < gap_interior for c in cuts):
                continue
            cuts.append(cut)
            if len(cuts) == m - 1:
                break
        if len(cuts) < m - 1:
            raise InfeasiblePartition(
                f"only {len(cuts) + 1} segments satisfy the spacing constraints")
        cuts.sort()

    bounds = [0] + cuts + [n_frames]
    return [Segment(max(bounds[j] - (overlap if j else 0), 0), bounds[j + 1])
            for j in range(m)]


# -- base-model training -----------------------------------------------------

def _relative_pose(traj, frame: float, anchor: int) -> Pose:
    return geometry.compose(traj.pose_at(frame),
                            geometry.invert(traj.pose_at(anchor)))


def train_base(frames: list[np.ndarray], traj, seg: Segment,
               k: CameraIntrinsics, depth: DepthMap, cfg: HierarchyConfig,
               rng: np.random.Generator,
               train_indices: set[int] | None = None) -> splat.GaussianModel:
    """Train one base model on a segment, anchored at its first frame.

    Seeded by unprojecting `depth` (the anchor frame's depth source).
    Frames join the supervision set one at a time in order; after each
    joins, `iterations_per_frame` iterations sample targets uniformly
    from the frames seen so far.  Held-out frames never supervise.
    """
    anchor = seg.anchor
    model = posing.seed_model_from_depth(frames[anchor], k, depth,
                                         cfg.seed_points, anchor_frame=anchor)
    n_train = sum(1 for f in seg.frames()
                  if train_indices is None or f in train_indices)
    total = ((cfg.iterations_per_frame + cfg.polish_per_frame) * n_train
             if cfg.lr_decay else None)
    trainer = splat.GaussianTrainer(
        model, k, loss_cfg=cfg.loss, densify_interval=cfg.densify_interval,
        grad_threshold=cfg.grad_threshold, max_gaussians=cfg.max_gaussians,
        rng=rng, lr_scale=cfg.lr_scale, dtype=cfg.dtype,
        total_iterations=total)
    active: list[int] = []
    for f in seg.frames():
        if train_indices is not None and f not in train_indices:
            continue
        active.append(f)
        for _ in range(cfg.iterations_per_frame):
            target = active[rng.integers(len(active))]
            trainer.step(_relative_pose(traj, target, anchor), frames[target])
    if not active:
        raise InfeasiblePartition(
            f"segment [{seg.start}, {seg.end}) has no training frames")
    # equal-weight consolidation so late-joining frames catch up
    for _ in range(cfg.polish_per_frame * len(active)):
        target = active[rng.integers(len(active))]
        trainer.step(_relative_pose(traj, target, anchor), frames[target])
    return trainer.snapshot()


# -- importance scoring ------------------------------------------------------

def importance_scores(model: splat.GaussianModel, frames: list[np.ndarray],
                      poses: list[Pose], k: CameraIntrinsics,
                      aggregate: str = "sum") -> np.ndarray:
    """Per-Gaussian importance over a set of views.

    Sums, over views, the absolute gradient of the rendered pixel sum with
    respect to each Gaussian's stored opacity logit and color channels,
    normalized by the total pixel count; `aggregate` folds the per-parameter
    scores into one scalar per Gaussian (sum, max, or opacity only).
    A Gaussian contributing to no rendered pixel scores exactly zero.
    """
    if aggregate not in ("sum", "max", "opacity"):
        raise ValueError(f"unknown aggregate {aggregate!r}")
    n = len(model)
    acc_op = np.zeros(n)
    acc_col = np.zeros((n, 3))
    pos = torch.from_numpy(model.positions)
    ls = torch.from_numpy(model.log_scales)
    rot = torch.from_numpy(model.rotations)
    total_pixels = 0
    for image, pose in zip(frames, poses):
        op = torch.from_numpy(model.opacity_logits).clone().requires_grad_(True)
        col = torch.from_numpy(model.colors).clone().requires_grad_(True)
        R, t = splat._pose_tensors(pose, torch.float64)
        img = splat._render_torch(pos, ls, rot, op, col, R, t, k, (0.0, 0.0, 0.0))
        img.sum().backward()
        if op.grad is not None:
            acc_op += np.abs(op.grad.numpy())
        if col.grad is not None:
            acc_col += np.abs(col.grad.numpy())
        total_pixels += img.shape[0] * img.shape[1]
    acc_op /= max(total_pixels, 1)
    acc_col /= max(total_pixels, 1)
    if aggregate == "sum":
        return acc_op + acc_col.sum(axis=1)
    if aggregate == "max":
        return np.maximum(acc_op, acc_col.max(axis=1))
    return acc_op


def top_fraction(scores: np.ndarray, gamma: float) -> np.ndarray:
    """Indices (ascending) of the ceil(gamma*n) highest scores; ties keep
    the lower index."""
    n = scores.shape[0]
    count = math.ceil(gamma * n)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:count])


def merge(a: splat.GaussianModel, b: splat.GaussianModel, t_align: Pose,
          gamma: float, scores_a: np.ndarray, scores_b: np.ndarray
          ) -> tuple[splat.GaussianModel, np.ndarray, np.ndarray]:
    """Importance-pruned union of two models in a's anchor frame.

    Keeps ceil(gamma*n) of each side, maps b's survivors through `t_align`
    (b's anchor camera frame -> a's), and concatenates.  Returns the merged
    model plus the kept index arrays.
    """
    idx_a = top_fraction(scores_a, gamma)
    idx_b = top_fraction(scores_b, gamma)
    kept_a = a.take(idx_a)
    kept_b = splat.transform_model(b.take(idx_b), t_align)
    return (splat.GaussianModel.concatenate(kept_a, kept_b,
                                            anchor_frame=a.anchor_frame),
            idx_a, idx_b)


def alignment_transform(traj, anchor_a: int, anchor_b: int) -> Pose:
    """Camera-frame change from anchor_b's frame to anchor_a's."""
    return geometry.compose(traj.pose_at(anchor_a),
                            geometry.invert(traj.pose_at(anchor_b)))


# -- schedules ---------------------------------------------------------------

def _original_sources(frames, traj, seg: Segment, train_indices) -> list[SupervisionSource]:
    out = []
    for f in seg.frames():
        if train_indices is not None and f not in train_indices:
            continue
        out.append(SupervisionSource(
            kind="original", pose=_relative_pose(traj, f, seg.anchor),
            image=frames[f], frame_index=float(f)))
    return out


def _segment_view_poses(traj, seg: Segment, anchor: int,
                        train_indices) -> tuple[list[int], list[Pose]]:
    ids = [f for f in seg.frames()
           if train_indices is None or f in train_indices]
    return ids, [_relative_pose(traj, f, anchor) for f in ids]


def _merge_pair(frames, traj, k, cfg, rng, model_a, seg_a, model_b, seg_b,
                train_indices, frames_half, extent, level, log):
    ids_a, poses_a = _segment_view_poses(traj, seg_a, model_a.anchor_frame,
                                         train_indices)
    ids_b, poses_b = _segment_view_poses(traj, seg_b, model_b.anchor_frame,
                                         train_indices)
    scores_a = importance_scores(model_a, [frames[f] for f in ids_a], poses_a,
                                 k, cfg.importance_aggregate)
    scores_b = importance_scores(model_b, [frames[f] for f in ids_b], poses_b,
                                 k, cfg.importance_aggregate)
    t_align = alignment_transform(traj, model_a.anchor_frame, model_b.anchor_frame)
    merged, idx_a, idx_b = merge(model_a, model_b, t_align, cfg.gamma,
                                 scores_a, scores_b)
    span = Segment(seg_a.start, seg_b.end)

    originals = _original_sources(frames, traj, span, train_indices)
    pseudo = supervision.make_pseudo_views(
        model_a, model_b, traj, (seg_a, seg_b), k, cfg.n_pseudo_per_gap, rng,
        merged_anchor=merged.anchor_frame)
    interpolated = []
    if frames_half:
        span_half = {i: im for i, im in frames_half.items()
                     if span.start <= i < span.end - 1 and traj.has(i)}
        interpolated = supervision.interpolated_frame_sources(
            span_half, traj, merged.anchor_frame)

    pre = len(merged)
    retrained = supervision.retrain(merged, originals, pseudo, interpolated,
                                    k, cfg.retrain_config(), rng, extent)
    if log is not None:
        log.append(f"merge level {level}\tleft [{seg_a.start},{seg_a.end})\t"
                   f"right [{seg_b.start},{seg_b.end})\t"
                   f"counts {len(model_a)}+{len(model_b)}"
                   f" kept {idx_a.size}+{idx_b.size}"
                   f" merged {pre} retrained {len(retrained)}")
    return retrained, span


def _extent_estimate(depth: DepthMap | None) -> float:
    if depth is not None and depth.valid.any():
        return float(np.median(depth.values[depth.valid]))
    return 1.0


def train_base_models(frames, traj, segments, k, depths, cfg, rng,
                      train_indices) -> list[splat.GaussianModel]:
    return [train_base(frames, traj, seg, k, depths[seg.anchor], cfg, rng,
                       train_indices) for seg in segments]


def hierarchical_train(frames, traj, k, depths, cfg: HierarchyConfig,
                       train_indices: set[int] | None = None,
                       frames_half: dict[float, np.ndarray] | None = None,
                       log: list[str] | None = None) -> splat.GaussianModel:
    """Full binary-tree schedule: 2**levels bases, pairwise merges per level."""
    rng = np.random.default_rng(cfg.seed)
    extent = _extent_estimate(depths[0])
    segments = partition(traj, len(frames), cfg.levels, cfg.overlap,
                         cfg.min_segment, extent, cfg.equal_partition)
    models = train_base_models(frames, traj, segments, k, depths, cfg, rng,
                               train_indices)
    level = 1
    while len(models) > 1:
        next_models, next_segments = [], []
        for j in range(0, len(models), 2):
            merged, span = _merge_pair(
                frames, traj, k, cfg, rng, models[j], segments[j],
                models[j + 1], segments[j + 1], train_indices, frames_half,
                extent, level, log)
            next_models.append(merged)
            next_segments.append(span)
        models, segments = next_models, next_segments
        level += 1
    return models[0]


def progressive_train(frames, traj, k, depths, cfg: HierarchyConfig,
                      train_indices: set[int] | None = None,
                      frames_half: dict[float, np.ndarray] | None = None,
                      log: list[str] | None = None) -> splat.GaussianModel:
    """Left-fold schedule: the same bases merged one at a time, left to right."""
    rng = np.random.default_rng(cfg.seed)
    extent = _extent_estimate(depths[0])
    segments = partition(traj, len(frames), cfg.levels, cfg.overlap,
                         cfg.min_segment, extent, cfg.equal_partition)
    models = train_base_models(frames, traj, segments, k, depths, cfg, rng,
                               train_indices)
    acc, span = models[0], segments[0]
    for j in range(1, len(models)):
        acc, span = _merge_pair(frames, traj, k, cfg, rng, acc, span,
                                models[j], segments[j], train_indices,
                                frames_half, extent, j, log)
    return acc


def baseline_train(frames, traj, k, depths, cfg: HierarchyConfig,
                   train_indices: set[int] | None = None,
                   frames_half=None, log=None) -> splat.GaussianModel:
    """Single model over the whole sequence (levels = 0), no merging."""
    rng = np.random.default_rng(cfg.seed)
    seg = Segment(0, len(frames))
    return train_base(frames, traj, seg, k, depths[0], cfg, rng, train_indices)


def global_train(frames, traj, k, depths, cfg: HierarchyConfig,
                 train_indices: set[int] | None = None,
                 frames_half=None, log=None) -> splat.GaussianModel:
    """Baseline plus an originals-only retraining pass (no augmentation)."""
    rng = np.random.default_rng(cfg.seed)
    seg = Segment(0, len(frames))
    model = train_base(frames, traj, seg, k, depths[0], cfg, rng, train_indices)
    originals = _original_sources(frames, traj, seg, train_indices)
    extent = _extent_estimate(depths[0])
    retrained = supervision.retrain(model, originals, [], [], k,
                                    cfg.retrain_config(), rng, extent)
    if log is not None:
        log.append(f"global retrain\tcount {len(model)} -> {len(retrained)}")
    return retrained


SCHEDULES = {
    "hierarchical": hierarchical_train,
    "progressive": progressive_train,
    "baseline": baseline_train,
    "global": global_train,
}


def run_schedule(name: str, frames, traj, k, depths, cfg: HierarchyConfig,
                 train_indices=None, frames_half=None,
                 log=None) -> splat.GaussianModel:
    if name not in SCHEDULES:
        raise ValueError(f"unknown schedule {name!r}; choose from {sorted(SCHEDULES)}")
    return SCHEDULES[name](frames, traj, k, depths, cfg,
                           train_indices=train_indices,
                           frames_half=frames_half, log=log)
