"""Shared test fixtures and factories."""

import numpy as np
import pytest
import torch

from gsrecon.geometry import CameraIntrinsics, Pose
from gsrecon.splat import GaussianModel

torch.set_num_threads(1)


def make_intrinsics(size: int = 32, f: float | None = None) -> CameraIntrinsics:
    f = f if f is not None else float(size)
    return CameraIntrinsics(f, f, size / 2.0, size / 2.0, size, size)


def random_pose(rng: np.random.Generator, rot_scale: float = 1.0,
                t_scale: float = 1.0) -> Pose:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    if rot_scale < 1.0:
        # shrink toward identity for small rotations
        axis = q[1:] / max(np.linalg.norm(q[1:]), 1e-12)
        angle = 2.0 * np.arccos(np.clip(abs(q[0]), 0.0, 1.0)) * rot_scale
        return Pose.from_axis_angle(axis, angle, rng.normal(0, t_scale, 3))
    return Pose(q, rng.normal(0, t_scale, 3))


def random_model(rng: np.random.Generator, n: int,
                 depth_range=(1.5, 3.5), spread: float = 0.8,
                 min_depth_gap: float = 0.0, anchor_frame: int = 0) -> GaussianModel:
    """Random Gaussians in front of the identity camera."""
    z = rng.uniform(*depth_range, n)
    if min_depth_gap > 0.0 and n > 1:
        # separate center depths so FD probes never cross a sort boundary
        z = np.sort(z)
        for i in range(1, n):
            z[i] = max(z[i], z[i - 1] + min_depth_gap)
    xy = rng.uniform(-spread, spread, (n, 2))
    positions = np.column_stack([xy * z[:, None], z])
    log_scales = np.log(rng.uniform(0.05, 0.25, (n, 3)))
    rotations = rng.standard_normal((n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opacity_logits = rng.uniform(-1.0, 2.0, n)
    colors = rng.uniform(0.1, 0.9, (n, 3))
    return GaussianModel(positions, log_scales, rotations, opacity_logits,
                         colors, anchor_frame=anchor_frame)


def single_gaussian(z: float = 2.0, scale: float = 0.3,
                    color=(1.0, 1.0, 1.0), opacity_logit: float = 4.0,
                    xy=(0.0, 0.0)) -> GaussianModel:
    return GaussianModel(np.array([[xy[0], xy[1], z]]),
                         np.log(np.full((1, 3), scale)),
                         np.array([[1.0, 0.0, 0.0, 0.0]]),
                         np.array([opacity_logit]),
                         np.array([color], dtype=float))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
