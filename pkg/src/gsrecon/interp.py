"""Pluggable midpoint frame interpolation.

Three implementations behind one interface: a per-pixel blend (weakest
baseline), a classical coarse-to-fine block-matching flow interpolator,
and an oracle that renders a ground-truth model at the geodesic midpoint
pose (synthetic harness upper bound).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import ndimage

from . import geometry, splat
from .errors import DimensionMismatch
from .geometry import CameraIntrinsics, Pose


class FrameInterpolator(Protocol):
    def interpolate(self, a: np.ndarray, b: np.ndarray) -> np.ndarray: ...


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionMismatch(f"frame shapes differ: {a.shape} vs {b.shape}")


def blend_interpolate(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel average of the two frames."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    return 0.5 * a + 0.5 * b


@dataclass(frozen=True)
class FlowParams:
    levels: int = 3
    patch: int = 8
    search: int = 4
    consistency_threshold: float = 1.0   # px, forward-backward check


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    h2, w2 = h // 2 * 2, w // 2 * 2
    x = img[:h2, :w2]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _warp(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward-warp: out(x) = img(x + flow(x)); bilinear, edge-clamped."""
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [ys + flow[:, :, 1], xs + flow[:, :, 0]]
    if img.ndim == 2:
        return ndimage.map_coordinates(img, coords, order=1, mode="nearest")
    return np.stack([ndimage.map_coordinates(img[:, :, c], coords, order=1,
                                             mode="nearest")
                     for c in range(img.shape[2])], axis=2)


def _match_level(a: np.ndarray, b: np.ndarray, flow: np.ndarray,
                 params: FlowParams) -> np.ndarray:
    """Refine per-pixel integer flow a->b at one pyramid level."""
    b_w = _warp(b, flow)
    s = params.search
    pad = np.pad(b_w, s, mode="edge")
    best_cost = np.full(a.shape, np.inf)
    best_dx = np.zeros(a.shape)
    best_dy = np.zeros(a.shape)
    h, w = a.shape
    shifts = sorted(((dy, dx) for dy in range(-s, s + 1) for dx in range(-s, s + 1)),
                    key=lambda d: (abs(d[0]) + abs(d[1]), d))
    for dy, dx in shifts:
        shifted = pad[s + dy:s + dy + h, s + dx:s + dx + w]
        cost = ndimage.uniform_filter((a - shifted) ** 2, size=params.patch,
                                      mode="nearest")
        better = cost < best_cost - 1e-12    # strict: ties keep smaller shift
        best_cost = np.where(better, cost, best_cost)
        best_dx = np.where(better, dx, best_dx)
        best_dy = np.where(better, dy, best_dy)
    out = flow.copy()
    out[:, :, 0] += best_dx
    out[:, :, 1] += best_dy
    return out


def estimate_flow(a: np.ndarray, b: np.ndarray, params: FlowParams) -> np.ndarray:
    """Dense integer flow a->b: a(x) matches b(x + flow(x))."""
    ga = a.mean(axis=2) if a.ndim == 3 else a
    gb = b.mean(axis=2) if b.ndim == 3 else b
    pyr = [(ga, gb)]
    for _ in range(params.levels - 1):
        ga, gb = _downsample(ga), _downsample(gb)
        pyr.append((ga, gb))
    flow = np.zeros(pyr[-1][0].shape + (2,))
    for level, (la, lb) in enumerate(reversed(pyr)):
        if level > 0:
            flow = 2.0 * np.stack(
                [ndimage.zoom(flow[:, :, c], np.array(la.shape) / flow.shape[:2],
                              order=1, mode="nearest") for c in range(2)], axis=2)
        flow = _match_level(la, lb, flow, params)
    return flow


def flow_interpolate(a: np.ndarray, b: np.ndarray,
                     params: FlowParams | None = None) -> np.ndarray:
    """Flow-compensated midpoint: warp both frames halfway and blend with
    occlusion-aware (consistency-checked) weights; holes fall back to blend."""
    params = params or FlowParams()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    f_ab = estimate_flow(a, b, params)
    f_ba = estimate_flow(b, a, params)

    # forward-backward consistency per direction
    f_ba_at = np.stack([_warp(f_ba[:, :, c], f_ab) for c in range(2)], axis=2)
    err_a = np.linalg.norm(f_ab + f_ba_at, axis=2)
    f_ab_at = np.stack([_warp(f_ab[:, :, c], f_ba) for c in range(2)], axis=2)
    err_b = np.linalg.norm(f_ba + f_ab_at, axis=2)
    va = (err_a <= params.consistency_threshold).astype(np.float64)
    vb = (err_b <= params.consistency_threshold).astype(np.float64)

    mid_a = _warp(a, -0.5 * f_ab)
    mid_b = _warp(b, -0.5 * f_ba)
    wsum = va + vb
    blend = blend_interpolate(a, b)
    num = va[:, :, None] * mid_a + vb[:, :, None] * mid_b
    out = np.where(wsum[:, :, None] > 0, num / np.maximum(wsum, 1.0)[:, :, None], blend)
    return np.clip(out, 0.0, 1.0)


def oracle_interpolate(scene_model: splat.GaussianModel, k: CameraIntrinsics,
                       pose_a: Pose, pose_b: Pose,
                       background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Ground-truth midpoint: render the scene at the geodesic midpoint pose."""
    mid = geometry.interpolate_pose(pose_a, pose_b, 0.5)
    return splat.render(scene_model, k, mid, background)


# -- interface adapters -----------------------------------------------------

class BlendInterpolator:
    def interpolate(self, a, b):
        return blend_interpolate(a, b)


class FlowInterpolator:
    def __init__(self, params: FlowParams | None = None):
        self.params = params or FlowParams()

    def interpolate(self, a, b):
        return flow_interpolate(a, b, self.params)


class OracleMidpoints:
    """Midpoint provider keyed by frame index, for the pose-bridging path.

    Renders the ground-truth model at the midpoint of the ground-truth
    poses of frames i and i+1 (synthetic scenes only).
    """

    def __init__(self, scene_model: splat.GaussianModel, k: CameraIntrinsics,
                 gt_poses: list[Pose], background=(0.0, 0.0, 0.0)):
        self.model = scene_model
        self.k = k
        self.poses = gt_poses
        self.background = background

    def midpoint(self, i: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return oracle_interpolate(self.model, self.k, self.poses[i],
                                  self.poses[i + 1], self.background)


class InterpolatorMidpoints:
    """Adapts an image-pair interpolator to the index-keyed midpoint API."""

    def __init__(self, interpolator: FrameInterpolator):
        self.interpolator = interpolator

    def midpoint(self, i: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.interpolator.interpolate(a, b)


def make_midpoint_provider(name: str, scene=None, k=None, gt_poses=None,
                           flow_params: FlowParams | None = None):
    """Factory for the CLI: name in {'off', 'blend', 'flow', 'oracle'}."""
    if name == "off":
        return None
    if name == "blend":
        return InterpolatorMidpoints(BlendInterpolator())
    if name == "flow":
        return InterpolatorMidpoints(FlowInterpolator(flow_params))
    if name == "oracle":
        if scene is None or k is None or gt_poses is None:
            raise ValueError("oracle interpolation needs a synthetic scene")
        return OracleMidpoints(scene, k, gt_poses)
    raise ValueError(f"unknown interpolator {name!r}")
