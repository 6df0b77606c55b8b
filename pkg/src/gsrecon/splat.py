"""Differentiable CPU rasterizer for anisotropic 3D Gaussians.

Forward pass: project Gaussian centers, approximate the projected
covariance with the perspective Jacobian, evaluate a windowed 2D Gaussian
footprint per pixel and alpha-composite front to back by center depth.
Gradients (all Gaussian parameters plus a 6-DoF camera twist) come from
torch autograd over the same computation, in float64.

Models are immutable numpy snapshots; training constructs new models.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import geometry
from .errors import DimensionMismatch
from .geometry import CameraIntrinsics, Pose

EPS_DEPTH = 1e-6
LOWPASS = 0.3           # px^2 added to the 2D covariance diagonal
CUTOFF_MAHAL = 9.0      # 3-sigma elliptical footprint window
_TAPER_START = 7.0      # C1 smoothstep taper onset (keeps gradients FD-checkable)


@dataclass(frozen=True)
class GaussianModel:
    """Collection of 3D Gaussians anchored to one camera frame.

    positions (N,3) world units; log_scales (N,3); rotations (N,4) unit
    quaternions (w,x,y,z); opacity_logits (N,); colors (N,3) RGB in [0,1].
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    anchor_frame: int = 0

    def __post_init__(self):
        n = self.positions.shape[0]
        for name in ("positions", "log_scales", "rotations", "opacity_logits", "colors"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
        assert self.positions.shape == (n, 3)
        assert self.log_scales.shape == (n, 3)
        assert self.rotations.shape == (n, 4)
        assert self.opacity_logits.shape == (n,)
        assert self.colors.shape == (n, 3)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def extent(self) -> float:
        """Scene-extent estimate: largest center distance from the centroid."""
        if len(self) == 0:
            return 1.0
        d = np.linalg.norm(self.positions - self.positions.mean(axis=0), axis=1)
        return float(max(d.max(), 1e-6))

    @staticmethod
    def empty(anchor_frame: int = 0) -> "GaussianModel":
        return GaussianModel(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                             np.zeros(0), np.zeros((0, 3)), anchor_frame)

    @staticmethod
    def concatenate(a: "GaussianModel", b: "GaussianModel",
                    anchor_frame: int | None = None) -> "GaussianModel":
        return GaussianModel(
            np.concatenate([a.positions, b.positions]),
            np.concatenate([a.log_scales, b.log_scales]),
            np.concatenate([a.rotations, b.rotations]),
            np.concatenate([a.opacity_logits, b.opacity_logits]),
            np.concatenate([a.colors, b.colors]),
            a.anchor_frame if anchor_frame is None else anchor_frame)

    def take(self, idx: np.ndarray, anchor_frame: int | None = None) -> "GaussianModel":
        return GaussianModel(self.positions[idx], self.log_scales[idx],
                             self.rotations[idx], self.opacity_logits[idx],
                             self.colors[idx],
                             self.anchor_frame if anchor_frame is None else anchor_frame)


@dataclass
class RenderGrads:
    """Partials of the photometric loss, plus the 6-DoF camera twist."""

    d_positions: np.ndarray
    d_log_scales: np.ndarray
    d_rotations: np.ndarray
    d_opacity_logits: np.ndarray
    d_colors: np.ndarray
    d_twist: np.ndarray


# -- torch building blocks --------------------------------------------------

def _quat_to_mat_torch(q: torch.Tensor) -> torch.Tensor:
    """(N,4) unit quaternions -> (N,3,3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], dim=1)


def _exp_se3_torch(twist: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable SE(3) exponential; returns (R, t)."""
    w, u = twist[:3], twist[3:]
    theta2 = (w * w).sum()
    small = theta2 < 1e-10
    theta_safe = torch.where(small, torch.ones_like(theta2), theta2).sqrt()
    A = torch.where(small, 1 - theta2 / 6, torch.sin(theta_safe) / theta_safe)
    B = torch.where(small, 0.5 - theta2 / 24, (1 - torch.cos(theta_safe)) / theta2.clamp(min=1e-20))
    C = torch.where(small, 1 / 6 - theta2 / 120, (theta_safe - torch.sin(theta_safe)) / (theta_safe * theta2.clamp(min=1e-20)))
    zero = torch.zeros((), dtype=twist.dtype)
    W = torch.stack([
        torch.stack([zero, -w[2], w[1]]),
        torch.stack([w[2], zero, -w[0]]),
        torch.stack([-w[1], w[0], zero]),
    ])
    W2 = W @ W
    eye = torch.eye(3, dtype=twist.dtype)
    R = eye + A * W + B * W2
    V = eye + B * W + C * W2
    return R, V @ u


def _pose_tensors(pose: Pose, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    return (torch.from_numpy(pose.rotation_matrix()).to(dtype),
            torch.from_numpy(pose.t).to(dtype))


def _render_torch(positions, log_scales, rotations, opacity_logits, colors,
                  R_cam, t_cam, k: CameraIntrinsics, background,
                  with_depth: bool = False):
    """Core forward pass on torch tensors; returns (H, W, 3) image tensor.

    With `with_depth`, additionally returns the composited-weight sum and
    the weight-averaged center depth per pixel (detached use only).
    """
    dtype = positions.dtype
    H, W = k.height, k.width
    bg = torch.as_tensor(background, dtype=dtype).reshape(3)

    def empty_out():
        img = bg.expand(H, W, 3).clone()
        if with_depth:
            return img, torch.zeros(H, W, dtype=dtype), torch.zeros(H, W, dtype=dtype)
        return img

    if positions.shape[0] == 0:
        return empty_out()

    q = rotations / rotations.norm(dim=1, keepdim=True)
    Rg = _quat_to_mat_torch(q)                      # (N,3,3)
    S = torch.exp(log_scales)                       # (N,3)
    M = (R_cam @ Rg) * S[:, None, :]
    cov_cam = M @ M.transpose(1, 2)                 # (N,3,3)

    p_cam = positions @ R_cam.T + t_cam             # (N,3)
    z = p_cam[:, 2]
    visible = z > EPS_DEPTH
    z_safe = z.clamp(min=EPS_DEPTH)
    mx = k.fx * p_cam[:, 0] / z_safe + k.cx
    my = k.fy * p_cam[:, 1] / z_safe + k.cy

    zero = torch.zeros_like(z)
    J = torch.stack([
        torch.stack([k.fx / z_safe, zero, -k.fx * p_cam[:, 0] / z_safe ** 2], -1),
        torch.stack([zero, k.fy / z_safe, -k.fy * p_cam[:, 1] / z_safe ** 2], -1),
    ], dim=1)                                       # (N,2,3)
    cov2d = J @ cov_cam @ J.transpose(1, 2)
    a = cov2d[:, 0, 0] + LOWPASS
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + LOWPASS

    # conservative cull: the footprint is zero beyond 3 sigma, so dropping
    # Gaussians whose 3-sigma pixel box misses the image leaves the output
    # (and all surviving gradients) bit-identical
    with torch.no_grad():
        lam_max = 0.5 * (a + c) + torch.sqrt((0.5 * (a - c)) ** 2 + b * b)
        r = 3.0 * torch.sqrt(lam_max.clamp(min=0.0)) + 2.0
        keep = (visible & (mx + r > -0.5) & (mx - r < W - 0.5)
                & (my + r > -0.5) & (my - r < H - 0.5))
        idx = torch.nonzero(keep, as_tuple=False).squeeze(1)
    if idx.numel() == 0:
        return empty_out()
    z, mx, my = z[idx], mx[idx], my[idx]
    a, b, c = a[idx], b[idx], c[idx]
    opacity_logits = opacity_logits[idx]
    colors = colors[idx]

    det = (a * c - b * b).clamp(min=1e-12)
    ia, ib, ic = c / det, -b / det, a / det
    # Cholesky of the inverse covariance: mahal = (l11 dx + l21 dy)^2 + (l22 dy)^2
    l11 = torch.sqrt(ia)
    l21 = ib / l11
    l22 = torch.sqrt((ic - l21 * l21).clamp(min=1e-12))

    # depth-sort up front; all (H, W, N) tensors below are in that order so
    # the compositing scan runs along the contiguous last axis
    order = torch.argsort(z, stable=True)
    z, mx, my = z[order], mx[order], my[order]
    l11, l21, l22 = l11[order], l21[order], l22[order]
    opacity_logits = opacity_logits[order]
    colors_s = colors.clamp(0.0, 1.0)[order]

    xs = torch.arange(W, dtype=dtype)
    ys = torch.arange(H, dtype=dtype)
    dx = xs[:, None] - mx[None, :]                  # (W,N)
    dy = ys[:, None] - my[None, :]                  # (H,N)
    ax = l11[None, :] * dx                          # (W,N)
    ay = l21[None, :] * dy                          # (H,N)
    by2 = (l22[None, :] * dy) ** 2                  # (H,N)
    A = ax[None, :, :] + ay[:, None, :]             # (H,W,N)
    mahal = A * A + by2[:, None, :]
    # 3-sigma truncation via a C1 smoothstep taper (gradients stay FD-checkable)
    u = ((mahal - _TAPER_START) / (CUTOFF_MAHAL - _TAPER_START)).clamp(0.0, 1.0)
    window = 1.0 - u * u * (3.0 - 2.0 * u)
    g = torch.exp(-0.5 * mahal) * window
    alpha = torch.sigmoid(opacity_logits)
    w_s = alpha[None, None, :] * g                  # (H,W,N), depth-sorted

    # log-space front-to-back transmittance (contiguous cumsum, cheap backward)
    log_t = torch.cumsum(torch.log1p(-w_s.clamp(max=1.0 - 1e-12)), dim=-1)
    trans = torch.exp(log_t)
    t_prev = torch.cat([torch.ones(H, W, 1, dtype=dtype), trans[:, :, :-1]], dim=-1)
    contrib = w_s * t_prev                          # (H,W,N)
    img = contrib @ colors_s + trans[:, :, -1:] * bg
    if with_depth:
        acc = contrib.sum(dim=-1)
        depth = (contrib @ z.clamp(min=EPS_DEPTH)[:, None]).squeeze(-1) \
            / acc.clamp(min=1e-12)
        return img, acc, depth
    return img


def _model_tensors(model: GaussianModel, dtype, requires_grad=False):
    out = []
    for arr in (model.positions, model.log_scales, model.rotations,
                model.opacity_logits, model.colors):
        t = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
        if requires_grad:
            t = t.clone().requires_grad_(True)
        out.append(t)
    return out


# -- public operations ------------------------------------------------------

def render(model: GaussianModel, k: CameraIntrinsics, pose: Pose,
           background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Render the model to an (H, W, 3) image in [0, 1]."""
    with torch.no_grad():
        tensors = _model_tensors(model, torch.float64)
        R, t = _pose_tensors(pose, torch.float64)
        img = _render_torch(*tensors, R, t, k, background)
    return np.clip(img.numpy(), 0.0, 1.0)


def render_depth(model: GaussianModel, k: CameraIntrinsics, pose: Pose,
                 min_weight: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Alpha-weighted mean center depth per pixel; returns (depth, valid)."""
    with torch.no_grad():
        tensors = _model_tensors(model, torch.float64)
        R, t = _pose_tensors(pose, torch.float64)
        _, acc, depth = _render_torch(*tensors, R, t, k, (0.0, 0.0, 0.0),
                                      with_depth=True)
    valid = acc.numpy() > min_weight
    return depth.numpy(), valid


def render_backward(model: GaussianModel, k: CameraIntrinsics, pose: Pose,
                    target: np.ndarray, loss_cfg=None,
                    background=(0.0, 0.0, 0.0)) -> tuple[float, RenderGrads]:
    """Photometric loss against `target` plus gradients for every parameter
    and the camera twist (left-multiplied perturbation, rotation-first)."""
    from .supervision import LossConfig, photometric_loss_torch
    loss_cfg = loss_cfg or LossConfig()
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (k.height, k.width, 3):
        raise DimensionMismatch(
            f"target shape {target.shape} != {(k.height, k.width, 3)}")
    tensors = _model_tensors(model, torch.float64, requires_grad=True)
    twist = torch.zeros(6, dtype=torch.float64, requires_grad=True)
    R0, t0 = _pose_tensors(pose, torch.float64)
    Rd, td = _exp_se3_torch(twist)
    R_eff = Rd @ R0
    t_eff = Rd @ t0 + td
    img = _render_torch(*tensors, R_eff, t_eff, k, background)
    loss = photometric_loss_torch(img, torch.from_numpy(target), loss_cfg)
    if loss.requires_grad:
        loss.backward()   # an all-culled view has no graph; grads stay zero

    def grad(t, shape):
        return t.grad.numpy().copy() if t.grad is not None else np.zeros(shape)

    n = len(model)
    grads = RenderGrads(
        d_positions=grad(tensors[0], (n, 3)),
        d_log_scales=grad(tensors[1], (n, 3)),
        d_rotations=grad(tensors[2], (n, 4)),
        d_opacity_logits=grad(tensors[3], (n,)),
        d_colors=grad(tensors[4], (n, 3)),
        d_twist=grad(twist, (6,)),
    )
    return float(loss.detach()), grads


def transform_model(model: GaussianModel, t: Pose) -> GaussianModel:
    """Apply a rigid transform to every Gaussian (positions and rotations)."""
    if len(model) == 0:
        return model
    R = t.rotation_matrix()
    positions = model.positions @ R.T + t.t
    tq = t.q
    q = model.rotations
    rotations = np.stack([
        tq[0] * q[:, 0] - tq[1] * q[:, 1] - tq[2] * q[:, 2] - tq[3] * q[:, 3],
        tq[0] * q[:, 1] + tq[1] * q[:, 0] + tq[2] * q[:, 3] - tq[3] * q[:, 2],
        tq[0] * q[:, 2] - tq[1] * q[:, 3] + tq[2] * q[:, 0] + tq[3] * q[:, 1],
        tq[0] * q[:, 3] + tq[1] * q[:, 2] - tq[2] * q[:, 1] + tq[3] * q[:, 0],
    ], axis=1)
    return replace(model, positions=positions, rotations=rotations)


# -- adaptive density control ----------------------------------------------

@dataclass
class DensityControlState:
    """Accumulated positional-gradient statistics and densify thresholds."""

    grad_accum: np.ndarray
    counts: np.ndarray
    grad_threshold: float = 2e-4
    opacity_floor: float = 0.005
    scale_split_threshold: float = 0.01
    interval: int = 100
    split_scale_divisor: float = 1.6
    max_gaussians: int | None = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @staticmethod
    def fresh(n: int, **kwargs) -> "DensityControlState":
        return DensityControlState(np.zeros(n), np.zeros(n, dtype=np.int64), **kwargs)

    def accumulate(self, positional_grads: np.ndarray):
        self.grad_accum += np.linalg.norm(positional_grads, axis=1)
        self.counts += 1

    def reset(self, n: int):
        self.grad_accum = np.zeros(n)
        self.counts = np.zeros(n, dtype=np.int64)


def _sample_offsets(model: GaussianModel, idx: np.ndarray,
                    rng: np.random.Generator, clip_norm: float | None) -> np.ndarray:
    """Offsets drawn from each selected Gaussian's own covariance."""
    eps = rng.standard_normal((idx.size, 3))
    if clip_norm is not None:
        norms = np.linalg.norm(eps, axis=1, keepdims=True)
        eps = np.where(norms > clip_norm, eps * (clip_norm / norms), eps)
    R = np.stack([geometry.quat_to_mat(geometry.quat_normalize(q))
                  for q in model.rotations[idx]]) if idx.size else np.zeros((0, 3, 3))
    scaled = eps * np.exp(model.log_scales[idx])
    return np.einsum("nij,nj->ni", R, scaled)


def densify_and_prune(model: GaussianModel, state: DensityControlState) -> GaussianModel:
    """Clone/split high-gradient Gaussians, prune low-opacity ones.

    Accumulators in `state` are reset (and resized) afterwards.
    """
    n = len(model)
    counts = np.maximum(state.counts, 1)
    mean_grad = state.grad_accum / counts
    high = (mean_grad > state.grad_threshold) & (state.counts > 0)
    max_scale = np.exp(model.log_scales).max(axis=1) if n else np.zeros(0)
    clone_mask = high & (max_scale < state.scale_split_threshold)
    split_mask = high & (max_scale >= state.scale_split_threshold)

    if state.max_gaussians is not None:
        budget = max(0, state.max_gaussians - n)
        growth = int(clone_mask.sum() + 2 * split_mask.sum())
        if growth > budget:
            # keep the highest-gradient candidates within budget
            cand = np.where(clone_mask | split_mask)[0]
            order = cand[np.argsort(-mean_grad[cand], kind="stable")]
            allowed = np.zeros(n, dtype=bool)
            used = 0
            for i in order:
                cost = 2 if split_mask[i] else 1
                if used + cost > budget:
                    continue
                allowed[i] = True
                used += cost
            clone_mask &= allowed
            split_mask &= allowed

    keep = ~split_mask
    parts = [model.take(np.where(keep)[0])]

    clone_idx = np.where(clone_mask)[0]
    if clone_idx.size:
        clones = model.take(clone_idx)
        offsets = _sample_offsets(model, clone_idx, state.rng, clip_norm=1.0)
        clones = replace(clones, positions=clones.positions + offsets)
        parts.append(clones)

    split_idx = np.where(split_mask)[0]
    for _ in range(2):
        if split_idx.size:
            children = model.take(split_idx)
            offsets = _sample_offsets(model, split_idx, state.rng, clip_norm=None)
            children = replace(children,
                               positions=children.positions + offsets,
                               log_scales=children.log_scales - np.log(state.split_scale_divisor))
            parts.append(children)

    out = parts[0]
    for part in parts[1:]:
        out = GaussianModel.concatenate(out, part)

    alive = out.opacities() >= state.opacity_floor
    out = out.take(np.where(alive)[0])
    state.reset(len(out))
    return out


# -- optimization -----------------------------------------------------------

@dataclass
class LearningRates:
    """Per-parameter Adam step sizes; position scales with scene extent."""

    position: float = 2e-3
    log_scale: float = 5e-3
    rotation: float = 1e-3
    opacity: float = 5e-2
    color: float = 1e-2


class GaussianTrainer:
    """Adam-based optimizer over one model's parameters.

    Drives the densify/prune schedule from accumulated positional gradients
    and renormalizes quaternions after every step.  Deterministic given the
    supplied rng and a fixed thread count.
    """

    def __init__(self, model: GaussianModel, k: CameraIntrinsics, loss_cfg=None,
                 extent: float | None = None, densify_interval: int = 100,
                 grad_threshold: float = 2e-4, opacity_floor: float = 0.005,
                 max_gaussians: int | None = None,
                 rng: np.random.Generator | None = None,
                 lrs: LearningRates | None = None, lr_scale: float = 1.0,
                 dtype: str = "float32", background=(0.0, 0.0, 0.0),
                 densify: bool = True, total_iterations: int | None = None,
                 final_lr_fraction: float = 0.05):
        from .supervision import LossConfig
        self.k = k
        self.loss_cfg = loss_cfg or LossConfig()
        self.extent = float(extent if extent is not None else model.extent())
        self.anchor_frame = model.anchor_frame
        self.background = background
        self.dtype = torch.float64 if dtype == "float64" else torch.float32
        self.lrs = lrs or LearningRates()
        self.lr_scale = lr_scale
        # exponential decay toward final_lr_fraction over total_iterations
        # settles the stochastic single-view updates instead of oscillating
        self.total_iterations = total_iterations
        self.final_lr_fraction = final_lr_fraction
        self.densify_enabled = densify
        self.state = DensityControlState.fresh(
            len(model), grad_threshold=grad_threshold, opacity_floor=opacity_floor,
            scale_split_threshold=0.01 * self.extent, interval=densify_interval,
            max_gaussians=max_gaussians,
            rng=rng if rng is not None else np.random.default_rng(0))
        self.iteration = 0
        self._target_cache: dict[int, torch.Tensor] = {}
        self._set_params(model)

    def _set_params(self, model: GaussianModel):
        self.params = _model_tensors(model, self.dtype, requires_grad=True)
        self._base_lr = [self.lrs.position * self.extent, self.lrs.log_scale,
                         self.lrs.rotation, self.lrs.opacity, self.lrs.color]
        self.optimizer = torch.optim.Adam(
            [{"params": [p], "lr": l * self.lr_scale}
             for p, l in zip(self.params, self._base_lr)], eps=1e-15)

    def _decay_factor(self) -> float:
        if not self.total_iterations:
            return 1.0
        frac = min(self.iteration / self.total_iterations, 1.0)
        return self.final_lr_fraction ** frac

    def _target(self, image: np.ndarray) -> torch.Tensor:
        key = id(image)
        if key not in self._target_cache:
            self._target_cache[key] = torch.from_numpy(
                np.asarray(image, dtype=np.float64)).to(self.dtype)
        return self._target_cache[key]

    def step(self, pose: Pose, target: np.ndarray) -> float:
        """One optimization iteration against one target image."""
        from .supervision import photometric_loss_torch
        self.optimizer.zero_grad(set_to_none=True)
        R, t = _pose_tensors(pose, self.dtype)
        img = _render_torch(*self.params, R, t, self.k, self.background)
        loss = photometric_loss_torch(img, self._target(target), self.loss_cfg)
        if not loss.requires_grad:
            # nothing renders from this pose; no signal for this iteration
            self.iteration += 1
            return float(loss)
        loss.backward()
        if self.params[0].grad is not None:
            self.state.accumulate(self.params[0].grad.detach().numpy().astype(np.float64))
        decay = self._decay_factor()
        for group, base in zip(self.optimizer.param_groups, self._base_lr):
            group["lr"] = base * self.lr_scale * decay
        self.optimizer.step()
        with torch.no_grad():
            q = self.params[2]
            q /= q.norm(dim=1, keepdim=True).clamp(min=1e-12)
        self.iteration += 1
        if (self.densify_enabled and self.state.interval > 0
                and self.iteration % self.state.interval == 0):
            self._densify()
        return float(loss.detach())

    def _densify(self):
        model = self.snapshot()
        model = densify_and_prune(model, self.state)
        self._set_params(model)

    def snapshot(self) -> GaussianModel:
        arrs = [p.detach().to(torch.float64).numpy().copy() for p in self.params]
        return GaussianModel(*arrs, anchor_frame=self.anchor_frame)
