"""Synthetic scene generation, sequence ingestion, splits and persistence.

The synthetic harness stands in for real video benchmarks: a ground-truth
Gaussian model plus a trajectory that keeps the scene in frustum, with
depth maps rendered from the model.  All generators are pure functions of
(spec, seed).

File formats (all little-endian / plain text, one-line headers):
  - manifest:   ``gsmanifest 1`` then key/value and ``frame`` lines
  - trajectory: ``gstraj 1`` then ``index qw qx qy qz tx ty tz`` per line
  - checkpoint: magic ``GSCK``, u32 version, i64 count, i64 anchor_frame,
    then positions, log_scales, rotations, opacity_logits, colors as raw
    float64 arrays (bit-exact round trip)
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PilImage

from . import geometry, splat
from .errors import InvalidSpec, MissingFile, ParseError, TooFewFrames
from .geometry import CameraIntrinsics, Pose

CHECKPOINT_MAGIC = b"GSCK"
CHECKPOINT_VERSION = 1


# -- depth ------------------------------------------------------------------

@dataclass
class DepthMap:
    """Per-pixel depth in world units with a validity mask."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        assert self.values.shape == self.valid.shape

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


def constant_depth(k: CameraIntrinsics, value: float) -> DepthMap:
    return DepthMap(np.full((k.height, k.width), float(value)),
                    np.ones((k.height, k.width), dtype=bool))


def depth_from_model(model: splat.GaussianModel, k: CameraIntrinsics,
                     pose: Pose) -> DepthMap:
    values, valid = splat.render_depth(model, k, pose)
    return DepthMap(values, valid)


# -- synthetic scenes -------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    """Generator parameters for a desk-scale synthetic scene."""

    kind: str = "orbit"            # orbit | dolly | pan | random-walk
    n_frames: int = 16
    n_gaussians: int = 120
    width: int = 64
    height: int = 64
    fov_deg: float = 60.0
    n_clusters: int = 1
    cluster_spread: float = 0.45   # world units, gaussian centers around cluster
    scene_distance: float = 2.5    # nominal distance of content from frame 0
    scale_range: tuple[float, float] = (0.04, 0.12)
    step: float = 0.03             # dolly translation / walk step per frame
    sweep_deg: float = 20.0        # total orbit / pan rotation


def intrinsics_for(spec: SceneSpec) -> CameraIntrinsics:
    """Pinhole intrinsics implied by a spec's resolution and field of view."""
    f = 0.5 * spec.width / np.tan(0.5 * np.radians(spec.fov_deg))
    return CameraIntrinsics(f, f, spec.width / 2.0, spec.height / 2.0,
                            spec.width, spec.height)


def _look_at(center: np.ndarray, target: np.ndarray) -> Pose:
    """World-to-camera pose for a camera at `center` looking at `target`."""
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, -1.0, 0.0])  # image y grows downward
    right = np.cross(up, fwd)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # rows: camera axes in world coords
    return Pose.from_rt(R, -R @ center)


@dataclass
class SyntheticScene:
    """Ground-truth model + trajectory + intrinsics, deterministic per seed."""

    model: splat.GaussianModel
    poses: list[Pose]
    intrinsics: CameraIntrinsics
    seed: int
    spec: SceneSpec
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def render_frame(self, i: int) -> np.ndarray:
        return splat.render(self.model, self.intrinsics, self.poses[i],
                            self.background)

    def frames(self) -> list[np.ndarray]:
        return [self.render_frame(i) for i in range(len(self.poses))]

    def depth(self, i: int) -> DepthMap:
        return depth_from_model(self.model, self.intrinsics, self.poses[i])


def _trajectory(spec: SceneSpec, rng: np.random.Generator) -> list[Pose]:
    n = spec.n_frames
    target = np.array([0.0, 0.0, spec.scene_distance])
    if spec.kind == "dolly":
        rel = [Pose(np.array([1.0, 0, 0, 0]), [0.0, 0.0, spec.step])
               for _ in range(n - 1)]
        # w2c translation grows by +step per frame: camera advances toward +z
        return geometry.chain_relative_poses(rel)[:n] if n > 1 else [Pose.identity()]
    if spec.kind == "orbit":
        radius = spec.scene_distance
        sweep = np.radians(spec.sweep_deg)
        poses = []
        for i in range(n):
            theta = -0.5 * sweep + sweep * (i / max(n - 1, 1))
            center = target + radius * np.array([np.sin(theta), 0.0, -np.cos(theta)])
            poses.append(_look_at(center, target))
    elif spec.kind == "pan":
        sweep = np.radians(spec.sweep_deg)
        poses = []
        for i in range(n):
            theta = -0.5 * sweep + sweep * (i / max(n - 1, 1))
            poses.append(Pose.from_axis_angle([0.0, 1.0, 0.0], -theta))
    elif spec.kind == "random-walk":
        rels = []
        for _ in range(n - 1):
            w = rng.normal(0.0, 0.2 * spec.step, 3)
            u = rng.normal(0.0, spec.step, 3)
            rels.append(geometry.exp_se3(np.concatenate([w, u])))
        poses = geometry.chain_relative_poses(rels)[:n] if n > 1 else [Pose.identity()]
    else:
        raise InvalidSpec(f"unknown trajectory kind {spec.kind!r}")
    return poses


def _cluster_centers(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Cluster anchors spread across the trajectory's field of regard."""
    if spec.kind in ("pan", "orbit"):
        # place clusters along the angular sweep so early frames see only part
        sweep = np.radians(spec.sweep_deg)
        angles = np.linspace(-0.5 * sweep, 0.5 * sweep, max(spec.n_clusters, 1))
        r = spec.scene_distance
        centers = np.stack([r * np.sin(angles), np.zeros_like(angles),
                            r * np.cos(angles) if spec.kind == "pan"
                            else np.full_like(angles, spec.scene_distance)], axis=1)
        if spec.kind == "orbit":
            centers[:, 2] = spec.scene_distance + 0.3 * np.cos(angles * 2)
        return centers
    base = np.array([0.0, 0.0, spec.scene_distance])
    offs = rng.uniform(-0.8, 0.8, (max(spec.n_clusters, 1), 3)) * [1.0, 0.6, 0.5]
    return base + offs


def generate_scene(spec: SceneSpec, seed: int) -> SyntheticScene:
    """Deterministic synthetic scene; raises InvalidSpec on degenerate input."""
    if spec.n_gaussians < 1:
        raise InvalidSpec("need at least one Gaussian")
    if spec.n_frames < 1:
        raise InvalidSpec("need at least one frame")
    if spec.kind not in ("orbit", "dolly", "pan", "random-walk"):
        raise InvalidSpec(f"unknown trajectory kind {spec.kind!r}")
    rng = np.random.default_rng(seed)
    poses = _trajectory(spec, rng)
    k = intrinsics_for(spec)

    centers = _cluster_centers(spec, rng)
    # round-robin assignment keeps every region populated
    assign = np.arange(spec.n_gaussians) % centers.shape[0]
    positions = centers[assign] + rng.normal(0.0, spec.cluster_spread,
                                             (spec.n_gaussians, 3))
    lo, hi = spec.scale_range
    log_scales = np.log(rng.uniform(lo, hi, (spec.n_gaussians, 3)))
    rotations = rng.standard_normal((spec.n_gaussians, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opacity_logits = rng.uniform(0.5, 2.5, spec.n_gaussians)
    colors = rng.uniform(0.08, 0.95, (spec.n_gaussians, 3))
    model = splat.GaussianModel(positions, log_scales, rotations,
                                opacity_logits, colors, anchor_frame=0)

    # express everything in the first camera's frame so poses[0] is identity
    model = splat.transform_model(model, poses[0])
    first_inv = geometry.invert(poses[0])
    poses = [geometry.compose(p, first_inv) for p in poses]

    for i, pose in enumerate(poses):
        cam = pose.apply(model.positions)
        z = cam[:, 2]
        u = k.fx * cam[:, 0] / np.maximum(z, 1e-9) + k.cx
        v = k.fy * cam[:, 1] / np.maximum(z, 1e-9) + k.cy
        seen = (z > 0.1) & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
        if not seen.any():
            raise InvalidSpec(f"frame {i} sees no Gaussians; adjust the spec")
    return SyntheticScene(model, poses, k, seed, spec)


# -- train/test split -------------------------------------------------------

def split_frames(n: int, mode: str = "paper") -> tuple[list[int], list[int]]:
    """(train, test) indices.  'paper': every 8th frame (last of each group of
    8) is a test frame; 'alternate': every other frame; 'none': all train."""
    if mode == "none":
        return list(range(n)), []
    if mode == "paper":
        if n < 8:
            raise TooFewFrames(f"paper split needs >= 8 frames, got {n}")
        test = [i for i in range(n) if i % 8 == 7]
    elif mode == "alternate":
        test = [i for i in range(n) if i % 2 == 1]
    else:
        raise ParseError(f"unknown split mode {mode!r}")
    train = [i for i in range(n) if i not in set(test)]
    return train, test


# -- images -----------------------------------------------------------------

def save_image(image: np.ndarray, path: str | Path):
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    atomic_write(path, lambda p: PilImage.fromarray(data, mode="RGB").save(p, format="PNG"))


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"missing image file: {path}")
    with PilImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_depth(depth: DepthMap, path: str | Path):
    values = np.where(depth.valid, depth.values, 0.0)
    def write(p):
        # np.save appends ".npy" to bare paths; hand it an open file instead
        with open(p, "wb") as f:
            np.save(f, values, allow_pickle=False)
    atomic_write(path, write)


def load_depth(path: str | Path) -> DepthMap:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"missing depth file: {path}")
    values = np.load(path, allow_pickle=False)
    return DepthMap(values, values > 0)


# -- atomic writes ----------------------------------------------------------

def atomic_write(path: str | Path, writer):
    """Write via a temp file + rename so partial outputs never land."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def atomic_write_text(path: str | Path, text: str):
    atomic_write(path, lambda p: Path(p).write_text(text))


# -- trajectory text codec --------------------------------------------------

def _format_index(idx: float) -> str:
    return str(int(idx)) if float(idx).is_integer() else f"{idx:.1f}"


def save_trajectory(items: list[tuple[float, Pose]], path: str | Path):
    lines = ["gstraj 1"]
    for idx, pose in items:
        nums = " ".join(f"{v:.17g}" for v in pose.as_vector())
        lines.append(f"{_format_index(idx)} {nums}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_trajectory(path: str | Path) -> list[tuple[float, Pose]]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"missing trajectory file: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0].split() != ["gstraj", "1"]:
        raise ParseError("bad trajectory header", path=path, line=1)
    items = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(f"expected 8 fields, got {len(parts)}", path=path, line=ln)
        try:
            idx = float(parts[0])
            nums = [float(x) for x in parts[1:]]
        except ValueError as e:
            raise ParseError(str(e), path=path, line=ln)
        items.append((idx, Pose(np.array(nums[:4]), np.array(nums[4:]))))
    return items


# -- model checkpoints ------------------------------------------------------

def save_model(model: splat.GaussianModel, path: str | Path):
    def write(p):
        with open(p, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<Iqq", CHECKPOINT_VERSION, len(model),
                                model.anchor_frame))
            for arr in (model.positions, model.log_scales, model.rotations,
                        model.opacity_logits, model.colors):
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    atomic_write(path, write)


def load_model(path: str | Path) -> splat.GaussianModel:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"missing checkpoint file: {path}")
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError("bad checkpoint magic", path=path)
    version, count, anchor = struct.unpack_from("<Iqq", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unknown checkpoint version {version}", path=path)
    offset = 4 + struct.calcsize("<Iqq")
    shapes = [(count, 3), (count, 3), (count, 4), (count,), (count, 3)]
    arrays = []
    for shape in shapes:
        size = int(np.prod(shape)) * 8
        if offset + size > len(raw):
            raise ParseError("truncated checkpoint", path=path)
        arrays.append(np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)),
                                    offset=offset).reshape(shape).copy())
        offset += size
    return splat.GaussianModel(*arrays, anchor_frame=int(anchor))


# -- sequence manifests -----------------------------------------------------

@dataclass
class SequenceManifest:
    """Ordered frame references with intrinsics, splits and optional truth."""

    intrinsics: CameraIntrinsics
    frame_paths: list[str]
    depth_paths: list[str | None] = field(default_factory=list)
    gt_trajectory: str | None = None
    split_mode: str = "paper"
    base_dir: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        return self.base_dir / rel

    def split(self) -> tuple[list[int], list[int]]:
        return split_frames(len(self.frame_paths), self.split_mode)


def save_manifest(manifest: SequenceManifest, path: str | Path):
    lines = ["gsmanifest 1"]
    ki = manifest.intrinsics
    lines.append(f"intrinsics {ki.fx:.17g} {ki.fy:.17g} {ki.cx:.17g} "
                 f"{ki.cy:.17g} {ki.width} {ki.height}")
    lines.append(f"split {manifest.split_mode}")
    if manifest.gt_trajectory:
        lines.append(f"gt_trajectory {manifest.gt_trajectory}")
    depths = manifest.depth_paths or [None] * len(manifest.frame_paths)
    for fp, dp in zip(manifest.frame_paths, depths):
        lines.append(f"frame {fp} {dp}" if dp else f"frame {fp}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> SequenceManifest:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"missing manifest file: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0].split() != ["gsmanifest", "1"]:
        raise ParseError("bad manifest header", path=path, line=1)
    intrinsics = None
    frame_paths: list[str] = []
    depth_paths: list[str | None] = []
    gt_trajectory = None
    split_mode = "paper"
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        try:
            if key == "intrinsics":
                fx, fy, cx, cy = map(float, parts[1:5])
                w, h = int(parts[5]), int(parts[6])
                intrinsics = CameraIntrinsics(fx, fy, cx, cy, w, h)
            elif key == "split":
                split_mode = parts[1]
            elif key == "gt_trajectory":
                gt_trajectory = parts[1]
            elif key == "frame":
                frame_paths.append(parts[1])
                depth_paths.append(parts[2] if len(parts) > 2 else None)
            else:
                raise ParseError(f"unknown manifest key {key!r}", path=path, line=ln)
        except (IndexError, ValueError) as e:
            raise ParseError(f"malformed {key} line: {e}", path=path, line=ln)
    if intrinsics is None:
        raise ParseError("manifest has no intrinsics line", path=path)
    if not frame_paths:
        raise ParseError("manifest lists no frames", path=path)
    return SequenceManifest(intrinsics, frame_paths, depth_paths,
                            gt_trajectory, split_mode, base_dir=path.parent)


def load_sequence(manifest_path: str | Path):
    """Load a manifest plus its frames and any referenced depth maps.

    Returns (frames, depths, manifest); depths entries are None where the
    manifest does not reference a depth file.
    """
    manifest = load_manifest(manifest_path)
    frames = [load_image(manifest.resolve(p)) for p in manifest.frame_paths]
    depths = [load_depth(manifest.resolve(p)) if p else None
              for p in manifest.depth_paths]
    k = manifest.intrinsics
    for i, fr in enumerate(frames):
        if fr.shape != (k.height, k.width, 3):
            raise ParseError(f"frame {i} shape {fr.shape} does not match "
                             f"intrinsics {(k.height, k.width, 3)}",
                             path=manifest_path)
    return frames, depths, manifest
