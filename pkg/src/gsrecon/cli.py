"""Command-line surface: reproducible experiments over the reconstruction
pipeline.

Every command resolves a flat key=value run configuration (file plus
``-o key=value`` overrides), writes the fully resolved config into its
output directory, and writes all artifacts atomically.  Report-producing
commands render a matplotlib figure next to each delimited text output.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import data, geometry, hierarchy, interp, metrics, plots, posing, splat
from .errors import ConfigError, DataError, GsreconError, NumericError, ParseError
from .geometry import Pose
from .hierarchy import HierarchyConfig
from .posing import PoseEstimationConfig
from .supervision import LossConfig


# -- run configuration -------------------------------------------------------

def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (type constructor, default).  -1 means "unset" for optional ints.
CONFIG_KEYS: dict[str, tuple] = {
    "seed": (int, 0),
    "schedule": (str, "hierarchical"),   # hierarchical|progressive|baseline|global
    "split": (str, "paper"),             # paper|alternate|none
    "interpolator": (str, "off"),        # off|blend|flow
    "pose.source": (str, "estimate"),    # estimate|ground-truth
    "pose.fit_iterations": (int, 150),
    "pose.fit_max_points": (int, 2000),
    "pose.fit_opacity": (float, 0.8),
    "pose.fit_scale_factor": (float, 0.6),
    "pose.pair_iterations": (int, 300),
    "pose.rotation_lr": (float, 5e-3),
    "pose.translation_lr": (float, 1e-2),
    "pose.patience": (int, 40),
    "pose.tolerance": (float, 1e-6),
    "pose.divergence_factor": (float, 10.0),
    "pose.constant_depth": (float, 2.5),
    "pose.dtype": (str, "float32"),
    "hier.levels": (int, 2),
    "hier.gamma": (float, 0.5),
    "hier.iterations_per_frame": (int, 300),
    "hier.polish_per_frame": (int, 0),
    "hier.retrain_iterations_per_frame": (int, -1),
    "hier.retrain_lr_scale": (float, 0.3),
    "hier.retrain_densify_interval": (int, 0),
    "hier.lr_decay": (_parse_bool, False),
    "hier.densify_interval": (int, 100),
    "hier.overlap": (int, 1),
    "hier.min_segment": (int, 2),
    "hier.equal_partition": (_parse_bool, False),
    "hier.seed_points": (int, 300),
    "hier.max_gaussians": (int, -1),
    "hier.grad_threshold": (float, 2e-4),
    "hier.n_pseudo_per_gap": (int, 1),
    "hier.source_probability": (float, 0.5),
    "hier.importance_aggregate": (str, "sum"),
    "hier.lr_scale": (float, 1.0),
    "hier.dtype": (str, "float32"),
    "loss.lambda": (float, 0.2),
    "scene.kind": (str, "orbit"),
    "scene.n_frames": (int, 16),
    "scene.n_gaussians": (int, 120),
    "scene.width": (int, 64),
    "scene.height": (int, 64),
    "scene.fov_deg": (float, 60.0),
    "scene.n_clusters": (int, 1),
    "scene.cluster_spread": (float, 0.45),
    "scene.scene_distance": (float, 2.5),
    "scene.scale_min": (float, 0.04),
    "scene.scale_max": (float, 0.12),
    "scene.step": (float, 0.03),
    "scene.sweep_deg": (float, 20.0),
    "ablate.levels": (str, "0,2"),
    "ablate.schedules": (str, "baseline,global,progressive,hierarchical"),
    "ablate.interpolators": (str, "off"),
    "ablate.base_supervision": (str, "on"),
}


class RunConfig:
    """Flat, fully-resolved key=value configuration."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key: str):
        return self.values[key]

    @staticmethod
    def resolve(config_file: str | None, overrides: tuple[str, ...]) -> "RunConfig":
        values = {k: default for k, (_, default) in CONFIG_KEYS.items()}

        def apply(key: str, raw: str, where: str):
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key {key!r} ({where})")
            ctor = CONFIG_KEYS[key][0]
            try:
                values[key] = ctor(raw)
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {e} ({where})")

        if config_file is not None:
            path = Path(config_file)
            if not path.exists():
                raise ConfigError(f"missing config file: {path}")
            for ln, line in enumerate(path.read_text().splitlines(), start=1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"expected key = value at {path}:{ln}")
                key, raw = (s.strip() for s in stripped.split("=", 1))
                apply(key, raw, f"{path}:{ln}")
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must be key=value, got {item!r}")
            key, raw = (s.strip() for s in item.split("=", 1))
            apply(key, raw, "command line")
        return RunConfig(values)

    def dump(self) -> str:
        return "\n".join(f"{k} = {self.values[k]}" for k in sorted(self.values)) + "\n"

    def scene_spec(self) -> data.SceneSpec:
        v = self.values
        return data.SceneSpec(
            kind=v["scene.kind"], n_frames=v["scene.n_frames"],
            n_gaussians=v["scene.n_gaussians"], width=v["scene.width"],
            height=v["scene.height"], fov_deg=v["scene.fov_deg"],
            n_clusters=v["scene.n_clusters"],
            cluster_spread=v["scene.cluster_spread"],
            scene_distance=v["scene.scene_distance"],
            scale_range=(v["scene.scale_min"], v["scene.scale_max"]),
            step=v["scene.step"], sweep_deg=v["scene.sweep_deg"])

    def loss_config(self) -> LossConfig:
        try:
            return LossConfig(lam=self.values["loss.lambda"])
        except ValueError as e:
            raise ConfigError(str(e))

    def pose_config(self) -> PoseEstimationConfig:
        v = self.values
        return PoseEstimationConfig(
            fit_iterations=v["pose.fit_iterations"],
            fit_max_points=v["pose.fit_max_points"],
            fit_opacity=v["pose.fit_opacity"],
            fit_scale_factor=v["pose.fit_scale_factor"],
            pair_iterations=v["pose.pair_iterations"],
            rotation_lr=v["pose.rotation_lr"],
            translation_lr=v["pose.translation_lr"],
            patience=v["pose.patience"], tolerance=v["pose.tolerance"],
            divergence_factor=v["pose.divergence_factor"],
            loss=self.loss_config(), dtype=v["pose.dtype"],
            constant_depth=v["pose.constant_depth"], seed=v["seed"])

    def hierarchy_config(self, levels: int | None = None,
                         source_probability: float | None = None) -> HierarchyConfig:
        v = self.values
        rip = v["hier.retrain_iterations_per_frame"]
        cap = v["hier.max_gaussians"]
        return HierarchyConfig(
            levels=v["hier.levels"] if levels is None else levels,
            gamma=v["hier.gamma"],
            iterations_per_frame=v["hier.iterations_per_frame"],
            polish_per_frame=v["hier.polish_per_frame"],
            retrain_iterations_per_frame=None if rip < 0 else rip,
            retrain_lr_scale=v["hier.retrain_lr_scale"],
            retrain_densify_interval=v["hier.retrain_densify_interval"],
            lr_decay=v["hier.lr_decay"],
            densify_interval=v["hier.densify_interval"],
            overlap=v["hier.overlap"], min_segment=v["hier.min_segment"],
            equal_partition=v["hier.equal_partition"],
            seed_points=v["hier.seed_points"],
            max_gaussians=None if cap < 0 else cap,
            grad_threshold=v["hier.grad_threshold"],
            n_pseudo_per_gap=v["hier.n_pseudo_per_gap"],
            source_probability=(v["hier.source_probability"]
                                if source_probability is None
                                else source_probability),
            importance_aggregate=v["hier.importance_aggregate"],
            loss=self.loss_config(), dtype=v["hier.dtype"],
            lr_scale=v["hier.lr_scale"], seed=v["seed"])


# -- shared helpers ----------------------------------------------------------

def _write_config(cfg: RunConfig, out: Path):
    data.atomic_write_text(out / "config.txt", cfg.dump())


def _load_gt_trajectory(manifest: data.SequenceManifest) -> posing.Trajectory:
    if not manifest.gt_trajectory:
        raise DataError("manifest has no gt_trajectory entry")
    items = data.load_trajectory(manifest.resolve(manifest.gt_trajectory))
    return posing.Trajectory(items)


def _estimate_or_load_trajectory(frames, depths, manifest, cfg: RunConfig,
                                 log: list[str]) -> posing.Trajectory:
    if cfg["pose.source"] == "ground-truth":
        return _load_gt_trajectory(manifest)
    if cfg["pose.source"] != "estimate":
        raise ConfigError(f"unknown pose.source {cfg['pose.source']!r}")
    midpoints = interp.make_midpoint_provider(cfg["interpolator"]) \
        if cfg["interpolator"] != "off" else None
    return posing.estimate_trajectory(frames, manifest.intrinsics,
                                      cfg.pose_config(), depths=depths,
                                      midpoints=midpoints, log=log)


def _half_frames(frames, cfg: RunConfig) -> dict[float, np.ndarray]:
    if cfg["interpolator"] == "off":
        return {}
    provider = interp.make_midpoint_provider(cfg["interpolator"])
    return {i + 0.5: provider.midpoint(i, frames[i], frames[i + 1])
            for i in range(len(frames) - 1)}


def _ensure_half_poses(traj: posing.Trajectory, frames_half: dict):
    """Give every interpolated frame a pose, geodesic when not estimated."""
    for idx in frames_half:
        if not traj.has(idx):
            i = int(idx)
            traj.set_pose(idx, geometry.interpolate_pose(
                traj.pose_at(i), traj.pose_at(i + 1), 0.5))


def _depth_list(depths, n, k, constant: float):
    return [d if d is not None else data.constant_depth(k, constant)
            for d in (depths + [None] * (n - len(depths)))[:n]]


def _run_training(frames, depths, manifest, cfg: RunConfig, out: Path):
    k = manifest.intrinsics
    n = len(frames)
    pose_log: list[str] = []
    traj = _estimate_or_load_trajectory(frames, depths, manifest, cfg, pose_log)
    train, _ = data.split_frames(n, cfg["split"])
    frames_half = _half_frames(frames, cfg)
    _ensure_half_poses(traj, frames_half)
    merge_log: list[str] = []
    hcfg = cfg.hierarchy_config()
    schedule = cfg["schedule"]
    if schedule not in hierarchy.SCHEDULES:
        raise ConfigError(f"unknown schedule {schedule!r}; "
                          f"choose from {sorted(hierarchy.SCHEDULES)}")
    full_depths = _depth_list(depths, n, k, cfg["pose.constant_depth"])
    model = hierarchy.run_schedule(schedule, frames, traj, k, full_depths,
                                   hcfg, train_indices=set(train),
                                   frames_half=frames_half or None,
                                   log=merge_log)
    data.save_model(model, out / "model.ckpt")
    data.save_trajectory(traj.items(), out / "trajectory.txt")
    data.atomic_write_text(out / "pose_log.txt", "\n".join(pose_log) + "\n")
    data.atomic_write_text(out / "merge_log.txt", "\n".join(merge_log) + "\n")
    plots.plot_estimated_trajectory(traj, out / "trajectory.png")
    return model, traj


# -- command surface ---------------------------------------------------------

def _run(body):
    try:
        body()
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(2)
    except DataError as e:
        click.echo(f"data error: {e}", err=True)
        sys.exit(3)
    except NumericError as e:
        click.echo(f"numeric error: {e}", err=True)
        sys.exit(4)
    except GsreconError as e:  # pragma: no cover - catch-all for new subtypes
        click.echo(f"error: {e}", err=True)
        sys.exit(3)


@click.group()
@click.option("--threads", type=int, default=1, show_default=True,
              help="Worker-thread cap for numeric kernels.")
def main(threads):
    """Desk-scale 3D Gaussian splatting reconstruction without SfM."""
    torch.set_num_threads(max(threads, 1))


def _config_options(f):
    f = click.option("--config", "config_file", type=str, default=None,
                     help="Plain-text key = value config file.")(f)
    f = click.option("-o", "--set", "overrides", multiple=True,
                     metavar="KEY=VALUE", help="Override one config key.")(f)
    return f


@main.command()
@click.option("--out", required=True, type=str, help="Output directory.")
@click.option("--seed", type=int, default=None,
              help="Scene seed (overrides the config seed).")
@_config_options
def synth(out, seed, config_file, overrides):
    """Generate a synthetic scene: frames, depths, truth, manifest."""
    def body():
        cfg = RunConfig.resolve(config_file, overrides)
        the_seed = cfg["seed"] if seed is None else seed
        scene = data.generate_scene(cfg.scene_spec(), the_seed)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        frame_paths, depth_paths = [], []
        for i in range(len(scene.poses)):
            fp, dp = f"frame_{i:04d}.png", f"depth_{i:04d}.npy"
            data.save_image(scene.render_frame(i), out_dir / fp)
            data.save_depth(scene.depth(i), out_dir / dp)
            frame_paths.append(fp)
            depth_paths.append(dp)
        data.save_trajectory([(float(i), p) for i, p in enumerate(scene.poses)],
                             out_dir / "gt_trajectory.txt")
        data.save_model(scene.model, out_dir / "gt_model.ckpt")
        manifest = data.SequenceManifest(scene.intrinsics, frame_paths,
                                         depth_paths, "gt_trajectory.txt",
                                         cfg["split"], base_dir=out_dir)
        data.save_manifest(manifest, out_dir / "manifest.txt")
        _write_config(cfg, out_dir)
        click.echo(f"wrote {len(frame_paths)} frames to {out_dir}")
    _run(body)


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=str)
@click.option("--out", required=True, type=str)
@_config_options
def train(manifest_path, out, config_file, overrides):
    """Estimate poses, run the training schedule, write the checkpoint."""
    def body():
        cfg = RunConfig.resolve(config_file, overrides)
        frames, depths, manifest = data.load_sequence(manifest_path)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_config(cfg, out_dir)
        model, _ = _run_training(frames, depths, manifest, cfg, out_dir)
        click.echo(f"trained model with {len(model)} Gaussians -> "
                   f"{out_dir / 'model.ckpt'}")
    _run(body)


@main.command("eval-nvs")
@click.option("--checkpoint", required=True, type=str)
@click.option("--manifest", "manifest_path", required=True, type=str)
@click.option("--trajectory", "trajectory_path", type=str, default=None,
              help="Trajectory for test-frame poses (default: manifest truth).")
@click.option("--out", required=True, type=str)
@_config_options
def eval_nvs(checkpoint, manifest_path, trajectory_path, out, config_file,
             overrides):
    """Render held-out frames and report PSNR/SSIM."""
    def body():
        cfg = RunConfig.resolve(config_file, overrides)
        frames, _, manifest = data.load_sequence(manifest_path)
        model = data.load_model(checkpoint)
        if trajectory_path is not None:
            traj = posing.Trajectory(data.load_trajectory(trajectory_path))
        else:
            traj = _load_gt_trajectory(manifest)
        _, test = data.split_frames(len(frames), cfg["split"])
        if not test:
            raise DataError(f"split {cfg['split']!r} leaves no test frames")
        anchor_inv = geometry.invert(traj.pose_at(model.anchor_frame))
        rendered = [splat.render(model, manifest.intrinsics,
                                 geometry.compose(traj.pose_at(f), anchor_inv))
                    for f in test]
        report = metrics.evaluate_nvs(rendered, [frames[f] for f in test], test)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_config(cfg, out_dir)
        data.atomic_write_text(out_dir / "nvs_report.txt",
                               "\n".join(report.kv_lines()) + "\n")
        plots.plot_nvs_report(report, out_dir / "nvs_report.png")
        click.echo(report.table())
    _run(body)


@main.command("eval-pose")
@click.option("--trajectory", "trajectory_path", required=True, type=str)
@click.option("--manifest", "manifest_path", required=True, type=str)
@click.option("--out", required=True, type=str)
@_config_options
def eval_pose(trajectory_path, manifest_path, out, config_file, overrides):
    """Compare an estimated trajectory against the manifest's ground truth."""
    def body():
        cfg = RunConfig.resolve(config_file, overrides)
        manifest = data.load_manifest(manifest_path)
        est = posing.Trajectory(data.load_trajectory(trajectory_path))
        gt = _load_gt_trajectory(manifest)
        report = metrics.evaluate_pose(est, gt)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_config(cfg, out_dir)
        data.atomic_write_text(out_dir / "pose_report.txt",
                               "\n".join(report.kv_lines()) + "\n")
        plots.plot_trajectories(est, gt, out_dir / "pose_report.png")
        for line in report.kv_lines():
            click.echo(line)
    _run(body)


@main.command()
@click.option("--checkpoint", required=True, type=str)
@click.option("--trajectory", "trajectory_path", required=True, type=str,
              help="Poses to render, one view per line.")
@click.option("--manifest", "manifest_path", type=str, default=None,
              help="Manifest supplying intrinsics (default: scene.* config).")
@click.option("--interpolate", type=int, default=0, show_default=True,
              help="Extra geodesically interpolated views between poses.")
@click.option("--out", required=True, type=str)
@_config_options
def render(checkpoint, trajectory_path, manifest_path, interpolate, out,
           config_file, overrides):
    """Render a checkpoint along a pose path, optionally interpolated."""
    def body():
        cfg = RunConfig.resolve(config_file, overrides)
        model = data.load_model(checkpoint)
        items = data.load_trajectory(trajectory_path)
        if not items:
            raise DataError(f"empty trajectory: {trajectory_path}")
        if interpolate < 0:
            raise ConfigError("--interpolate must be >= 0")
        poses = [p for _, p in items]
        path: list[Pose] = []
        for a, b in zip(poses, poses[1:]):
            path.append(a)
            for s in range(1, interpolate + 1):
                path.append(geometry.interpolate_pose(a, b, s / (interpolate + 1)))
        path.append(poses[-1])
        if manifest_path is not None:
            k = data.load_manifest(manifest_path).intrinsics
        else:
            k = data.intrinsics_for(cfg.scene_spec())
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_config(cfg, out_dir)
        for i, pose in enumerate(path):
            data.save_image(splat.render(model, k, pose),
                            out_dir / f"view_{i:04d}.png")
        click.echo(f"rendered {len(path)} views to {out_dir}")
    _run(body)


@main.command("interpolate-check")
@click.option("--manifest", "manifest_path", required=True, type=str)
@click.option("--out", required=True, type=str)
@_config_options
def interpolate_check(manifest_path, out, config_file, overrides):
    """Score interpolators: midpoint of frames i, i+2 vs the real frame i+1."""
    def body():
        cfg = RunConfig.resolve(config_file, overrides)
        frames, _, _ = data.load_sequence(manifest_path)
        if len(frames) < 3:
            raise DataError("interpolate-check needs >= 3 frames")
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_config(cfg, out_dir)
        impls = {"blend": interp.BlendInterpolator(),
                 "flow": interp.FlowInterpolator()}
        lines = ["interpolator\tmean_l1\ttriples"]
        for name, impl in impls.items():
            errs = []
            for i in range(len(frames) - 2):
                mid = impl.interpolate(frames[i], frames[i + 2])
                errs.append(float(np.abs(mid - frames[i + 1]).mean()))
                data.save_image(mid, out_dir / f"mid_{name}_{i + 1:04d}.png")
            lines.append(f"{name}\t{float(np.mean(errs)):.6f}\t{len(errs)}")
            click.echo(lines[-1])
        data.atomic_write_text(out_dir / "interpolate_report.txt",
                               "\n".join(lines) + "\n")
    _run(body)


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=str)
@click.option("--out", required=True, type=str)
@_config_options
def ablate(manifest_path, out, config_file, overrides):
    """Run a schedule/level/interpolator grid and emit a comparison table."""
    def body():
        cfg = RunConfig.resolve(config_file, overrides)
        frames, depths, manifest = data.load_sequence(manifest_path)
        k = manifest.intrinsics
        n = len(frames)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_config(cfg, out_dir)

        levels = [int(s) for s in cfg["ablate.levels"].split(",") if s.strip()]
        schedules = [s.strip() for s in cfg["ablate.schedules"].split(",")
                     if s.strip()]
        interpolators = [s.strip() for s in cfg["ablate.interpolators"].split(",")
                         if s.strip()]
        base_sup = [s.strip() for s in cfg["ablate.base_supervision"].split(",")
                    if s.strip()]
        for s in schedules:
            if s not in hierarchy.SCHEDULES:
                raise ConfigError(f"unknown schedule {s!r} in ablate.schedules")
        for b in base_sup:
            if b not in ("on", "off"):
                raise ConfigError("ablate.base_supervision entries must be on/off")

        train, test = data.split_frames(n, cfg["split"])
        if not test:
            raise DataError(f"split {cfg['split']!r} leaves no test frames")
        gt = _load_gt_trajectory(manifest) if manifest.gt_trajectory else None
        full_depths = _depth_list(depths, n, k, cfg["pose.constant_depth"])

        rows = []
        lines = ["label\tlevels\tschedule\tinterpolator\tbase_supervision"
                 "\tpsnr_db\tssim\tate\trpe_r_deg\tgaussians\tbytes"]
        for lv in levels:
            for schedule in schedules:
                for interpolator in interpolators:
                    for sup in base_sup:
                        label = f"L{lv}-{schedule}-{interpolator}-sup_{sup}"
                        over = dict(cfg.values)
                        over["interpolator"] = interpolator
                        run_cfg = RunConfig(over)
                        pose_log: list[str] = []
                        traj = _estimate_or_load_trajectory(
                            frames, depths, manifest, run_cfg, pose_log)
                        frames_half = _half_frames(frames, run_cfg)
                        _ensure_half_poses(traj, frames_half)
                        hcfg = cfg.hierarchy_config(
                            levels=lv,
                            source_probability=(cfg["hier.source_probability"]
                                                if sup == "on" else 0.0))
                        model = hierarchy.run_schedule(
                            schedule, frames, traj, k, full_depths, hcfg,
                            train_indices=set(train),
                            frames_half=frames_half or None)
                        anchor_inv = geometry.invert(
                            traj.pose_at(model.anchor_frame))
                        rendered = [splat.render(model, k, geometry.compose(
                            traj.pose_at(f), anchor_inv)) for f in test]
                        rep = metrics.evaluate_nvs(
                            rendered, [frames[f] for f in test], test)
                        if gt is not None and run_cfg["pose.source"] == "estimate":
                            pr = metrics.evaluate_pose(traj, gt)
                            ate_s, rpe_s = f"{pr.ate:.6f}", f"{pr.rpe_r:.6f}"
                        else:
                            ate_s, rpe_s = "-", "-"
                        nbytes = len(model) * (3 + 3 + 4 + 1 + 3) * 8
                        lines.append(
                            f"{label}\t{lv}\t{schedule}\t{interpolator}\t{sup}"
                            f"\t{rep.mean_psnr:.6f}\t{rep.mean_ssim:.6f}"
                            f"\t{ate_s}\t{rpe_s}\t{len(model)}\t{nbytes}")
                        rows.append({"label": label, "psnr": rep.mean_psnr})
                        click.echo(lines[-1])
        data.atomic_write_text(out_dir / "ablation.txt", "\n".join(lines) + "\n")
        plots.plot_ablation(rows, out_dir / "ablation.png")
    _run(body)


if __name__ == "__main__":
    main()
