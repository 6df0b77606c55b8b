"""Desk-scale 3D Gaussian splatting reconstruction without structure-from-motion.

Submodules:
  geometry     SE(3) poses, pinhole cameras, twists, geodesic interpolation
  splat        Gaussian models, differentiable renderer, density-controlled trainer
  posing       per-frame fitting and photometric relative-pose estimation
  interp       frame interpolators and midpoint providers for pose bridging
  hierarchy    motion partitioning, base training, importance-scored merging
  supervision  photometric losses and multi-source retraining
  metrics      PSNR/SSIM and trajectory error metrics with reports
  data         synthetic scenes, splits, and all on-disk formats
  plots        matplotlib figures for the report paths
  cli          the `gsrecon` command-line surface
"""

from . import (cli, data, errors, geometry, hierarchy, interp, metrics,  # noqa: F401
               plots, posing, splat, supervision)
from .data import DepthMap, SceneSpec, SyntheticScene, generate_scene  # noqa: F401
from .geometry import CameraIntrinsics, Pose  # noqa: F401
from .hierarchy import HierarchyConfig, Segment, run_schedule  # noqa: F401
from .metrics import NvsReport, PoseReport, evaluate_nvs, evaluate_pose  # noqa: F401
from .posing import (PoseEstimationConfig, Trajectory,  # noqa: F401
                     estimate_relative_pose, estimate_trajectory)
from .splat import GaussianModel, GaussianTrainer, render  # noqa: F401
from .supervision import LossConfig, RetrainConfig, photometric_loss, retrain  # noqa: F401

__version__ = "0.1.0"
