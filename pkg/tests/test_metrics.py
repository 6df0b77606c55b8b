"""Image and trajectory metrics: frozen analytic examples plus invariances."""

import numpy as np
import pytest

from gsrecon import geometry, metrics
from gsrecon.errors import (DegenerateConfiguration, DimensionMismatch,
                            ImageTooSmall, LengthMismatch)
from gsrecon.geometry import Pose, compose

from conftest import random_pose


def img(value, h=16, w=16):
    return np.full((h, w, 3), float(value))


class TestPsnr:
    def test_identical_caps_at_99(self, rng):
        a = rng.uniform(0, 1, (8, 8, 3))
        assert metrics.psnr(a, a) == 99.0

    def test_analytic_20db(self):
        # uniform 0.1 offset -> MSE 0.01 -> 10*log10(1/0.01) = 20 dB
        assert metrics.psnr(img(0.5), img(0.6)) == pytest.approx(20.0, abs=1e-9)

    def test_zero_db(self):
        assert metrics.psnr(img(0.0), img(1.0)) == pytest.approx(0.0, abs=1e-12)

    def test_monotone_in_noise(self, rng):
        base = rng.uniform(0.3, 0.7, (16, 16, 3))
        noise = rng.standard_normal(base.shape)
        values = [metrics.psnr(base, base + sigma * noise)
                  for sigma in (0.01, 0.02, 0.05, 0.1)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            metrics.psnr(img(0, 8, 8), img(0, 8, 9))


class TestSsim:
    def test_identical(self, rng):
        a = rng.uniform(0, 1, (16, 16, 3))
        assert metrics.ssim(a, a) == pytest.approx(1.0, abs=1e-9)

    def test_symmetric(self, rng):
        a = rng.uniform(0, 1, (16, 16, 3))
        b = rng.uniform(0, 1, (16, 16, 3))
        assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-9)

    def test_independent_noise_near_zero(self, rng):
        vals = [metrics.ssim(rng.uniform(0, 1, (24, 24, 3)),
                             rng.uniform(0, 1, (24, 24, 3)))
                for _ in range(20)]
        assert -0.1 < float(np.mean(vals)) < 0.1

    def test_global_statistics_oracle(self):
        # constant-plus-gradient images: windowed SSIM should agree with the
        # unwindowed global-statistics formula within 0.02
        h = w = 32
        ramp = np.linspace(0, 1, w)[None, :, None].repeat(h, 0).repeat(3, 2)
        a = 0.3 + 0.3 * ramp
        b = 0.35 + 0.28 * ramp

        def global_ssim(x, y, c1=0.01 ** 2, c2=0.03 ** 2):
            mx, my = x.mean(), y.mean()
            vx, vy = x.var(), y.var()
            cxy = ((x - mx) * (y - my)).mean()
            return ((2 * mx * my + c1) * (2 * cxy + c2)
                    / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))

        assert metrics.ssim(a, b) == pytest.approx(global_ssim(a, b), abs=0.02)

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            metrics.ssim(img(0.5, 8, 8), img(0.5, 8, 8))


def make_traj(rng, n=8):
    poses = [Pose.identity()]
    for _ in range(n - 1):
        poses.append(compose(random_pose(rng, rot_scale=0.2, t_scale=0.3),
                             poses[-1]))
    return poses


class TestAlignment:
    def test_identity(self, rng):
        gt = make_traj(rng)
        aligned, sim = metrics.align_trajectories(gt, gt)
        assert sim.scale == pytest.approx(1.0, abs=1e-9)
        for a, b in zip(aligned, gt):
            assert np.allclose(a.camera_center(), b.camera_center(), atol=1e-9)

    def test_recovers_similarity(self, rng):
        gt = make_traj(rng)
        world = random_pose(rng)
        # scale the camera centers 2x, then apply a world-frame rigid motion
        est = [compose(Pose(p.q, 2.0 * p.t), world) for p in gt]
        _, sim = metrics.align_trajectories(est, gt)
        assert sim.scale == pytest.approx(0.5, rel=1e-9)
        assert metrics.ate(est, gt) < 1e-9

    def test_collinear_degenerate(self):
        line = [Pose(np.array([1.0, 0, 0, 0]), np.array([float(i), 0.0, 0.0]))
                for i in range(4)]
        with pytest.raises(DegenerateConfiguration):
            metrics.align_trajectories(line, line)


class TestAte:
    def test_exact(self, rng):
        gt = make_traj(rng)
        assert metrics.ate(gt, gt) == pytest.approx(0.0, abs=1e-12)

    def test_single_offset_rmse(self, rng):
        # one center offset by d after alignment ~ d/sqrt(n) up to the
        # least-squares re-fit; verify against a brute-force oracle instead
        gt = make_traj(rng, n=12)
        est = list(gt)
        bad = geometry.compose(Pose(np.array([1.0, 0, 0, 0]),
                                    np.array([0.05, 0.0, 0.0])), est[5])
        est[5] = bad
        aligned, _ = metrics.align_trajectories(est, gt)
        c_a = np.stack([p.camera_center() for p in aligned])
        c_g = np.stack([p.camera_center() for p in gt])
        oracle = float(np.sqrt(np.mean(np.sum((c_a - c_g) ** 2, axis=1))))
        assert metrics.ate(est, gt) == pytest.approx(oracle, rel=1e-9)

    def test_similarity_invariance(self, rng):
        gt = make_traj(rng)
        world = random_pose(rng)
        est = [compose(Pose(p.q, 3.0 * p.t), world) for p in gt]
        assert metrics.ate(est, gt) < 1e-9


class TestRpe:
    def test_exact(self, rng):
        gt = make_traj(rng)
        t_err, r_err = metrics.rpe(gt, gt)
        assert t_err == pytest.approx(0.0, abs=1e-9)
        assert r_err == pytest.approx(0.0, abs=1e-9)

    def test_global_transform_invariance(self, rng):
        gt = make_traj(rng)
        world = random_pose(rng)
        est = [compose(world, p) for p in gt]
        t_err, r_err = metrics.rpe(est, gt)
        assert t_err < 1e-9 and r_err < 1e-9

    def test_single_corrupted_step(self, rng):
        n = 10
        gt = make_traj(rng, n=n)
        # rotate every pose from index 5 on by the same extra 1 degree: only
        # the relative step 4 -> 5 changes, by exactly 1 degree
        extra = Pose.from_axis_angle([0, 1, 0], np.radians(1.0))
        est = gt[:5] + [compose(extra, p) for p in gt[5:]]
        _, r_err = metrics.rpe(est, gt)
        assert r_err == pytest.approx(1.0 / np.sqrt(n - 1), rel=1e-6)

    def test_length_mismatch(self, rng):
        gt = make_traj(rng, 5)
        with pytest.raises(LengthMismatch):
            metrics.rpe(gt[:-1], gt)


class TestReports:
    def test_nvs_report_mean(self, rng):
        a = [rng.uniform(0, 1, (16, 16, 3)) for _ in range(3)]
        b = [x + 0.05 for x in a]
        rep = metrics.evaluate_nvs(a, b, [1, 2, 3])
        assert rep.mean_psnr == pytest.approx(np.mean(rep.psnr_values), abs=1e-9)
        assert rep.mean_ssim == pytest.approx(np.mean(rep.ssim_values), abs=1e-9)
        kv = "\n".join(rep.kv_lines())
        assert "mean_psnr\t" in kv and "frame_2_psnr\t" in kv

    def test_pose_report_fields(self, rng):
        gt = make_traj(rng)
        rep = metrics.evaluate_pose(gt, gt)
        assert rep.ate >= 0 and rep.rpe_t >= 0 and rep.rpe_r >= 0
        assert any(line.startswith("alignment\t") for line in rep.kv_lines())
