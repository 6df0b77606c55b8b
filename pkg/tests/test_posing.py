"""Per-frame fitting, photometric relative pose, and trajectory chaining."""

import numpy as np
import pytest

from gsrecon import data, geometry, posing, splat
from gsrecon.errors import Diverged, EmptyDepth, MissingPose, TooFewFrames
from gsrecon.geometry import Pose
from gsrecon.posing import (PoseEstimationConfig, Trajectory,
                            estimate_relative_pose, estimate_trajectory,
                            fit_single_frame, seed_model_from_depth)

from conftest import make_intrinsics, random_model

K32 = make_intrinsics(32)

FAST = PoseEstimationConfig(fit_iterations=40, fit_max_points=300,
                            pair_iterations=120, patience=25)


class TestTrajectory:
    def test_from_poses(self, rng):
        poses = [Pose.identity(),
                 Pose(np.array([1.0, 0, 0, 0]), np.array([0, 0, 0.1]))]
        traj = Trajectory.from_poses(poses)
        assert len(traj) == 2
        assert traj.indices() == [0.0, 1.0]
        assert traj.has(1) and not traj.has(2)
        np.testing.assert_allclose(traj.pose_at(1).t, [0, 0, 0.1])

    def test_missing_pose(self):
        traj = Trajectory.from_poses([Pose.identity()])
        with pytest.raises(MissingPose):
            traj.pose_at(3)

    def test_half_indices(self):
        traj = Trajectory.from_poses([Pose.identity(), Pose.identity()])
        traj.set_pose(0.5, Pose(np.array([1.0, 0, 0, 0]), np.array([0, 0, 1.0])))
        assert traj.has(0.5)
        assert traj.indices() == [0.0, 0.5, 1.0]
        assert traj.integer_indices() == [0, 1]
        assert len(traj.integer_poses()) == 2

    def test_items_sorted(self):
        traj = Trajectory([(1.0, Pose.identity()), (0.0, Pose.identity())])
        assert [i for i, _ in traj.items()] == [0.0, 1.0]


class TestSeedModel:
    def test_unprojection(self, rng):
        image = rng.uniform(0, 1, (32, 32, 3))
        depth = data.constant_depth(K32, 2.0)
        model = seed_model_from_depth(image, K32, depth, 200)
        assert 0 < len(model) <= 300
        np.testing.assert_allclose(model.positions[:, 2], 2.0)
        # every seeded point must project back inside the image
        for p in model.positions:
            u = K32.fx * p[0] / p[2] + K32.cx
            v = K32.fy * p[1] / p[2] + K32.cy
            assert -1 <= u <= 33 and -1 <= v <= 33

    def test_colors_from_image(self):
        image = np.zeros((32, 32, 3))
        image[:, :, 1] = 1.0                    # pure green frame
        model = seed_model_from_depth(image, K32, data.constant_depth(K32, 2.0),
                                      100)
        np.testing.assert_allclose(model.colors, [[0.0, 1.0, 0.0]] * len(model))

    def test_empty_depth(self, rng):
        depth = data.DepthMap(np.ones((32, 32)), np.zeros((32, 32), dtype=bool))
        with pytest.raises(EmptyDepth):
            seed_model_from_depth(rng.uniform(0, 1, (32, 32, 3)), K32, depth, 100)

    def test_sparse_mask_fallback(self, rng):
        # a mask the subsampling grid steps over entirely
        valid = np.zeros((32, 32), dtype=bool)
        valid[1, 1] = True
        depth = data.DepthMap(np.full((32, 32), 3.0), valid)
        model = seed_model_from_depth(rng.uniform(0, 1, (32, 32, 3)), K32,
                                      depth, 100)
        assert len(model) == 1
        np.testing.assert_allclose(model.positions[0, 2], 3.0)

    def test_anchor_frame(self, rng):
        model = seed_model_from_depth(rng.uniform(0, 1, (32, 32, 3)), K32,
                                      data.constant_depth(K32, 2.0), 50,
                                      anchor_frame=7)
        assert model.anchor_frame == 7


class TestFitSingleFrame:
    def test_refits_own_render(self, rng):
        target = splat.render(random_model(rng, 10, spread=0.3), K32,
                              Pose.identity())
        model = fit_single_frame(target, K32, data.constant_depth(K32, 2.5),
                                 FAST, anchor_frame=2)
        out = splat.render(model, K32, Pose.identity())
        seeded = seed_model_from_depth(target, K32,
                                       data.constant_depth(K32, 2.5),
                                       FAST.fit_max_points)
        baseline = splat.render(seeded, K32, Pose.identity())
        assert np.abs(out - target).mean() < np.abs(baseline - target).mean()
        assert model.anchor_frame == 2


class TestRelativePose:
    def test_zero_motion_fixed_point(self, rng):
        # rendering the model's own view must return the identity transform
        for _ in range(3):
            model = random_model(rng, 8, spread=0.3)
            target = splat.render(model, K32, Pose.identity())
            pose, loss = estimate_relative_pose(model, target, K32, FAST)
            ang, dist = geometry.geodesic_distance(pose, Pose.identity())
            assert ang < 1e-9 and dist < 1e-9
            assert loss < 1e-6

    def test_small_motion_recovery(self, rng):
        model = random_model(rng, 25, spread=0.3)
        true = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 0.05]))
        target = splat.render(model, K32, true)
        pose, _ = estimate_relative_pose(model, target, K32)
        ang, dist = geometry.geodesic_distance(pose, true)
        assert np.degrees(ang) < 0.5
        assert dist < 0.02

    def test_warm_start(self, rng):
        model = random_model(rng, 15, spread=0.3)
        true = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 0.04]))
        target = splat.render(model, K32, true)
        pose, loss = estimate_relative_pose(model, target, K32, FAST, init=true)
        assert loss < 1e-6           # starting at the optimum stays there
        ang, dist = geometry.geodesic_distance(pose, true)
        assert ang < 1e-9 and dist < 1e-9

    def test_diverged(self, rng):
        model = random_model(rng, 5, spread=0.3)
        target = rng.uniform(0, 1, (32, 32, 3))
        cfg = PoseEstimationConfig(pair_iterations=50, divergence_factor=0.5)
        with pytest.raises(Diverged) as err:
            estimate_relative_pose(model, target, K32, cfg, pair_index=4)
        assert err.value.pair_index == 4


class TestEstimateTrajectory:
    def test_too_few_frames(self, rng):
        with pytest.raises(TooFewFrames):
            estimate_trajectory([rng.uniform(0, 1, (32, 32, 3))], K32, FAST)

    def test_identical_frames_give_identity(self, rng):
        frame = splat.render(random_model(rng, 10, spread=0.3), K32,
                             Pose.identity())
        log: list[str] = []
        traj = estimate_trajectory([frame] * 3, K32, FAST, log=log)
        assert traj.integer_indices() == [0, 1, 2]
        # the per-frame model is an imperfect refit, so the photometric
        # optimum sits near (not exactly at) the identity
        for i in (1, 2):
            ang, dist = geometry.geodesic_distance(traj.pose_at(i),
                                                   Pose.identity())
            assert np.degrees(ang) < 1.0 and dist < 0.02
        assert any(line.startswith("pair 0\tdirect") for line in log)
        assert any("depth fallback" in line for line in log)

    def test_bridged_records_half_poses(self, rng):
        frame = splat.render(random_model(rng, 10, spread=0.3), K32,
                             Pose.identity())

        class Same:
            def midpoint(self, i, a, b):
                return a
        log: list[str] = []
        traj = estimate_trajectory([frame] * 3, K32, FAST, midpoints=Same(),
                                   log=log)
        assert traj.has(0.5) and traj.has(1.5)
        assert (0.0, 0.5) in traj.relatives
        assert (0.5, 1.0) in traj.relatives
        assert (0.0, 1.0) in traj.relatives
        assert any("bridged" in line for line in log)

    def test_uses_provided_depths(self, rng):
        frame = splat.render(random_model(rng, 10, spread=0.3), K32,
                             Pose.identity())
        depths = [data.constant_depth(K32, 2.5)] * 2
        log: list[str] = []
        estimate_trajectory([frame] * 2, K32, FAST, depths=depths, log=log)
        assert not any("depth fallback" in line for line in log)
