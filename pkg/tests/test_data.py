"""Synthetic scenes, splits, and file round trips."""

import numpy as np
import pytest

from gsrecon import data, geometry, splat
from gsrecon.data import SceneSpec, SequenceManifest, generate_scene, split_frames
from gsrecon.errors import (InvalidSpec, MissingFile, ParseError, TooFewFrames)
from gsrecon.geometry import Pose

from conftest import random_model


class TestGenerateScene:
    def test_deterministic(self):
        spec = SceneSpec(kind="orbit", n_frames=5, n_gaussians=30)
        a = generate_scene(spec, 42)
        b = generate_scene(spec, 42)
        assert np.array_equal(a.model.positions, b.model.positions)
        assert np.array_equal(a.render_frame(2), b.render_frame(2))
        c = generate_scene(spec, 43)
        assert not np.array_equal(a.model.positions, c.model.positions)

    def test_first_pose_identity(self):
        for kind in ("orbit", "dolly", "pan", "random-walk"):
            scene = generate_scene(SceneSpec(kind=kind, n_frames=4,
                                             n_gaussians=40), 1)
            ang, dist = geometry.geodesic_distance(scene.poses[0],
                                                   Pose.identity())
            assert ang < 1e-12 and dist < 1e-12

    def test_dolly_relative_steps(self):
        spec = SceneSpec(kind="dolly", n_frames=6, n_gaussians=40, step=0.03)
        scene = generate_scene(spec, 3)
        for a, b in zip(scene.poses, scene.poses[1:]):
            rel = geometry.compose(b, geometry.invert(a))
            np.testing.assert_allclose(rel.t, [0.0, 0.0, 0.03], atol=1e-12)
            assert abs(abs(rel.q[0]) - 1.0) < 1e-12  # no rotation

    def test_orbit_equidistant_centers(self):
        spec = SceneSpec(kind="orbit", n_frames=8, n_gaussians=40,
                         sweep_deg=40.0, scene_distance=2.5)
        scene = generate_scene(spec, 5)
        target_dists = [np.linalg.norm(p.camera_center()
                                       - scene.poses[0].camera_center())
                        for p in scene.poses]
        # consecutive centers are equally spaced along the arc
        steps = [np.linalg.norm(a.camera_center() - b.camera_center())
                 for a, b in zip(scene.poses, scene.poses[1:])]
        np.testing.assert_allclose(steps, steps[0], rtol=1e-9)
        assert target_dists[-1] > 0

    def test_every_frame_sees_content(self):
        spec = SceneSpec(kind="pan", n_frames=10, n_gaussians=60,
                         sweep_deg=40.0, n_clusters=3)
        scene = generate_scene(spec, 7)
        for i in range(10):
            assert scene.render_frame(i).max() > 0.0

    def test_invalid_specs(self):
        with pytest.raises(InvalidSpec):
            generate_scene(SceneSpec(n_gaussians=0), 0)
        with pytest.raises(InvalidSpec):
            generate_scene(SceneSpec(n_frames=0), 0)
        with pytest.raises(InvalidSpec):
            generate_scene(SceneSpec(kind="spiral"), 0)

    def test_depth_matches_model(self):
        scene = generate_scene(SceneSpec(kind="orbit", n_frames=3,
                                         n_gaussians=40), 9)
        d = scene.depth(0)
        assert d.valid.any()
        assert np.all(d.values[d.valid] > 0)


class TestSplitFrames:
    def test_paper_mode(self):
        train, test = split_frames(16, "paper")
        assert test == [7, 15]
        assert sorted(train + test) == list(range(16))

    def test_paper_needs_eight(self):
        with pytest.raises(TooFewFrames):
            split_frames(7, "paper")

    def test_alternate(self):
        train, test = split_frames(10, "alternate")
        assert test == [1, 3, 5, 7, 9]
        assert train == [0, 2, 4, 6, 8]

    def test_none(self):
        train, test = split_frames(5, "none")
        assert train == list(range(5)) and test == []

    def test_unknown(self):
        with pytest.raises(ParseError):
            split_frames(8, "jackknife")


class TestImageRoundTrip:
    def test_quantized_round_trip(self, rng, tmp_path):
        img = rng.uniform(0, 1, (16, 20, 3))
        p = tmp_path / "img.png"
        data.save_image(img, p)
        back = data.load_image(p)
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_exact_at_8bit_values(self, tmp_path):
        img = np.round(np.linspace(0, 1, 16 * 16 * 3) * 255) / 255
        img = img.reshape(16, 16, 3)
        p = tmp_path / "img.png"
        data.save_image(img, p)
        np.testing.assert_allclose(data.load_image(p), img, atol=1e-12)

    def test_missing(self, tmp_path):
        with pytest.raises(MissingFile):
            data.load_image(tmp_path / "nope.png")


class TestDepthRoundTrip:
    def test_bit_exact(self, rng, tmp_path):
        values = rng.uniform(0.5, 3.0, (12, 12))
        valid = rng.uniform(0, 1, (12, 12)) > 0.3
        p = tmp_path / "d.depth"
        data.save_depth(data.DepthMap(values, valid), p)
        back = data.load_depth(p)
        assert np.array_equal(back.valid, valid)
        assert np.array_equal(back.values[valid], values[valid])

    def test_missing(self, tmp_path):
        with pytest.raises(MissingFile):
            data.load_depth(tmp_path / "nope.depth")


class TestTrajectoryCodec:
    def test_round_trip_precision(self, rng, tmp_path):
        items = []
        for i in range(6):
            q = rng.standard_normal(4)
            q /= np.linalg.norm(q)
            items.append((float(i) if i % 2 == 0 else i + 0.5,
                          Pose(q, rng.standard_normal(3))))
        p = tmp_path / "traj.txt"
        data.save_trajectory(items, p)
        back = data.load_trajectory(p)
        assert [i for i, _ in back] == [i for i, _ in items]
        for (_, a), (_, b) in zip(back, items):
            assert np.abs(a.as_vector() - b.as_vector()).max() < 1e-15

    def test_bad_header(self, tmp_path):
        p = tmp_path / "traj.txt"
        p.write_text("gstraj 2\n")
        with pytest.raises(ParseError):
            data.load_trajectory(p)

    def test_bad_field_count(self, tmp_path):
        p = tmp_path / "traj.txt"
        p.write_text("gstraj 1\n0 1 0 0 0 0 0\n")
        with pytest.raises(ParseError) as err:
            data.load_trajectory(p)
        assert err.value.line == 2

    def test_non_numeric(self, tmp_path):
        p = tmp_path / "traj.txt"
        p.write_text("gstraj 1\n0 1 0 0 0 0 0 x\n")
        with pytest.raises(ParseError):
            data.load_trajectory(p)


class TestCheckpoint:
    def test_bitwise_round_trip(self, rng, tmp_path):
        model = random_model(rng, 13, anchor_frame=5)
        p = tmp_path / "m.ckpt"
        data.save_model(model, p)
        back = data.load_model(p)
        assert back.anchor_frame == 5
        for name in ("positions", "log_scales", "rotations",
                     "opacity_logits", "colors"):
            assert np.array_equal(getattr(back, name), getattr(model, name))

    def test_stable_bytes(self, rng, tmp_path):
        model = random_model(rng, 7)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        data.save_model(model, a)
        data.save_model(model, b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.ckpt"
        p.write_bytes(b"XXXX" + b"\0" * 32)
        with pytest.raises(ParseError):
            data.load_model(p)

    def test_bad_version(self, rng, tmp_path):
        model = random_model(rng, 3)
        p = tmp_path / "m.ckpt"
        data.save_model(model, p)
        raw = bytearray(p.read_bytes())
        raw[4] = 99
        p.write_bytes(bytes(raw))
        with pytest.raises(ParseError):
            data.load_model(p)

    def test_truncated(self, rng, tmp_path):
        model = random_model(rng, 3)
        p = tmp_path / "m.ckpt"
        data.save_model(model, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ParseError):
            data.load_model(p)

    def test_missing(self, tmp_path):
        with pytest.raises(MissingFile):
            data.load_model(tmp_path / "nope.ckpt")


class TestManifest:
    def _manifest(self, k):
        return SequenceManifest(intrinsics=k,
                                frame_paths=["f0.png", "f1.png"],
                                depth_paths=["d0.depth", None],
                                gt_trajectory="gt.txt",
                                split_mode="alternate")

    def test_round_trip(self, tmp_path):
        from conftest import make_intrinsics
        k = make_intrinsics(16)
        p = tmp_path / "manifest.txt"
        data.save_manifest(self._manifest(k), p)
        back = data.load_manifest(p)
        assert back.intrinsics == k
        assert back.frame_paths == ["f0.png", "f1.png"]
        assert back.depth_paths == ["d0.depth", None]
        assert back.gt_trajectory == "gt.txt"
        assert back.split_mode == "alternate"
        assert back.base_dir == tmp_path
        assert back.split() == ([0], [1])

    def test_bad_header(self, tmp_path):
        p = tmp_path / "manifest.txt"
        p.write_text("notamanifest\n")
        with pytest.raises(ParseError):
            data.load_manifest(p)

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "manifest.txt"
        p.write_text("gsmanifest 1\nintrinsics 16 16 8 8 16 16\n"
                     "frame f.png\nbogus x\n")
        with pytest.raises(ParseError) as err:
            data.load_manifest(p)
        assert err.value.line == 4

    def test_missing_intrinsics(self, tmp_path):
        p = tmp_path / "manifest.txt"
        p.write_text("gsmanifest 1\nframe f.png\n")
        with pytest.raises(ParseError):
            data.load_manifest(p)

    def test_no_frames(self, tmp_path):
        p = tmp_path / "manifest.txt"
        p.write_text("gsmanifest 1\nintrinsics 16 16 8 8 16 16\n")
        with pytest.raises(ParseError):
            data.load_manifest(p)

    def test_malformed_intrinsics(self, tmp_path):
        p = tmp_path / "manifest.txt"
        p.write_text("gsmanifest 1\nintrinsics 16 16 8\nframe f.png\n")
        with pytest.raises(ParseError):
            data.load_manifest(p)


class TestLoadSequence:
    def test_round_trip(self, rng, tmp_path):
        from conftest import make_intrinsics
        k = make_intrinsics(16)
        img = rng.uniform(0, 1, (16, 16, 3))
        data.save_image(img, tmp_path / "f0.png")
        data.save_image(img, tmp_path / "f1.png")
        data.save_depth(data.constant_depth(k, 2.0), tmp_path / "d0.depth")
        m = SequenceManifest(k, ["f0.png", "f1.png"], ["d0.depth", None],
                             split_mode="none")
        data.save_manifest(m, tmp_path / "manifest.txt")
        frames, depths, back = data.load_sequence(tmp_path / "manifest.txt")
        assert len(frames) == 2 and frames[0].shape == (16, 16, 3)
        assert depths[0] is not None and depths[1] is None

    def test_shape_mismatch(self, rng, tmp_path):
        from conftest import make_intrinsics
        k = make_intrinsics(16)
        data.save_image(rng.uniform(0, 1, (8, 8, 3)), tmp_path / "f0.png")
        data.save_manifest(SequenceManifest(k, ["f0.png"], [None]),
                           tmp_path / "manifest.txt")
        with pytest.raises(ParseError):
            data.load_sequence(tmp_path / "manifest.txt")
