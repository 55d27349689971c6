import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmtforge import alignment as al
from fmtforge import geometry as geo


def brute_force_windows(image_ts, ft_ts):
    """Membership scan: sample t belongs to window i iff ts[i] <= t < ts[i+1]."""
    owners = []
    for t in ft_ts:
        owner = None
        for i in range(len(image_ts)):
            lo = image_ts[i]
            hi = image_ts[i + 1] if i + 1 < len(image_ts) else np.inf
            if lo <= t < hi:
                owner = i
                break
        owners.append(owner)
    return owners


class TestAssignWindows:
    def test_30hz_frames_200hz_ft(self):
        image_ts = np.array([0.0, 1 / 30, 2 / 30])
        ft_ts = np.arange(0.0, 0.099, 0.005)
        windows = al.assign_windows(image_ts, ft_ts)
        start, stop = windows[0]
        assert stop - start == 7  # t in {0, 5, ..., 30 ms}
        owners = brute_force_windows(image_ts, ft_ts)
        for i, (s, e) in enumerate(windows):
            assert [j for j, o in enumerate(owners) if o == i] == list(range(s, e))

    def test_single_frame_takes_all_later_samples(self):
        windows = al.assign_windows([0.01], np.array([0.0, 0.02, 0.04]))
        assert windows == [(1, 3)]

    def test_boundary_sample_goes_to_later_window(self):
        windows = al.assign_windows([0.0, 0.1], [0.05, 0.1, 0.15])
        assert windows == [(0, 1), (1, 3)]

    def test_empty_image_stream(self):
        assert al.assign_windows([], [0.0, 0.1]) == []

    def test_unsorted_raises(self):
        with pytest.raises(al.StreamOrderError):
            al.assign_windows([0.2, 0.1], [0.0])

    @given(
        st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=8, unique=True),
        st.lists(st.floats(0, 10, allow_nan=False), min_size=0, max_size=40, unique=True),
    )
    @settings(max_examples=60, deadline=None)
    def test_partition_property(self, image_ts, ft_ts):
        image_ts = np.sort(np.array(image_ts))
        ft_ts = np.sort(np.array(ft_ts))
        windows = al.assign_windows(image_ts, ft_ts)
        covered = [j for s, e in windows for j in range(s, e)]
        in_range = [j for j, t in enumerate(ft_ts) if t >= image_ts[0]]
        assert covered == in_range  # each in-range sample exactly once, in order


class TestResampleRows:
    def test_identity_when_counts_match(self):
        rng = np.random.default_rng(0)
        vals = rng.normal(size=(8, 6))
        ts = np.linspace(0, 1, 8)
        np.testing.assert_allclose(al.resample_rows(vals, ts, 8), vals, atol=1e-12)

    def test_midpoint_of_two_rows(self):
        a, b = np.full(6, 1.0), np.full(6, 3.0)
        out = al.resample_rows(np.stack([a, b]), [0.0, 0.1], 3)
        np.testing.assert_allclose(out, np.stack([a, (a + b) / 2, b]))

    def test_against_per_coordinate_interp_oracle(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(size=(7, 6))
        ts = np.sort(rng.uniform(0, 1, size=7))
        out = al.resample_rows(vals, ts, 8)
        norm = (ts - ts[0]) / (ts[-1] - ts[0])
        for j in range(6):
            expected = [np.interp(u, norm, vals[:, j]) for u in np.linspace(0, 1, 8)]
            np.testing.assert_allclose(out[:, j], expected, atol=1e-7)
        np.testing.assert_allclose(out[0], vals[0])
        np.testing.assert_allclose(out[-1], vals[-1])

    @given(st.integers(2, 9), st.integers(2, 12), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_convexity_property(self, n, m, seed):
        rng = np.random.default_rng(seed)
        vals = rng.normal(size=(n, 3))
        ts = np.sort(rng.uniform(0, 1, size=n))
        ts += np.arange(n) * 1e-9  # enforce strict increase
        out = al.resample_rows(vals, ts, m)
        # every output row lies within the componentwise envelope of adjacent raw rows
        lo = np.minimum(vals[:-1], vals[1:]).min(axis=0)
        hi = np.maximum(vals[:-1], vals[1:]).max(axis=0)
        assert np.all(out >= lo - 1e-9) and np.all(out <= hi + 1e-9)

    def test_windowed_blocks_hold_and_zero_fill(self):
        image_ts = [0.0, 0.1, 0.2, 0.3]
        ft_ts = np.array([0.12, 0.15])
        vals = np.ones((2, 6))
        blocks = al.windowed_blocks(image_ts, ft_ts, vals, 4)
        assert blocks[0].zero_filled and blocks[0].raw_count == 0
        assert blocks[1].raw_count == 2 and not blocks[1].held
        assert blocks[2].held and np.allclose(blocks[2].block, blocks[1].block)


def random_pose(rng):
    q = rng.normal(size=4)
    return geo.make_pose(rng.normal(size=3), q / np.linalg.norm(q))


class TestPoseDelta:
    def test_identical_poses_zero_delta(self):
        p = geo.make_pose([1, 2, 3], [1, 0, 0, 0])
        np.testing.assert_allclose(al.pose_delta(p, p), 0.0, atol=1e-12)

    def test_world_z_translation_identity_orientation(self):
        p0 = geo.make_pose([0, 0, 0], [1, 0, 0, 0])
        p1 = geo.make_pose([0, 0, 0.01], [1, 0, 0, 0])
        np.testing.assert_allclose(al.pose_delta(p0, p1), [0, 0, 0.01, 0, 0, 0], atol=1e-12)

    def test_compose_round_trip_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            p0, p1 = random_pose(rng), random_pose(rng)
            delta = al.pose_delta(p0, p1)
            assert np.linalg.norm(delta[3:]) < np.pi
            recon = al.compose_delta(p0, delta)
            np.testing.assert_allclose(recon[:3], p1[:3], atol=1e-9)
            # quaternion equality up to sign
            assert min(np.linalg.norm(recon[3:] - p1[3:]), np.linalg.norm(recon[3:] + p1[3:])) < 1e-9

    def test_episode_delta_chain(self):
        rng = np.random.default_rng(3)
        poses = [random_pose(rng)]
        for _ in range(60):
            step = np.concatenate([rng.normal(0, 0.005, 3), rng.normal(0, 0.01, 3)])
            poses.append(al.compose_delta(poses[-1], step))
        pose = poses[0]
        for a, b in zip(poses[:-1], poses[1:]):
            pose = al.compose_delta(pose, al.pose_delta(a, b))
        np.testing.assert_allclose(pose[:3], poses[-1][:3], atol=1e-6)
        assert min(
            np.linalg.norm(pose[3:] - poses[-1][3:]), np.linalg.norm(pose[3:] + poses[-1][3:])
        ) < 1e-6

    def test_non_unit_quaternion_warns(self):
        p0 = geo.make_pose([0, 0, 0], [1, 0, 0, 0])
        p1 = np.array([0, 0, 0, 1.01, 0, 0, 0.0])
        with pytest.warns(UserWarning):
            al.pose_delta(p0, p1)


class TestMarkerTransform:
    def test_identity_extrinsic(self):
        p = geo.make_pose([1, 2, 3], geo.quat_from_axis_angle([0.1, 0.2, 0.3]))
        out = al.transform_pose(p, geo.make_pose([0, 0, 0], [1, 0, 0, 0]))
        np.testing.assert_allclose(out, p, atol=1e-12)

    def test_pure_translation_matches_homogeneous_oracle(self):
        rng = np.random.default_rng(4)
        pose = random_pose(rng)
        offset = np.array([0.01, -0.02, 0.03])
        out = al.transform_pose(pose, geo.make_pose(offset, [1, 0, 0, 0]))
        T = np.eye(4)
        T[:3, :3] = geo.quat_to_matrix(pose[3:])
        T[:3, 3] = pose[:3]
        expected = T @ np.concatenate([offset, [1.0]])
        np.testing.assert_allclose(out[:3], expected[:3], atol=1e-12)

    def test_round_trip_with_inverse(self):
        rng = np.random.default_rng(5)
        pose, ext = random_pose(rng), random_pose(rng)
        out = al.transform_pose(al.transform_pose(pose, ext), al.invert_transform(ext))
        np.testing.assert_allclose(out[:3], pose[:3], atol=1e-9)
        assert min(np.linalg.norm(out[3:] - pose[3:]), np.linalg.norm(out[3:] + pose[3:])) < 1e-9


def jaw_trajectory(distances, spacing=1 / 30):
    T = len(distances)
    ts = np.arange(T) * spacing
    pos = np.zeros((T, 2, 3))
    pos[:, 1, 0] = distances
    return pos, ts


class TestGripperInference:
    def test_constant_distance_no_events(self):
        pos, ts = jaw_trajectory(np.full(50, 0.08))
        out = al.infer_gripper_state(pos, ts)
        assert out.events == []
        assert np.all(out.states == 1)

    def test_closing_ramp_fires_once_at_onset(self):
        d = np.concatenate([np.full(10, 0.08), 0.08 - 0.05 * np.arange(20) / 30, np.full(10, 0.08 - 0.05 * 19 / 30)])
        pos, ts = jaw_trajectory(d)
        out = al.infer_gripper_state(pos, ts, velocity_threshold=0.02)
        closes = [e for e in out.events if e[1] == "close"]
        assert len(closes) == 1
        assert closes[0][0] == 11  # first frame whose backward velocity exceeds threshold

    def test_noise_below_threshold_never_fires(self):
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            d = 0.08 + rng.uniform(-1, 1, size=30) * 0.0002  # |v| <= 0.012 m/s at 30 Hz
            pos, ts = jaw_trajectory(d)
            out = al.infer_gripper_state(pos, ts, velocity_threshold=0.02)
            assert out.events == []

    def test_rigid_transform_invariance(self):
        rng = np.random.default_rng(6)
        d = np.concatenate([np.full(10, 0.08), np.full(15, 0.02)])
        pos, ts = jaw_trajectory(d)
        R = geo.quat_to_matrix(geo.quat_from_axis_angle(rng.normal(size=3)))
        t = rng.normal(size=3)
        moved = pos @ R.T + t
        a = al.infer_gripper_state(pos, ts)
        b = al.infer_gripper_state(moved, ts)
        assert a.events == b.events
        assert np.array_equal(a.states, b.states)

    def test_missing_marker_held(self):
        pos, ts = jaw_trajectory(np.full(10, 0.08))
        pos[4] = np.nan
        out = al.infer_gripper_state(pos, ts)
        assert out.interpolated[4] and out.events == []


class TestActionNormalization:
    def test_endpoints_and_midpoint(self):
        stats = al.ActionStats(np.array([-2.0, 0.0]), np.array([2.0, 1.0]))
        np.testing.assert_allclose(al.normalize_actions(np.array([-2.0, 0.0]), stats), [-1, -1])
        np.testing.assert_allclose(al.normalize_actions(np.array([0.0, 0.5]), stats), [0, 0])

    def test_round_trip(self):
        rng = np.random.default_rng(7)
        data = rng.uniform(-3, 3, size=(100, 6))
        stats = al.ActionStats.from_data(data)
        back = al.denormalize_actions(al.normalize_actions(data, stats), stats)
        np.testing.assert_allclose(back, data, atol=1e-7)

    def test_constant_dimension_flagged_and_exact(self):
        data = np.column_stack([np.linspace(0, 1, 10), np.full(10, 0.7)])
        stats = al.ActionStats.from_data(data)
        assert stats.constant.tolist() == [False, True]
        norm = al.normalize_actions(data, stats)
        assert np.all(norm[:, 1] == 0.0)
        np.testing.assert_allclose(al.denormalize_actions(norm, stats), data, atol=1e-12)

    def test_dict_round_trip(self):
        stats = al.ActionStats(np.array([-1.0, 0.0]), np.array([1.0, 0.0]))
        again = al.ActionStats.from_dict(stats.to_dict())
        np.testing.assert_allclose(again.low, stats.low)
        assert np.array_equal(again.constant, stats.constant)


class TestCameraPairing:
    def test_nearest_pairing_with_skew_limit(self):
        ts_a = np.array([0.0, 1 / 30, 2 / 30])
        ts_b = ts_a + 0.004
        pairs = al.pair_camera_frames(ts_a, ts_b)
        assert pairs == [(0, 0), (1, 1), (2, 2)]

    def test_far_frames_dropped(self):
        pairs = al.pair_camera_frames([0.0, 1.0], [0.5])
        assert pairs == []
