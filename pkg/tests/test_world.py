import math

import numpy as np
import pytest

from relstereo.geometry import Pose, UnitQuaternion, so3_exp, yaw_quat
from relstereo.world import (
    CameraIntrinsics,
    FrameObservation,
    OcclusionWindow,
    TrajectorySpec,
    VioNoiseModel,
    back_project,
    distort_jacobian,
    distort_normalized,
    gen_trajectory,
    make_wall,
    observe_frame,
    overlap_metrics,
    project_point,
    project_points,
    sample_depth,
    simulate_vio,
    undistort_normalized,
)

INTR = CameraIntrinsics()


def test_make_wall_geometry():
    wall = make_wall(depth=8.0, width=4.0, height=2.0, spacing=1.0)
    assert len(wall) == 5 * 3
    assert np.allclose(wall.positions[:, 2], 8.0)
    assert wall[0].id == 0
    xs = wall.positions[:, 0]
    assert xs.min() == -2.0 and xs.max() == 2.0


def test_project_point_known_values():
    pose = Pose.identity()
    px = project_point(pose, INTR, np.array([1.0, 0.0, 4.0]))
    assert np.allclose(px, [400.0, 240.0])
    px = project_point(pose, INTR, np.array([0.0, 0.0, 5.0]))
    assert np.allclose(px, [320.0, 240.0])


def test_project_point_visibility_rules():
    pose = Pose.identity()
    assert project_point(pose, INTR, np.array([0.0, 0.0, -2.0])) is None
    assert project_point(pose, INTR, np.array([0.0, 0.0, 0.05])) is None
    # 45 deg half-FOV: x slightly beyond z lands outside the image
    assert project_point(pose, INTR, np.array([5.1, 0.0, 5.0])) is None


def test_project_points_respects_pose():
    pose = Pose(np.array([1.0, 0.0, 0.0]))
    px, vis = project_points(pose, INTR, np.array([[2.0, 0.0, 4.0]]))
    assert vis[0]
    assert np.allclose(px[0], [400.0, 240.0])
    # camera yawed 90 deg toward -x sees a point on the world -x axis ahead
    pose = Pose(np.zeros(3), yaw_quat(math.pi / 2))
    px, vis = project_points(pose, INTR, np.array([[-3.0, 0.0, 0.0]]))
    assert vis[0]
    assert np.allclose(px[0], [320.0, 240.0], atol=1e-9)


def test_extrinsic_offsets_projection():
    body_to_cam = Pose(np.array([0.0, 0.0, -1.0]))
    px = project_point(Pose.identity(), INTR, np.array([0.0, 0.0, 5.0]),
                       body_to_cam=body_to_cam)
    # camera sits 1 m behind the body origin along the optical axis
    assert np.allclose(px, [320.0, 240.0])
    px2 = project_point(Pose.identity(), INTR, np.array([1.0, 0.0, 3.0]),
                        body_to_cam=body_to_cam)
    assert np.allclose(px2, [320.0 + 320.0 / 2.0, 240.0])


DIST = (-0.08, 0.015, 0.0007, -0.0004)


def test_distortion_round_trip():
    rng = np.random.default_rng(2)
    xn = rng.uniform(-0.6, 0.6, size=(200, 2))
    xd = distort_normalized(xn, DIST)
    back = undistort_normalized(xd, DIST)
    assert np.max(np.abs(back - xn)) < 1e-9


def test_distort_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    eps = 1e-7
    for _ in range(20):
        xn = rng.uniform(-0.5, 0.5, size=2)
        jac = distort_jacobian(xn, DIST)
        fd = np.zeros((2, 2))
        for k in range(2):
            dp = np.zeros(2)
            dp[k] = eps
            fd[:, k] = (distort_normalized(xn + dp, DIST)
                        - distort_normalized(xn - dp, DIST)) / (2 * eps)
        assert np.allclose(jac, fd, atol=1e-6)


def test_back_project_round_trip():
    rng = np.random.default_rng(6)
    intr_dist = CameraIntrinsics(dist=DIST)
    body_to_cam = Pose(np.array([0.05, -0.02, 0.1]), so3_exp([0.02, -0.03, 0.01]))
    for intr in (INTR, intr_dist):
        for _ in range(20):
            p_body = np.array([rng.uniform(-2, 2), rng.uniform(-1.5, 1.5),
                               rng.uniform(2, 8)])
            px = project_point(Pose.identity(), intr, p_body,
                               body_to_cam=body_to_cam)
            if px is None:
                continue
            p_cam = body_to_cam.apply(p_body)
            rec = back_project(px, p_cam[2], intr, body_to_cam=body_to_cam)
            assert np.allclose(rec, p_body, atol=1e-8)


def test_observe_frame_zero_noise_matches_projection():
    wall = make_wall()
    rng = np.random.default_rng(0)
    frame = observe_frame("i", 0.0, Pose(np.array([0.0, 0.0, 3.0])), INTR,
                          wall, 0.0, rng)
    assert len(frame.obs.ids) > 50
    px, vis = project_points(Pose(np.array([0.0, 0.0, 3.0])), INTR,
                             wall.positions[frame.obs.ids])
    assert vis.all()
    assert np.allclose(frame.obs.px, px)
    assert frame.truth_vis[frame.obs.ids].all()


def test_observe_frame_grid_keeps_lowest_id():
    # two landmarks projecting into the same 40-px cell: lower id wins
    lms = make_wall(depth=5.0, width=0.2, height=0.0001, spacing=0.1)
    assert len(lms) == 3
    rng = np.random.default_rng(0)
    frame = observe_frame("i", 0.0, Pose.identity(), INTR, lms, 0.0, rng,
                          grid_px=640)
    assert list(frame.obs.ids) == [0]


def test_observe_frame_max_features_cap():
    wall = make_wall(spacing=0.25)
    rng = np.random.default_rng(1)
    frame = observe_frame("j", 0.0, Pose(np.array([0.0, 0.0, 3.0])), INTR,
                          wall, 0.5, rng, max_features=30)
    assert len(frame.obs.ids) == 30


def test_observe_frame_occlusion_blocks_landmarks():
    wall = make_wall()
    rng = np.random.default_rng(2)
    pose = Pose(np.array([0.0, 0.0, 3.0]))
    full = OcclusionWindow(0.0, 1.0, full=True)
    frame = observe_frame("i", 0.5, pose, INTR, wall, 0.0, rng,
                          occlusions=(full,))
    assert len(frame.obs.ids) == 0
    assert not frame.truth_vis.any()
    # outside the window nothing is blocked
    frame = observe_frame("i", 1.5, pose, INTR, wall, 0.0, rng,
                          occlusions=(full,))
    assert len(frame.obs.ids) > 0
    band = OcclusionWindow(0.0, 1.0, full=False, x_range=(-20.0, 0.0))
    frame = observe_frame("i", 0.5, pose, INTR, wall, 0.0, rng,
                          occlusions=(band,))
    assert len(frame.obs.ids) > 0
    assert (wall.positions[frame.obs.ids, 0] > 0).all()


def test_observe_frame_pixel_noise_statistics():
    wall = make_wall()
    pose = Pose(np.array([0.0, 0.0, 3.0]))
    rng = np.random.default_rng(3)
    sigma = 0.5
    errs = []
    for _ in range(20):
        frame = observe_frame("i", 0.0, pose, INTR, wall, sigma, rng)
        errs.append(frame.obs.px - frame.truth_px[frame.obs.ids])
    errs = np.concatenate(errs)
    assert abs(errs.std() - sigma) < 0.05 * sigma + 0.02


def test_trajectory_constant_speed_and_formation():
    spec = TrajectorySpec(kind="rectangle", extent=2.0, speed=0.5,
                          rate_hz=30.0, duration=8.0)
    stamps, pi, pj = gen_trajectory(spec, wall_z=8.0)
    assert len(stamps) == 240
    assert np.allclose(np.diff(stamps), 1.0 / 30.0)
    assert np.allclose(pi[0].t, [0.0, 0.0, 3.0])
    steps = np.array([np.linalg.norm(b.t - a.t) for a, b in zip(pi[:-1], pi[1:])])
    # constant speed along edges; corner steps may cut slightly shorter
    assert steps.max() <= 0.5 / 30.0 + 1e-9
    on_edge = steps > 0.5 / 30.0 - 1e-6
    assert on_edge.mean() > 0.9
    for a, b in zip(pi, pj):
        assert np.allclose(b.t - a.t, [3.0, 0.0, 0.0])
        assert np.allclose(b.q.to_array(), a.q.to_array())


def test_trajectory_kinds_stay_in_plane():
    for kind in ("rectangle", "arc", "figure8", "lateral"):
        spec = TrajectorySpec(kind=kind, duration=4.0)
        _, pi, _ = gen_trajectory(spec)
        ys = np.array([p.t[1] for p in pi])
        assert np.allclose(ys, 0.0)
        zs = np.array([p.t[2] for p in pi])
        assert zs.max() < 8.0  # never reaches the wall


def test_trajectory_yaw_applied_to_j_only():
    spec = TrajectorySpec(yaw_theta=math.radians(20))
    _, pi, pj = gen_trajectory(spec)
    assert np.allclose(pi[0].q.to_array(), [1, 0, 0, 0])
    assert np.allclose(pj[0].q.to_array(), yaw_quat(math.radians(20)).to_array())


def test_trajectory_rejects_bad_spec():
    with pytest.raises(ValueError):
        TrajectorySpec(kind="spiral")
    with pytest.raises(ValueError):
        TrajectorySpec(speed=0.0)


def test_simulate_vio_noiseless_matches_truth():
    spec = TrajectorySpec(duration=4.0)
    _, pi, _ = gen_trajectory(spec)
    rng = np.random.default_rng(0)
    odom = simulate_vio(pi, VioNoiseModel(0.0, 0.0, 1.0), rng)
    anchor = pi[0]
    for true, est in zip(pi, odom):
        expect = anchor.inverse().compose(true)
        assert np.allclose(est.t, expect.t, atol=1e-9)
        assert np.allclose(est.q.rotation_matrix(), expect.q.rotation_matrix(),
                           atol=1e-9)


def test_simulate_vio_scale_drift_shrinks_path():
    # 10 m straight line at 0.9 scale -> 9 m of odometry path
    poses = [Pose(np.array([0.0, 0.0, 0.1 * k])) for k in range(101)]
    rng = np.random.default_rng(0)
    odom = simulate_vio(poses, VioNoiseModel(0.0, 0.0, 0.9), rng)
    length = sum(np.linalg.norm(b.t - a.t) for a, b in zip(odom[:-1], odom[1:]))
    assert abs(length - 9.0) < 1e-9


def test_simulate_vio_deterministic_under_seed():
    spec = TrajectorySpec(duration=2.0)
    _, pi, _ = gen_trajectory(spec)
    noise = VioNoiseModel()
    a = simulate_vio(pi, noise, np.random.default_rng(42))
    b = simulate_vio(pi, noise, np.random.default_rng(42))
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.t, pb.t)
        assert pa.q == pb.q


def test_simulate_vio_noise_grows_like_random_walk():
    poses = [Pose(np.array([0.0, 0.0, 0.01 * k])) for k in range(301)]
    noise = VioNoiseModel(sigma_dt=0.005, sigma_dq=0.0)
    final_err = []
    for seed in range(40):
        odom = simulate_vio(poses, noise, np.random.default_rng(seed))
        expect = poses[0].inverse().compose(poses[-1])
        final_err.append(np.linalg.norm(odom[-1].t - expect.t))
    # 300 steps of 5 mm/axis noise: E||err|| ~ sigma*sqrt(3*n) ~ 0.15
    mean = np.mean(final_err)
    assert 0.05 < mean < 0.3


def test_overlap_metrics_hand_substituted_values():
    a = math.pi / 2
    cases = [
        ((a, 5, 3, 0, 0.0), (7.0, 10.0, 0.7)),
        ((a, 2, 4, 0, math.radians(20)),
         (2.289013841019117, 4.0, 0.5722534602547794)),
        ((a, 2, 4, 0, 0.0), (0.0, 4.0, 0.0)),
        ((a, 2, 4, 0, math.radians(-20)), (0.0, 4.0, 0.0)),
        ((a, 8, 2, 0, math.radians(-20)),
         (9.730461265239988, 16.0, 0.6081538290774994)),
        ((a, 4, 2, 1, math.radians(10)),
         (6.284444020226342, 8.0, 0.7855555025282929)),
    ]
    for args, expect in cases:
        got = overlap_metrics(*args)
        assert np.allclose(got, expect, rtol=0, atol=1e-12)


def test_overlap_metrics_monotonicity():
    a = math.pi / 2
    for d in (2.0, 4.0, 6.0, 8.0):
        prev = None
        for b_x in np.linspace(0.0, 6.0, 25):
            _, _, vp = overlap_metrics(a, d, b_x, 0.0, 0.0)
            if prev is not None:
                assert vp <= prev + 1e-12
            prev = vp
        prev = None
        for theta in np.linspace(math.radians(-20), math.radians(20), 21):
            _, _, vp = overlap_metrics(a, d, 2.0, 0.0, theta)
            if prev is not None:
                assert vp >= prev - 1e-12
            prev = vp


def test_overlap_metrics_bounds_and_errors():
    a = math.pi / 2
    _, _, vp = overlap_metrics(a, 5, 0, 0, math.radians(20))
    assert 0.0 <= vp <= 1.0
    with pytest.raises(ValueError):
        overlap_metrics(a, 0.0, 1, 0, 0)
    with pytest.raises(ValueError):
        overlap_metrics(a, 2.0, 1, 2.5, 0)
    with pytest.raises(ValueError):
        overlap_metrics(a, 2.0, 1, 0, math.radians(50))


def test_sample_depth_zero_sigma_is_exact():
    wall = make_wall(depth=8.0)
    pose = Pose(np.array([0.0, 0.0, 3.0]))
    rng = np.random.default_rng(0)
    frame = observe_frame("i", 0.0, pose, INTR, wall, 0.0, rng)
    depths = sample_depth(frame.obs, wall, pose, 0.0, rng)
    assert np.allclose(depths, 5.0)


def test_sample_depth_floor():
    lms = make_wall(depth=0.2, width=0.001, height=0.001, spacing=1.0)
    pose = Pose.identity()
    obs = FrameObservation("i", 0.0, np.array([0]), np.array([[320.0, 240.0]]))
    rng = np.random.default_rng(0)
    depths = sample_depth(obs, lms, pose, 5.0, rng)
    assert (depths >= 0.1).all()
