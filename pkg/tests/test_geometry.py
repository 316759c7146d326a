import math

import numpy as np
from scipy.spatial.transform import Rotation

from relstereo.geometry import (
    Pose,
    UnitQuaternion,
    pose_boxminus,
    pose_boxplus,
    quat_compose,
    quat_rotate,
    relative_from_world,
    skew,
    so3_exp,
    so3_log,
    yaw_quat,
)


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def quat_from_scipy(r):
    """scipy stores scalar-last; reorder to our scalar-first layout."""
    x, y, z, w = r.as_quat()
    return UnitQuaternion(w, x, y, z)


def random_quat(rng):
    v = rng.normal(size=4)
    return UnitQuaternion(*v)


QZ90 = so3_exp([0.0, 0.0, math.pi / 2])
QX90 = so3_exp([math.pi / 2, 0.0, 0.0])


def test_rotation_matrix_matches_hand_built():
    assert np.allclose(QZ90.rotation_matrix(), rot_z(math.pi / 2), atol=1e-12)
    assert np.allclose(QX90.rotation_matrix(), rot_x(math.pi / 2), atol=1e-12)


def test_compose_matches_matrix_product():
    q = quat_compose(QZ90, QX90)
    assert np.allclose(q.rotation_matrix(),
                       rot_z(math.pi / 2) @ rot_x(math.pi / 2), atol=1e-12)


def test_compose_is_associative():
    rng = np.random.default_rng(7)
    for _ in range(50):
        a, b, c = (random_quat(rng) for _ in range(3))
        lhs = quat_compose(quat_compose(a, b), c)
        rhs = quat_compose(a, quat_compose(b, c))
        assert np.allclose(lhs.to_array(), rhs.to_array(), atol=1e-12)


def test_rotate_known_vector():
    assert np.allclose(quat_rotate(QZ90, np.array([1.0, 0, 0])),
                       [0.0, 1.0, 0.0], atol=1e-12)


def test_rotate_agrees_with_matrix_and_scipy():
    rng = np.random.default_rng(3)
    for _ in range(100):
        q = random_quat(rng)
        v = rng.normal(size=3)
        assert np.allclose(quat_rotate(q, v), q.rotation_matrix() @ v, atol=1e-12)
        r = Rotation.from_quat([q.x, q.y, q.z, q.w])
        assert np.allclose(quat_rotate(q, v), r.apply(v), atol=1e-10)


def test_norm_stays_unit_under_composition():
    rng = np.random.default_rng(11)
    q = UnitQuaternion.identity()
    for _ in range(1000):
        q = quat_compose(q, random_quat(rng))
        n = math.sqrt(q.w ** 2 + q.x ** 2 + q.y ** 2 + q.z ** 2)
        assert abs(n - 1.0) < 1e-9


def test_exp_log_round_trip():
    rng = np.random.default_rng(5)
    for _ in range(200):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(1e-9, math.pi - 1e-3)
        v = axis * angle
        assert np.allclose(so3_log(so3_exp(v)), v, atol=1e-9)


def test_exp_matches_scipy_rotvec():
    rng = np.random.default_rng(9)
    for _ in range(100):
        v = rng.normal(size=3)
        q = so3_exp(v)
        r = quat_from_scipy(Rotation.from_rotvec(v))
        # q and -q are the same rotation
        assert np.allclose(q.to_array(), r.to_array(), atol=1e-10)


def test_small_angle_branch_is_continuous():
    for mag in (1e-12, 1e-9, 1e-8, 2e-7, 1e-6):
        v = np.array([mag, -0.5 * mag, 0.25 * mag])
        q = so3_exp(v)
        r = quat_from_scipy(Rotation.from_rotvec(v))
        assert np.allclose(q.to_array(), r.to_array(), atol=1e-15)
        assert np.allclose(so3_log(q), v, atol=1e-15)


def test_log_identity_is_zero():
    assert np.allclose(so3_log(UnitQuaternion.identity()), np.zeros(3))


def test_to_array_canonicalizes_sign():
    q = UnitQuaternion(-0.5, 0.5, 0.5, 0.5)
    a = q.to_array()
    assert a[0] >= 0.0
    assert np.allclose(UnitQuaternion.from_array(a).rotation_matrix(),
                       q.rotation_matrix(), atol=1e-12)


def test_from_rotation_matrix_all_branches():
    rng = np.random.default_rng(13)
    # near-pi rotations about each axis exercise the non-trace branches
    probes = [rng.normal(size=3) for _ in range(50)]
    probes += [np.array([math.pi - 1e-3, 0, 0]),
               np.array([0, math.pi - 1e-3, 0]),
               np.array([0, 0, math.pi - 1e-3])]
    for v in probes:
        q = so3_exp(v)
        q2 = UnitQuaternion.from_rotation_matrix(q.rotation_matrix())
        assert np.allclose(q2.rotation_matrix(), q.rotation_matrix(), atol=1e-9)


def test_skew_matches_cross():
    rng = np.random.default_rng(17)
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert np.allclose(skew(a) @ b, np.cross(a, b), atol=1e-12)


def test_pose_apply_and_inverse():
    p = Pose(np.array([1.0, 0.0, 0.0]), QZ90)
    moved = p.apply(np.array([0.0, 1.0, 0.0]))
    assert np.allclose(moved, [0.0, 0.0, 0.0], atol=1e-12)
    rng = np.random.default_rng(19)
    for _ in range(50):
        pose = Pose(rng.normal(size=3), random_quat(rng))
        x = rng.normal(size=3)
        assert np.allclose(pose.inverse().apply(pose.apply(x)), x, atol=1e-10)
        ident = pose.compose(pose.inverse())
        assert np.allclose(ident.t, 0.0, atol=1e-10)
        assert np.allclose(ident.q.rotation_matrix(), np.eye(3), atol=1e-10)


def test_relative_from_world_known_case():
    pose_i = Pose(np.array([1.0, 0.0, 0.0]), UnitQuaternion.identity())
    pose_j = Pose(np.array([1.0, 1.0, 0.0]), QZ90)
    rel = relative_from_world(pose_i, pose_j)
    assert np.allclose(rel.t, [0.0, 1.0, 0.0], atol=1e-12)
    assert np.allclose(rel.q.rotation_matrix(), rot_z(math.pi / 2), atol=1e-12)


def test_relative_from_world_identity_when_equal():
    rng = np.random.default_rng(23)
    pose = Pose(rng.normal(size=3), random_quat(rng))
    rel = relative_from_world(pose, pose)
    assert np.allclose(rel.t, 0.0, atol=1e-12)
    assert np.allclose(so3_log(rel.q), 0.0, atol=1e-12)


def test_relative_from_world_maps_points_between_bodies():
    rng = np.random.default_rng(29)
    for _ in range(20):
        pose_i = Pose(rng.normal(size=3), random_quat(rng))
        pose_j = Pose(rng.normal(size=3), random_quat(rng))
        rel = relative_from_world(pose_i, pose_j)
        p_j = rng.normal(size=3)
        p_world = pose_j.apply(p_j)
        p_i = pose_i.inverse().apply(p_world)
        assert np.allclose(rel.apply(p_j), p_i, atol=1e-10)


def test_boxplus_boxminus_round_trip():
    rng = np.random.default_rng(31)
    for _ in range(50):
        pose = Pose(rng.normal(size=3), random_quat(rng))
        delta = rng.normal(size=6) * 0.5
        recovered = pose_boxminus(pose_boxplus(pose, delta), pose)
        assert np.allclose(recovered, delta, atol=1e-9)


def test_yaw_quat_turns_view_left():
    theta = 0.3
    fwd = quat_rotate(yaw_quat(theta), np.array([0.0, 0.0, 1.0]))
    assert np.allclose(fwd, [-math.sin(theta), 0.0, math.cos(theta)], atol=1e-12)


def test_pose_dict_round_trip():
    p = Pose(np.array([0.5, -1.0, 2.0]), QX90)
    d = p.to_dict()
    assert d["q"][0] >= 0.0
    p2 = Pose.from_dict(d)
    assert np.allclose(p2.t, p.t)
    assert np.allclose(p2.q.rotation_matrix(), p.q.rotation_matrix(), atol=1e-12)
