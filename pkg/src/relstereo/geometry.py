"""Quaternion and rigid-transform primitives.

Conventions used throughout the package:

* Quaternions are Hamilton, scalar-first ``[w, x, y, z]``, unit norm.
* A quaternion (or pose) maps child-frame vectors into the parent frame:
  ``v_parent = R(q) @ v_child``, ``p_parent = R(q) @ p_child + t``.
* Serialized quaternions are canonicalized to ``w >= 0`` (q and -q encode
  the same rotation).
* Small-angle branches switch to series expansions below 1e-7 rad.
* Error states are right-multiplicative: ``q = q_hat * exp(dtheta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-7


def skew(v):
    """3x3 cross-product matrix: skew(a) @ b == np.cross(a, b)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit quaternion, Hamilton convention, scalar first.

    The constructor normalizes, so any nonzero (w, x, y, z) is accepted.
    """

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        n = math.sqrt(self.w * self.w + self.x * self.x
                      + self.y * self.y + self.z * self.z)
        if n < 1e-12:
            raise ValueError("zero-norm quaternion")
        if abs(n - 1.0) > 1e-15:
            object.__setattr__(self, "w", self.w / n)
            object.__setattr__(self, "x", self.x / n)
            object.__setattr__(self, "y", self.y / n)
            object.__setattr__(self, "z", self.z / n)

    @staticmethod
    def identity():
        return UnitQuaternion(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_array(a):
        """Build from [w, x, y, z]."""
        return UnitQuaternion(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def to_array(self):
        """Canonical [w, x, y, z] with w >= 0."""
        s = -1.0 if self.w < 0.0 else 1.0
        return np.array([s * self.w, s * self.x, s * self.y, s * self.z])

    def conjugate(self):
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    inverse = conjugate

    def rotation_matrix(self):
        w, x, y, z = self.w, self.x, self.y, self.z
        xx, yy, zz = x * x, y * y, z * z
        wx, wy, wz = w * x, w * y, w * z
        xy, xz, yz = x * y, x * z, y * z
        return np.array([
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ])

    @staticmethod
    def from_rotation_matrix(R):
        """Shepperd-style extraction, numerically stable for all branches."""
        R = np.asarray(R, dtype=float)
        tr = R[0, 0] + R[1, 1] + R[2, 2]
        if tr > 0.0:
            s = math.sqrt(tr + 1.0) * 2.0
            w = 0.25 * s
            x = (R[2, 1] - R[1, 2]) / s
            y = (R[0, 2] - R[2, 0]) / s
            z = (R[1, 0] - R[0, 1]) / s
        elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
            s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            w = (R[2, 1] - R[1, 2]) / s
            x = 0.25 * s
            y = (R[0, 1] + R[1, 0]) / s
            z = (R[0, 2] + R[2, 0]) / s
        elif R[1, 1] > R[2, 2]:
            s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
            w = (R[0, 2] - R[2, 0]) / s
            x = (R[0, 1] + R[1, 0]) / s
            y = 0.25 * s
            z = (R[1, 2] + R[2, 1]) / s
        else:
            s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
            w = (R[1, 0] - R[0, 1]) / s
            x = (R[0, 2] + R[2, 0]) / s
            y = (R[1, 2] + R[2, 1]) / s
            z = 0.25 * s
        return UnitQuaternion(w, x, y, z)


def quat_compose(a, b):
    """Hamilton product a * b (apply b first, then a)."""
    return UnitQuaternion(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )


def quat_rotate(q, v):
    """Rotate a 3-vector: R(q) @ v, without forming the matrix."""
    # v' = v + 2w (u x v) + 2 u x (u x v), u = vector part
    ux, uy, uz = q.x, q.y, q.z
    cx = uy * v[2] - uz * v[1]
    cy = uz * v[0] - ux * v[2]
    cz = ux * v[1] - uy * v[0]
    dx = uy * cz - uz * cy
    dy = uz * cx - ux * cz
    dz = ux * cy - uy * cx
    w2 = 2.0 * q.w
    return np.array([
        v[0] + w2 * cx + 2.0 * dx,
        v[1] + w2 * cy + 2.0 * dy,
        v[2] + w2 * cz + 2.0 * dz,
    ])


def so3_exp(rotvec):
    """Exponential map: rotation vector (axis * angle) -> unit quaternion."""
    vx, vy, vz = float(rotvec[0]), float(rotvec[1]), float(rotvec[2])
    theta = math.sqrt(vx * vx + vy * vy + vz * vz)
    if theta < SMALL_ANGLE:
        # second-order series of cos(t/2), sin(t/2)/t
        w = 1.0 - theta * theta / 8.0
        k = 0.5 - theta * theta / 48.0
    else:
        w = math.cos(0.5 * theta)
        k = math.sin(0.5 * theta) / theta
    return UnitQuaternion(w, k * vx, k * vy, k * vz)


def so3_log(q):
    """Logarithm map: unit quaternion -> rotation vector, |angle| <= pi.

    Input is canonicalized to w >= 0 so the returned angle is minimal.
    """
    w, x, y, z = q.w, q.x, q.y, q.z
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    n = math.sqrt(x * x + y * y + z * z)
    if n < SMALL_ANGLE:
        # first-order: angle ~ 2n, axis ~ v/n  =>  rotvec ~ 2 v / w
        k = 2.0 / w
    else:
        k = 2.0 * math.atan2(n, w) / n
    return np.array([k * x, k * y, k * z])


@dataclass(frozen=True)
class Pose:
    """Rigid transform (t, q) mapping child coordinates into the parent frame."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: UnitQuaternion = field(default_factory=UnitQuaternion.identity)

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float))
        if self.t.shape != (3,):
            raise ValueError("pose translation must be a 3-vector")

    @staticmethod
    def identity():
        return Pose()

    def apply(self, p):
        return quat_rotate(self.q, p) + self.t

    def inverse(self):
        qi = self.q.conjugate()
        return Pose(-quat_rotate(qi, self.t), qi)

    def compose(self, other):
        """self * other: apply `other` first, then `self`."""
        return Pose(self.t + quat_rotate(self.q, other.t),
                    quat_compose(self.q, other.q))

    def to_dict(self):
        return {"t": [float(v) for v in self.t],
                "q": [float(v) for v in self.q.to_array()]}

    @staticmethod
    def from_dict(d):
        return Pose(np.asarray(d["t"], dtype=float),
                    UnitQuaternion.from_array(d["q"]))


def pose_compose(a, b):
    return a.compose(b)


def pose_inverse(a):
    return a.inverse()


def pose_apply(a, p):
    return a.apply(p)


def relative_from_world(pose_i, pose_j):
    """Pose of body j expressed in body i's frame, from two world poses.

    t = q_i^-1 (t_j - t_i),  q = q_i^-1 * q_j.
    """
    qi_inv = pose_i.q.conjugate()
    return Pose(quat_rotate(qi_inv, pose_j.t - pose_i.t),
                quat_compose(qi_inv, pose_j.q))


def pose_boxplus(pose, delta):
    """Right-multiplicative retraction of a 6-vector (dt, dtheta) error."""
    d = np.asarray(delta, dtype=float)
    return Pose(pose.t + d[:3], quat_compose(pose.q, so3_exp(d[3:])))


def pose_boxminus(pose, ref):
    """Inverse of pose_boxplus: the (dt, dtheta) taking `ref` to `pose`."""
    dq = quat_compose(ref.q.conjugate(), pose.q)
    return np.concatenate([pose.t - ref.t, so3_log(dq)])


def yaw_quat(theta):
    """Rotation about the vertical (-y) axis; positive turns +z toward -x."""
    return so3_exp(np.array([0.0, -theta, 0.0]))
