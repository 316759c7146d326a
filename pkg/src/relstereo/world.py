"""Synthetic world: landmark wall, pinhole cameras, trajectories, odometry.

Axis convention (shared by world, body and camera frames at identity
orientation): +z is the optical axis / scene depth, +x is lateral and maps
to the image u axis, +y maps to the image v axis. Both vehicles fly in the
x-z plane at constant y and face the landmark wall, which spans x-y at a
fixed z. Positive yaw turns the view toward -x (see geometry.yaw_quat).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, quat_compose, relative_from_world, so3_exp, yaw_quat

MIN_DEPTH = 0.1  # meters; points closer than this are treated as not visible


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 320.0
    fy: float = 320.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    fov_alpha: float = math.pi / 2  # horizontal field of view, radians
    dist: tuple = (0.0, 0.0, 0.0, 0.0)  # radial-tangential k1, k2, p1, p2

    @property
    def has_distortion(self):
        return any(v != 0.0 for v in self.dist)


@dataclass(frozen=True)
class Landmark:
    id: int
    position: np.ndarray


class LandmarkField:
    """Dense set of landmarks; ids are 0..n-1 row indices into `positions`."""

    def __init__(self, positions):
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 3)

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, idx):
        return Landmark(int(idx), self.positions[idx])


def make_wall(depth=8.0, width=24.0, height=6.0, spacing=0.5, center_x=0.0):
    """Planar grid of landmarks at z=depth, centered on (center_x, 0)."""
    if spacing <= 0 or width <= 0 or height <= 0:
        raise ValueError("wall dimensions and spacing must be positive")
    xs = np.arange(-width / 2, width / 2 + spacing / 2, spacing) + center_x
    ys = np.arange(-height / 2, height / 2 + spacing / 2, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, depth)])
    return LandmarkField(pts)


def distort_normalized(xn, dist):
    """Radial-tangential distortion applied to normalized coords (n, 2)."""
    k1, k2, p1, p2 = dist
    xn = np.asarray(xn, dtype=float)
    x, y = xn[..., 0], xn[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.stack([xd, yd], axis=-1)


def distort_jacobian(xn, dist):
    """2x2 Jacobian of distort_normalized at a single normalized point."""
    k1, k2, p1, p2 = dist
    x, y = float(xn[0]), float(xn[1])
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    dradial = 2.0 * k1 + 4.0 * k2 * r2
    j00 = radial + x * x * dradial + 2.0 * p1 * y + 6.0 * p2 * x
    j01 = x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y
    j10 = x * y * dradial + 2.0 * p2 * y + 2.0 * p1 * x
    j11 = radial + y * y * dradial + 6.0 * p1 * y + 2.0 * p2 * x
    return np.array([[j00, j01], [j10, j11]])


def undistort_normalized(xd, dist, iterations=10):
    """Invert distort_normalized by fixed-point iteration."""
    if not any(v != 0.0 for v in dist):
        return np.asarray(xd, dtype=float)
    xd = np.asarray(xd, dtype=float)
    xn = xd.copy()
    for _ in range(iterations):
        err = distort_normalized(xn, dist) - xd
        xn = xn - err
    return xn


def _camera_map(body_pose, body_to_cam):
    """Rotation/translation mapping world points into the camera frame."""
    r_wb = body_pose.q.rotation_matrix()
    r_bc = body_to_cam.q.rotation_matrix()
    m = r_bc @ r_wb.T
    off = body_to_cam.t - m @ body_pose.t
    return m, off


def project_points(body_pose, intr, points, body_to_cam=None):
    """Project world points through the camera; returns (pixels, visible).

    Pixels are valid only where `visible` is True; invisible entries are NaN.
    Visibility requires depth > MIN_DEPTH and the pixel inside the image.
    """
    body_to_cam = body_to_cam or Pose.identity()
    m, off = _camera_map(body_pose, body_to_cam)
    p_cam = np.asarray(points, dtype=float).reshape(-1, 3) @ m.T + off
    z = p_cam[:, 2]
    ok = z > MIN_DEPTH
    px = np.full((len(p_cam), 2), np.nan)
    if np.any(ok):
        xn = p_cam[ok, :2] / z[ok, None]
        xd = distort_normalized(xn, intr.dist) if intr.has_distortion else xn
        uv = np.column_stack([intr.fx * xd[:, 0] + intr.cx,
                              intr.fy * xd[:, 1] + intr.cy])
        px[ok] = uv
    in_img = ok & (px[:, 0] >= 0) & (px[:, 0] < intr.width) \
        & (px[:, 1] >= 0) & (px[:, 1] < intr.height)
    return px, in_img


def project_point(body_pose, intr, point, body_to_cam=None):
    """Single-point projection; returns a (2,) pixel or None if not visible."""
    px, vis = project_points(body_pose, intr, np.asarray(point)[None, :],
                             body_to_cam)
    return px[0] if vis[0] else None


def back_project(px, depth, intr, body_to_cam=None):
    """Pixel + camera-frame depth -> 3D point in the body frame."""
    body_to_cam = body_to_cam or Pose.identity()
    xd = np.array([(px[0] - intr.cx) / intr.fx, (px[1] - intr.cy) / intr.fy])
    xn = undistort_normalized(xd, intr.dist)
    p_cam = np.array([xn[0] * depth, xn[1] * depth, depth])
    return body_to_cam.inverse().apply(p_cam)


@dataclass(frozen=True)
class OcclusionWindow:
    """Blocks landmarks during [start, end); full wall or a world-x band."""

    start: float
    end: float
    full: bool = True
    x_range: tuple = (0.0, 0.0)

    def active(self, stamp):
        return self.start <= stamp < self.end

    def blocked(self, positions):
        if self.full:
            return np.ones(len(positions), dtype=bool)
        lo, hi = self.x_range
        return (positions[:, 0] >= lo) & (positions[:, 0] <= hi)


@dataclass(frozen=True)
class FrameObservation:
    """Extracted features of one camera frame: parallel id/pixel arrays."""

    uav: str
    stamp: float
    ids: np.ndarray
    px: np.ndarray


@dataclass(frozen=True)
class CameraFrame:
    """One simulated frame: extracted features plus a dense image proxy.

    `truth_px`/`truth_vis` give the noise-free projection and visibility of
    every landmark id, standing in for the image content that optical flow
    would track (flow is not limited to extractor grid winners).
    """

    uav: str
    stamp: float
    obs: FrameObservation
    truth_px: np.ndarray
    truth_vis: np.ndarray


def observe_frame(uav, stamp, body_pose, intr, landmarks, pixel_sigma, rng,
                  occlusions=(), body_to_cam=None, grid_px=40,
                  max_features=150):
    """Simulate feature extraction for one camera frame.

    Projects every landmark, drops occluded ones, perturbs pixels with
    Gaussian noise, then keeps at most one feature per grid cell (lowest
    landmark id wins) and at most `max_features` total (again lowest ids).
    Returns a CameraFrame carrying both the thinned features and the dense
    noise-free projections.
    """
    positions = landmarks.positions
    truth_px, truth_vis = project_points(body_pose, intr, positions,
                                         body_to_cam)
    vis = truth_vis.copy()
    for occ in occlusions:
        if occ.active(stamp):
            vis &= ~occ.blocked(positions)

    ids = np.flatnonzero(vis)
    px = truth_px[ids]
    if pixel_sigma > 0 and len(ids):
        px = px + rng.normal(scale=pixel_sigma, size=px.shape)
        inside = (px[:, 0] >= 0) & (px[:, 0] < intr.width) \
            & (px[:, 1] >= 0) & (px[:, 1] < intr.height)
        ids, px = ids[inside], px[inside]

    if len(ids):
        cells = (px[:, 0].astype(int) // grid_px) * 1000 \
            + px[:, 1].astype(int) // grid_px
        # ids ascend, so the first occurrence per cell is the lowest id
        _, first = np.unique(cells, return_index=True)
        keep = np.sort(first)
        ids, px = ids[keep], px[keep]
        if len(ids) > max_features:
            ids, px = ids[:max_features], px[:max_features]

    obs = FrameObservation(uav, stamp, ids.astype(np.int64), px)
    # occluded landmarks are hidden from the dense proxy as well
    return CameraFrame(uav, stamp, obs, truth_px, vis)


@dataclass(frozen=True)
class FramePair:
    stamp: float
    cam_i: CameraFrame
    cam_j: CameraFrame


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "rectangle"  # rectangle | arc | figure8 | lateral
    extent: float = 2.0
    speed: float = 0.5
    depth_d: float = 5.0  # initial scene depth to the wall
    baseline: tuple = (3.0, 0.0, 0.0)
    yaw_theta: float = 0.0
    rate_hz: float = 30.0
    duration: float = 8.0

    def __post_init__(self):
        if self.kind not in ("rectangle", "arc", "figure8", "lateral"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.speed <= 0 or self.extent <= 0 or self.depth_d <= 0:
            raise ValueError("speed, extent and depth_d must be positive")
        if self.rate_hz <= 0 or self.duration <= 0:
            raise ValueError("rate_hz and duration must be positive")


def _path_polyline(spec):
    """Closed 2D (x, z) polyline for the requested path kind."""
    e = spec.extent
    if spec.kind == "rectangle":
        pts = np.array([[0, 0], [e, 0], [e, e / 2], [0, e / 2], [0, 0]],
                       dtype=float)
    elif spec.kind == "lateral":
        pts = np.array([[0, 0], [-e, 0], [0, 0]], dtype=float)
    elif spec.kind == "arc":
        phi = np.linspace(-math.pi / 3, math.pi / 3, 121)
        fwd = np.column_stack([e * np.sin(phi), e * np.cos(phi) - e])
        pts = np.vstack([fwd, fwd[-2::-1]])
        pts -= pts[0]
    else:  # figure8
        s = np.linspace(0.0, 2.0 * math.pi, 241)
        pts = np.column_stack([e * np.sin(s), (e / 2) * np.sin(2 * s)])
    return pts


def gen_trajectory(spec, wall_z=8.0):
    """Ground-truth pose streams for both vehicles.

    Returns (stamps, poses_i, poses_j). The path starts at
    (0, 0, wall_z - depth_d) and is traversed at constant speed; UAV j is
    UAV i offset by the world-frame baseline and yawed by yaw_theta.
    """
    pts = _path_polyline(spec)
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    s_cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = s_cum[-1]

    n = int(round(spec.duration * spec.rate_hz))
    stamps = np.arange(n) / spec.rate_hz
    s = np.mod(spec.speed * stamps, total)
    x = np.interp(s, s_cum, pts[:, 0])
    z = np.interp(s, s_cum, pts[:, 1]) + (wall_z - spec.depth_d)

    baseline = np.asarray(spec.baseline, dtype=float)
    q_j = yaw_quat(spec.yaw_theta)
    poses_i, poses_j = [], []
    for k in range(n):
        t_i = np.array([x[k], 0.0, z[k]])
        poses_i.append(Pose(t_i))
        poses_j.append(Pose(t_i + baseline, q_j))
    return stamps, poses_i, poses_j


@dataclass(frozen=True)
class VioNoiseModel:
    sigma_dt: float = 0.005            # m per step, each axis
    sigma_dq: float = math.radians(0.05)  # rad per step, each axis
    scale_drift: float = 1.0           # multiplies translation increments


def simulate_vio(true_poses, noise, rng):
    """Drifting odometry stream from ground-truth poses.

    The first odometry pose is the identity (the odometry frame is anchored
    at the start pose); each later pose composes the true body-frame
    increment after translation scaling and additive Gaussian noise.
    """
    odom = [Pose.identity()]
    for prev, cur in zip(true_poses[:-1], true_poses[1:]):
        inc = relative_from_world(prev, cur)
        dt = noise.scale_drift * inc.t + rng.normal(scale=noise.sigma_dt, size=3)
        dq = quat_compose(inc.q, so3_exp(rng.normal(scale=noise.sigma_dq, size=3)))
        odom.append(odom[-1].compose(Pose(dt, dq)))
    return odom


def overlap_metrics(alpha, d, b_x, b_y, theta):
    """Shared field-of-view geometry at the wall plane.

    Returns (V_ij, V_i, Vp): common view span, single-camera span, and their
    ratio. `d` is the scene depth, `b_x`/`b_y` the lateral/depth baseline
    components, `theta` the second camera's yaw toward the first.
    """
    if d <= 0:
        raise ValueError("scene depth must be positive")
    if d <= b_y:
        raise ValueError("depth baseline component must be smaller than depth")
    if alpha / 2 + abs(theta) >= math.pi / 2:
        raise ValueError("view edge parallel to the wall: alpha/2 + |theta| "
                         "must stay below 90 degrees")
    v_i = 2.0 * d * math.tan(alpha / 2)
    v_ij = d * math.tan(alpha / 2) + (d - b_y) * math.tan(alpha / 2 + theta) - b_x
    v_ij = min(max(v_ij, 0.0), v_i)
    return v_ij, v_i, v_ij / v_i


def sample_depth(frame_obs, landmarks, body_pose, depth_sigma, rng,
                 body_to_cam=None):
    """Noisy camera-frame depth for each feature in `frame_obs`.

    Models a depth sensor aligned with the camera: true z plus Gaussian
    noise, floored at MIN_DEPTH. Returns an array parallel to frame_obs.ids.
    """
    body_to_cam = body_to_cam or Pose.identity()
    m, off = _camera_map(body_pose, body_to_cam)
    pts = landmarks.positions[frame_obs.ids]
    z = pts @ m.T[:, 2] + off[2]
    if depth_sigma > 0:
        z = z + rng.normal(scale=depth_sigma, size=z.shape)
    return np.maximum(z, MIN_DEPTH)
