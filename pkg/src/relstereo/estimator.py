"""Sliding-window filter for the relative pose between two odometry streams.

The state is the pose of the second vehicle's body frame expressed in the
first vehicle's body frame, plus a window of historical clones of that pose
at past frame stamps. Both vehicles feed body-frame odometry increments;
cross-camera pixel observations of landmarks mapped in the first vehicle's
odometry frame correct the window. Orientation errors are attached on the
right (q = q_hat * exp(delta)), translation errors are additive, and each
clone contributes a [translation, rotation] error block of six.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import chi2

from .geometry import (
    Pose,
    UnitQuaternion,
    pose_boxplus,
    quat_compose,
    relative_from_world,
    skew,
)
from .world import (
    MIN_DEPTH,
    distort_jacobian,
    distort_normalized,
    undistort_normalized,
)

CLONE_DOF = 6


@dataclass(frozen=True)
class FilterConfig:
    sigma_dt: float = 0.005                  # odometry translation noise, m/step
    sigma_dq: float = math.radians(0.05)     # odometry rotation noise, rad/step
    meas_sigma_px: float = 2.0               # pixel measurement noise, 1-sigma
    chi2_alpha: float = 0.95
    window_m: int = 10                       # observations consumed per track
    max_clones: int = 11
    min_track_obs: int = 2
    max_update_iters: int = 4                # relinearizations per correction
    relinearize_step: float = 0.1           # iterate again above this step norm
    psd_jitter: float = 1e-9
    asym_tol: float = 1e-9
    nullspace_tol: float = 1e-10

    def __post_init__(self):
        if self.max_clones < 2:
            raise ValueError("the window needs at least two clones")
        if self.window_m > self.max_clones:
            raise ValueError("tracks cannot outlive the clone window")


def vio_increment(prev_pose, cur_pose):
    """Body-frame odometry increment between two poses of one stream."""
    return relative_from_world(prev_pose, cur_pose)


def propagate_state(rel, inc_i, inc_j):
    """Advance the relative pose by one odometry increment on each side."""
    r_i = inc_i.q.rotation_matrix()
    r_q = rel.q.rotation_matrix()
    t = r_i.T @ (rel.t + r_q @ inc_j.t - inc_i.t)
    q = quat_compose(quat_compose(inc_i.q.conjugate(), rel.q), inc_j.q)
    return Pose(t, q)


def fast_propagate(rel, inc_j):
    """Advance only the second vehicle; the first one's frame stays put."""
    return Pose(rel.t + rel.q.rotation_matrix() @ inc_j.t,
                quat_compose(rel.q, inc_j.q))


def propagation_jacobians(rel, inc_i, inc_j):
    """Error-state transition F (6x6) and noise input G (6x12).

    Noise order: [n_ti, n_qi, n_tj, n_qj], each three wide, modelling the
    true increments as (t + n_t, q * exp(n_q)). Evaluate at the pre-update
    state `rel`.
    """
    r_i = inc_i.q.rotation_matrix()
    r_j = inc_j.q.rotation_matrix()
    r_q = rel.q.rotation_matrix()
    r_d = r_i.T @ r_q
    f = np.zeros((6, 6))
    f[:3, :3] = r_i.T
    f[:3, 3:] = -r_d @ skew(inc_j.t)
    f[3:, 3:] = r_j.T
    v = rel.t + r_q @ inc_j.t - inc_i.t
    g = np.zeros((6, 12))
    g[:3, 0:3] = -r_i.T
    g[:3, 3:6] = r_i.T @ skew(v) @ r_i
    g[:3, 6:9] = r_d
    g[3:, 3:6] = -(r_d @ r_j).T
    g[3:, 9:12] = np.eye(3)
    return f, g


def process_noise(cfg, n_steps=1):
    """Diagonal increment-noise covariance for `n_steps` merged steps."""
    d = np.array([cfg.sigma_dt ** 2] * 3 + [cfg.sigma_dq ** 2] * 3
                 + [cfg.sigma_dt ** 2] * 3 + [cfg.sigma_dq ** 2] * 3)
    return np.diag(d) * float(n_steps)


def _pixel_from_cam(p_c, intr):
    xn = p_c[:, :2] / p_c[:, 2:3]
    xd = distort_normalized(xn, intr.dist) if intr.has_distortion else xn
    return np.column_stack([intr.fx * xd[:, 0] + intr.cx,
                            intr.fy * xd[:, 1] + intr.cy])


def measurement_predict(rel, odom_i, p_oi, intr, body_to_cam=None):
    """Predicted second-camera pixels of mapped landmarks.

    `p_oi` holds landmark positions in the first vehicle's odometry frame,
    `odom_i` that vehicle's odometry pose at the clone stamp. Returns
    (pixels, camera_points); entries with camera depth below MIN_DEPTH get
    NaN pixels.
    """
    body_to_cam = body_to_cam or Pose.identity()
    pts = np.asarray(p_oi, dtype=float).reshape(-1, 3)
    w = (pts - odom_i.t) @ odom_i.q.rotation_matrix()
    s = (w - rel.t) @ rel.q.rotation_matrix()
    p_c = s @ body_to_cam.q.rotation_matrix().T + body_to_cam.t
    px = np.full((len(p_c), 2), np.nan)
    ok = p_c[:, 2] > MIN_DEPTH
    if np.any(ok):
        px[ok] = _pixel_from_cam(p_c[ok], intr)
    return px, p_c


def measurement_jacobians(rel, odom_i, p_oi, intr, body_to_cam=None):
    """Per-landmark Jacobians of the predicted pixel.

    Returns (H_pose, H_feat) with shapes (n, 2, 6) and (n, 2, 3): the pixel
    sensitivity to the clone's [translation, rotation] error and to the
    landmark position in the first vehicle's odometry frame.
    """
    body_to_cam = body_to_cam or Pose.identity()
    pts = np.asarray(p_oi, dtype=float).reshape(-1, 3)
    r_oi = odom_i.q.rotation_matrix()
    r_q = rel.q.rotation_matrix()
    r_bc = body_to_cam.q.rotation_matrix()
    m = r_bc @ r_q.T                       # first-body frame -> camera
    w = (pts - odom_i.t) @ r_oi
    s = (w - rel.t) @ r_q
    p_c = s @ r_bc.T + body_to_cam.t

    n = len(pts)
    x, y, z = p_c[:, 0], p_c[:, 1], p_c[:, 2]
    j_norm = np.zeros((n, 2, 3))
    j_norm[:, 0, 0] = 1.0 / z
    j_norm[:, 0, 2] = -x / z ** 2
    j_norm[:, 1, 1] = 1.0 / z
    j_norm[:, 1, 2] = -y / z ** 2
    if intr.has_distortion:
        xn = p_c[:, :2] / p_c[:, 2:3]
        j_dist = np.stack([distort_jacobian(v, intr.dist) for v in xn])
        j_norm = j_dist @ j_norm
    j_pix = np.array([[intr.fx, 0.0], [0.0, intr.fy]]) @ j_norm

    s_skew = np.zeros((n, 3, 3))
    s_skew[:, 0, 1], s_skew[:, 0, 2] = -s[:, 2], s[:, 1]
    s_skew[:, 1, 0], s_skew[:, 1, 2] = s[:, 2], -s[:, 0]
    s_skew[:, 2, 0], s_skew[:, 2, 1] = -s[:, 1], s[:, 0]

    h_pose = np.empty((n, 2, 6))
    h_pose[:, :, :3] = j_pix @ (-m)
    h_pose[:, :, 3:] = np.einsum("nab,bc,ncd->nad", j_pix, r_bc, s_skew)
    h_feat = j_pix @ (m @ r_oi.T)
    return h_pose, h_feat


def nullspace_project(h_x, h_f, r, return_basis=False):
    """Remove landmark-position error by projecting onto null(h_f^T).

    Returns (h_proj, r_proj, leak) where `leak` is the largest surviving
    entry of the projected feature Jacobian (zero in exact arithmetic).
    With `return_basis` the orthonormal basis is appended to the tuple.
    """
    u, sv, _ = np.linalg.svd(h_f, full_matrices=True)
    tol = max(h_f.shape) * np.finfo(float).eps * (sv[0] if len(sv) else 0.0)
    rank = int(np.sum(sv > tol))
    basis = u[:, rank:]
    leak = float(np.abs(basis.T @ h_f).max()) if basis.size else 0.0
    if return_basis:
        return basis.T @ h_x, basis.T @ r, leak, basis
    return basis.T @ h_x, basis.T @ r, leak


@dataclass
class HealthMonitor:
    """Counts covariance-conditioning and projection violations."""

    asym_tol: float = 1e-9
    psd_jitter: float = 1e-9
    nullspace_tol: float = 1e-10
    checks: int = 0
    asym_violations: int = 0
    psd_violations: int = 0
    nullspace_violations: int = 0
    worst_asym: float = 0.0
    worst_leak: float = 0.0

    def check_cov(self, p):
        self.checks += 1
        asym = float(np.abs(p - p.T).max())
        self.worst_asym = max(self.worst_asym, asym)
        if asym > self.asym_tol:
            self.asym_violations += 1
        sym = 0.5 * (p + p.T)
        try:
            np.linalg.cholesky(sym + self.psd_jitter * np.eye(len(p)))
        except np.linalg.LinAlgError:
            self.psd_violations += 1

    def note_leak(self, leak):
        self.worst_leak = max(self.worst_leak, leak)
        if leak > self.nullspace_tol:
            self.nullspace_violations += 1

    @property
    def violations(self):
        return (self.asym_violations + self.psd_violations
                + self.nullspace_violations)

    def summary(self):
        return {
            "checks": self.checks,
            "asym_violations": self.asym_violations,
            "psd_violations": self.psd_violations,
            "nullspace_violations": self.nullspace_violations,
            "violations": self.violations,
            "worst_asym": self.worst_asym,
            "worst_leak": self.worst_leak,
        }


@dataclass
class Clone:
    stamp: float
    pose: Pose
    odom_i: Pose


@dataclass
class Track:
    landmark_id: int
    p_oi: np.ndarray
    p_cov: np.ndarray = None
    stamps: list = field(default_factory=list)
    px_i: list = field(default_factory=list)
    px_j: list = field(default_factory=list)

    def append(self, stamp, px_i, px_j):
        self.stamps.append(float(stamp))
        self.px_i.append(np.asarray(px_i, dtype=float))
        self.px_j.append(np.asarray(px_j, dtype=float))

    def __len__(self):
        return len(self.stamps)


@dataclass
class TrackRows:
    """One track's residual rows plus their correlated noise terms.

    `extra` marginalizes the landmark against its mapped prior
    (H_f P_landmark H_f^T). `z` holds sigma-scaled drift sensitivities of
    the rows; `lo`/`hi` bound the propagation steps over which each row
    accumulated odometry drift, so covariances between any two rows, also
    across tracks, follow from interval overlap.
    """

    h: np.ndarray
    r: np.ndarray
    extra: np.ndarray
    z: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def noise_cov(self, other):
        """Odometry-drift covariance between this track's rows and another's."""
        ov = np.minimum(self.hi[:, None], other.hi[None, :]) \
            - np.maximum(self.lo[:, None], other.lo[None, :])
        return (self.z @ other.z.T) * np.maximum(ov, 0.0)


class _BatchNoise:
    """Joint noise of stacked track rows in factored form.

    R = blockdiag(per-track blocks) + U U^T, where each column group of U
    is the drift sensitivity of the rows masked to one propagation step.
    Summing the masked outer products reproduces the interval-overlap drift
    covariance between all row pairs without forming R densely.
    """

    def __init__(self, rows_list, sigma2):
        self.sizes = [len(t.r) for t in rows_list]
        self.blocks = [t.extra + sigma2 * np.eye(n)
                       for t, n in zip(rows_list, self.sizes)]
        self.factors = [cho_factor(b, lower=True) for b in self.blocks]
        z = np.vstack([t.z for t in rows_list])
        lo = np.concatenate([t.lo for t in rows_list])
        hi = np.concatenate([t.hi for t in rows_list])
        steps = np.arange(int(lo.min()), int(hi.max()))
        covered = (lo[:, None] <= steps) & (steps < hi[:, None])
        self.u = (covered[:, :, None] * z[:, None, :]).reshape(len(lo), -1)

    def block_solve(self, x):
        out = np.empty_like(x, dtype=float)
        at = 0
        for n, fac in zip(self.sizes, self.factors):
            out[at:at + n] = cho_solve(fac, x[at:at + n])
            at += n
        return out

    def solve(self, x):
        """R^-1 x by low-rank correction of the block solve."""
        bx = self.block_solve(x)
        if self.u.shape[1] == 0:
            return bx
        bu = self.block_solve(self.u)
        cap = np.eye(self.u.shape[1]) + self.u.T @ bu
        return bx - bu @ np.linalg.solve(cap, self.u.T @ bx)

    def quad(self, k):
        """K R K^T for a gain matrix K."""
        ku = k @ self.u
        out = ku @ ku.T
        at = 0
        for n, blk in zip(self.sizes, self.blocks):
            kt = k[:, at:at + n]
            out += kt @ blk @ kt.T
            at += n
        return out


class _BatchGain:
    """Kalman gain for one stacked batch, reusing the factored noise so the
    solve stays linear in the number of rows."""

    def __init__(self, noise, h, p, jitter):
        self.noise = noise
        self.h = h
        try:
            l_p = np.linalg.cholesky(p)
        except np.linalg.LinAlgError:
            l_p = np.linalg.cholesky(p + jitter * np.eye(len(p)))
        self.v = np.concatenate([noise.u, h @ l_p], axis=1)
        self.bv = noise.block_solve(self.v)
        cap = np.eye(self.v.shape[1]) + self.v.T @ self.bv
        self.cap = cho_factor(cap, lower=True)
        self.k = self.s_solve(h @ p).T

    def s_solve(self, x):
        """(H P H^T + R)^-1 x."""
        bx = self.noise.block_solve(x)
        return bx - self.bv @ cho_solve(self.cap, self.v.T @ bx)

    def quad(self):
        """K R K^T for the covariance update."""
        return self.noise.quad(self.k)


@dataclass
class UpdateReport:
    tracks_used: int = 0
    tracks_gated: int = 0
    tracks_discarded: int = 0
    rows: int = 0
    correction_norm: float = 0.0


def _stamp_key(stamp):
    return round(float(stamp), 9)


class RelativeFilter:
    """Clone window, track store, and the propagate/update cycle."""

    def __init__(self, cfg, intr, init_pose, init_cov, stamp, odom_i,
                 body_to_cam=None, health=None):
        self.cfg = cfg
        self.intr = intr
        self.body_to_cam = body_to_cam or Pose.identity()
        self.clones = [Clone(float(stamp), init_pose, odom_i)]
        self.P = np.array(init_cov, dtype=float).copy()
        if self.P.shape != (6, 6):
            raise ValueError("initial covariance must be 6x6")
        self.tracks = {}
        self._ready = []
        self.health = health or HealthMonitor(cfg.asym_tol, cfg.psd_jitter,
                                              cfg.nullspace_tol)
        self._chi2_cache = {}

    # ------------------------------------------------------------------
    @property
    def estimate(self):
        return self.clones[-1].pose

    @property
    def stamp(self):
        return self.clones[-1].stamp

    def active_covariance(self):
        return self.P[-6:, -6:].copy()

    def clone_index(self, stamp):
        key = _stamp_key(stamp)
        for k, c in enumerate(self.clones):
            if _stamp_key(c.stamp) == key:
                return k
        return None

    # ------------------------------------------------------------------
    def propagate(self, stamp, inc_i, inc_j, odom_i, n_steps=1):
        """Clone the newest state, then advance it to `stamp`."""
        self._augment()
        active = self.clones[-1]
        f, g = propagation_jacobians(active.pose, inc_i, inc_j)
        q = process_noise(self.cfg, n_steps)
        n = len(self.P)
        head = self.P[-6:, :n - 6]
        self.P[-6:, :n - 6] = f @ head
        self.P[:n - 6, -6:] = self.P[-6:, :n - 6].T
        self.P[-6:, -6:] = f @ self.P[-6:, -6:] @ f.T + g @ q @ g.T
        active.pose = propagate_state(active.pose, inc_i, inc_j)
        active.stamp = float(stamp)
        active.odom_i = odom_i
        self.health.check_cov(self.P)
        self.P = 0.5 * (self.P + self.P.T)

    def _augment(self):
        src = self.clones[-1]
        self.clones.append(Clone(src.stamp, src.pose, src.odom_i))
        n = len(self.P)
        grown = np.empty((n + 6, n + 6))
        grown[:n, :n] = self.P
        grown[n:, :n] = self.P[n - 6:n, :]
        grown[:n, n:] = self.P[:, n - 6:n]
        grown[n:, n:] = self.P[n - 6:n, n - 6:n]
        self.P = grown

    # ------------------------------------------------------------------
    def new_track_ids(self, match_set):
        return np.array([i for i in match_set.ids if int(i) not in self.tracks],
                        dtype=np.int64)

    def add_matches(self, match_set, positions, position_covs=None):
        """Feed one emitted match set.

        `positions` maps landmark id -> mapped position in the first
        vehicle's odometry frame, required for ids not currently tracked;
        `position_covs` optionally carries each mapped position's 3x3
        covariance. Tracks absent from the set are queued for consumption,
        as are tracks reaching the observation window.
        """
        seen = set(int(i) for i in match_set.ids)
        for lid in [k for k in self.tracks if k not in seen]:
            self._ready.append(self.tracks.pop(lid))
        for k, lid in enumerate(match_set.ids):
            lid = int(lid)
            track = self.tracks.get(lid)
            if track is None:
                if lid not in positions:
                    continue
                cov = None if position_covs is None \
                    else position_covs.get(lid)
                track = Track(lid, np.asarray(positions[lid], dtype=float),
                              p_cov=cov)
                self.tracks[lid] = track
            if track.stamps and _stamp_key(track.stamps[-1]) \
                    == _stamp_key(match_set.stamp):
                continue
            track.append(match_set.stamp, match_set.px_i[k], match_set.px_j[k])
            if len(track) >= self.cfg.window_m:
                self._ready.append(self.tracks.pop(lid))

    # ------------------------------------------------------------------
    def _chi2_threshold(self, dof):
        thr = self._chi2_cache.get(dof)
        if thr is None:
            thr = float(chi2.ppf(self.cfg.chi2_alpha, dof))
            self._chi2_cache[dof] = thr
        return thr

    def _clone_context(self):
        """Per-clone rotation/translation arrays shared by all tracks."""
        n = len(self.clones)
        ctx = {
            "r_rel": np.stack([c.pose.q.rotation_matrix() for c in self.clones]),
            "t_rel": np.stack([c.pose.t for c in self.clones]),
            "r_oi": np.stack([c.odom_i.q.rotation_matrix() for c in self.clones]),
            "t_oi": np.stack([c.odom_i.t for c in self.clones]),
            "r_bc": self.body_to_cam.q.rotation_matrix(),
            "t_bc": self.body_to_cam.t,
            "index": {_stamp_key(c.stamp): k for k, c in enumerate(self.clones)},
            "n_clones": n,
        }
        return ctx

    def _pixel_rows(self, p_c):
        """Pixels and pixel Jacobians w.r.t. camera points, (n,2) and (n,2,3)."""
        intr = self.intr
        z = p_c[:, 2]
        xn = p_c[:, :2] / z[:, None]
        j_norm = np.zeros((len(p_c), 2, 3))
        j_norm[:, 0, 0] = 1.0 / z
        j_norm[:, 0, 2] = -p_c[:, 0] / z ** 2
        j_norm[:, 1, 1] = 1.0 / z
        j_norm[:, 1, 2] = -p_c[:, 1] / z ** 2
        if intr.has_distortion:
            xd = distort_normalized(xn, intr.dist)
            j_dist = np.stack([distort_jacobian(v, intr.dist) for v in xn])
            j_norm = j_dist @ j_norm
        else:
            xd = xn
        px = np.column_stack([intr.fx * xd[:, 0] + intr.cx,
                              intr.fy * xd[:, 1] + intr.cy])
        j_pix = np.array([[intr.fx, 0.0], [0.0, intr.fy]]) @ j_norm
        return px, j_pix

    def _track_rows(self, track, ctx):
        """Residual rows of one track, or None if unusable.

        Every usable observation contributes the second camera's rows
        (sensitive to that clone's relative-pose error). Observations after
        the mapping one also contribute the first camera's rows: those have
        no state sensitivity but re-measure the landmark's bearing. The
        landmark error itself is marginalized against the mapped prior,
        entering the row noise as H_f P H_f^T; collapsing it to a
        projection instead would discard the measured depth and leave
        cross-camera translation observable only through own-motion
        parallax.
        """
        ks, obs_n = [], []
        for n, stamp in enumerate(track.stamps):
            k = ctx["index"].get(_stamp_key(stamp))
            if k is not None:
                ks.append(k)
                obs_n.append(n)
        if len(ks) < max(2, self.cfg.min_track_obs):
            return None
        ks = np.asarray(ks)
        px_i = np.stack([track.px_i[n] for n in obs_n])
        px_j = np.stack([track.px_j[n] for n in obs_n])

        r_oi, t_oi = ctx["r_oi"][ks], ctx["t_oi"][ks]
        r_rel, t_rel = ctx["r_rel"][ks], ctx["t_rel"][ks]
        r_bc, t_bc = ctx["r_bc"], ctx["t_bc"]
        w = np.einsum("nba,nb->na", r_oi, track.p_oi - t_oi)
        s = np.einsum("nba,nb->na", r_rel, w - t_rel)
        pc_j = s @ r_bc.T + t_bc
        pc_i = w @ r_bc.T + t_bc
        levers = track.p_oi - t_oi

        ok_j = pc_j[:, 2] > MIN_DEPTH
        if ok_j.sum() < max(2, self.cfg.min_track_obs):
            return None
        pred_j, jpix_j = self._pixel_rows(pc_j[ok_j])
        m = np.einsum("ab,ncb->nac", r_bc, r_rel[ok_j])   # body i -> camera j
        h_t = -jpix_j @ m
        s_skew = np.zeros((int(ok_j.sum()), 3, 3))
        sv = s[ok_j]
        s_skew[:, 0, 1], s_skew[:, 0, 2] = -sv[:, 2], sv[:, 1]
        s_skew[:, 1, 0], s_skew[:, 1, 2] = sv[:, 2], -sv[:, 0]
        s_skew[:, 2, 0], s_skew[:, 2, 1] = -sv[:, 1], sv[:, 0]
        h_th = np.einsum("nab,bc,ncd->nad", jpix_j, r_bc, s_skew)
        hf_j = np.einsum("nab,nbc,ndc->nad", jpix_j, m, r_oi[ok_j])

        n_cl = ctx["n_clones"]
        k0 = int(ks[0])
        blocks_h, blocks_f, blocks_r = [], [], []
        drift_z, drift_lo, drift_hi = [], [], []
        kept_rows = np.flatnonzero(ok_j)
        for out_row, n_idx in enumerate(kept_rows):
            block = np.zeros((2, 6 * n_cl))
            k = ks[n_idx]
            block[:, 6 * k:6 * k + 3] = h_t[out_row]
            block[:, 6 * k + 3:6 * k + 6] = h_th[out_row]
            blocks_h.append(block)
            blocks_f.append(hf_j[out_row])
            blocks_r.append(px_j[n_idx] - pred_j[out_row])
            drift_z.append(self._drift_rows(hf_j[out_row], levers[n_idx]))
            drift_lo.append(k0)
            drift_hi.append(int(ks[n_idx]))

        # first-camera rows for every observation after the mapping one
        anchor = np.asarray(obs_n) > 0
        ok_i = (pc_i[:, 2] > MIN_DEPTH) & anchor
        if ok_i.any():
            pred_i, jpix_i = self._pixel_rows(pc_i[ok_i])
            hf_i = np.einsum("nab,bc,ndc->nad", jpix_i,
                             r_bc, r_oi[ok_i])
            for out_row, n_idx in enumerate(np.flatnonzero(ok_i)):
                blocks_h.append(np.zeros((2, 6 * n_cl)))
                blocks_f.append(hf_i[out_row])
                blocks_r.append(px_i[n_idx] - pred_i[out_row])
                drift_z.append(self._drift_rows(hf_i[out_row],
                                                levers[n_idx]))
                drift_lo.append(k0)
                drift_hi.append(int(ks[n_idx]))

        h_x = np.vstack(blocks_h)
        h_f = np.vstack(blocks_f)
        r = np.concatenate(blocks_r)
        if track.p_cov is None:
            extra = np.zeros((len(r), len(r)))
        else:
            extra = h_f @ track.p_cov @ h_f.T
        z = np.vstack(drift_z)
        lo = np.repeat(np.asarray(drift_lo, dtype=float), 2)
        hi = np.repeat(np.asarray(drift_hi, dtype=float), 2)
        return TrackRows(h_x, r, extra, z, lo, hi)

    def _drift_rows(self, hf, lever):
        """Pixel sensitivity to first-odometry drift, sigma-scaled, 2x6.

        Drift over a track's lifetime shifts the mapped landmark by
        dt + dtheta x lever before it reaches either camera, so the
        per-step noise maps through the landmark Jacobian.
        """
        z = np.empty((2, 6))
        z[:, :3] = self.cfg.sigma_dt * hf
        z[:, 3:] = -self.cfg.sigma_dq * (hf @ skew(lever))
        return z

    def update(self):
        """Consume ready tracks in one batched correction."""
        report = UpdateReport()
        overflow = len(self.clones) - self.cfg.max_clones
        if overflow > 0:
            dying = {_stamp_key(c.stamp) for c in self.clones[:overflow]}
            for lid in [k for k, t in self.tracks.items()
                        if any(_stamp_key(s) in dying for s in t.stamps)]:
                self._ready.append(self.tracks.pop(lid))

        sigma2 = self.cfg.meas_sigma_px ** 2
        ctx = self._clone_context()
        accepted = []
        for track in self._ready:
            rows = self._track_rows(track, ctx)
            if rows is None:
                report.tracks_discarded += 1
                continue
            r_cov = sigma2 * np.eye(len(rows.r)) + rows.extra \
                + rows.noise_cov(rows)
            s = rows.h @ self.P @ rows.h.T + r_cov
            gamma = float(rows.r @ np.linalg.solve(s, rows.r))
            if gamma > self._chi2_threshold(len(rows.r)):
                report.tracks_gated += 1
                continue
            accepted.append((track, rows))
            report.tracks_used += 1
        self._ready = []

        if accepted:
            self._correct(accepted, report)
        self.health.check_cov(self.P)
        self.P = 0.5 * (self.P + self.P.T)

        if overflow > 0:
            self.clones = self.clones[overflow:]
            self.P = self.P[6 * overflow:, 6 * overflow:].copy()
        return report

    def _correct(self, accepted, report):
        """Solve the batched correction, relinearizing when the step is
        large; a large step is only kept if it lowers the joint cost."""
        sigma2 = self.cfg.meas_sigma_px ** 2
        x0 = [clone.pose for clone in self.clones]
        rows_list = [rows for _, rows in accepted]
        d_cur = np.zeros(len(self.P))
        cost_cur = None
        upd = None
        for it in range(self.cfg.max_update_iters):
            h = np.vstack([t.h for t in rows_list])
            r = np.concatenate([t.r for t in rows_list]) + h @ d_cur
            noise = _BatchNoise(rows_list, sigma2)
            gain = _BatchGain(noise, h, self.P, self.cfg.psd_jitter)
            if it == 0:
                # the per-track gates cannot see conflicts between tracks,
                # so the stacked batch is screened once more as a whole
                gamma = float(r @ gain.s_solve(r))
                if gamma > self._chi2_threshold(len(r)):
                    report.tracks_gated += report.tracks_used
                    report.tracks_used = 0
                    return
            dx = gain.k @ r
            if float(np.linalg.norm(dx - d_cur)) < self.cfg.relinearize_step:
                self._place(x0, dx)
                d_cur, upd = dx, gain
                break
            if cost_cur is None:
                cost_cur = self._batch_cost(rows_list, d_cur)
            moved = False
            alpha = 1.0
            for _ in range(4):
                d_try = d_cur + alpha * (dx - d_cur)
                self._place(x0, d_try)
                rows_try = self._rebuild_rows(accepted, rows_list)
                cost_try = self._batch_cost(rows_try, d_try)
                if cost_try < cost_cur:
                    d_cur, rows_list, cost_cur = d_try, rows_try, cost_try
                    upd = gain
                    moved = True
                    break
                alpha *= 0.5
            if not moved:
                self._place(x0, d_cur)
                break
        if upd is None:
            # no step lowered the cost, so the whole batch is unusable here
            report.tracks_gated += report.tracks_used
            report.tracks_used = 0
            return
        report.rows = upd.h.shape[0]
        ikh = np.eye(len(self.P)) - upd.k @ upd.h
        self.P = ikh @ self.P @ ikh.T + upd.quad()
        report.correction_norm = float(np.linalg.norm(d_cur))

    def _place(self, x0, d):
        for c, clone in enumerate(self.clones):
            clone.pose = pose_boxplus(x0[c], d[6 * c:6 * c + 6])

    def _rebuild_rows(self, accepted, fallback):
        ctx = self._clone_context()
        out = []
        for (track, _), kept in zip(accepted, fallback):
            rows = self._track_rows(track, ctx)
            out.append(kept if rows is None else rows)
        return out

    def _batch_cost(self, rows_list, d):
        """Residual energy under the joint noise plus the prior penalty."""
        r = np.concatenate([t.r for t in rows_list])
        noise = _BatchNoise(rows_list, self.cfg.meas_sigma_px ** 2)
        return float(r @ noise.solve(r) + d @ np.linalg.solve(self.P, d))


# ----------------------------------------------------------------------
def _homography_dlt(ab, xy):
    def normalize(p):
        c = p.mean(axis=0)
        d = np.sqrt(((p - c) ** 2).sum(axis=1)).mean()
        s = math.sqrt(2.0) / max(d, 1e-12)
        t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
        return (p - c) * s, t
    ab_n, t1 = normalize(ab)
    xy_n, t2 = normalize(xy)
    n = len(ab)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2], a[0::2, 2] = ab_n, 1.0
    a[0::2, 6:8] = -xy_n[:, 0:1] * ab_n
    a[0::2, 8] = -xy_n[:, 0]
    a[1::2, 3:5], a[1::2, 5] = ab_n, 1.0
    a[1::2, 6:8] = -xy_n[:, 1:2] * ab_n
    a[1::2, 8] = -xy_n[:, 1]
    _, sv, vh = np.linalg.svd(a)
    if sv[-2] < 1e-9 * sv[0]:
        raise ValueError("landmark layout is degenerate for initialization")
    h = vh[-1].reshape(3, 3)
    return np.linalg.inv(t2) @ h @ t1


def _orthonormalize(m):
    u, _, vh = np.linalg.svd(m)
    r = u @ vh
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vh
    return r


def _pose_from_planar(points, xy):
    c = points.mean(axis=0)
    _, sv, vh = np.linalg.svd(points - c)
    if sv[1] < 1e-9 * max(sv[0], 1e-12):
        raise ValueError("initialization needs non-collinear landmarks")
    e1, e2 = vh[0], vh[1]
    basis = np.column_stack([e1, e2, np.cross(e1, e2)])
    ab = np.column_stack([(points - c) @ e1, (points - c) @ e2])
    h = _homography_dlt(ab, xy)
    lam = 2.0 / (np.linalg.norm(h[:, 0]) + np.linalg.norm(h[:, 1]))
    best = None
    for sign in (1.0, -1.0):
        m = sign * lam * h
        # the first two homography columns are the rotated in-plane axes,
        # the third carries R @ centroid + t
        r_plane = _orthonormalize(np.column_stack([m[:, 0], m[:, 1],
                                                   np.cross(m[:, 0],
                                                            m[:, 1])]))
        r = r_plane @ basis.T
        t_cw = m[:, 2] - r @ c
        depths = points @ r[2] + t_cw[2]
        score = int((depths > MIN_DEPTH).sum())
        if best is None or score > best[0]:
            best = (score, r, t_cw)
    score, r, t_cw = best
    if score < len(points):
        raise ValueError("initialization placed landmarks behind the camera")
    return r, t_cw


def _pose_from_dlt(points, xy):
    n = len(points)
    a = np.zeros((2 * n, 12))
    a[0::2, 0:3], a[0::2, 3] = points, 1.0
    a[0::2, 8:11] = -xy[:, 0:1] * points
    a[0::2, 11] = -xy[:, 0]
    a[1::2, 4:7], a[1::2, 7] = points, 1.0
    a[1::2, 8:11] = -xy[:, 1:2] * points
    a[1::2, 11] = -xy[:, 1]
    _, _, vh = np.linalg.svd(a)
    p = vh[-1].reshape(3, 4)
    m = p[:, :3]
    u, sv, vt = np.linalg.svd(m)
    scale = sv.mean()
    r = _orthonormalize(m)
    t = p[:, 3] / scale
    if np.linalg.det(u @ vt) < 0 or (points @ r[2] + t[2] < 0).sum() \
            > len(points) / 2:
        r, t = _orthonormalize(-m), -t
    depths = points @ r[2] + t[2]
    if (depths <= MIN_DEPTH).any():
        raise ValueError("initialization placed landmarks behind the camera")
    return r, t


def initialize_relative_pose(points_ib, px_j, intr, body_to_cam=None,
                             iterations=15):
    """Coarse relative pose from mapped landmarks and second-camera pixels.

    `points_ib` holds landmark positions in the first vehicle's body frame
    at the stamp of the pixels. Solves the camera pose by DLT (homography
    route when the landmarks are coplanar) and polishes it with a
    Gauss-Newton reprojection fit. Raises ValueError with fewer than six
    points or a degenerate layout.
    """
    body_to_cam = body_to_cam or Pose.identity()
    points = np.asarray(points_ib, dtype=float).reshape(-1, 3)
    px = np.asarray(px_j, dtype=float).reshape(-1, 2)
    if len(points) < 6:
        raise ValueError("initialization needs at least six landmarks")
    xn = np.column_stack([(px[:, 0] - intr.cx) / intr.fx,
                          (px[:, 1] - intr.cy) / intr.fy])
    if intr.has_distortion:
        xn = undistort_normalized(xn, intr.dist)

    c = points.mean(axis=0)
    sv = np.linalg.svd(points - c, compute_uv=False)
    # noisy near-planar clouds break the general DLT, so try the homography
    # route too and keep whichever candidate refines to the lower residual
    routes = [_pose_from_dlt]
    if sv[2] < 0.05 * max(sv[0], 1e-12):
        routes.insert(0, _pose_from_planar)

    r_bc = body_to_cam.q.rotation_matrix()
    best = None
    failure = "initialization found no usable pose"
    for route in routes:
        try:
            r_cw, t_cw = route(points, xn)
            r_q = r_cw.T @ r_bc
            t_hat = r_q @ r_bc.T @ (body_to_cam.t - t_cw)
            rel = Pose(t_hat, UnitQuaternion.from_rotation_matrix(r_q))
            rel, rms = _refine_pose(rel, points, px, intr, body_to_cam,
                                    iterations)
        except ValueError as exc:
            failure = str(exc)
            continue
        if best is None or rms < best[1]:
            best = (rel, rms)
    if best is None:
        raise ValueError(failure)
    rel, rms = best
    if rms > 25.0:
        raise ValueError(
            f"initialization reprojection residual too large ({rms:.1f} px)")
    return rel


def _refine_pose(rel, points, px, intr, body_to_cam, iterations):
    """Gauss-Newton reprojection polish; returns the pose and its RMS px."""
    anchor = Pose.identity()
    for _ in range(iterations):
        pred, p_c = measurement_predict(rel, anchor, points, intr, body_to_cam)
        if (p_c[:, 2] <= MIN_DEPTH).any():
            raise ValueError("refinement placed landmarks behind the camera")
        h_pose, _ = measurement_jacobians(rel, anchor, points, intr,
                                          body_to_cam)
        res = (px - pred).ravel()
        jac = h_pose.reshape(-1, 6)
        dx, *_ = np.linalg.lstsq(jac, res, rcond=None)
        rel = pose_boxplus(rel, dx)
        if np.linalg.norm(dx) < 1e-12:
            break
    pred, p_c = measurement_predict(rel, anchor, points, intr, body_to_cam)
    if (p_c[:, 2] <= MIN_DEPTH).any() or not np.isfinite(pred).all():
        raise ValueError("refinement placed landmarks behind the camera")
    rms = float(np.sqrt(np.mean((px - pred) ** 2)))
    return rel, rms
