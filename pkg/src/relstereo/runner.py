"""End-to-end scenario execution.

One run wires the pieces together on a single simulated clock: ground-truth
trajectories and drifting odometry feed two simulated cameras; the second
vehicle's frames and odometry cross a lossy link; paired frames drive the
feature-association channels; the emitted match sets update the relative
filter. Rows are logged once per processed frame pair and every randomized
component draws from its own seeded stream, so identical configurations
reproduce identical outputs byte for byte.
"""

from __future__ import annotations

import csv
import json
import math
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .analysis import compute_rmse, convergence_time, geodesic_deg
from .association import DualChannel
from .config import config_to_dict
from .estimator import (
    HealthMonitor,
    RelativeFilter,
    fast_propagate,
    initialize_relative_pose,
    propagate_state,
)
from .geometry import Pose, relative_from_world
from .network import (
    FRAME_STUB_BYTES,
    KEYPOINT_BYTES,
    VIO_POSE_BYTES,
    LinkSimulator,
    Message,
    PairBuffer,
    bandwidth_report,
)
from .world import (
    FrameObservation,
    FramePair,
    back_project,
    gen_trajectory,
    make_wall,
    observe_frame,
    sample_depth,
    simulate_vio,
)

KEYPOINT_RATE_HZ = 13  # guidance keypoint batches on the wire
_GATED_RESET_TICKS = 5  # fully gated updates tolerated before a reset


class InvariantBreach(RuntimeError):
    """A module invariant failed during a scenario step."""

    def __init__(self, step, module, detail):
        super().__init__(f"step {step} [{module}]: {detail}")
        self.step = step
        self.module = module
        self.detail = detail


CSV_FIELDS = [
    "stamp", "pair_stamp_j",
    "est_tx", "est_ty", "est_tz", "est_qw", "est_qx", "est_qy", "est_qz",
    "gt_tx", "gt_ty", "gt_tz", "gt_qw", "gt_qx", "gt_qy", "gt_qz",
    "pos_err_m", "ori_err_deg",
    "sig3_tx", "sig3_ty", "sig3_tz", "sig3_rx", "sig3_ry", "sig3_rz",
    "n_tracks_used", "n_gated_out",
    "n_matches", "n_guided_new", "n_dropped", "mean_hops",
]


@dataclass
class RunResult:
    config: object
    rows: list
    summary: dict
    bandwidth: dict

    def column(self, name):
        return np.array([row[name] for row in self.rows], dtype=float)


def _write_outputs(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "steps.csv"), "w", encoding="utf-8",
              newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in result.rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})
    with open(os.path.join(out_dir, "summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "bandwidth.json"), "w",
              encoding="utf-8") as fh:
        json.dump(result.bandwidth, fh, indent=2, sort_keys=True)
        fh.write("\n")


class _ScenarioState:
    """Mutable per-run machinery shared by the tick handlers."""

    def __init__(self, cfg):
        self.cfg = cfg
        seq = np.random.SeedSequence(cfg.seed)
        (self.rng_vio_i, self.rng_vio_j, self.rng_pix_i, self.rng_pix_j,
         self.rng_depth, self.rng_assoc) = \
            [np.random.default_rng(s) for s in seq.spawn(6)]

        self.stamps, self.poses_i, self.poses_j = \
            gen_trajectory(cfg.trajectory, wall_z=cfg.wall.depth)
        self.vio_i = simulate_vio(self.poses_i, cfg.noise.vio, self.rng_vio_i)
        self.vio_j = simulate_vio(self.poses_j, cfg.noise.vio, self.rng_vio_j)
        self.wall = make_wall(cfg.wall.depth, cfg.wall.width,
                              cfg.wall.height, cfg.wall.spacing)
        self.intr = cfg.camera
        self.period = 1.0 / cfg.rate_hz
        self.index_of = {self._key(t): k for k, t in enumerate(self.stamps)}

        self.link = LinkSimulator(cfg.link)
        self.buffer = PairBuffer(tolerance=self.period / 2,
                                 offset=cfg.async_offset)
        self.assoc = DualChannel(cfg.channel, self.rng_assoc)

        self.filt = None
        self.vio_j_rx = {}       # master-grid index -> received odometry pose
        self.pending = deque()
        self.last_ki = None      # trajectory indices of the last propagation
        self.last_kj = None
        self.gated_streak = 0    # consecutive updates with every track gated
        self.reinit = False      # a reset re-estimates, it keeps no old error
        self.next_log_k = 0      # first master stamp without a logged row
        self.health = HealthMonitor(cfg.filter.asym_tol,
                                    cfg.filter.psd_jitter,
                                    cfg.filter.nullspace_tol)
        self.kp_sent = 0
        self.rows = []
        self.emit_stamps = []
        self.emit_sizes = []

    @staticmethod
    def _key(stamp):
        return round(float(stamp), 9)

    # -- per-tick pipeline -------------------------------------------------
    def sense_and_send(self, k, now):
        cfg = self.cfg
        frame_i = observe_frame("i", now, self.poses_i[k], self.intr,
                                self.wall, cfg.noise.pixel_sigma,
                                self.rng_pix_i, cfg.occlusions,
                                grid_px=cfg.channel.fusion_grid_px)
        frame_j = observe_frame("j", now, self.poses_j[k], self.intr,
                                self.wall, cfg.noise.pixel_sigma,
                                self.rng_pix_j, cfg.occlusions,
                                grid_px=cfg.channel.fusion_grid_px)
        self.link.send(Message("frame_stub", now, FRAME_STUB_BYTES, frame_j))
        self.link.send(Message("vio_pose", now, VIO_POSE_BYTES,
                               (k, self.vio_j[k])))
        due = int(math.floor(now * KEYPOINT_RATE_HZ + 1e-9)) + 1
        while self.kp_sent < due:
            self.link.send(Message("keypoints", now, KEYPOINT_BYTES))
            self.kp_sent += 1
        return frame_i

    def receive(self, now):
        for msg in self.link.step(now):
            if msg.kind == "vio_pose":
                idx, pose = msg.data
                self.vio_j_rx[idx] = pose
            elif msg.kind == "frame_stub":
                self.buffer.push_other(msg.data.stamp, msg.data)

    def _initialize(self, ms, ki, kj, stamp):
        cfg = self.cfg
        if cfg.init.mode == "truth":
            rel0 = relative_from_world(self.poses_i[ki], self.poses_j[kj])
        else:
            if ms is None or len(ms) < 6:
                return
            obs = FrameObservation("i", stamp, np.asarray(ms.ids), ms.px_i)
            depths = sample_depth(obs, self.wall, self.poses_i[ki],
                                  cfg.noise.depth_sigma, self.rng_depth)
            pts = np.stack([back_project(ms.px_i[m], depths[m], self.intr)
                            for m in range(len(ms))])
            try:
                rel0 = initialize_relative_pose(pts, ms.px_j, self.intr)
            except ValueError:
                return  # degenerate set; retry on the next match set
        err = np.zeros(3) if self.reinit \
            else np.asarray(cfg.init.error, dtype=float)
        rel0 = Pose(rel0.t + err, rel0.q)
        p0 = np.diag(np.concatenate([
            cfg.init.pos_sigma ** 2 + err ** 2,
            np.full(3, cfg.init.rot_sigma ** 2),
        ]))
        self.filt = RelativeFilter(cfg.filter, self.intr, rel0, p0, stamp,
                                   self.vio_i[ki], health=self.health)
        self.last_ki, self.last_kj = ki, kj

    def _map_new_tracks(self, ms, ki, stamp):
        new_ids = set(int(i) for i in self.filt.new_track_ids(ms))
        if not new_ids:
            return {}, {}
        sel = [m for m, lid in enumerate(ms.ids) if int(lid) in new_ids]
        obs = FrameObservation("i", stamp, np.asarray(ms.ids[sel]),
                               ms.px_i[sel])
        depths = sample_depth(obs, self.wall, self.poses_i[ki],
                              self.cfg.noise.depth_sigma, self.rng_depth)
        odom = self.vio_i[ki]
        rot = odom.q.rotation_matrix()
        positions, covs = {}, {}
        for n, m in enumerate(sel):
            lid = int(ms.ids[m])
            positions[lid] = odom.apply(
                back_project(ms.px_i[m], depths[n], self.intr))
            covs[lid] = rot @ self._mapping_cov(ms.px_i[m],
                                                depths[n]) @ rot.T
        return positions, covs

    def _mapping_cov(self, px, depth):
        """Back-projection covariance from pixel and depth sensor noise."""
        xn = np.array([(px[0] - self.intr.cx) / self.intr.fx,
                       (px[1] - self.intr.cy) / self.intr.fy])
        jac = np.array([[depth / self.intr.fx, 0.0, xn[0]],
                        [0.0, depth / self.intr.fy, xn[1]],
                        [0.0, 0.0, 1.0]])
        var = np.array([self.cfg.noise.pixel_sigma ** 2,
                        self.cfg.noise.pixel_sigma ** 2,
                        self.cfg.noise.depth_sigma ** 2])
        return jac @ np.diag(var) @ jac.T

    def process_pair(self, ref, other):
        (ref_stamp, frame_i), (oth_stamp, frame_j) = ref, other
        ki = self.index_of[self._key(ref_stamp)]
        kj = self.index_of[self._key(oth_stamp)]
        self._fill_through(ki)
        ms = self.assoc.tick(FramePair(ref_stamp, frame_i, frame_j))
        stats = self.assoc.last_stats
        if ms is not None:
            self.emit_stamps.append(ref_stamp)
            self.emit_sizes.append(len(ms))

        if self.filt is None:
            self._initialize(ms, ki, kj, ref_stamp)
            report = None
            if self.filt is not None and ms is not None:
                positions, covs = self._map_new_tracks(ms, ki, ref_stamp)
                self.filt.add_matches(ms, positions, covs)
                report = self.filt.update()
        else:
            inc_i = relative_from_world(self.vio_i[self.last_ki],
                                        self.vio_i[ki])
            inc_j = relative_from_world(self.vio_j_rx[self.last_kj],
                                        self.vio_j_rx[kj])
            self.filt.propagate(ref_stamp, inc_i, inc_j, self.vio_i[ki],
                                n_steps=max(ki - self.last_ki, 1))
            self.last_ki, self.last_kj = ki, kj
            report = None
            if ms is not None:
                positions, covs = self._map_new_tracks(ms, ki, ref_stamp)
                self.filt.add_matches(ms, positions, covs)
                report = self.filt.update()
        self._log_row(ki, kj, ref_stamp, oth_stamp, report, stats)
        if self.health.violations:
            raise InvariantBreach(ki, "estimator",
                                  json.dumps(self.health.summary()))
        if report is not None:
            if report.tracks_used > 0:
                self.gated_streak = 0
            elif report.tracks_gated > 0:
                self.gated_streak += 1
            if self.gated_streak >= _GATED_RESET_TICKS:
                # a sustained run of fully gated updates means the estimate
                # left the gate's basin of attraction; start over
                self.filt = None
                self.gated_streak = 0
                self.reinit = True

    def _row_base(self, k):
        row = dict.fromkeys(CSV_FIELDS, float("nan"))
        row["stamp"] = float(self.stamps[k])
        gt = relative_from_world(self.poses_i[k], self.poses_j[k])
        for axis, name in enumerate(("gt_tx", "gt_ty", "gt_tz")):
            row[name] = float(gt.t[axis])
        for axis, name in enumerate(("gt_qw", "gt_qx", "gt_qy", "gt_qz")):
            row[name] = float(gt.q.to_array()[axis])
        return row, gt

    def _row_estimate(self, row, gt, est):
        for axis, name in enumerate(("est_tx", "est_ty", "est_tz")):
            row[name] = float(est.t[axis])
        for axis, name in enumerate(("est_qw", "est_qx", "est_qy",
                                     "est_qz")):
            row[name] = float(est.q.to_array()[axis])
        row["pos_err_m"] = float(np.linalg.norm(est.t - gt.t))
        row["ori_err_deg"] = geodesic_deg(gt.q, est.q)
        sig3 = 3.0 * np.sqrt(np.maximum(
            np.diag(self.filt.active_covariance()), 0.0))
        for axis, name in enumerate(("sig3_tx", "sig3_ty", "sig3_tz",
                                     "sig3_rx", "sig3_ry", "sig3_rz")):
            row[name] = float(sig3[axis])

    def _log_row(self, ki, kj, ref_stamp, oth_stamp, report, stats):
        row, gt = self._row_base(ki)
        row["pair_stamp_j"] = float(oth_stamp)
        row["n_tracks_used"] = report.tracks_used if report else 0
        row["n_gated_out"] = report.tracks_gated if report else 0
        row["n_matches"] = stats.n_matches
        row["n_guided_new"] = stats.n_guided_new
        row["n_dropped"] = stats.n_dropped
        row["mean_hops"] = float(stats.mean_hops)
        if self.filt is not None:
            # report at the reference stamp: advance the second vehicle
            # over the pairing lag with its received odometry
            inc_sync = relative_from_world(self.vio_j_rx[kj],
                                           self.vio_j_rx[ki])
            est = fast_propagate(self.filt.estimate, inc_sync)
            self._row_estimate(row, gt, est)
        self.rows.append(row)
        self.next_log_k = max(self.next_log_k, ki + 1)

    def _log_held_row(self, k):
        """No pair formed for this stamp, so hold the estimate forward with
        local odometry and whatever peer odometry has been received."""
        row, gt = self._row_base(k)
        for name in ("n_tracks_used", "n_gated_out", "n_matches",
                     "n_guided_new", "n_dropped"):
            row[name] = 0
        if self.filt is not None:
            inc_i = relative_from_world(self.vio_i[self.last_ki],
                                        self.vio_i[k])
            inc_j = Pose.identity()
            for idx in range(k, self.last_kj, -1):
                if idx in self.vio_j_rx:
                    inc_j = relative_from_world(self.vio_j_rx[self.last_kj],
                                                self.vio_j_rx[idx])
                    break
            est = propagate_state(self.filt.estimate, inc_i, inc_j)
            self._row_estimate(row, gt, est)
        self.rows.append(row)

    def _fill_through(self, k_stop):
        while self.next_log_k < min(k_stop, len(self.stamps)):
            self._log_held_row(self.next_log_k)
            self.next_log_k += 1

    def log_gaps(self, now):
        """Stamps older than the pairing pipeline's worst-case lag can no
        longer pair; give them held rows so the log keeps frame cadence."""
        while self.next_log_k < len(self.stamps) \
                and float(self.stamps[self.next_log_k]) + 4.0 * self.period \
                <= now + 1e-9:
            self._log_held_row(self.next_log_k)
            self.next_log_k += 1


def run_scenario(cfg, out_dir=None):
    """Execute one scenario; optionally write steps/summary/bandwidth files."""
    st = _ScenarioState(cfg)
    n = len(st.stamps)
    for k in range(n):
        now = float(st.stamps[k])
        frame_i = st.sense_and_send(k, now)
        st.receive(now)
        st.buffer.push_ref(now, frame_i)
        st.pending.extend(st.buffer.pairs())
        # hold each pair one frame so the matching odometry has arrived
        while st.pending and st.pending[0][0][0] + st.period <= now + 1e-9:
            st.process_pair(*st.pending.popleft())
        st.log_gaps(now)
    # drain in-flight odometry so the tail rows propagate with it
    st.receive(float(st.stamps[-1]) + 4.0 * st.period)
    st._fill_through(len(st.stamps))

    result = RunResult(cfg, st.rows, _summarize(cfg, st),
                       bandwidth_report(st.link.sent_log, cfg.duration))
    if out_dir is not None:
        _write_outputs(result, out_dir)
    return result


def _summarize(cfg, st):
    stamps = np.array([r["stamp"] for r in st.rows])
    pos_err = np.array([r["pos_err_m"] for r in st.rows])
    conv = convergence_time(stamps, pos_err) if len(st.rows) else None

    rmse_pos = rmse_ori = None
    if conv is not None:
        est_t = np.array([[r["est_tx"], r["est_ty"], r["est_tz"]]
                          for r in st.rows])
        est_q = np.array([[r["est_qw"], r["est_qx"], r["est_qy"], r["est_qz"]]
                          for r in st.rows])
        gt_t = np.array([[r["gt_tx"], r["gt_ty"], r["gt_tz"]]
                         for r in st.rows])
        gt_q = np.array([[r["gt_qw"], r["gt_qx"], r["gt_qy"], r["gt_qz"]]
                         for r in st.rows])
        rmse_pos, rmse_ori = compute_rmse(stamps, est_t, est_q, gt_t, gt_q,
                                          skip=conv)

    rate = 0.0
    if len(st.emit_stamps) > 1:
        span = st.emit_stamps[-1] - st.emit_stamps[0]
        rate = (len(st.emit_stamps) - 1) / span if span > 0 else 0.0

    health = st.health.summary()
    summary = {
        "name": cfg.name,
        "seed": cfg.seed,
        "duration_s": cfg.duration,
        "n_rows": len(st.rows),
        "initialized": st.filt is not None,
        "converged": conv is not None,
        "convergence_time_s": conv,
        "rmse_pos_m": rmse_pos,
        "rmse_ori_deg": rmse_ori,
        "mean_matches_per_frame": (float(np.mean(st.emit_sizes))
                                   if st.emit_sizes else 0.0),
        "association_rate_hz": rate,
        "pairs_unpairable": st.buffer.unpairable,
        "messages_dropped": st.link.dropped,
        "health": health,
        "config": config_to_dict(cfg),
    }
    return summary
