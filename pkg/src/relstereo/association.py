"""Cross-camera feature association: guidance and prediction channels.

The guidance channel produces fresh cross-camera matches with a multi-frame
latency (a stand-in for a heavy learned matcher exchanging keypoints over
the link). The prediction channel keeps an evolving "club" of matches alive
at frame rate by optical-flow-style tracking: a completed guidance batch is
fast-forwarded through cached frames to the previous stamp, fused with the
club under image-grid crowding rules, cleaned by RANSAC plus a displacement
direction check, and then the whole club is flowed to the current frame.
With the prediction channel disabled only the raw guidance results are
emitted, at the guidance cycle rate and stamped at their source frame.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np


class SyncError(RuntimeError):
    """A flow hop required a frame that is not cached."""


@dataclass(frozen=True)
class FeatureMatch:
    landmark_id: int
    px_i: np.ndarray
    px_j: np.ndarray
    origin_stamp: float
    hops: int


@dataclass(frozen=True)
class MatchSet:
    """Cross-camera matches at one stamp, stored as parallel arrays."""

    stamp: float
    ids: np.ndarray
    px_i: np.ndarray
    px_j: np.ndarray
    origin: np.ndarray
    hops: np.ndarray

    @staticmethod
    def empty(stamp):
        return MatchSet(stamp, np.empty(0, dtype=np.int64),
                        np.empty((0, 2)), np.empty((0, 2)),
                        np.empty(0), np.empty(0, dtype=np.int64))

    def __len__(self):
        return len(self.ids)

    def subset(self, mask):
        return MatchSet(self.stamp, self.ids[mask], self.px_i[mask],
                        self.px_j[mask], self.origin[mask], self.hops[mask])

    def matches(self):
        for k in range(len(self.ids)):
            yield FeatureMatch(int(self.ids[k]), self.px_i[k], self.px_j[k],
                               float(self.origin[k]), int(self.hops[k]))


@dataclass(frozen=True)
class ChannelConfig:
    rate_hz: float = 30.0
    guidance_latency_frames: int = 3
    guidance_skip_frames: int = None  # frames not seeded after each job
    inlier_rate: float = 0.9        # fraction of guided matches paired truly
    flow_sigma: float = 0.3         # px of fresh drift per flow hop, per axis
    flow_drop_prob: float = 0.01    # per-hop chance a match is lost
    fusion_grid_px: int = 40
    ransac_iters: int = 200
    ransac_thresh_px: float = 3.0
    angle_thresh: float = math.radians(30.0)
    prediction_enabled: bool = True

    def __post_init__(self):
        if self.guidance_latency_frames < 1:
            raise ValueError("guidance latency must be at least one frame")
        if self.guidance_skip_frames is None:
            object.__setattr__(self, "guidance_skip_frames",
                               self.guidance_latency_frames - 1)
        if self.guidance_skip_frames + 1 < self.guidance_latency_frames:
            raise ValueError("skip window must span the guidance latency")
        if not 0.0 <= self.inlier_rate <= 1.0:
            raise ValueError("inlier_rate must be within [0, 1]")


class ImgDB:
    """Bounded cache of recent frame pairs, keyed by stamp."""

    def __init__(self, capacity=30):
        self.capacity = capacity
        self._frames = OrderedDict()

    @staticmethod
    def _key(stamp):
        return round(stamp, 9)

    def put(self, pair):
        self._frames[self._key(pair.stamp)] = pair
        while len(self._frames) > self.capacity:
            self._frames.popitem(last=False)

    def get(self, stamp):
        return self._frames.get(self._key(stamp))

    def stamps(self):
        return [p.stamp for p in self._frames.values()]

    def __len__(self):
        return len(self._frames)


@dataclass
class GuidanceJob:
    submit_tick: int
    due_tick: int
    source_stamp: float
    result: MatchSet


def guidance_submit(pair, cfg, rng):
    """Ground-truth-assisted cross-camera matching of one frame pair.

    Matches features co-visible in both extractors' outputs by landmark id,
    then corrupts each match independently with probability 1-inlier_rate by
    re-pairing its j-side pixel with a different visible feature.
    """
    obs_i, obs_j = pair.cam_i.obs, pair.cam_j.obs
    common, ii, jj = np.intersect1d(obs_i.ids, obs_j.ids, return_indices=True)
    n = len(common)
    ms = MatchSet(pair.stamp, common.astype(np.int64),
                  obs_i.px[ii].copy(), obs_j.px[jj].copy(),
                  np.full(n, pair.stamp), np.zeros(n, dtype=np.int64))
    if n and cfg.inlier_rate < 1.0:
        bad = rng.random(n) > cfg.inlier_rate
        if len(obs_j.ids) >= 2:
            for k in np.flatnonzero(bad):
                # pair with some other extracted feature of camera j
                while True:
                    other = rng.integers(len(obs_j.ids))
                    if obs_j.ids[other] != ms.ids[k]:
                        break
                ms.px_j[k] = obs_j.px[other]
    return ms


def _flow_step(ms, prev_pair, new_pair, cfg, rng):
    """One flow hop: carry per-match pixel error forward, add fresh drift."""
    ids = ms.ids
    vis = (prev_pair.cam_i.truth_vis[ids] & prev_pair.cam_j.truth_vis[ids]
           & new_pair.cam_i.truth_vis[ids] & new_pair.cam_j.truth_vis[ids])
    if cfg.flow_drop_prob > 0 and len(ids):
        vis &= rng.random(len(ids)) >= cfg.flow_drop_prob
    kept = ms.subset(vis)
    ids = kept.ids
    noise = rng.normal(scale=cfg.flow_sigma, size=(2, len(ids), 2)) \
        if cfg.flow_sigma > 0 and len(ids) else np.zeros((2, len(ids), 2))
    px_i = new_pair.cam_i.truth_px[ids] \
        + (kept.px_i - prev_pair.cam_i.truth_px[ids]) + noise[0]
    px_j = new_pair.cam_j.truth_px[ids] \
        + (kept.px_j - prev_pair.cam_j.truth_px[ids]) + noise[1]
    return MatchSet(new_pair.stamp, ids, px_i, px_j, kept.origin,
                    kept.hops + 1)


def normal_flow(ms, prev_pair, new_pair, cfg, rng):
    """Advance a match set by exactly one frame."""
    if abs(prev_pair.stamp - ms.stamp) > 1e-9:
        raise SyncError("match set is not aligned with the previous frame")
    return _flow_step(ms, prev_pair, new_pair, cfg, rng)


def fast_flow(ms, db, to_stamp, cfg, rng):
    """Multi-hop flow of a stale match set up to `to_stamp` via the cache."""
    period = 1.0 / cfg.rate_hz
    prev = db.get(ms.stamp)
    if prev is None:
        raise SyncError(f"source frame {ms.stamp:.4f} not cached")
    chain = [p for p in (db.get(s) for s in db.stamps())
             if ms.stamp < p.stamp <= to_stamp + 1e-9]
    out = ms
    for nxt in chain:
        if nxt.stamp - prev.stamp > 1.5 * period:
            raise SyncError("gap in cached frames during fast flow")
        out = _flow_step(out, prev, nxt, cfg, rng)
        prev = nxt
    if abs(out.stamp - to_stamp) > 1e-9:
        raise SyncError("cache does not reach the requested stamp")
    return out


def match_fusion(guided, existing, cfg):
    """Merge a guided batch into the club under grid-crowding rules.

    Existing matches always survive. A guided match enters only if its
    landmark id is new and neither of its pixels lands in a grid cell
    already occupied by an existing match in that image.
    """
    if abs(guided.stamp - existing.stamp) > 1e-9:
        raise SyncError("fusion requires both sets at the same stamp")
    g = cfg.fusion_grid_px
    taken_i = {(int(u // g), int(v // g)) for u, v in existing.px_i}
    taken_j = {(int(u // g), int(v // g)) for u, v in existing.px_j}
    known = set(existing.ids.tolist())
    keep = np.zeros(len(guided), dtype=bool)
    for k in range(len(guided)):
        if int(guided.ids[k]) in known:
            continue
        ci = (int(guided.px_i[k, 0] // g), int(guided.px_i[k, 1] // g))
        cj = (int(guided.px_j[k, 0] // g), int(guided.px_j[k, 1] // g))
        if ci in taken_i or cj in taken_j:
            continue
        keep[k] = True
    add = guided.subset(keep)
    return MatchSet(existing.stamp,
                    np.concatenate([existing.ids, add.ids]),
                    np.vstack([existing.px_i, add.px_i]),
                    np.vstack([existing.px_j, add.px_j]),
                    np.concatenate([existing.origin, add.origin]),
                    np.concatenate([existing.hops, add.hops]))


def _hartley_normalize(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / max(d, 1e-12)
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return (pts - c) * s, T


def _ransac_fundamental_inliers(px_i, px_j, cfg, rng):
    """Inlier mask from RANSAC eight-point epipolar fits (Sampson distance)."""
    n = len(px_i)
    x1, t1 = _hartley_normalize(px_i)
    x2, t2 = _hartley_normalize(px_j)
    a = np.column_stack([
        x2[:, 0] * x1[:, 0], x2[:, 0] * x1[:, 1], x2[:, 0],
        x2[:, 1] * x1[:, 0], x2[:, 1] * x1[:, 1], x2[:, 1],
        x1[:, 0], x1[:, 1], np.ones(n),
    ])
    keys = rng.random((cfg.ransac_iters, n))
    idx = np.argpartition(keys, 7, axis=1)[:, :8]
    _, _, vh = np.linalg.svd(a[idx])
    f = vh[:, -1, :].reshape(-1, 3, 3)
    # enforce the rank-2 constraint on every candidate
    uf, sf, vf = np.linalg.svd(f)
    sf[:, 2] = 0.0
    f = uf @ (sf[:, :, None] * vf)
    f = t2.T @ f @ t1  # back to pixel units

    h1 = np.column_stack([px_i, np.ones(n)])
    h2 = np.column_stack([px_j, np.ones(n)])
    fx1 = np.einsum("kab,nb->kna", f, h1)
    ftx2 = np.einsum("kba,nb->kna", f, h2)
    num = np.einsum("na,kna->kn", h2, fx1) ** 2
    den = fx1[:, :, 0] ** 2 + fx1[:, :, 1] ** 2 \
        + ftx2[:, :, 0] ** 2 + ftx2[:, :, 1] ** 2
    d2 = num / np.maximum(den, 1e-18)
    inliers = d2 < cfg.ransac_thresh_px ** 2
    best = int(np.argmax(inliers.sum(axis=1)))
    return inliers[best]


def outlier_reject(ms, cfg, rng):
    """Drop inconsistent matches; output is always a subset of the input.

    With eight or more matches an epipolar RANSAC runs first; the survivors
    then pass a displacement-direction test against the set's circular-mean
    i->j flow direction.
    """
    if len(ms) == 0:
        return ms
    out = ms
    if len(out) >= 8:
        out = out.subset(_ransac_fundamental_inliers(out.px_i, out.px_j,
                                                     cfg, rng))
    if len(out) == 0:
        return out
    disp = out.px_j - out.px_i
    ang = np.arctan2(disp[:, 1], disp[:, 0])
    mean = math.atan2(np.sin(ang).sum(), np.cos(ang).sum())
    dev = np.abs((ang - mean + math.pi) % (2.0 * math.pi) - math.pi)
    return out.subset(dev <= cfg.angle_thresh)


@dataclass
class TickStats:
    n_matches: int = 0
    n_guided_new: int = 0
    n_dropped: int = 0
    mean_hops: float = 0.0
    guidance_consumed: bool = False
    guidance_dropped: bool = False


class DualChannel:
    """Per-tick driver of the guidance + prediction channels.

    Feed one paired frame per tick; returns the emitted MatchSet (None while
    warming up). Details of the last tick are kept in `last_stats`.
    """

    def __init__(self, cfg=None, rng=None):
        self.cfg = cfg or ChannelConfig()
        self.rng = rng or np.random.default_rng(0)
        self.db = ImgDB()
        self.club = None
        self.job = None
        self.tick_count = 0
        self.seed_tick = None
        self.prev_pair = None
        self.last_stats = TickStats()

    def _submit(self, pair):
        result = guidance_submit(pair, self.cfg, self.rng)
        self.seed_tick = self.tick_count
        self.job = GuidanceJob(self.tick_count,
                               self.tick_count + self.cfg.guidance_latency_frames,
                               pair.stamp, result)

    def _may_seed(self):
        # the matcher stays busy for the whole skip window, even past due
        return self.seed_tick is None or self.tick_count \
            >= self.seed_tick + self.cfg.guidance_skip_frames + 1

    def tick(self, pair):
        cfg = self.cfg
        stats = TickStats()
        self.tick_count += 1
        period = 1.0 / cfg.rate_hz

        # a gap in the pair stream (communication loss) voids flow continuity
        if self.prev_pair is not None \
                and pair.stamp - self.prev_pair.stamp > 1.5 * period:
            self.club = None
            self.job = None
            self.seed_tick = None
        self.db.put(pair)

        if not cfg.prediction_enabled:
            out = None
            if self.job and self.tick_count >= self.job.due_tick:
                out = outlier_reject(self.job.result, cfg, self.rng)
                self.job = None
                stats.guidance_consumed = True
            if self.job is None and self._may_seed():
                self._submit(pair)
            self.prev_pair = pair
            self._finish(stats, out)
            return out

        if self.job and self.tick_count >= self.job.due_tick:
            job, self.job = self.job, None
            stats.guidance_consumed = True
            try:
                batch = fast_flow(job.result, self.db, self.prev_pair.stamp,
                                  cfg, self.rng)
                club = self.club if self.club is not None \
                    else MatchSet.empty(self.prev_pair.stamp)
                fused = match_fusion(batch, club, cfg)
                stats.n_guided_new = len(fused) - len(club)
                cleaned = outlier_reject(fused, cfg, self.rng)
                stats.n_dropped += len(fused) - len(cleaned)
                self.club = cleaned
            except SyncError:
                stats.guidance_dropped = True

        out = None
        if self.club is not None:
            before = len(self.club)
            self.club = normal_flow(self.club, self.prev_pair, pair, cfg,
                                    self.rng)
            stats.n_dropped += before - len(self.club)
            out = self.club

        if self.job is None and self._may_seed():
            self._submit(pair)
        self.prev_pair = pair
        self._finish(stats, out)
        return out

    def _finish(self, stats, out):
        if out is not None and len(out):
            stats.n_matches = len(out)
            stats.mean_hops = float(np.mean(out.hops))
        self.last_stats = stats
