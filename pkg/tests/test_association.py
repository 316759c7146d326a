import math

import numpy as np
import pytest

from relstereo.association import (
    ChannelConfig,
    DualChannel,
    ImgDB,
    MatchSet,
    SyncError,
    fast_flow,
    guidance_submit,
    match_fusion,
    normal_flow,
    outlier_reject,
)
from relstereo.geometry import Pose
from relstereo.world import CameraIntrinsics, FramePair, make_wall, observe_frame

INTR = CameraIntrinsics()
WALL = make_wall()
PERIOD = 1.0 / 30.0


def make_pair(stamp, pos_i=(0.0, 0.0, 3.0), pos_j=(3.0, 0.0, 3.0),
              pixel_sigma=0.0, rng=None, wall=WALL):
    rng = rng or np.random.default_rng(0)
    cam_i = observe_frame("i", stamp, Pose(np.array(pos_i)), INTR, wall,
                          pixel_sigma, rng)
    cam_j = observe_frame("j", stamp, Pose(np.array(pos_j)), INTR, wall,
                          pixel_sigma, rng)
    return FramePair(stamp, cam_i, cam_j)


def pair_stream(n, speed=0.5, **kw):
    """n frame pairs with both cameras translating laterally in formation."""
    out = []
    for k in range(n):
        x = speed * k * PERIOD
        out.append(make_pair(k * PERIOD, pos_i=(x, 0.0, 3.0),
                             pos_j=(x + 3.0, 0.0, 3.0), **kw))
    return out


def test_guidance_submit_exact_when_uncorrupted():
    cfg = ChannelConfig(inlier_rate=1.0)
    pair = make_pair(0.0)
    ms = guidance_submit(pair, cfg, np.random.default_rng(1))
    assert len(ms) >= 8
    common = np.intersect1d(pair.cam_i.obs.ids, pair.cam_j.obs.ids)
    assert np.array_equal(np.sort(ms.ids), common)
    assert (ms.hops == 0).all()
    # pixels are the extractor outputs for those ids
    for m in ms.matches():
        ki = np.flatnonzero(pair.cam_i.obs.ids == m.landmark_id)[0]
        kj = np.flatnonzero(pair.cam_j.obs.ids == m.landmark_id)[0]
        assert np.allclose(m.px_i, pair.cam_i.obs.px[ki])
        assert np.allclose(m.px_j, pair.cam_j.obs.px[kj])


def test_guidance_submit_corruption_rate():
    cfg = ChannelConfig(inlier_rate=0.7)
    pair = make_pair(0.0)
    rng = np.random.default_rng(2)
    wrong = total = 0
    for _ in range(30):
        ms = guidance_submit(pair, cfg, rng)
        truth = pair.cam_j.truth_px[ms.ids]
        wrong += int((np.abs(ms.px_j - truth).max(axis=1) > 1e-9).sum())
        total += len(ms)
    rate = wrong / total
    assert 0.25 < rate < 0.35


def test_normal_flow_carries_error_and_counts_hops():
    cfg = ChannelConfig(flow_sigma=0.0, flow_drop_prob=0.0)
    pairs = pair_stream(3)
    ms = guidance_submit(pairs[0], ChannelConfig(inlier_rate=1.0),
                         np.random.default_rng(0))
    rng = np.random.default_rng(0)
    ms1 = normal_flow(ms, pairs[0], pairs[1], cfg, rng)
    assert ms1.stamp == pairs[1].stamp
    assert (ms1.hops == 1).all()
    # zero noise: pixels land exactly on the new true projections
    assert np.allclose(ms1.px_i, pairs[1].cam_i.truth_px[ms1.ids])
    assert np.allclose(ms1.px_j, pairs[1].cam_j.truth_px[ms1.ids])
    with pytest.raises(SyncError):
        normal_flow(ms, pairs[1], pairs[2], cfg, rng)


def test_normal_flow_drift_stays_within_gaussian_bound():
    sigma = 0.5
    cfg = ChannelConfig(flow_sigma=sigma, flow_drop_prob=0.0)
    pairs = pair_stream(40)
    ms = guidance_submit(pairs[0], ChannelConfig(inlier_rate=1.0),
                         np.random.default_rng(3))
    rng = np.random.default_rng(4)
    for prev, cur in zip(pairs[:-1], pairs[1:]):
        ms = normal_flow(ms, prev, cur, cfg, rng)
        if len(ms) == 0:
            break
        for px, cam in ((ms.px_i, cur.cam_i), (ms.px_j, cur.cam_j)):
            dev = np.abs(px - cam.truth_px[ms.ids]).max()
            assert dev <= ms.hops.max() * 4.0 * sigma


def test_normal_flow_drops_landmarks_leaving_view():
    cfg = ChannelConfig(flow_sigma=0.0, flow_drop_prob=0.0)
    # big lateral jump pushes part of the shared view out of camera j
    a = make_pair(0.0)
    b = make_pair(PERIOD, pos_i=(0.0, 0.0, 3.0), pos_j=(9.0, 0.0, 3.0))
    ms = guidance_submit(a, ChannelConfig(inlier_rate=1.0),
                         np.random.default_rng(0))
    out = normal_flow(ms, a, b, cfg, np.random.default_rng(0))
    assert 0 < len(out) < len(ms)
    assert b.cam_j.truth_vis[out.ids].all()


def test_flow_drop_probability():
    cfg = ChannelConfig(flow_sigma=0.0, flow_drop_prob=0.2)
    pairs = pair_stream(2, speed=0.0)
    ms = guidance_submit(pairs[0], ChannelConfig(inlier_rate=1.0),
                         np.random.default_rng(5))
    rng = np.random.default_rng(6)
    survivors = [len(normal_flow(ms, pairs[0], pairs[1], cfg, rng))
                 for _ in range(60)]
    rate = 1.0 - np.mean(survivors) / len(ms)
    assert 0.15 < rate < 0.25


def test_fast_flow_multi_hop_and_cache_miss():
    cfg = ChannelConfig(flow_sigma=0.0, flow_drop_prob=0.0)
    pairs = pair_stream(5)
    db = ImgDB()
    for p in pairs:
        db.put(p)
    ms = guidance_submit(pairs[0], ChannelConfig(inlier_rate=1.0),
                         np.random.default_rng(0))
    out = fast_flow(ms, db, pairs[3].stamp, cfg, np.random.default_rng(0))
    assert out.stamp == pairs[3].stamp
    assert (out.hops == 3).all()
    empty_db = ImgDB()
    with pytest.raises(SyncError):
        fast_flow(ms, empty_db, pairs[3].stamp, cfg, np.random.default_rng(0))


def test_fast_flow_detects_gap():
    cfg = ChannelConfig(flow_sigma=0.0, flow_drop_prob=0.0)
    pairs = pair_stream(5)
    db = ImgDB()
    for k in (0, 1, 3, 4):  # frame 2 missing
        db.put(pairs[k])
    ms = guidance_submit(pairs[0], ChannelConfig(inlier_rate=1.0),
                         np.random.default_rng(0))
    with pytest.raises(SyncError):
        fast_flow(ms, db, pairs[4].stamp, cfg, np.random.default_rng(0))


def test_imgdb_capacity():
    db = ImgDB(capacity=3)
    pairs = pair_stream(5, speed=0.0)
    for p in pairs:
        db.put(p)
    assert len(db) == 3
    assert db.get(pairs[0].stamp) is None
    assert db.get(pairs[4].stamp) is not None


def test_match_fusion_rules():
    cfg = ChannelConfig()
    pair = make_pair(0.0)
    guided = guidance_submit(pair, ChannelConfig(inlier_rate=1.0),
                             np.random.default_rng(0))
    empty = MatchSet.empty(0.0)
    fused = match_fusion(guided, empty, cfg)
    assert len(fused) == len(guided)  # no crowded grids when club is empty

    # re-fusing the same batch adds nothing: ids duplicate, cells taken
    again = match_fusion(guided, fused, cfg)
    assert len(again) == len(fused)
    assert np.array_equal(np.sort(again.ids), np.sort(fused.ids))

    # a new id landing in an occupied cell is rejected
    k = len(guided) // 2
    clone = MatchSet(0.0, np.array([10 ** 6]), guided.px_i[k:k + 1] + 1.0,
                     guided.px_j[k:k + 1] + 1.0, np.array([0.0]),
                     np.array([0]))
    fused2 = match_fusion(clone, fused, cfg)
    assert len(fused2) == len(fused)

    # existing matches always survive
    assert set(fused.ids.tolist()) <= set(fused2.ids.tolist()) | set(fused.ids.tolist())


def test_outlier_reject_keeps_consistent_set():
    pair = make_pair(0.0)
    ms = guidance_submit(pair, ChannelConfig(inlier_rate=1.0),
                         np.random.default_rng(0))
    out = outlier_reject(ms, ChannelConfig(), np.random.default_rng(1))
    assert len(out) == len(ms)


def test_outlier_reject_removes_planted_outlier():
    pair = make_pair(0.0, pixel_sigma=1.0, rng=np.random.default_rng(7))
    ms = guidance_submit(pair, ChannelConfig(inlier_rate=1.0),
                         np.random.default_rng(0))
    assert len(ms) >= 20
    ms.px_j[3] += np.array([92.0, -70.0])  # flows against the stereo disparity
    out = outlier_reject(ms, ChannelConfig(), np.random.default_rng(2))
    assert int(ms.ids[3]) not in out.ids
    assert len(out) >= len(ms) - 3


def test_outlier_reject_small_set_uses_direction_check():
    ids = np.arange(5)
    px_i = np.array([[100.0, 100], [200, 100], [300, 100], [400, 100],
                     [150, 200]])
    disp = np.tile([30.0, 2.0], (5, 1))
    disp[4] = [-30.0, -2.0]  # one match flows backwards
    ms = MatchSet(0.0, ids, px_i, px_i + disp, np.zeros(5),
                  np.zeros(5, dtype=np.int64))
    out = outlier_reject(ms, ChannelConfig(), np.random.default_rng(0))
    assert list(out.ids) == [0, 1, 2, 3]


def run_channel(cfg, n_ticks, seed=0):
    chan = DualChannel(cfg, np.random.default_rng(seed))
    emitted = {}
    for k, pair in enumerate(pair_stream(n_ticks), start=1):
        out = chan.tick(pair)
        if out is not None:
            emitted[k] = out
    return emitted


def test_dual_channel_warmup_and_full_rate():
    emitted = run_channel(ChannelConfig(), 40)
    assert min(emitted) == 4  # latency-3 guidance lands before the 4th tick
    assert sorted(emitted) == list(range(4, 41))
    window = [k for k in emitted if 10 <= k < 40]
    assert len(window) == 30  # full input rate in steady state


def test_dual_channel_hop_pattern():
    cfg = ChannelConfig(flow_sigma=0.0, flow_drop_prob=0.0, inlier_rate=1.0)
    emitted = run_channel(cfg, 8)
    # first batch: two fast hops to t3 plus one normal hop to t4
    assert (emitted[4].hops == 3).all()
    assert (emitted[5].hops == 4).all()
    assert (emitted[6].hops == 5).all()
    # tick 7 consumes the second batch: survivors at 6 hops, new entries at 3
    hops7 = set(emitted[7].hops.tolist())
    assert hops7 <= {3, 6}
    assert 6 in hops7


def test_single_channel_latency3_every_third_tick():
    cfg = ChannelConfig(prediction_enabled=False, guidance_latency_frames=3)
    emitted = run_channel(cfg, 40)
    assert sorted(emitted) == [4, 7, 10, 13, 16, 19, 22, 25, 28, 31, 34, 37, 40]
    window = [k for k in emitted if 10 <= k < 40]
    assert len(window) == 10
    # stale stamps: emissions describe the frame the cycle started on
    assert emitted[7].stamp == pytest.approx(3 * PERIOD)


def test_single_channel_latency6_every_sixth_tick():
    cfg = ChannelConfig(prediction_enabled=False, guidance_latency_frames=6)
    emitted = run_channel(cfg, 43)
    assert sorted(emitted) == [7, 13, 19, 25, 31, 37, 43]
    window = [k for k in emitted if 10 <= k < 40]
    assert len(window) == 5


def test_dual_channel_deterministic():
    cfg = ChannelConfig()
    a = run_channel(cfg, 20, seed=9)
    b = run_channel(cfg, 20, seed=9)
    assert sorted(a) == sorted(b)
    for k in a:
        assert np.array_equal(a[k].ids, b[k].ids)
        assert np.array_equal(a[k].px_j, b[k].px_j)


def test_dual_channel_resets_on_stream_gap():
    cfg = ChannelConfig()
    chan = DualChannel(cfg, np.random.default_rng(0))
    pairs = pair_stream(60)
    outs = {}
    for k, pair in enumerate(pairs, start=1):
        if 20 <= k < 40:
            continue  # communication gap: ticks simply do not happen
        out = chan.tick(pair)
        if out is not None:
            outs[k] = out
    assert 19 in outs
    # after the gap the club must rebuild via a fresh guidance cycle
    assert 40 not in outs and 41 not in outs and 42 not in outs
    assert 43 in outs
    assert (outs[43].origin >= pairs[39].stamp).all()
