"""Inter-vehicle link simulation: latency, dropouts, bandwidth, pairing.

Everything here is deterministic: latency and clock skew are fixed offsets,
dropout windows are half-open intervals on the send stamp, and the
bandwidth cap is accounted per integer-second delivery window.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from collections import deque
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Message:
    kind: str
    stamp: float  # send time
    size_bytes: int
    data: object = None


@dataclass(frozen=True)
class LinkConfig:
    latency: float = 0.015       # transmission delay, seconds
    skew: float = 0.001          # receiver clock offset, seconds
    dropouts: tuple = ()         # ((start, end), ...) half-open, on send time
    bandwidth_cap: float = None  # bytes per second; None = unlimited

    def in_dropout(self, stamp):
        return any(s <= stamp < e for s, e in self.dropouts)


class LinkSimulator:
    """FIFO link with fixed latency, dropout windows and a byte budget.

    Messages sent inside a dropout window are discarded outright. Delivery
    happens on `step(now)` for every queued message whose due time has
    passed, in send order; if a bandwidth cap is set, bytes delivered within
    one integer-second window never exceed it and the excess waits for the
    next window (a message larger than the whole cap is delivered alone
    rather than deadlocking the queue).
    """

    def __init__(self, cfg=None):
        self.cfg = cfg or LinkConfig()
        self._pending = deque()
        self._window = None
        self._window_used = 0
        self.sent_log = []
        self.dropped = 0
        self.delivered_bytes = 0

    def send(self, msg):
        self.sent_log.append(msg)
        if self.cfg.in_dropout(msg.stamp):
            self.dropped += 1
            return False
        due = msg.stamp + self.cfg.latency + self.cfg.skew
        self._pending.append((due, msg))
        return True

    def step(self, now):
        """Deliver everything due by `now`; returns the delivered messages."""
        out = []
        cap = self.cfg.bandwidth_cap
        if cap is not None:
            window = math.floor(now)
            if window != self._window:
                self._window = window
                self._window_used = 0
        while self._pending and self._pending[0][0] <= now:
            _, msg = self._pending[0]
            if cap is not None:
                fits = self._window_used + msg.size_bytes <= cap
                oversize = self._window_used == 0 and msg.size_bytes > cap
                if not fits and not oversize:
                    break
                self._window_used += msg.size_bytes
            self._pending.popleft()
            self.delivered_bytes += msg.size_bytes
            out.append(msg)
        return out


def bandwidth_report(messages, horizon_s):
    """Mean per-kind and total byte rates of a message log over a horizon."""
    if horizon_s <= 0:
        raise ValueError("horizon must be positive")
    kinds = {}
    for m in messages:
        entry = kinds.setdefault(m.kind, {"count": 0, "bytes": 0})
        entry["count"] += 1
        entry["bytes"] += m.size_bytes
    for entry in kinds.values():
        entry["rate_bps"] = entry["bytes"] / horizon_s
    total = sum(e["bytes"] for e in kinds.values())
    return {"kinds": kinds, "total_bytes": total,
            "total_rate_bps": total / horizon_s}


KEYPOINT_BYTES = 150 * (1 + 8 + 256)  # score + position + descriptor each
FRAME_STUB_BYTES = 50_000             # compressed grayscale image
VIO_POSE_BYTES = 28


def default_message_mix(horizon_s=1.0):
    """Canonical slave->master traffic: 30 Hz frames and poses, 13 Hz keypoints."""
    msgs = []
    for k in range(int(round(horizon_s * 30))):
        msgs.append(Message("frame_stub", k / 30.0, FRAME_STUB_BYTES))
        msgs.append(Message("vio_pose", k / 30.0, VIO_POSE_BYTES))
    for k in range(int(round(horizon_s * 13))):
        msgs.append(Message("keypoints", k / 13.0, KEYPOINT_BYTES))
    return msgs


@dataclass
class PairBuffer:
    """Pairs a reference (master) frame stream with a delayed other stream.

    Each reference frame is matched to the other-stream frame closest to
    ``ref_stamp - offset`` (ties break to the earlier frame). A pair is
    emitted only once a newer other-frame proves the candidate is closest;
    a reference frame whose closest candidate is beyond `tolerance` is
    discarded without consuming the candidate. The reference queue is
    bounded; its oldest waiting frame is dropped first on overflow.
    """

    tolerance: float = 1.0 / 60.0
    offset: float = 0.0
    capacity: int = 60
    unpairable: int = 0
    ref_overflow: int = 0
    _ref: deque = field(default_factory=deque, repr=False)
    _other: deque = field(default_factory=deque, repr=False)

    def push_ref(self, stamp, data):
        self._ref.append((stamp, data))
        while len(self._ref) > self.capacity:
            self._ref.popleft()
            self.ref_overflow += 1

    def push_other(self, stamp, data):
        if self._other and stamp <= self._other[-1][0]:
            raise ValueError("other-stream stamps must increase")
        self._other.append((stamp, data))

    def pairs(self):
        """Emit all pairs that are ready; call after pushing new frames."""
        out = []
        tol = self.tolerance + 1e-12
        while self._ref:
            target = self._ref[0][0] - self.offset
            # frames too old for this target can never serve a later one
            while self._other and self._other[0][0] < target - tol:
                self._other.popleft()
            if not self._other or self._other[-1][0] < target:
                break  # a closer other-frame may still arrive
            stamps = [s for s, _ in self._other]
            k = bisect_left(stamps, target)
            if k == 0:
                best = 0
            elif k == len(stamps):
                best = k - 1
            else:
                best = k - 1 if target - stamps[k - 1] <= stamps[k] - target \
                    else k
            ref_stamp, ref_data = self._ref.popleft()
            o_stamp, o_data = self._other[best]
            if abs(o_stamp - target) <= tol:
                for _ in range(best + 1):
                    self._other.popleft()
                out.append(((ref_stamp, ref_data), (o_stamp, o_data)))
            else:
                self.unpairable += 1
        return out
