"""Scenario configuration: one JSON document, every field defaulted.

A minimal ``{}`` runs the default rectangle scenario. Unknown keys anywhere
in the document raise ConfigError so typos fail loudly instead of being
silently ignored. Angles are radians and lengths meters throughout, matching
the in-code dataclasses the blocks map onto.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

from .association import ChannelConfig
from .estimator import FilterConfig
from .network import LinkConfig
from .world import CameraIntrinsics, OcclusionWindow, TrajectorySpec, \
    VioNoiseModel


class ConfigError(ValueError):
    """Malformed, unknown, or out-of-range configuration input."""


@dataclass(frozen=True)
class WallConfig:
    depth: float = 8.0
    width: float = 24.0
    height: float = 6.0
    spacing: float = 0.5

    def __post_init__(self):
        if self.depth <= 0 or self.width <= 0 or self.height <= 0 \
                or self.spacing <= 0:
            raise ValueError("wall dimensions must be positive")


@dataclass(frozen=True)
class NoiseConfig:
    pixel_sigma: float = 0.5   # px, feature extraction noise
    depth_sigma: float = 0.05  # m, depth sensor noise
    vio: VioNoiseModel = field(default_factory=VioNoiseModel)

    def __post_init__(self):
        if self.pixel_sigma < 0 or self.depth_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")


@dataclass(frozen=True)
class InitConfig:
    """How the first relative-pose estimate is produced.

    ``coarse`` solves it from the first usable match set plus sampled
    depths; ``truth`` starts from the ground-truth relative pose. In both
    modes ``error`` is added to the initial translation and the initial
    covariance is widened by it, so convergence-from-offset studies run the
    same way against either starting point.
    """

    mode: str = "coarse"
    error: tuple = (0.0, 0.0, 0.0)
    pos_sigma: float = 0.5               # m, base initial 1-sigma
    rot_sigma: float = math.radians(5.0)  # rad, initial orientation 1-sigma

    def __post_init__(self):
        if self.mode not in ("coarse", "truth"):
            raise ValueError(f"unknown init mode {self.mode!r}")
        if len(self.error) != 3:
            raise ValueError("init error must have three components")
        if self.pos_sigma <= 0 or self.rot_sigma <= 0:
            raise ValueError("initial sigmas must be positive")


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "rectangle"
    seed: int = 0
    duration: float = 8.0
    rate_hz: float = 30.0
    async_offset: float = 0.0   # seconds the paired second-camera frame lags
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    wall: WallConfig = field(default_factory=WallConfig)
    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    link: LinkConfig = field(default_factory=LinkConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    init: InitConfig = field(default_factory=InitConfig)
    occlusions: tuple = ()

    def __post_init__(self):
        if self.duration <= 0 or self.rate_hz <= 0:
            raise ValueError("duration and rate_hz must be positive")
        if self.async_offset < 0:
            raise ValueError("async_offset must be non-negative")


def _tuple3(v):
    t = tuple(float(x) for x in v)
    if len(t) != 3:
        raise ConfigError("expected a 3-element list")
    return t


def _windows(v):
    out = []
    for w in v:
        if len(w) != 2 or not w[0] < w[1]:
            raise ConfigError("dropout windows are [start, end) pairs")
        out.append((float(w[0]), float(w[1])))
    return tuple(out)


def _occlusion(doc, path):
    win = _fill(OcclusionWindow, doc, path,
                special={"x_range": lambda v: tuple(float(x) for x in v)})
    if not win.start < win.end:
        raise ConfigError(f"{path}: start must precede end")
    return win


def _fill(cls, doc, path, special=None, exclude=()):
    """Instantiate a dataclass from a JSON object, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        conv = (special or {}).get(key)
        kwargs[key] = conv(value) if conv else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(doc):
    """Build a ScenarioConfig from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise ConfigError("top level: expected an object")
    blocks = {
        "trajectory": lambda d: _fill(
            TrajectorySpec, d, "trajectory",
            special={"baseline": _tuple3},
            exclude=("rate_hz", "duration")),  # set at the scenario level
        "wall": lambda d: _fill(WallConfig, d, "wall"),
        "camera": lambda d: _fill(
            CameraIntrinsics, d, "camera",
            special={"dist": lambda v: tuple(float(x) for x in v)}),
        "noise": lambda d: _fill(
            NoiseConfig, d, "noise",
            special={"vio": lambda v: _fill(VioNoiseModel, v, "noise.vio")}),
        "channel": lambda d: _fill(ChannelConfig, d, "channel"),
        "link": lambda d: _fill(LinkConfig, d, "link",
                                special={"dropouts": _windows}),
        "filter": lambda d: _fill(FilterConfig, d, "filter"),
        "init": lambda d: _fill(InitConfig, d, "init",
                                special={"error": _tuple3}),
        "occlusions": lambda d: tuple(
            _occlusion(w, f"occlusions[{i}]") for i, w in enumerate(d)),
    }
    kwargs = {}
    for key, value in doc.items():
        if key in blocks:
            kwargs[key] = blocks[key](value)
    top = {k: v for k, v in doc.items() if k not in blocks}
    cfg = _fill(ScenarioConfig, {**top}, "top level")
    cfg = dataclasses.replace(cfg, **kwargs)
    # the scenario clock drives trajectory sampling
    traj = dataclasses.replace(cfg.trajectory, rate_hz=cfg.rate_hz,
                               duration=cfg.duration)
    return dataclasses.replace(cfg, trajectory=traj)


def load_config(path):
    """Read and parse a JSON scenario file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return parse_config(doc)


def config_to_dict(cfg):
    """Plain-JSON view of a ScenarioConfig (for run manifests)."""
    return dataclasses.asdict(cfg)


def set_by_path(doc, dotted, value):
    """Set a nested key in a JSON document, creating objects on the way."""
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {p} is not an object")
    node[parts[-1]] = value
    return doc
