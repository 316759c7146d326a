"""Named scenario documents for the study suite.

Each function returns a fresh plain-JSON dict ready for `parse_config`, so
callers can tweak fields before parsing. These mirror the flight studies the
simulator reproduces at desk scale: convergence sweeps on the rectangle and
arc paths, cadence baselines, pairing asynchrony, a mid-run link dropout on
the figure-eight path, and occlusion windows.
"""

from __future__ import annotations

import copy
import math


def _base(name, kind, speed, duration, seed):
    return {
        "name": name,
        "seed": seed,
        "duration": duration,
        "trajectory": {
            "kind": kind,
            "extent": 2.0,
            "speed": speed,
            "depth_d": 5.0,
            "baseline": [3.0, 0.0, 0.0],
            "yaw_theta": 0.0,
        },
    }


def rectangle(seed=0, init_error=(0.0, 0.0, 0.0), duration=8.0):
    doc = _base("rectangle", "rectangle", 0.5, duration, seed)
    doc["init"] = {"mode": "coarse", "error": list(init_error)}
    return doc


def arc(seed=0, init_error=(0.0, 0.0, 0.0), duration=8.0):
    doc = _base("arc", "arc", 0.8, duration, seed)
    doc["init"] = {"mode": "coarse", "error": list(init_error)}
    return doc


def lateral(seed=0, depth_d=5.0, baseline_x=2.0, duration=6.0):
    """Sideways sweep used for the overlap-geometry orderings."""
    doc = _base("lateral", "lateral", 0.5, duration, seed)
    doc["trajectory"]["extent"] = 1.5
    doc["trajectory"]["depth_d"] = depth_d
    doc["trajectory"]["baseline"] = [baseline_x, 0.0, 0.0]
    return doc


# measured single-pipeline operating points: a 75 ms matcher blocks the two
# frames after its seed (10 Hz at 30 fps); a 150 ms one blocks five (5 Hz)
_SKIP_FRAMES = {3: 2, 5: 5}


def single_channel(seed=0, latency_frames=3, duration=8.0):
    """Prediction channel off: emit once per matcher busy window."""
    doc = rectangle(seed=seed, duration=duration)
    doc["name"] = f"single_channel_{latency_frames}"
    skip = _SKIP_FRAMES.get(latency_frames, latency_frames - 1)
    doc["channel"] = {"prediction_enabled": False,
                      "guidance_latency_frames": latency_frames,
                      "guidance_skip_frames": skip}
    return doc


def noiseless(seed=0, duration=3.0):
    """Every stochastic input disabled; the filter must track exactly."""
    doc = rectangle(seed=seed, duration=duration)
    doc["name"] = "noiseless"
    doc["noise"] = {"pixel_sigma": 0.0, "depth_sigma": 0.0,
                    "vio": {"sigma_dt": 0.0, "sigma_dq": 0.0}}
    doc["channel"] = {"flow_sigma": 0.0, "inlier_rate": 1.0,
                      "flow_drop_prob": 0.0}
    doc["init"] = {"mode": "truth"}
    return doc


def asynchronous(seed=0, offset=0.16, duration=8.0):
    doc = rectangle(seed=seed, duration=duration)
    doc["name"] = f"async_{offset:g}"
    doc["async_offset"] = offset
    return doc


def figure8_dropout(seed=0, window=(5.0, 8.0), duration=12.0):
    doc = _base("figure8_dropout", "figure8", 0.5, duration, seed)
    doc["init"] = {"mode": "coarse"}
    doc["link"] = {"dropouts": [list(window)]}
    return doc


# Occlusion runs isolate measurement loss, so they use a quieter odometry
# model than the default; the drift of a walk across a 10 s blackout would
# otherwise mask the flat no-update plateau the study looks for.
_OCCLUSION_VIO = {"sigma_dt": 0.001, "sigma_dq": math.radians(0.01)}


def occlusion_full(seed=0, window=(0.0, 10.0), duration=14.0):
    doc = _base("occlusion_full", "rectangle", 0.5, duration, seed)
    doc["init"] = {"mode": "truth", "error": [1.0, 1.0, -1.0]}
    doc["noise"] = {"vio": dict(_OCCLUSION_VIO)}
    doc["filter"] = dict(_OCCLUSION_VIO)
    doc["occlusions"] = [{"start": window[0], "end": window[1], "full": True}]
    return doc


def occlusion_partial(seed=0, window=(0.0, 10.0), duration=14.0,
                      x_range=(-12.0, 1.0)):
    doc = occlusion_full(seed=seed, window=window, duration=duration)
    doc["name"] = "occlusion_partial"
    doc["init"] = {"mode": "coarse", "error": [1.0, 1.0, -1.0]}
    doc["occlusions"] = [{"start": window[0], "end": window[1],
                          "full": False, "x_range": list(x_range)}]
    return doc


def drift(seed=0, scale=0.9, duration=8.0):
    """Both odometries under-scale translation, as a small-scale VIO would."""
    doc = rectangle(seed=seed, duration=duration)
    doc["name"] = f"drift_{scale:g}"
    doc["noise"] = {"vio": {"scale_drift": scale}}
    return doc


PRESETS = {
    "rectangle": rectangle,
    "arc": arc,
    "lateral": lateral,
    "single_channel": single_channel,
    "noiseless": noiseless,
    "async": asynchronous,
    "figure8_dropout": figure8_dropout,
    "occlusion_full": occlusion_full,
    "occlusion_partial": occlusion_partial,
    "drift": drift,
}


def preset(name, **kwargs):
    """A fresh config document for a named scenario."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}")
    return copy.deepcopy(PRESETS[name](**kwargs))
