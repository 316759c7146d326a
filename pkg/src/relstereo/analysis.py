"""Run metrics and the pixel-perturbation sensitivity study."""

from __future__ import annotations

import numpy as np

from .geometry import UnitQuaternion, quat_compose, so3_log


def geodesic_deg(q_a, q_b):
    """Rotation angle between two unit quaternions, in degrees."""
    dq = quat_compose(q_a.inverse(), q_b)
    return float(np.degrees(np.linalg.norm(so3_log(dq))))


def compute_rmse(stamps, est_t, est_q, gt_t, gt_q, skip=0.0):
    """Position and orientation RMSE after discarding the transient.

    `est_q`/`gt_q` are (n, 4) scalar-first quaternion arrays. Rows with
    stamp < `skip` or with a non-finite estimate are excluded; raises
    ValueError when nothing remains.
    """
    stamps = np.asarray(stamps, dtype=float)
    est_t = np.asarray(est_t, dtype=float).reshape(-1, 3)
    gt_t = np.asarray(gt_t, dtype=float).reshape(-1, 3)
    est_q = np.asarray(est_q, dtype=float).reshape(-1, 4)
    gt_q = np.asarray(gt_q, dtype=float).reshape(-1, 4)
    keep = (stamps >= skip) & np.isfinite(est_t).all(axis=1) \
        & np.isfinite(est_q).all(axis=1)
    if not keep.any():
        raise ValueError("no overlapping samples after the skip window")
    pos_sq = ((est_t[keep] - gt_t[keep]) ** 2).sum(axis=1)
    ang = [geodesic_deg(UnitQuaternion.from_array(a),
                    UnitQuaternion.from_array(b))
           for a, b in zip(est_q[keep], gt_q[keep])]
    return (float(np.sqrt(pos_sq.mean())),
            float(np.sqrt(np.mean(np.square(ang)))))


def convergence_time(stamps, pos_err, threshold=0.2, hold=0.5):
    """First stamp at which the error drops below `threshold` and stays
    there for at least `hold` seconds of consecutive samples, else None."""
    stamps = np.asarray(stamps, dtype=float)
    pos_err = np.asarray(pos_err, dtype=float)
    ok = np.isfinite(pos_err) & (pos_err < threshold)
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        return None
    # consecutive-index runs of below-threshold samples
    starts = np.flatnonzero(np.diff(idx, prepend=idx[0] - 2) > 1)
    bounds = np.append(starts, len(idx))
    for a, b in zip(bounds[:-1], bounds[1:]):
        t0, t1 = stamps[idx[a]], stamps[idx[b - 1]]
        if t1 - t0 >= hold - 1e-9:
            return float(t0)
    return None


def perturbation_jacobian(features):
    """Stacked normalized-pixel sensitivity to a camera-frame point shift.

    For a feature at (X, Y, Z) the two rows are
    d(u, v)/d(dX, dY, dZ) = 1/Z * [[1, 0, -X/Z], [0, 1, -Y/Z]] in
    normalized image coordinates. Returns a (2n, 3) matrix.
    """
    f = np.asarray(features, dtype=float).reshape(-1, 3)
    if len(f) == 0:
        raise ValueError("need at least one feature")
    if (f[:, 2] <= 0).any():
        raise ValueError("features must lie in front of the camera (Z > 0)")
    x, y, z = f[:, 0], f[:, 1], f[:, 2]
    a = np.zeros((2 * len(f), 3))
    a[0::2, 0] = 1.0 / z
    a[0::2, 2] = -x / z ** 2
    a[1::2, 1] = 1.0 / z
    a[1::2, 2] = -y / z ** 2
    return a


def perturbation_analysis(features, sigma, trials, rng):
    """Monte-Carlo norm of the least-squares position perturbation.

    Each trial draws independent Gaussian pixel errors (normalized units,
    standard deviation `sigma`) for every feature and solves the stacked
    overdetermined system for the 3-vector position perturbation; the
    minimum-norm solution is used when the geometry is rank-deficient.
    Returns mean and standard deviation of the perturbation norms.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if trials < 1:
        raise ValueError("need at least one trial")
    a = perturbation_jacobian(features)
    pinv = np.linalg.pinv(a)
    b = rng.normal(scale=sigma, size=(trials, a.shape[0])) if sigma > 0 \
        else np.zeros((trials, a.shape[0]))
    x = b @ pinv.T
    norms = np.linalg.norm(x, axis=1)
    return {
        "n_features": a.shape[0] // 2,
        "sigma": float(sigma),
        "trials": int(trials),
        "mean_norm": float(norms.mean()),
        "std_norm": float(norms.std()),
    }
