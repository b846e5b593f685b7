"""Calibration error metrics, cycle residuals and observability diagnostics."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from herwcal.dq import Pose, dq_from_pose, dq_inverse, dq_mul, quat_conj, quat_mul

PLANAR_RMS_M = 0.05
COMMON_AXIS_DEG = 2.0
MIN_MOTION_DEG = 5.0


@dataclass(frozen=True)
class CalibError:
    t: float  # meters
    r: float  # degrees

    def as_dict(self):
        return {"eps_t_m": self.t, "eps_r_deg": self.r}


def calib_error(truth: Pose, est: Pose) -> CalibError:
    """Translation and rotation error of ``est`` relative to ``truth``."""
    q = dq_mul(dq_inverse(dq_from_pose(truth)), dq_from_pose(est))
    r, d = q.real, q.dual
    if r[0] < 0:
        r, d = -r, -d
    # 2*atan2(|v|, w) equals 2*arccos(w) for unit r but keeps precision near zero
    eps_r = 2.0 * np.arctan2(np.linalg.norm(r[1:]), r[0])
    eps_t = np.linalg.norm((2.0 * quat_mul(d, quat_conj(r)))[1:])
    return CalibError(float(eps_t), float(np.degrees(eps_r)))


def cycle_error(A, X: Pose, B, Y: Pose) -> CalibError:
    """RMS over k of the error of ``A_k o X o B_k^-1 o Y^-1`` against identity.

    ``A`` and ``B`` may be single poses or equal-length sequences.
    """
    if isinstance(A, Pose):
        A, B = [A], [B]
    ident = Pose.identity()
    Yi = Y.inverse()
    errs = [calib_error(ident, a @ X @ b.inverse() @ Yi) for a, b in zip(A, B)]
    et = np.sqrt(np.mean([e.t**2 for e in errs]))
    er = np.sqrt(np.mean([e.r**2 for e in errs]))
    return CalibError(float(et), float(er))


# -- observability --------------------------------------------------------------

def axis_spread_deg(axes):
    """Largest angle (deg) between any axis and the best-fit common axis (axes are lines)."""
    if len(axes) == 0:
        return 0.0
    M = np.asarray(axes)
    w, V = np.linalg.eigh(M.T @ M)
    common = V[:, -1]
    cosang = np.clip(np.abs(M @ common), 0.0, 1.0)
    return float(np.degrees(np.max(np.arccos(cosang))))


def relative_axes(poses, min_angle_deg=MIN_MOTION_DEG):
    """Rotation axes of all pairwise relative motions ``P_i^-1 o P_j``."""
    if len(poses) < 2:
        return np.zeros((0, 3))
    q = np.array([p.rotation for p in poses])
    i, j = np.triu_indices(len(q), k=1)
    a, b = q[i], q[j]
    # conj(a) * b, batched
    w = a[:, 0] * b[:, 0] + np.sum(a[:, 1:] * b[:, 1:], axis=1)
    v = a[:, :1] * b[:, 1:] - b[:, :1] * a[:, 1:] - np.cross(a[:, 1:], b[:, 1:])
    s = np.linalg.norm(v, axis=1)
    ang = np.degrees(2.0 * np.arctan2(s, np.abs(w)))
    keep = ang >= min_angle_deg
    return v[keep] / s[keep, None]


def _out_of_plane_rms(points):
    P = np.asarray(points, dtype=float)
    if len(P) < 3:
        return 0.0
    c = P - P.mean(axis=0)
    w = np.linalg.eigvalsh(c.T @ c / len(P))
    return float(np.sqrt(max(w[0], 0.0)))


@dataclass
class ObservabilityReport:
    observable: bool
    planar: bool
    prior_required: bool
    axis_spread_deg: float
    out_of_plane_rms: float
    n_measurements: int
    per_pair: dict = field(default_factory=dict)
    message: str = ""

    def as_dict(self):
        return {
            "observable": self.observable,
            "planar": self.planar,
            "prior_required": self.prior_required,
            "axis_spread_deg": self.axis_spread_deg,
            "out_of_plane_rms_m": self.out_of_plane_rms,
            "n_measurements": self.n_measurements,
            "per_pair": {f"{t},{s}": v for (t, s), v in self.per_pair.items()},
            "message": self.message,
        }


def check_observability(problem, common_axis_deg=COMMON_AXIS_DEG, planar_rms=PLANAR_RMS_M):
    """Diagnose whether the calibration is uniquely determined by the measurements.

    Each pair's relative carrier motions contribute rotation axes; the problem
    is judged on the union over all pairs, since unknowns are shared across
    sensors and targets.
    """
    by_pair = defaultdict(list)
    for meas in problem.measurements:
        by_pair[(meas.target, meas.sensor)].append(meas)

    all_axes, per_pair = [], {}
    positions = []
    for key in sorted(by_pair):
        ms = sorted(by_pair[key], key=lambda m: m.step)
        axes = relative_axes([m.A for m in ms])
        spread = axis_spread_deg(axes)
        per_pair[key] = {
            "n": len(ms),
            "axis_spread_deg": spread,
            "observable": len(ms) >= 3 and len(axes) >= 2 and spread > common_axis_deg,
        }
        all_axes.append(axes)
        positions += [m.A.translation for m in ms]

    n = len(problem.measurements)
    all_axes = np.vstack(all_axes) if all_axes else np.zeros((0, 3))
    spread = axis_spread_deg(all_axes)
    colinear = len(all_axes) < 2 or spread <= common_axis_deg
    rms = _out_of_plane_rms(positions)
    planar = colinear and rms < planar_rms and n >= 3
    observable = n >= 3 and not colinear
    if observable:
        msg = "relative rotation axes are non-colinear; solution is unique"
    elif planar:
        msg = ("planar motion: translation is unobservable along the plane normal; "
               "a translation-norm prior is required")
    else:
        msg = "fewer than three measurements with non-colinear relative rotation axes"
    return ObservabilityReport(
        observable=observable,
        planar=planar,
        prior_required=not observable,
        axis_spread_deg=spread,
        out_of_plane_rms=rms,
        n_measurements=n,
        per_pair=per_pair,
        message=msg,
    )
