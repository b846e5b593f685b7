"""Infrastructure calibration from planar carrier motion.

When the carrier only drives on a plane, every relative rotation shares the
plane normal and the translations of ``X`` and ``Y`` are free along the up
vectors ``u_v`` (vehicle frame) and ``u_w`` (world frame). A translation-norm
prior ``|t_X| = alpha`` pins the shift down to two candidates, one with the
target above the carrier origin and its mirror image below it. The
calibration is solved with the prior, then moved to the candidate above.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from herwcal import herw
from herwcal.dq import Pose
from herwcal.errors import DegeneracyError, InvalidInputError
from herwcal.metrics import check_observability

COLINEAR_REL_TOL = 1e-9


@dataclass(frozen=True)
class PlaneFit:
    up: np.ndarray
    centroid: np.ndarray
    out_of_plane_rms: float  # meters


@dataclass
class CorrectionRecord:
    target: int
    gamma: float  # signed height offset, meters
    applied: bool
    u_v: np.ndarray
    u_w: np.ndarray
    shift_X: np.ndarray  # translation prepended to X
    shift_Y: dict = field(default_factory=dict)  # sensor -> translation prepended to Y

    def as_dict(self):
        return {
            "target": self.target,
            "gamma_m": self.gamma,
            "applied": self.applied,
            "u_v": self.u_v.tolist(),
            "u_w": self.u_w.tolist(),
            "shift_X_m": self.shift_X.tolist(),
            "shift_Y_m": {str(s): v.tolist() for s, v in sorted(self.shift_Y.items())},
        }


def _orient(v, ref):
    """Flip ``v`` to a positive dot with ``ref``; ties go to the first nonzero component."""
    d = float(v @ ref)
    if abs(d) > 1e-12:
        return v if d > 0 else -v
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    return v if v[nz[0]] > 0 else -v


def fit_plane_up(positions, reference=(0.0, 0.0, 1.0)) -> PlaneFit:
    """Least-variance principal direction of ``positions``, oriented toward ``reference``."""
    P = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(P) < 3:
        raise DegeneracyError("plane fit needs at least three positions")
    c = P.mean(axis=0)
    w, V = np.linalg.eigh((P - c).T @ (P - c) / len(P))
    if w[1] <= COLINEAR_REL_TOL * max(w[2], 1e-300):
        raise DegeneracyError("positions are colinear or coincident; the plane is undefined")
    up = _orient(V[:, 0], np.asarray(reference, dtype=float))
    return PlaneFit(up=up / np.linalg.norm(up), centroid=c, out_of_plane_rms=float(np.sqrt(max(w[0], 0.0))))


def height_offset(X: Pose, u_v) -> float:
    return float(np.asarray(u_v, dtype=float) @ X.translation)


def correct_solution(X: Pose, Ys, u_v, u_w, gamma):
    """Move a below-origin solution to its mirror image above the carrier origin.

    Returns ``(X', Ys', record)``; nothing changes when ``gamma >= 0``.
    """
    u_v = np.asarray(u_v, dtype=float)
    u_w = np.asarray(u_w, dtype=float)
    Ys = list(Ys)
    if gamma >= 0:
        rec = CorrectionRecord(-1, float(gamma), False, u_v, u_w, np.zeros(3), {s: np.zeros(3) for s in range(len(Ys))})
        return X, Ys, rec
    sx, sy = -2.0 * gamma * u_v, -2.0 * gamma * u_w
    X2 = Pose.from_translation(sx) @ X
    Ys2 = [Pose.from_translation(sy) @ Y for Y in Ys]
    rec = CorrectionRecord(-1, float(gamma), True, u_v, u_w, sx, {s: sy for s in range(len(Ys))})
    return X2, Ys2, rec


def up_vectors(measurements):
    """``(u_v, u_w)`` for one target: plane normals of the ``A_k^-1`` and ``A_k`` positions.

    ``u_w`` points to world +z; ``u_v`` is signed so that the carrier
    rotations carry it onto ``u_w`` on average.
    """
    A = [m.A for m in measurements]
    u_w = fit_plane_up([a.translation for a in A]).up
    u_v = fit_plane_up([a.inverse().translation for a in A]).up
    mapped = np.mean([a.rotation_matrix() @ u_v for a in A], axis=0)
    if mapped @ u_w < 0:
        u_v = -u_v
    return u_v, u_w


def _norm_priors(problem, norms):
    if isinstance(norms, dict):
        items = norms.items()
    else:
        items = enumerate(norms)
    priors = {}
    for t, alpha in items:
        t, alpha = int(t), float(alpha)
        if not 0 <= t < problem.m_X:
            raise InvalidInputError(f"norm prior for unknown target {t}")
        if not alpha > 0:
            raise InvalidInputError(f"norm prior for target {t} must be positive, got {alpha}")
        priors[t] = alpha
    return priors


def calibrate_infrastructure(problem: herw.HERWProblem, norms, *, mounted_below=(), **calibrate_options):
    """Calibration with per-target translation-norm priors and planar disambiguation.

    ``norms`` maps target index to ``|t_X|`` in meters (a sequence is read as
    indexed by target). Targets listed in ``mounted_below`` sit below the
    carrier origin, so their preferred candidate is the one with negative
    height. A sensor's pose is only moved when every target it saw was moved.
    """
    priors = _norm_priors(problem, norms)
    obs = check_observability(problem)
    missing = [t for t in range(problem.m_X) if t not in priors]
    if obs.planar and missing:
        raise DegeneracyError(f"planar motion needs a translation-norm prior for every target; missing {missing}")
    solved = replace(problem, norm_priors=sorted(priors.items())) if priors else problem
    res = herw.calibrate(solved, **calibrate_options)
    if not obs.planar:
        return res

    X, Y = list(res.X), list(res.Y)
    pairs = solved.pairs()
    records, moved = [], set()
    for t in range(problem.m_X):
        ms = [m for (tt, _), group in pairs.items() if tt == t for m in group]
        if not ms:
            continue
        u_v, u_w = up_vectors(ms)
        gamma = height_offset(X[t], u_v)
        sign = -1.0 if t in mounted_below else 1.0
        Xt, _, rec = correct_solution(X[t], [], sign * u_v, sign * u_w, sign * gamma)
        rec.target, rec.gamma, rec.u_v, rec.u_w = t, gamma, u_v, u_w
        if rec.applied:
            X[t] = Xt
            moved.add(t)
        records.append(rec)

    for s in range(problem.m_Y):
        seen = {t for (t, ss) in pairs if ss == s}
        recs = [r for r in records if r.target in seen]
        if seen and seen <= moved:
            # every target of this sensor moved; they share the carrier plane,
            # and their offsets agree up to noise
            shift = -2.0 * np.mean([r.gamma for r in recs]) * recs[0].u_w
            Y[s] = Pose.from_translation(shift) @ Y[s]
            for r in recs:
                r.shift_Y[s] = shift
    for r in records:
        for s in range(problem.m_Y):
            r.shift_Y.setdefault(s, np.zeros(3))
        r.shift_Y = dict(sorted(r.shift_Y.items()))

    res.X, res.Y = X, Y
    res.planar_corrected = bool(moved)
    res.corrections = records
    res.residual_cost = herw.residual_cost(solved.with_signs(res.signs), X, Y)
    res.observability = obs
    return res
