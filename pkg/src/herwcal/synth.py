"""Synthetic calibration scenarios with known ground truth.

Two families: general 3D motion (a carrier moved through a desk-scale volume,
as with a robot arm) and planar intersection traffic (a vehicle driving lane
arcs past stationary roadside sensors with disjoint fields of view).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from herwcal.dq import Pose, dq_from_pose, dq_mul, quat_from_axis_angle, quat_mul
from herwcal.herw import HERWProblem, Measurement


@dataclass
class Scenario:
    X: list
    Y: list
    A: dict  # (k, t) -> Pose
    B: dict  # (k, t, s) -> Pose
    schedule: list  # sorted (k, t, s)
    sigma_t: float = 0.0  # meters
    sigma_r: float = 0.0  # degrees
    seed: int = 0
    kind: str = "general"
    meta: dict = field(default_factory=dict)

    @property
    def m_X(self):
        return len(self.X)

    @property
    def m_Y(self):
        return len(self.Y)

    def true_signs(self):
        """Sign of each canonical ``dq(B)`` that makes the truth satisfy the DQ cycle exactly."""
        out = {}
        for k, t, s in self.schedule:
            lhs = dq_mul(dq_from_pose(self.A[k, t]), dq_from_pose(self.X[t]))
            rhs = dq_mul(dq_from_pose(self.Y[s]), dq_from_pose(self.B[k, t, s]))
            out[k, t, s] = 1 if lhs.vec() @ rhs.vec() >= 0 else -1
        return out

    def measurements(self, *, oracle_signs=False, sensors=None):
        signs = self.true_signs() if oracle_signs else {}
        return [
            Measurement(k, t, s, self.A[k, t], self.B[k, t, s], signs.get((k, t, s), 1))
            for k, t, s in self.schedule
            if sensors is None or s in sensors
        ]

    def problem(self, norm_priors=(), *, oracle_signs=False):
        return HERWProblem(self.m_X, self.m_Y, self.measurements(oracle_signs=oracle_signs), list(norm_priors))

    def target_norms(self):
        return [float(np.linalg.norm(x.translation)) for x in self.X]


def random_quaternion(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def _perturb_rotation(rng, q, sigma_rad):
    axis = rng.normal(size=3)
    angle = rng.normal(0.0, sigma_rad)
    return quat_mul(quat_from_axis_angle(axis, angle), q)


def _axis_of(q):
    v = q[1:]
    s = np.linalg.norm(v)
    return v / s if s > 1e-12 else None


def generate_general(n, m_X=1, m_Y=1, seed=0, *, cube=7.0, rotation_spread_deg=16.0, min_axis_sep_deg=15.0,
                     min_motion_deg=10.0, sensor_distance=2.0, target_offset=0.2):
    """General-motion scenario: every sensor sees every target at every step.

    Carrier poses are drawn inside a ``cube``-meter box with orientations within
    ``rotation_spread_deg`` of a nominal attitude. Each target's consecutive
    relative motions rotate by at least ``min_motion_deg`` about axes at least
    ``min_axis_sep_deg`` apart.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    spread = np.radians(rotation_spread_deg)

    X = [Pose(random_quaternion(rng), rng.uniform(-target_offset, target_offset, 3) + [0.0, 0.0, 0.1]) for _ in range(m_X)]
    Y = []
    for _ in range(m_Y):
        pos = rng.uniform(-1.0, 1.0, 3) + [0.0, 0.0, sensor_distance]
        Y.append(Pose(random_quaternion(rng), pos))

    A = {}
    for t in range(m_X):
        poses, axes = [], []
        while len(poses) < n:
            for _ in range(500):
                q = quat_from_axis_angle(rng.normal(size=3), rng.uniform(-spread, spread))
                cand = Pose(q, rng.uniform(-cube / 2, cube / 2, 3))
                if not poses:
                    break
                rel = (poses[-1].inverse() @ cand).rotation
                ax = _axis_of(rel)
                if ax is None or 2 * np.degrees(np.arctan2(np.linalg.norm(rel[1:]), abs(rel[0]))) < min_motion_deg:
                    continue
                if all(np.degrees(np.arccos(min(1.0, abs(ax @ a)))) >= min_axis_sep_deg for a in axes):
                    axes.append(ax)
                    break
            else:
                # axis budget exhausted (large n); accept the last candidate
                ax = _axis_of((poses[-1].inverse() @ cand).rotation)
                if ax is not None:
                    axes.append(ax)
            poses.append(cand)
        for k, P in enumerate(poses):
            A[k, t] = P

    schedule = [(k, t, s) for k in range(n) for t in range(m_X) for s in range(m_Y)]
    B = {(k, t, s): Y[s].inverse() @ A[k, t] @ X[t] for k, t, s in schedule}
    return Scenario(X, Y, A, B, schedule, seed=seed, kind="general")


def _yaw_pose(x, y, yaw, tilt):
    p = tilt @ Pose(quat_from_axis_angle([0, 0, 1], yaw), [x, y, 0.0])
    return p


def generate_planar(n_per_sensor=(134,), targets=((0.6, 0.0, 1.78),), seed=0, *,
                    slope_deg=0.0, extent=60.0, target_rotations=None):
    """Planar intersection scenario.

    A vehicle (origin at the rear axle, z up) drives lane arcs around the
    intersection; sensor ``s`` observes every target during its own block of
    ``n_per_sensor[s]`` consecutive steps, so detection windows are disjoint.
    ``targets`` are target positions in the vehicle frame (above the origin).
    ``slope_deg`` tilts the whole road plane about the world x axis.
    """
    rng = np.random.default_rng(seed)
    targets = [np.asarray(t, dtype=float) for t in targets]
    for t in targets:
        if t[2] <= 0:
            raise ValueError("targets must be mounted above the vehicle origin")
    tilt = Pose(quat_from_axis_angle([1, 0, 0], np.radians(slope_deg)), np.zeros(3))

    X = []
    for i, pos in enumerate(targets):
        if target_rotations is not None:
            q = np.asarray(target_rotations[i], dtype=float)
        else:
            # board faces roughly sideways/backwards with some random tilt
            q = quat_mul(quat_from_axis_angle([0, 0, 1], rng.uniform(-np.pi, np.pi)),
                         quat_from_axis_angle([1, 0, 0], np.pi / 2 + rng.uniform(-0.3, 0.3)))
        X.append(Pose(q, pos))

    half = extent / 2.0
    A_poses, owner = [], []
    Y = []
    corners = [(1, 1), (-1, -1), (1, -1), (-1, 1)]
    for s, n_s in enumerate(n_per_sensor):
        cx, cy = corners[s % 4]
        center = np.array([cx, cy]) * half * 0.4
        # arc turning through the sensor's region, driven on a few lanes
        radius = rng.uniform(10.0, 14.0)
        heading0 = rng.uniform(-np.pi, np.pi)
        lanes = rng.uniform(-2.0, 2.0, size=max(1, n_s // 40 + 1))
        for i in range(n_s):
            lane = lanes[i % len(lanes)]
            frac = i / max(1, n_s - 1)
            phi = heading0 + frac * (np.pi / 2)
            r = radius + lane
            x = center[0] + r * np.cos(phi)
            y = center[1] + r * np.sin(phi)
            yaw = phi + np.pi / 2 + rng.normal(0.0, 0.05)
            A_poses.append(_yaw_pose(x, y, yaw, tilt))
            owner.append(s)
        # sensor mounted on a pole looking down at its region
        look = np.array([center[0], center[1], 0.0])
        pos = np.array([center[0] + cx * 12.0, center[1] + cy * 12.0, 6.0 + rng.uniform(0, 2)])
        Y.append(tilt @ _look_at(pos, look))

    A, B, schedule = {}, {}, []
    for k, (P, s) in enumerate(zip(A_poses, owner)):
        for t in range(len(X)):
            A[k, t] = P
            schedule.append((k, t, s))
            B[k, t, s] = Y[s].inverse() @ P @ X[t]
    return Scenario(X, Y, A, B, schedule, seed=seed, kind="planar",
                    meta={"slope_deg": slope_deg, "n_per_sensor": list(n_per_sensor)})


def _look_at(pos, target):
    """Camera pose (z forward, x right, y down) at ``pos`` looking at ``target``."""
    fwd = target - pos
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.column_stack([right, down, fwd])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = pos
    return Pose.from_matrix(T)


def add_noise(scenario: Scenario, sigma_t, sigma_r_deg, seed=0, *, noise_on_a=False) -> Scenario:
    """Gaussian pose noise: i.i.d. per translation component, random-axis rotation with N(0, sigma_r) angle."""
    if sigma_t < 0 or sigma_r_deg < 0:
        raise ValueError("noise levels must be non-negative")
    if sigma_t == 0 and sigma_r_deg == 0:
        return replace(scenario, A=dict(scenario.A), B=dict(scenario.B))
    rng = np.random.default_rng(seed)
    sr = np.radians(sigma_r_deg)

    def perturb(P):
        q = _perturb_rotation(rng, P.rotation, sr)
        return Pose(q / np.linalg.norm(q), P.translation + rng.normal(0.0, sigma_t, 3))

    B = {key: perturb(scenario.B[key]) for key in scenario.schedule}
    A = dict(scenario.A)
    if noise_on_a:
        A = {key: perturb(A[key]) for key in sorted(A)}
    return replace(scenario, A=A, B=B, sigma_t=sigma_t, sigma_r=sigma_r_deg)
