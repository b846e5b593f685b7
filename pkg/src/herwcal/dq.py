"""Quaternion and unit dual quaternion algebra.

Quaternions are plain ``(4,)`` float arrays ordered ``(w, x, y, z)``. A dual
quaternion ``q = r + eps d`` vectorizes to the 8-vector
``(r_w, r_x, r_y, r_z, d_w, d_x, d_y, d_z)``; this layout is used by every
cost and constraint matrix in the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from herwcal.errors import InvalidInputError

UNIT_TOL = 1e-9


# -- plain quaternions --------------------------------------------------------

def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_left(q):
    """4x4 matrix ``L`` with ``L @ p == quat_mul(q, p)``."""
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def quat_right(q):
    """4x4 matrix ``R`` with ``R @ p == quat_mul(p, q)``."""
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R):
    """Rotation matrix to unit quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    i = int(np.argmax(diag))
    if i == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2.0)], np.sin(angle / 2.0) * axis])


def _canonical_sign(q):
    """+1 or -1 such that the first nonzero entry of ``sign * q`` is positive."""
    nz = np.flatnonzero(q)
    if nz.size == 0:
        raise InvalidInputError("cannot canonicalize a zero quaternion")
    return 1.0 if q[nz[0]] > 0 else -1.0


# -- poses ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform with unit rotation quaternion (w,x,y,z) and translation in meters.

    The rotation sign is canonicalized on construction, so two poses describing
    the same transform have identical fields.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(4)
        t = np.array(self.translation, dtype=float).reshape(3)
        if abs(np.linalg.norm(r) - 1.0) > UNIT_TOL:
            raise InvalidInputError(f"rotation quaternion is not unit (norm {np.linalg.norm(r):.12g})")
        r = r * _canonical_sign(r)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_translation(cls, t):
        return cls(np.array([1.0, 0, 0, 0]), t)

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(quat_from_matrix(T[:3, :3]), T[:3, 3])

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.rotation)
        T[:3, 3] = self.translation
        return T

    def rotation_matrix(self):
        return quat_to_matrix(self.rotation)

    def __matmul__(self, other: Pose) -> Pose:
        """Composition ``self o other``."""
        R = quat_to_matrix(self.rotation)
        r = quat_mul(self.rotation, other.rotation)
        return Pose(r / np.linalg.norm(r), self.translation + R @ other.translation)

    def inverse(self) -> Pose:
        rc = quat_conj(self.rotation)
        return Pose(rc, -quat_to_matrix(rc) @ self.translation)

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


# -- dual quaternions -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DualQuaternion:
    real: np.ndarray
    dual: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "real", np.array(self.real, dtype=float).reshape(4))
        object.__setattr__(self, "dual", np.array(self.dual, dtype=float).reshape(4))

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(4))

    @classmethod
    def from_vec(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(v[:4], v[4:8])

    def vec(self):
        return np.concatenate([self.real, self.dual])

    def __mul__(self, other: DualQuaternion) -> DualQuaternion:
        return dq_mul(self, other)

    def __neg__(self):
        return DualQuaternion(-self.real, -self.dual)

    def is_unit(self, tol=UNIT_TOL):
        r, d = self.real, self.dual
        return abs(r @ r - 1.0) <= tol and abs(r @ d) <= tol

    def __repr__(self):
        return f"DualQuaternion(real={self.real.tolist()}, dual={self.dual.tolist()})"


def _require_unit(q: DualQuaternion):
    if not q.is_unit():
        raise InvalidInputError(
            f"dual quaternion is not unit: |r|^2-1={q.real @ q.real - 1:.3g}, r.d={q.real @ q.dual:.3g}"
        )


def dq_from_pose(pose: Pose) -> DualQuaternion:
    r = np.asarray(pose.rotation, dtype=float)
    if abs(np.linalg.norm(r) - 1.0) > UNIT_TOL:
        raise InvalidInputError("pose rotation is not a unit quaternion")
    t = np.concatenate([[0.0], pose.translation])
    return DualQuaternion(r, 0.5 * quat_mul(t, r))


def dq_to_pose(q: DualQuaternion) -> Pose:
    _require_unit(q)
    t = 2.0 * quat_mul(q.dual, quat_conj(q.real))
    return Pose(q.real, t[1:])


def dq_mul(a: DualQuaternion, b: DualQuaternion) -> DualQuaternion:
    return DualQuaternion(
        quat_mul(a.real, b.real),
        quat_mul(a.real, b.dual) + quat_mul(a.dual, b.real),
    )


def dq_conjugate(q: DualQuaternion) -> DualQuaternion:
    """Quaternion conjugate of both parts."""
    return DualQuaternion(quat_conj(q.real), quat_conj(q.dual))


def dq_inverse(q: DualQuaternion) -> DualQuaternion:
    """Inverse of a unit dual quaternion (equals its quaternion conjugate)."""
    return dq_conjugate(q)


def left_matrix(q: DualQuaternion):
    """8x8 matrix with ``left_matrix(a) @ b.vec() == (a * b).vec()``."""
    Lr, Ld = quat_left(q.real), quat_left(q.dual)
    return np.block([[Lr, np.zeros((4, 4))], [Ld, Lr]])


def right_matrix(q: DualQuaternion):
    """8x8 matrix with ``right_matrix(b) @ a.vec() == (a * b).vec()``."""
    Rr, Rd = quat_right(q.real), quat_right(q.dual)
    return np.block([[Rr, np.zeros((4, 4))], [Rd, Rr]])


def canonicalize(q: DualQuaternion) -> DualQuaternion:
    """Return ``q`` or ``-q``, whichever has the first nonzero real component positive."""
    s = _canonical_sign(q.real)
    return q if s > 0 else -q


def rotation_angle_deg(pose: Pose) -> float:
    w = min(1.0, abs(pose.rotation[0]))
    return float(np.degrees(2.0 * np.arccos(w)))
