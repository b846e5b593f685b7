"""Lagrangian dual of the stacked unit dual quaternion QCQP.

The primal problem over ``z = [q_1; ...; q_m]`` (each ``q_j`` a vectorized DQ) is

    min  z^T Q z   s.t.   c_i + z^T P_i z = 0   for every constraint i

with two unit constraints per block and optional translation-norm constraints.
Its Lagrangian dual ``max sum_i c_i lambda_i  s.t.  Z(lambda) >= 0`` is solved as
a small SDP; the primal is then recovered from the null space of ``Z``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from herwcal.errors import InvalidInputError, RecoveryError, SolverError
from herwcal.sdp import solve_sdp_batch

log = logging.getLogger(__name__)

P_R = np.block([[-np.eye(4), np.zeros((4, 4))], [np.zeros((4, 4)), np.zeros((4, 4))]])
P_D = np.block([[np.zeros((4, 4)), np.eye(4)], [np.eye(4), np.zeros((4, 4))]])
P_NORM = np.block([[np.zeros((4, 4)), np.zeros((4, 4))], [np.zeros((4, 4)), -np.eye(4)]])

NULL_REL_TOL = 1e-6
POLISH_ITERATIONS = 5
GAP_REL_TOL = 1e-8
PSD_REL_TOL = 1e-8


def _place(j, m, P):
    E = np.zeros((m, m))
    E[j, j] = 1.0
    return np.kron(E, P)


@dataclass
class ConstraintSet:
    """Constraints ``c_i + z^T P_i z = 0`` on ``m`` stacked dual quaternions.

    Order: ``(P_r,1, P_d,1, ..., P_r,m, P_d,m)`` followed by norm constraints in
    the order given. Indices are zero-based.
    """

    m: int
    matrices: list
    constants: np.ndarray
    norms: list = field(default_factory=list)
    # bound on sum_j |d_j|^2 used only to keep the SDP primal bounded
    dual_part_bound: float | None = None

    @property
    def size(self):
        return 8 * self.m

    def residuals(self, z):
        z = np.asarray(z, dtype=float)
        return np.array([c + z @ P @ z for P, c in zip(self.matrices, self.constants)])

    def Z(self, Q, lam):
        return Q + np.tensordot(np.asarray(lam), np.asarray(self.matrices), axes=1)

    def norm_for(self, j):
        for idx, alpha in self.norms:
            if idx == j:
                return alpha
        return None


def build_constraint_set(m: int, norms=(), dual_part_bound=None) -> ConstraintSet:
    """Unit constraints for ``m`` blocks plus ``(index, alpha)`` translation-norm constraints."""
    if m < 1:
        raise InvalidInputError("need at least one unknown")
    mats, consts = [], []
    for j in range(m):
        mats += [_place(j, m, P_R), _place(j, m, P_D)]
        consts += [1.0, 0.0]
    seen = set()
    norms = [(int(j), float(a)) for j, a in norms]
    for j, alpha in norms:
        if not 0 <= j < m:
            raise InvalidInputError(f"norm constraint index {j} out of range for m={m}")
        if j in seen:
            raise InvalidInputError(f"duplicate norm constraint on unknown {j}")
        if not alpha > 0:
            raise InvalidInputError(f"translation norm must be positive, got {alpha}")
        seen.add(j)
        mats.append(_place(j, m, P_NORM))
        consts.append(0.25 * alpha**2)
    return ConstraintSet(m=m, matrices=mats, constants=np.array(consts), norms=norms,
                         dual_part_bound=dual_part_bound)


@dataclass
class DualCertificate:
    lam: np.ndarray
    dual_value: float
    min_eig_Z: float
    gap: float = np.nan
    iterations: int = 0
    solver_status: str = "optimal"

    def as_dict(self):
        return {
            "lambda": [float(v) for v in self.lam],
            "dual_value": float(self.dual_value),
            "min_eig_Z": float(self.min_eig_Z),
            "gap": float(self.gap),
            "iterations": int(self.iterations),
            "solver_status": self.solver_status,
        }


@dataclass
class PrimalSolution:
    z: np.ndarray
    cost: float
    recovery_mode: str
    null_dim: int

    def blocks(self):
        return self.z.reshape(-1, 8)


DualSolver = Callable[[np.ndarray, ConstraintSet], np.ndarray]


DEFAULT_DUAL_PART_BOUND = 1e2


def _dual_degrees(C: ConstraintSet):
    """How many dual-part factors each constraint carries (unit real: 0, orthogonality: 1, norm: 2)."""
    return np.array([0, 1] * C.m + [2] * len(C.norms))


def translation_scale(Qs, m):
    """Factor that balances real and dual blocks of the cost.

    Dual-part entries of ``z`` are half translations, so for scenes measured
    in tens of meters the real-real block of ``Q`` dwarfs the dual-dual one.
    Substituting ``d = s d'`` with this ``s`` brings both to the same order.
    """
    real = np.tile(np.r_[np.ones(4), np.zeros(4)], m).astype(bool)
    Qs = np.asarray(Qs).reshape(-1, 8 * m, 8 * m)
    rr = np.linalg.norm(Qs[:, real][:, :, real], axis=(1, 2))
    dd = np.linalg.norm(Qs[:, ~real][:, :, ~real], axis=(1, 2))
    ratio = np.median(rr / np.maximum(dd, 1e-300))
    return float(np.clip(np.sqrt(ratio), 1e-3, 1e6))


def _dual_sdp_batch(Qs, C: ConstraintSet, **sdp_options):
    """Interior-point solve of the dual, in translation-balanced coordinates.

    With ``D = diag(1, s)`` per block, ``D Z(lambda) D`` is again a dual matrix
    of the same constraint structure with multipliers ``lambda_i s^deg_i`` and
    constants ``c_i / s^deg_i``, so the scaled SDP is exactly equivalent and
    the dual value is unchanged; it is just far better conditioned.

    A redundant bound on the dual parts keeps the SDP primal bounded: without
    it the primal is unbounded along ``eps * z`` directions (and the dual is not
    strictly feasible), which stalls interior-point iterations. It adds a
    multiplier ``nu >= 0`` with ``Z(lambda) + nu * E_dual >= 0``; ``nu``
    vanishes whenever the bound is inactive, so only ``lambda`` is reported.
    """
    n = C.size
    Qs = np.asarray(Qs, dtype=float)
    sc = translation_scale(Qs, C.m)
    deg = _dual_degrees(C)
    dvec = np.tile(np.r_[np.ones(4), np.full(4, sc)], C.m)
    bound = (C.dual_part_bound or DEFAULT_DUAL_PART_BOUND * C.m) / sc**2
    E = np.kron(np.eye(C.m), np.diag([0.0] * 4 + [1.0] * 4))
    N = n + 1

    def lift(M, tail=0.0):
        out = np.zeros((N, N))
        out[:n, :n] = M
        out[n, n] = tail
        return out

    # bound row scaled by 1/bound so the slack entry stays in [0, 1]
    A = [lift(-P) for P in C.matrices] + [lift(E / bound, 1.0)]
    b = np.concatenate([C.constants / sc**deg, [1.0]])
    Cs = np.zeros((len(Qs), N, N))
    Cs[:, :n, :n] = Qs * dvec[:, None] * dvec[None, :]
    out = []
    for r in solve_sdp_batch(Cs, A, b, **sdp_options):
        lam = r.y[:-1] / sc**deg
        out.append((lam, r.iterations, r.status, r))
    return out


def _default_dual_solver(Q, C: ConstraintSet):
    lam, iters, status, res = _dual_sdp_batch(np.asarray(Q)[None], C)[0]
    if not np.all(np.isfinite(lam)):
        raise SolverError(f"dual SDP failed after {iters} iterations", (res.y, res.X, res.S))
    return lam, iters, status


def _certificate(Q, C, lam, iters=0, status="optimal"):
    # An interior-point run that stopped short of its own tolerance can still
    # yield usable multipliers; the gap and PSD checks decide certification.
    lam = np.asarray(lam, dtype=float)
    if status != "optimal":
        log.debug("dual solve ended as %s after %d iterations", status, iters)
    return DualCertificate(
        lam=lam,
        dual_value=float(C.constants @ lam),
        min_eig_Z=float(np.linalg.eigvalsh(C.Z(Q, lam))[0]),
        iterations=iters,
        solver_status=status,
    )


def solve_dual(Q, C: ConstraintSet, solver: DualSolver | None = None) -> DualCertificate:
    """Maximize ``sum_i c_i lambda_i`` subject to ``Q + sum_i lambda_i P_i >= 0``.

    ``solver(Q, C)`` may replace the built-in interior-point method; it returns
    the multipliers (optionally with an iteration count).
    """
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (C.size, C.size):
        raise InvalidInputError(f"cost matrix shape {Q.shape} does not match {C.m} unknowns")
    Q = 0.5 * (Q + Q.T)
    out = (solver or _default_dual_solver)(Q, C)
    if not isinstance(out, tuple):
        out = (out,)
    lam = np.asarray(out[0], dtype=float)
    if lam.shape != (len(C.matrices),) or not np.all(np.isfinite(lam)):
        raise SolverError("dual solver returned invalid multipliers")
    return _certificate(Q, C, lam, *out[1:])


def solve_dual_batch(Qs, C: ConstraintSet, **sdp_options):
    """``solve_dual`` for many cost matrices sharing one constraint set.

    Entries whose solve broke down (non-finite multipliers) are ``None``.
    """
    Qs = np.asarray(Qs, dtype=float)
    Qs = 0.5 * (Qs + np.swapaxes(Qs, -1, -2))
    out = []
    for Q, (lam, iters, status, _) in zip(Qs, _dual_sdp_batch(Qs, C, **sdp_options)):
        out.append(_certificate(Q, C, lam, iters, status) if np.all(np.isfinite(lam)) else None)
    return out


# -- primal recovery ----------------------------------------------------------------

def _normalize_blocks(z, C: ConstraintSet):
    """Scale every block to unit real part and project onto the unit-DQ manifold."""
    blocks = z.reshape(-1, 8).copy()
    for j, blk in enumerate(blocks):
        r, d = blk[:4], blk[4:]
        nr = np.linalg.norm(r)
        if nr < 1e-12:
            raise RecoveryError(f"recovered block {j} has a vanishing real part")
        r = r / nr
        d = d / nr
        d = d - (r @ d) * r
        alpha = C.norm_for(j)
        if alpha is not None:
            nd = np.linalg.norm(d)
            if nd < 1e-15:
                raise RecoveryError(f"block {j} has zero translation but a norm constraint")
            d = d * (0.5 * alpha / nd)
        blocks[j] = np.concatenate([r, d])
    return blocks.ravel()


def _homogeneous_forms(N, C: ConstraintSet):
    """Per-constraint quadratic forms in null-space coordinates, made homogeneous.

    Unit-real constraints are dropped (they fix the block scale); norm
    constraints become ``|d|^2 - alpha^2/4 |r|^2 = 0``.
    """
    forms = []
    for j in range(C.m):
        sl = slice(8 * j, 8 * j + 8)
        Nj = N[sl]
        R, D = Nj[:4], Nj[4:]
        forms.append(R.T @ D + D.T @ R)
        alpha = C.norm_for(j)
        if alpha is not None:
            forms.append(D.T @ D - 0.25 * alpha**2 * (R.T @ R))
    return forms


def _isotropic_directions(K):
    """Unit 2-vectors ``c`` with ``c^T K c = 0`` (empty if ``K`` is definite)."""
    w, V = np.linalg.eigh(0.5 * (K + K.T))
    if w[0] > 0 or w[1] < 0:
        return []
    a, b = np.sqrt(w[1]), np.sqrt(-w[0])
    out = []
    for sgn in (1.0, -1.0):
        c = V @ np.array([a, sgn * b])
        nc = np.linalg.norm(c)
        if nc > 0:
            out.append(c / nc)
    return out


def _dim2_candidates(N, C: ConstraintSet):
    """Directions in a 2D null space that can satisfy the unit constraints.

    Summing the per-block dual-orthogonality forms gives the scalar quadratic
    of the classic two-vector construction; its isotropic directions are the
    candidates. Norm-constraint forms contribute their own candidates.
    """
    forms = _homogeneous_forms(N, C)
    orth = sum(N[8 * j:8 * j + 4].T @ N[8 * j + 4:8 * j + 8] for j in range(C.m))
    cands = _isotropic_directions(orth + orth.T)
    for K in forms:
        cands += _isotropic_directions(K)
    return cands, forms


def _kkt_refine(z, Q, C: ConstraintSet, max_iter=100, step_tol=1e-12):
    """Newton iterations on the KKT system of the primal QCQP."""
    n = z.size
    P = np.asarray(C.matrices)
    p = len(P)
    Pz = P @ z
    mu = np.linalg.lstsq(Pz.T, -Q @ z, rcond=None)[0]
    for _ in range(max_iter):
        Pz = P @ z
        Zm = Q + np.tensordot(mu, P, axes=1)
        F = np.concatenate([2 * Zm @ z, C.residuals(z)])
        J = np.zeros((n + p, n + p))
        J[:n, :n] = 2 * Zm
        J[:n, n:] = 2 * Pz.T
        J[n:, :n] = 2 * Pz
        step = np.linalg.lstsq(J, -F, rcond=None)[0]
        z = z + step[:n]
        mu = mu + step[n:]
        if np.linalg.norm(step) < step_tol * max(1.0, np.linalg.norm(z)):
            break
    return z


def _constraint_violation(z, C):
    return float(np.max(np.abs(C.residuals(z))))


def _polish(z, Q, C: ConstraintSet):
    """A few Newton steps from a null-space estimate; kept only if feasible and no worse."""
    try:
        zr = _normalize_blocks(_kkt_refine(z, Q, C, max_iter=POLISH_ITERATIONS), C)
    except (RecoveryError, np.linalg.LinAlgError):
        return z
    if not np.all(np.isfinite(zr)) or _constraint_violation(zr, C) > 1e-12:
        return z
    if zr @ Q @ zr > z @ Q @ z + 1e-14 * max(1.0, abs(z @ Q @ z)):
        return z
    return zr


def recover_primal(Z_star, C: ConstraintSet, Q=None, null_tol=NULL_REL_TOL, polish=True) -> PrimalSolution:
    """Recover the stacked unit DQs from the null space of ``Z(lambda*)``.

    ``Q`` is only used to rank candidate solutions and to run local refinement;
    without it ``Z_star`` stands in for the cost. ``polish`` adds a few Newton
    steps on the KKT system to the null-space estimate and, for null spaces
    above two dimensions, restarts the refinement from several null vectors.
    """
    Z_star = 0.5 * (np.asarray(Z_star, dtype=float) + np.asarray(Z_star, dtype=float).T)
    Qc = Z_star if Q is None else np.asarray(Q, dtype=float)
    # eigen-decompose in translation-balanced coordinates; null(Z) = D null(D Z D)
    dvec = np.tile(np.r_[np.ones(4), np.full(4, translation_scale(Qc[None], C.m))], C.m)
    w, V = np.linalg.eigh(Z_star * dvec[:, None] * dvec[None, :])
    smax = max(abs(w[-1]), abs(w[0]), 1e-300)
    dim = max(1, int(np.count_nonzero(w <= null_tol * smax)))
    if dim < len(w):
        # cut at the widest eigengap among the candidates, so that tiny but
        # genuine eigenvalues of badly scaled problems stay out of the null space
        floor = np.maximum(np.abs(w[:dim]), 1e-16 * smax)
        dim = int(np.argmax(w[1:dim + 1] / floor)) + 1
    N = V[:, :dim] * dvec[:, None]

    def cost(z):
        return float(z @ Qc @ z)

    def finish(z, mode):
        z = _normalize_blocks(z, C)
        if Q is not None and polish:
            z = _polish(z, Qc, C)
        return PrimalSolution(z=z, cost=cost(z), recovery_mode=mode, null_dim=dim)

    if dim == 1:
        return finish(N[:, 0], "nullspace-1")

    if dim == 2:
        best = None
        cands, forms = _dim2_candidates(N, C)
        for c in cands:
            blocks = (N @ c).reshape(-1, 8)
            rn = np.linalg.norm(blocks[:, :4], axis=1)
            if np.min(rn) < 1e-9 * np.max(rn):
                continue
            # the true direction zeroes every form and gives equal block scales
            hom = max(abs(c @ K @ c) for K in forms) / np.max(rn) ** 2
            score = hom + np.ptp(rn) / np.max(rn)
            try:
                z = _normalize_blocks(N @ c, C)
            except RecoveryError:
                continue
            key = (round(score, 9), cost(z))
            if best is None or key < best[0]:
                best = (key, z)
        if best is None:
            raise RecoveryError("no combination of the 2D null space satisfies the unit constraints")
        return finish(best[1], "nullspace-2")

    # dim > 2: the relaxation gives no rank-one answer; refine from every null
    # vector and from pairwise combinations, keep the cheapest feasible point
    starts = [N[:, i] for i in range(dim)][::-1]
    if polish:
        starts += [N[:, i] + sg * N[:, j] for i, j in itertools.combinations(range(dim), 2) for sg in (1.0, -1.0)]
    else:
        starts = starts[:1]
    best = None
    for z0 in starts:
        try:
            z = _normalize_blocks(_kkt_refine(_normalize_blocks(z0, C), Qc, C), C)
        except (RecoveryError, np.linalg.LinAlgError):
            continue
        if not np.all(np.isfinite(z)):
            continue
        c = cost(z)
        if best is None or c < best[0]:
            best = (c, z)
    if best is None:
        raise RecoveryError("local refinement failed from every null-space start")
    return PrimalSolution(z=best[1], cost=best[0], recovery_mode="local-refined", null_dim=dim)


def duality_gap(Q, z, certificate: DualCertificate, rel_tol=GAP_REL_TOL, psd_tol=PSD_REL_TOL):
    """Return ``(gap, certified)`` with ``gap = z^T Q z - dual_value``.

    Certification needs a small gap and ``Z(lambda)`` positive semidefinite up
    to ``psd_tol * max(1, |Q|)``; otherwise the dual value is no lower bound.
    """
    cost = float(z @ Q @ z)
    gap = cost - certificate.dual_value
    psd = certificate.min_eig_Z >= -psd_tol * max(1.0, float(np.linalg.norm(Q, 2)))
    return gap, bool(gap <= rel_tol * max(1.0, cost) and psd)


def solve_qcqp(Q, C: ConstraintSet, solver: DualSolver | None = None, gap_tol=GAP_REL_TOL):
    """Dual solve, primal recovery and gap check; returns ``(solution, certificate, certified)``."""
    cert = solve_dual(Q, C, solver)
    sol = recover_primal(C.Z(Q, cert.lam), C, Q)
    cert.gap, certified = duality_gap(Q, sol.z, cert, gap_tol)
    return sol, cert, certified


def solve_qcqp_batch(Qs, C: ConstraintSet, gap_tol=GAP_REL_TOL, **sdp_options):
    """Batched ``solve_qcqp``; failed entries come back as ``None``."""
    out = []
    for Q, cert in zip(Qs, solve_dual_batch(Qs, C, **sdp_options)):
        if cert is None:
            out.append(None)
            continue
        try:
            sol = recover_primal(C.Z(Q, cert.lam), C, Q)
        except SolverError:
            out.append(None)
            continue
        cert.gap, certified = duality_gap(Q, sol.z, cert, gap_tol)
        out.append((sol, cert, certified))
    return out
