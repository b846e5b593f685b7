"""Hand-eye robot-world calibration for many targets and sensors.

Every detection of target ``t`` by sensor ``s`` at step ``k`` gives the cycle
``A_k^(t) o X^(t) = Y^(s) o B_k^(t,s)``. In dual quaternion form this is linear,
``x_t = C_k y_s``, so squared cycle residuals stack into a quadratic cost over
``z = [x_1 .. x_mX, y_1 .. y_mY]`` that is minimized under unit constraints.
"""

from __future__ import annotations

import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from herwcal import qcqp
from herwcal.dq import (
    DualQuaternion,
    Pose,
    dq_from_pose,
    dq_inverse,
    dq_to_pose,
    left_matrix,
    right_matrix,
)
from herwcal.errors import DegeneracyError, InvalidInputError, SolverError
from herwcal.metrics import check_observability

log = logging.getLogger(__name__)

RANSAC_ITERATIONS = 10
BRUTEFORCE_MAX_N = 16
MAX_RESAMPLES = 20
SAMPLE_TOL = 1e-4
BOUND_FACTOR = 3.0


@dataclass(frozen=True)
class Measurement:
    """One detection: carrier pose ``A`` of ``target`` and its pose ``B`` seen by ``sensor``."""

    step: int
    target: int
    sensor: int
    A: Pose
    B: Pose
    sign_b: int = 1

    @property
    def key(self):
        return (self.step, self.target, self.sensor)


@dataclass
class HERWProblem:
    m_X: int
    m_Y: int
    measurements: list
    norm_priors: list = field(default_factory=list)  # (unknown index, alpha [m])

    def __post_init__(self):
        if self.m_X < 1 or self.m_Y < 1:
            raise InvalidInputError("need at least one target and one sensor")
        for meas in self.measurements:
            if not (0 <= meas.target < self.m_X and 0 <= meas.sensor < self.m_Y):
                raise InvalidInputError(
                    f"measurement {meas.key} references an index outside m_X={self.m_X}, m_Y={self.m_Y}"
                )
        self.norm_priors = [(int(j), float(a)) for j, a in self.norm_priors]

    @property
    def m(self):
        return self.m_X + self.m_Y

    def target_index(self, t):
        return t

    def sensor_index(self, s):
        return self.m_X + s

    def pairs(self):
        """Measurements grouped by ``(target, sensor)``, each group sorted by step."""
        groups = defaultdict(list)
        for meas in self.measurements:
            groups[(meas.target, meas.sensor)].append(meas)
        return {k: sorted(v, key=lambda m: m.step) for k, v in sorted(groups.items())}

    def with_signs(self, signs: dict) -> HERWProblem:
        """Copy with ``sign_b`` multiplied by ``signs[key]`` for each measurement key."""
        ms = [replace(m, sign_b=m.sign_b * int(signs.get(m.key, 1))) for m in self.measurements]
        return HERWProblem(self.m_X, self.m_Y, ms, list(self.norm_priors))


@dataclass
class CalibrationResult:
    X: list
    Y: list
    residual_cost: float
    certificate: qcqp.DualCertificate
    certified_global: bool
    planar_corrected: bool = False
    recovery_mode: str = ""
    signs: dict = field(default_factory=dict)
    corrections: list = field(default_factory=list)
    observability: object = None


# -- cost assembly --------------------------------------------------------------

def _signed_dq_b(meas: Measurement) -> DualQuaternion:
    q = dq_from_pose(meas.B)
    return q if meas.sign_b > 0 else -q


def cycle_matrix(A: Pose, B: Pose | DualQuaternion) -> np.ndarray:
    """``C`` with ``x = C y`` for the cycle ``A o X = Y o B``."""
    qb = B if isinstance(B, DualQuaternion) else dq_from_pose(B)
    return left_matrix(dq_inverse(dq_from_pose(A))) @ right_matrix(qb)


def measurement_matrix(meas: Measurement, m_X: int, m_Y: int) -> np.ndarray:
    """8 x 8m block row ``[e_t^T (x) I_8, -e_s^T (x) C]``."""
    if not (0 <= meas.target < m_X and 0 <= meas.sensor < m_Y):
        raise InvalidInputError(f"measurement {meas.key} out of range")
    M = np.zeros((8, 8 * (m_X + m_Y)))
    t0 = 8 * meas.target
    s0 = 8 * (m_X + meas.sensor)
    M[:, t0:t0 + 8] = np.eye(8)
    M[:, s0:s0 + 8] = -cycle_matrix(meas.A, _signed_dq_b(meas))
    return M


def accumulate_cost(problem: HERWProblem) -> np.ndarray:
    """``Q = sum M^T M`` over all detections, summed in sorted (k, t, s) order."""
    if not problem.measurements:
        raise InvalidInputError("empty detection set")
    n = 8 * problem.m
    Q = np.zeros((n, n))
    eye = np.eye(8)
    for meas in sorted(problem.measurements, key=lambda m: m.key):
        C = cycle_matrix(meas.A, _signed_dq_b(meas))
        t0 = 8 * meas.target
        s0 = 8 * (problem.m_X + meas.sensor)
        Q[t0:t0 + 8, t0:t0 + 8] += eye
        Q[s0:s0 + 8, s0:s0 + 8] += C.T @ C
        Q[t0:t0 + 8, s0:s0 + 8] -= C
        Q[s0:s0 + 8, t0:t0 + 8] -= C.T
    return Q


def cycle_residual_sum(problem: HERWProblem, z) -> float:
    """``sum |x_t - C y_s|^2`` over all detections, i.e. ``z^T Q z`` without forming ``Q``.

    Evaluating through ``Q`` loses everything below about ``eps * |Q|``; the
    direct sum keeps the cost of consistent data near machine zero.
    """
    blocks = np.asarray(z, dtype=float).reshape(-1, 8)
    total = 0.0
    for meas in sorted(problem.measurements, key=lambda m: m.key):
        r = blocks[meas.target] - cycle_matrix(meas.A, _signed_dq_b(meas)) @ blocks[problem.m_X + meas.sensor]
        total += float(r @ r)
    return total


def residual_cost(problem: HERWProblem, X, Y) -> float:
    """Cycle cost of given poses.

    Poses carry no DQ sign, so every block sign pattern (first block fixed)
    is tried and the smallest cost is returned.
    """
    blocks = np.array([dq_from_pose(P).vec() for P in list(X) + list(Y)])
    best = np.inf
    for tail in itertools.product((1.0, -1.0), repeat=len(blocks) - 1):
        best = min(best, cycle_residual_sum(problem, (blocks * np.r_[1.0, tail][:, None]).ravel()))
    return best


# -- sign selection ----------------------------------------------------------------

def _pair_cycles(measurements):
    return [cycle_matrix(m.A, _signed_dq_b(m)) for m in measurements]


def _pair_residual_sum(cycles, signs, z):
    x, y = z[:8], z[8:]
    return float(sum(np.sum((x - s * (C @ y)) ** 2) for C, s in zip(cycles, signs)))


def _pair_cost_matrix(cycles, signs):
    Q = np.zeros((16, 16))
    for C, s in zip(cycles, signs):
        Q[:8, :8] += np.eye(8)
        Q[8:, 8:] += C.T @ C
        Q[:8, 8:] -= s * C
        Q[8:, :8] -= s * C.T
    return Q


def dual_part_bound(cycles, m):
    """Generous bound on ``sum_j |d_j|^2`` from the translation scale of the data.

    The dual block of a cycle matrix has norm about ``(|t_A| + |t_B|) / 2``, so
    three times that per unknown is far outside any plausible calibration.
    """
    rho = 1.0 + max(np.linalg.norm(C[4:, :4], 2) for C in cycles)
    return float(m * (BOUND_FACTOR * rho) ** 2)


def _solve_cost_matrices(Qs, bound, **sdp_options):
    """Batched single-pair QCQP solves; failed solves get infinite cost."""
    C = qcqp.build_constraint_set(2, dual_part_bound=bound)
    costs, zs = [], []
    for out in qcqp.solve_qcqp_batch(np.asarray(Qs), C, **sdp_options):
        costs.append(np.inf if out is None else out[0].cost)
        zs.append(None if out is None else out[0].z)
    return np.array(costs), zs


def _solve_pairs(cycles, sign_sets):
    """Globally optimal single-pair costs and solutions for several sign assignments."""
    Qs = [_pair_cost_matrix(cycles, s) for s in sign_sets]
    return _solve_cost_matrices(Qs, dual_part_bound(cycles, 2))


def _solve_pair(cycles, signs):
    costs, zs = _solve_pairs(cycles, [signs])
    return costs[0], zs[0]


def assignment_cost(measurements, signs) -> float:
    """Optimal cycle cost of one target-sensor pair under the given relative signs."""
    cycles = _pair_cycles(measurements)
    signs = np.asarray(signs, dtype=float)
    _, z = _solve_pair(cycles, signs)
    return _pair_residual_sum(cycles, signs, z)


def select_signs_bruteforce(measurements, *, return_cost=False):
    """Exhaustive search over the ``2**(n-1)`` relative sign patterns (first sign fixed to +1).

    Returns the sign multipliers to apply to each measurement's current ``sign_b``.
    """
    n = len(measurements)
    if n > BRUTEFORCE_MAX_N:
        raise InvalidInputError(f"brute-force sign search refuses n={n} > {BRUTEFORCE_MAX_N}")
    if n == 0:
        raise InvalidInputError("no measurements")
    cycles = _pair_cycles(measurements)
    patterns = [np.array((1.0,) + tail) for tail in itertools.product((1.0, -1.0), repeat=n - 1)]
    costs, zs = _solve_pairs(cycles, patterns)
    k = int(np.argmin(costs))
    best = patterns[k].astype(int)
    if return_cost:
        return best, _pair_residual_sum(cycles, patterns[k], zs[k]), len(patterns)
    return best


def _residual_signs(cycles, z):
    x, y = z[:8], z[8:]
    out = np.empty(len(cycles))
    for i, C in enumerate(cycles):
        Cy = C @ y
        out[i] = 1.0 if np.sum((x - Cy) ** 2) <= np.sum((x + Cy) ** 2) else -1.0
    return out


@dataclass
class _PairSelection:
    signs: np.ndarray
    cost: float
    evaluated: int
    solution: qcqp.PrimalSolution
    certificate: qcqp.DualCertificate
    Q: np.ndarray
    constraints: qcqp.ConstraintSet


def _pair_duals(Qs, C, **sdp_options):
    """Dual certificates and values (``inf`` where the solve failed) for a batch of pair costs."""
    certs = qcqp.solve_dual_batch(np.asarray(Qs), C, **sdp_options)
    values = np.array([np.inf if c is None else c.dual_value for c in certs])
    return certs, values


def _ransac(measurements, iterations, rng_seed):
    n = len(measurements)
    rng = np.random.default_rng(rng_seed)
    cycles = _pair_cycles(measurements)
    combos = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
    C = qcqp.build_constraint_set(2, dual_part_bound=dual_part_bound(cycles, 2))

    # All triples of a round go through the dual solver in one batch and are
    # ranked by dual value, which equals the optimal cost whenever the
    # relaxation is tight; only each triple's winner needs primal recovery.
    candidates = []
    redraws = 0
    want = iterations
    while want > 0:
        triples = [np.sort(rng.choice(n, size=3, replace=False)) for _ in range(want)]
        Qs = [_pair_cost_matrix([cycles[i] for i in idx], (1.0, s1, s2)) for idx in triples for s1, s2 in combos]
        # ranking four combinations does not need the full tolerance
        certs, values = _pair_duals(Qs, C, tol=SAMPLE_TOL)
        want = 0
        for j in range(len(triples)):
            v = values[4 * j:4 * j + 4]
            order = np.argsort(v)
            if not np.isfinite(v[order[0]]) or np.isclose(v[order[0]], v[order[1]], rtol=1e-9, atol=1e-14):
                want += 1  # degenerate triple: combinations indistinguishable
                continue
            k = 4 * j + order[0]
            try:
                sol = qcqp.recover_primal(C.Z(Qs[k], certs[k].lam), C, Qs[k], polish=False)
            except SolverError:
                want += 1
                continue
            signs = _residual_signs(cycles, sol.z)
            candidates.append(signs * signs[0])
        want = min(want, MAX_RESAMPLES - redraws)
        redraws += want

    if not candidates:
        raise DegeneracyError("sign selection found no informative three-sample subset")
    unique = list({tuple(s.astype(int)): s for s in candidates}.values())
    Qs = [_pair_cost_matrix(cycles, s) for s in unique]
    certs, values = _pair_duals(Qs, C)
    for k in np.argsort(values):
        if not np.isfinite(values[k]):
            break
        try:
            sol = qcqp.recover_primal(C.Z(Qs[k], certs[k].lam), C, Qs[k])
        except SolverError:
            continue
        cost = _pair_residual_sum(cycles, unique[k], sol.z)
        return _PairSelection(unique[k].astype(int), cost, len(unique), sol, certs[k], Qs[k], C)
    raise SolverError("no sign assignment of the pair could be solved")


def select_signs_ransac(measurements, iterations=RANSAC_ITERATIONS, rng_seed=0, *, return_cost=False):
    """Sign selection from random three-sample subsets.

    Each iteration solves the three-sample problem for the four relative sign
    combinations of the two non-anchor samples, fixes the best, then signs every
    other measurement by its residual against that solution. The assignment with
    the lowest full-pair cost over all iterations wins.
    """
    n = len(measurements)
    if n == 0:
        raise InvalidInputError("no measurements")
    if n < 3:
        return select_signs_bruteforce(measurements, return_cost=return_cost)
    sel = _ransac(measurements, iterations, rng_seed)
    if return_cost:
        return sel.signs, float(sel.cost), sel.evaluated
    return sel.signs


def _align_pairs(pair_solutions):
    """Relative sign flips that make per-pair solutions agree on shared unknowns.

    Each pair fixes its signs only up to a common factor. Flipping a pair's
    signs flips its ``y`` against its ``x``; along a loop of pairs (say two
    targets seen by two sensors) that parity cannot be absorbed into the
    unknowns, so it is read off from the rotation parts of neighbouring
    pair solutions. Pairs are visited breadth-first over shared unknowns.
    """
    keys = sorted(pair_solutions)
    ref, flips, todo = {}, {}, list(keys)
    while todo:
        key = next((k for k in todo if ("x", k[0]) in ref or ("y", k[1]) in ref), todo[0])
        todo.remove(key)
        z = pair_solutions[key]
        x, y = z[:4].copy(), z[8:12].copy()
        kx, ky = ("x", key[0]), ("y", key[1])
        if kx in ref:
            a = 1.0 if ref[kx] @ x >= 0 else -1.0
            x, y = a * x, a * y
        elif ky in ref:
            a = 1.0 if ref[ky] @ y >= 0 else -1.0
            x, y = a * x, a * y
        f = 1.0
        if kx in ref and ky in ref and ref[ky] @ y < 0:
            f, y = -1.0, -y
        ref.setdefault(kx, x)
        ref.setdefault(ky, y)
        flips[key] = f
    return flips


def _resolve_signs(problem, iterations, seed):
    out, selections, solutions, pair_signs = {}, {}, {}, {}
    pairs = problem.pairs()
    for i, (key, ms) in enumerate(pairs.items()):
        if len(ms) < 3:
            signs = select_signs_bruteforce(ms)
            if len(pairs) > 1:
                solutions[key] = _solve_pair(_pair_cycles(ms), signs.astype(float))[1]
        else:
            selections[key] = _ransac(ms, iterations, seed + i)
            signs = selections[key].signs
            solutions[key] = selections[key].solution.z
        pair_signs[key] = signs
    flips = _align_pairs(solutions) if len(pairs) > 1 and all(z is not None for z in solutions.values()) else {}
    for key, ms in pairs.items():
        f = int(flips.get(key, 1))
        for meas, sg in zip(ms, pair_signs[key]):
            out[meas.key] = f * int(sg)
    return out, selections


def resolve_signs(problem: HERWProblem, iterations=RANSAC_ITERATIONS, seed=0) -> dict:
    """RANSAC sign selection for every target-sensor pair; returns multipliers keyed by (k, t, s)."""
    return _resolve_signs(problem, iterations, seed)[0]


# -- end-to-end ----------------------------------------------------------------------

def _poses_from_z(z, m_X):
    blocks = z.reshape(-1, 8)
    poses = [dq_to_pose(DualQuaternion.from_vec(b)) for b in blocks]
    return poses[:m_X], poses[m_X:]


def solve_problem(problem: HERWProblem, gap_tol=qcqp.GAP_REL_TOL, solver=None):
    """Solve a sign-resolved problem; returns ``(X, Y, cost, certificate, certified, mode)``."""
    Q = accumulate_cost(problem)
    bound = dual_part_bound(_pair_cycles(problem.measurements), problem.m)
    C = qcqp.build_constraint_set(problem.m, problem.norm_priors, dual_part_bound=bound)
    sol, cert, certified = qcqp.solve_qcqp(Q, C, solver, gap_tol)
    X, Y = _poses_from_z(sol.z, problem.m_X)
    return X, Y, cycle_residual_sum(problem, sol.z), cert, certified, sol.recovery_mode


def calibrate(problem: HERWProblem, *, ransac_iterations=RANSAC_ITERATIONS, seed=0,
              gap_tol=qcqp.GAP_REL_TOL, select_signs=True, solver=None) -> CalibrationResult:
    """Certifiably optimal calibration of all targets and sensors.

    Raises ``DegeneracyError`` when the data cannot determine a unique solution
    and no translation-norm prior is given; planar data should go through
    ``planar.calibrate_infrastructure``.
    """
    if not problem.measurements:
        raise InvalidInputError("empty detection set")
    obs = check_observability(problem)
    if obs.prior_required and not problem.norm_priors:
        hint = " Use planar.calibrate_infrastructure with a translation-norm prior." if obs.planar else ""
        raise DegeneracyError(obs.message + "." + hint)

    signs, selections = _resolve_signs(problem, ransac_iterations, seed) if select_signs else ({}, {})
    resolved = problem.with_signs(signs) if signs else problem
    if problem.m == 2 and not problem.norm_priors and solver is None and selections:
        # a single target-sensor pair: the winning sign assignment was already
        # solved as the full problem during selection
        sel = next(iter(selections.values()))
        sol, cert = sel.solution, sel.certificate
        cert.gap, certified = qcqp.duality_gap(sel.Q, sol.z, cert, gap_tol)
        X, Y = _poses_from_z(sol.z, 1)
        cost, mode = cycle_residual_sum(resolved, sol.z), sol.recovery_mode
    else:
        X, Y, cost, cert, certified, mode = solve_problem(resolved, gap_tol, solver)
    return CalibrationResult(
        X=X,
        Y=Y,
        residual_cost=cost,
        certificate=cert,
        certified_global=certified,
        recovery_mode=mode,
        signs=signs,
        observability=obs,
    )
