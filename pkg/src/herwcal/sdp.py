"""Small dense SDP solver.

Solves the standard primal/dual pair

    primal:  min <C, X>   s.t.  <A_i, X> = b_i,  X >= 0
    dual:    max b^T y    s.t.  S = C - sum_i y_i A_i >= 0

with an infeasible primal-dual path-following method (HKM search direction,
Mehrotra predictor-corrector). Sized for matrices of side <= ~64 and a few
dozen constraints; everything is dense. ``solve_sdp_batch`` runs many
problems sharing ``A`` and ``b`` in lockstep, which is what sign selection
needs.

Calibration duals are often not strictly feasible, so an iterate that reaches
the boundary of the cone or stops making progress is frozen and judged
against the loose tolerance instead of failing outright.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from herwcal.errors import SolverError

log = logging.getLogger(__name__)

STALL_ITERATIONS = 6
STEP_FRACTION = 0.95
RETRY_STEP_FRACTIONS = (0.85, 0.7)


@dataclass
class SDPResult:
    y: np.ndarray
    X: np.ndarray
    S: np.ndarray
    primal_value: float
    dual_value: float
    iterations: int
    status: str
    primal_infeasibility: float = np.nan
    dual_infeasibility: float = np.nan


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _chol(M):
    """Batched Cholesky factors; ``ok`` flags matrices that are positive definite."""
    try:
        return np.linalg.cholesky(M), np.ones(len(M), dtype=bool)
    except np.linalg.LinAlgError:
        L = np.zeros_like(M)
        ok = np.zeros(len(M), dtype=bool)
        for k in range(len(M)):
            try:
                L[k] = np.linalg.cholesky(M[k])
                ok[k] = True
            except np.linalg.LinAlgError:
                L[k] = np.eye(M.shape[1])
        return L, ok


def _max_steps(Lx, dX, Ls, dS):
    """Largest steps keeping ``X + a dX`` and ``S + a dS`` in the cone; 0 where not finite.

    ``Lx``, ``Ls`` are inverse Cholesky factors; both eigenvalue problems go in one call.
    """
    nb = len(Lx)
    steps = _max_step(np.concatenate([Lx, Ls]), np.concatenate([dX, dS]))
    return steps[:nb], steps[nb:]


def _max_step(Linv, dM):
    T = Linv @ dM @ np.swapaxes(Linv, -1, -2)
    ok = np.all(np.isfinite(T), axis=(1, 2))
    lo = np.full(len(T), -np.inf)
    if ok.any():
        lo[ok] = np.linalg.eigvalsh(T[ok])[:, 0]
    with np.errstate(divide="ignore"):
        return np.where(lo >= 0, np.inf, -1.0 / lo)


def solve_sdp_batch(C, A, b, *, tol=1e-10, loose_tol=1e-7, max_iter=100, step_fraction=STEP_FRACTION,
                    _retries=RETRY_STEP_FRACTIONS):
    """Solve ``len(C)`` SDPs that share constraint data ``A``, ``b``.

    Returns a list of ``SDPResult``. ``status`` is ``"optimal"`` when primal and
    dual infeasibility and the relative gap fall below ``tol``, or below
    ``loose_tol`` once the iterate had to be frozen; else ``"inaccurate"``.
    Problems that jam with large infeasibility are rerun with shorter steps.
    """
    C = _sym(np.asarray(C, dtype=float))
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    nb, n, _ = C.shape
    p = len(A)
    Aflat = A.reshape(p, -1)

    def opA(M):
        return M.reshape(len(M), -1) @ Aflat.T

    def opAt(v):
        return (v @ Aflat).reshape(len(v), n, n)

    scale = np.maximum(1.0, np.maximum(np.linalg.norm(C, axis=(1, 2)), np.linalg.norm(b)))
    # starting point scaled as in common SDP codes (SDPT3-style)
    normA = np.linalg.norm(Aflat, axis=1)
    xi = max(10.0, np.sqrt(n), n * np.max((1.0 + np.abs(b)) / (1.0 + normA)))
    eta = np.maximum(10.0, np.maximum(np.sqrt(n), (1.0 + np.maximum(normA.max(), np.linalg.norm(C, axis=(1, 2)))) / np.sqrt(n)))
    X = np.eye(n)[None] * np.full(nb, xi)[:, None, None]
    S = np.eye(n)[None] * eta[:, None, None]
    y = np.zeros((nb, p))
    normb = 1.0 + np.linalg.norm(b)
    normC = 1.0 + np.linalg.norm(C, axis=(1, 2))

    done = np.zeros(nb, dtype=bool)
    converged = np.zeros(nb, dtype=bool)
    best_merit = np.full(nb, np.inf)
    best_mu = np.full(nb, np.inf)
    stall = np.zeros(nb, dtype=int)
    iters = np.zeros(nb, dtype=int)
    eye_p = np.eye(p)

    def residuals(idx):
        rp = b[None] - opA(X[idx])
        Rd = C[idx] - opAt(y[idx]) - S[idx]
        pobj = np.einsum("kab,kab->k", C[idx], X[idx])
        dobj = y[idx] @ b
        pinf = np.linalg.norm(rp, axis=1) / normb
        dinf = np.linalg.norm(Rd, axis=(1, 2)) / normC[idx]
        relgap = np.abs(pobj - dobj) / (1.0 + np.abs(pobj) + np.abs(dobj))
        return rp, Rd, pinf, dinf, relgap

    for it in range(1, max_iter + 1):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        iters[idx] = it
        rp, Rd, pinf, dinf, relgap = residuals(idx)
        Xi, Si, yi = X[idx], S[idx], y[idx]
        mu = np.einsum("kab,kab->k", Xi, Si) / n

        ok = (pinf < tol) & (dinf < tol) & (relgap < tol)
        converged[idx[ok]] = True
        # stalled: neither the complementarity nor the worst residual improves
        merit = np.maximum(np.maximum(pinf, dinf), relgap)
        no_progress = (merit > 0.9 * best_merit[idx]) & (mu > 0.9 * best_mu[idx])
        stall[idx] = np.where(no_progress, stall[idx] + 1, 0)
        best_merit[idx] = np.minimum(best_merit[idx], merit)
        best_mu[idx] = np.minimum(best_mu[idx], mu)
        stop = ok | (stall[idx] >= STALL_ITERATIONS)
        done[idx[stop]] = True
        keep = ~stop
        if not keep.any():
            break
        idx, rp, Rd, Xi, Si, yi, mu = idx[keep], rp[keep], Rd[keep], Xi[keep], Si[keep], yi[keep], mu[keep]

        nk = len(idx)
        L, lok = _chol(np.concatenate([Xi, Si]))
        Linv = np.linalg.inv(L)
        Xisq, Sisq = Linv[:nk], Linv[nk:]
        xok, sok = lok[:nk], lok[nk:]
        Sinv = np.swapaxes(Sisq, -1, -2) @ Sisq

        # Schur complement M_ij = tr(A_i X A_j S^-1)
        G = Xi[:, None] @ A[None] @ Sinv[:, None]
        M = np.swapaxes(G, -1, -2).reshape(len(idx), p, -1) @ Aflat.T
        M = _sym(M)
        M = M + (1e-15 * np.trace(M, axis1=1, axis2=2))[:, None, None] * eye_p

        XRdSi = Xi @ Rd @ Sinv

        def direction(sigma_mu, corr):
            # dX = sigma_mu S^-1 - X - X dS S^-1 - corr, with dS = Rd - A^T dy
            rhs = rp - opA(sigma_mu[:, None, None] * Sinv - Xi - corr) + opA(XRdSi)
            dy = np.linalg.solve(M, rhs[..., None])[..., 0]
            dS = Rd - opAt(dy)
            dX = sigma_mu[:, None, None] * Sinv - Xi - Xi @ dS @ Sinv - corr
            return dy, _sym(dX), _sym(dS)

        zero = np.zeros(len(idx))
        with np.errstate(all="ignore"):
            dy_a, dX_a, dS_a = direction(zero, 0.0)
        ap, ad = _max_steps(Xisq, dX_a, Sisq, dS_a)
        ap, ad = np.minimum(1.0, ap), np.minimum(1.0, ad)
        mu_a = np.einsum("kab,kab->k", Xi + ap[:, None, None] * dX_a, Si + ad[:, None, None] * dS_a) / n
        sigma = np.where(mu > 0, np.minimum(1.0, (mu_a / np.where(mu > 0, mu, 1.0)) ** 3), 0.0)

        with np.errstate(all="ignore"):
            dy, dX, dS = direction(sigma * mu, dX_a @ dS_a @ Sinv)
        ap, ad = _max_steps(Xisq, dX, Sisq, dS)
        ap, ad = np.minimum(1.0, step_fraction * ap), np.minimum(1.0, step_fraction * ad)

        # short steps mean the iterate drifted off the central path: fall back
        # to a plain centering direction where that moves further
        short = np.minimum(ap, ad) < 0.2
        if short.any():
            with np.errstate(all="ignore"):
                cy, cX, cS = direction(np.maximum(sigma, 0.5) * mu, 0.0)
            cp, cd = _max_steps(Xisq, cX, Sisq, cS)
            cp, cd = np.minimum(1.0, step_fraction * cp), np.minimum(1.0, step_fraction * cd)
            use = short & (np.minimum(cp, cd) > np.minimum(ap, ad))
            dy, dX, dS = np.where(use[:, None], cy, dy), np.where(use[:, None, None], cX, dX), \
                np.where(use[:, None, None], cS, dS)
            ap, ad = np.where(use, cp, ap), np.where(use, cd, ad)
        X_new = _sym(Xi + ap[:, None, None] * dX)
        S_new = _sym(Si + ad[:, None, None] * dS)
        y_new = yi + ad[:, None] * dy

        # freeze iterates that would leave the cone or already sit on its boundary
        good = (ap > 0) & (ad > 0) & xok & sok & np.all(np.isfinite(y_new), axis=1)
        good &= np.all(np.isfinite(X_new), axis=(1, 2)) & np.all(np.isfinite(S_new), axis=(1, 2))
        if good.any():
            ng = int(good.sum())
            cok = _chol(np.concatenate([X_new[good], S_new[good]]))[1]
            good[good] &= cok[:ng] & cok[ng:]
        X[idx[good]], S[idx[good]], y[idx[good]] = X_new[good], S_new[good], y_new[good]
        done[idx[~good]] = True
        if np.any(np.linalg.norm(y[idx], axis=1) > 1e15 * scale[idx]):
            bad = idx[np.linalg.norm(y[idx], axis=1) > 1e15 * scale[idx]][0]
            raise SolverError("dual iterate diverged (unbounded dual)", (y[bad], X[bad], S[bad]))

    allidx = np.arange(nb)
    _, _, pinf, dinf, relgap = residuals(allidx)
    loose = (pinf < loose_tol) & (dinf < loose_tol) & (relgap < loose_tol)
    results = []
    for k in range(nb):
        status = "optimal" if converged[k] or loose[k] else "inaccurate"
        if status != "optimal":
            log.debug("SDP %d inaccurate: pinf=%.2e dinf=%.2e gap=%.2e", k, pinf[k], dinf[k], relgap[k])
        results.append(SDPResult(
            y=y[k],
            X=X[k],
            S=S[k],
            primal_value=float(np.sum(C[k] * X[k])),
            dual_value=float(b @ y[k]),
            iterations=int(iters[k]),
            status=status,
            primal_infeasibility=float(pinf[k]),
            dual_infeasibility=float(dinf[k]),
        ))
    jammed = [k for k, r in enumerate(results)
              if r.status != "optimal" and max(r.primal_infeasibility, r.dual_infeasibility) > 1e3 * loose_tol]
    if jammed and _retries:
        log.debug("rerunning %d jammed SDPs with step fraction %.2f", len(jammed), _retries[0])
        again = solve_sdp_batch(C[jammed], A, b, tol=tol, loose_tol=loose_tol, max_iter=max_iter,
                                step_fraction=_retries[0], _retries=_retries[1:])
        for k, r in zip(jammed, again):
            results[k] = r
    return results


def solve_sdp(C, A, b, **kwargs) -> SDPResult:
    """Single-problem form of ``solve_sdp_batch``."""
    return solve_sdp_batch(np.asarray(C, dtype=float)[None], A, b, **kwargs)[0]
