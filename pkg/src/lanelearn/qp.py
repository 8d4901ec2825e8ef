"""Dense convex quadratic programming by a dual active-set method.

Solves  min 1/2 x'Hx + g'x  s.t.  A x = b,  C x <= d  for symmetric positive
definite H. Starting from the unconstrained minimizer, violated constraints are
added one at a time with paired primal/dual steps; blocking constraints are
dropped when their multiplier would go negative. No feasible starting point is
required, and inconsistent constraints are detected with a certificate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import InfeasibleProblemError, SolverError

_TOL = 1e-11


@dataclass
class QpResult:
    x: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray          # full-length, zero where inactive
    active: list[int]               # indices of active inequality rows
    iterations: int
    kkt_residual: float
    objective: float


def _kkt_residual(H, g, A, b, C, d, x, nu, lam):
    r = H @ x + g
    if A is not None and len(A):
        r = r + A.T @ nu
    if C is not None and len(C):
        r = r + C.T @ lam
    stat = np.abs(r).max() if len(r) else 0.0
    feas = 0.0
    if A is not None and len(A):
        feas = max(feas, np.abs(A @ x - b).max())
    comp = 0.0
    if C is not None and len(C):
        slack = C @ x - d
        feas = max(feas, max(slack.max(), 0.0))
        comp = np.abs(lam * slack).max() if len(lam) else 0.0
    return max(stat, feas, comp)


def solve_qp(H: np.ndarray, g: np.ndarray,
             A: np.ndarray | None = None, b: np.ndarray | None = None,
             C: np.ndarray | None = None, d: np.ndarray | None = None,
             max_iter: int = 500) -> QpResult:
    """Solve the QP. H must be SPD (the caller is responsible for any shift).

    Raises InfeasibleProblemError when the constraints are inconsistent and
    SolverError when H is not positive definite or iterations are exhausted.
    """
    n = len(g)
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    try:
        Hf = cho_factor(H, lower=True)
    except np.linalg.LinAlgError as e:
        raise SolverError(f"hessian not positive definite: {e}") from e

    n_eq = 0 if A is None else len(A)
    n_in = 0 if C is None else len(C)
    # internal convention: normals N with N'x >= level
    normals = np.zeros((n_eq + n_in, n))
    levels = np.zeros(n_eq + n_in)
    if n_eq:
        normals[:n_eq] = A
        levels[:n_eq] = b
    if n_in:
        normals[n_eq:] = -C
        levels[n_eq:] = -d
    # flip recorded per equality when its normal is negated for a positive step
    eq_sign = np.ones(n_eq)

    Ginv_normals = cho_solve(Hf, normals.T) if len(normals) else np.zeros((n, 0))

    x = -cho_solve(Hf, g)
    act: list[int] = []
    u = np.zeros(0)
    iterations = 0

    def slack(i):
        return normals[i] @ x - levels[i]

    def pick_violated():
        if not n_in:
            return None
        idx = np.arange(n_eq, n_eq + n_in)
        free = np.array([i for i in idx if i not in act], dtype=int)
        if not len(free):
            return None
        s = normals[free] @ x - levels[free]
        worst = int(np.argmin(s))
        if s[worst] >= -1e-9:
            return None
        return int(free[worst])

    queue = list(range(n_eq))
    while True:
        if queue:
            p = queue.pop(0)
            sp = slack(p)
            if p < n_eq and sp > 0:
                # flip the equality normal so the addition step is positive
                normals[p] = -normals[p]
                levels[p] = -levels[p]
                Ginv_normals[:, p] = -Ginv_normals[:, p]
                eq_sign[p] = -eq_sign[p]
                sp = -sp
            if p < n_eq and abs(sp) <= _TOL and _dependent(normals, act, p):
                continue  # redundant consistent equality, already implied
        else:
            p = pick_violated()
            if p is None:
                break
        u_plus = np.append(u, 0.0)
        n_plus = normals[p]
        g_inv_np = Ginv_normals[:, p]
        while True:
            iterations += 1
            if iterations > max_iter:
                raise SolverError(f"active-set iteration limit {max_iter} hit")
            if act:
                Nact = normals[act]
                B = Nact @ Ginv_normals[:, act]
                rhs = Nact @ g_inv_np
                try:
                    r = np.linalg.solve(B, rhs)
                except np.linalg.LinAlgError:
                    r = np.linalg.lstsq(B, rhs, rcond=None)[0]
                z = g_inv_np - Ginv_normals[:, act] @ r
            else:
                r = np.zeros(0)
                z = g_inv_np
            # partial step: first active inequality whose dual would hit zero
            t1, k_drop = np.inf, None
            for j, idx in enumerate(act):
                if idx >= n_eq and r[j] > _TOL:
                    cand = u_plus[j] / r[j]
                    if cand < t1:
                        t1, k_drop = cand, j
            ztn = z @ n_plus
            sp = slack(p)
            t2 = -sp / ztn if ztn > _TOL else np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                raise InfeasibleProblemError(
                    "constraints inconsistent", step=int(p - n_eq) if p >= n_eq else None)
            if np.isfinite(t2):
                x = x + t * z
            if len(act):
                u_plus[:-1] = u_plus[:-1] - t * r
            u_plus[-1] = u_plus[-1] + t
            if t == t2 and np.isfinite(t2):
                act.append(p)
                u = u_plus
                break
            # partial step or dual-only step: drop the blocking constraint
            if k_drop is None:
                raise InfeasibleProblemError(
                    "constraints inconsistent", step=int(p - n_eq) if p >= n_eq else None)
            act.pop(k_drop)
            u_plus = np.delete(u_plus, k_drop)

    # two rounds of iterative refinement on the final KKT system; recovers
    # digits lost on ill-conditioned hessians (eps * cond(H) per round)
    for _ in range(2):
        if act:
            Nact = normals[act]
            r1 = H @ x + g - Nact.T @ u
            r2 = Nact @ x - levels[act]
            B = Nact @ Ginv_normals[:, act]
            rhs = Nact @ cho_solve(Hf, r1) - r2
            try:
                du = np.linalg.solve(B, rhs)
            except np.linalg.LinAlgError:
                du = np.linalg.lstsq(B, rhs, rcond=None)[0]
            x = x + cho_solve(Hf, Nact.T @ du - r1)
            u = u + du
        else:
            x = x - cho_solve(Hf, H @ x + g)

    nu = np.zeros(n_eq)
    lam = np.zeros(n_in)
    for j, idx in enumerate(act):
        if idx < n_eq:
            # internal duals are for n'x >= level with n possibly flipped;
            # stationarity used H x + g - N' u = 0, report A' nu convention
            nu[idx] = -u[j] * eq_sign[idx]
        else:
            lam[idx - n_eq] = u[j]
    Aarr = np.asarray(A, dtype=float) if n_eq else None
    barr = np.asarray(b, dtype=float) if n_eq else None
    Carr = np.asarray(C, dtype=float) if n_in else None
    darr = np.asarray(d, dtype=float) if n_in else None
    res = _kkt_residual(H, g, Aarr, barr, Carr, darr, x, nu, lam)
    obj = 0.5 * x @ H @ x + g @ x
    return QpResult(x=x, eq_duals=nu, ineq_duals=lam,
                    active=[i - n_eq for i in act if i >= n_eq],
                    iterations=iterations, kkt_residual=res, objective=obj)


def _dependent(normals, act, p) -> bool:
    if not act:
        return False
    Nact = normals[act]
    resid = normals[p] - Nact.T @ np.linalg.lstsq(Nact.T, normals[p], rcond=None)[0]
    return bool(np.linalg.norm(resid) <= 1e-10 * max(np.linalg.norm(normals[p]), 1.0))
