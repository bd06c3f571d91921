"""Small dense quadratic programs solved by dual ascent with a KKT polish.

Two problem shapes cover everything the controllers and the curve fitter need:

* :func:`solve_box_qp` - min 0.5 ||q||^2 subject to two-sided linear voltage
  constraints and a coordinate box (the linearized reactive-dispatch
  subproblem). The inner minimization over q is an exact clamp, the duals are
  driven by projected gradient ascent, and once the active set settles a
  reduced KKT system is solved exactly.
* :func:`solve_ls_qp` - min 0.5 y'Py - c'y subject to inequality and equality
  constraints with P positive definite (the constrained least-squares fit).

No external solver is used; problems here have at most tens of variables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

__all__ = ["BoxQpResult", "LsQpResult", "project_box", "solve_box_qp", "solve_ls_qp"]


def project_box(x: NDArray[np.float64], lo: NDArray[np.float64], hi: NDArray[np.float64]) -> NDArray[np.float64]:
    """Euclidean projection onto a coordinate box (per-coordinate clamp)."""
    return np.minimum(np.maximum(x, lo), hi)


@dataclass
class BoxQpResult:
    q: NDArray[np.float64]
    mu_up: NDArray[np.float64]
    mu_lo: NDArray[np.float64]
    residual: float  # max positive constraint violation at q
    converged: bool
    iterations: int


def _box_qp_point(
    h_mat: NDArray[np.float64],
    mu_up: NDArray[np.float64],
    mu_lo: NDArray[np.float64],
    lb: NDArray[np.float64],
    ub: NDArray[np.float64],
) -> NDArray[np.float64]:
    return project_box(-h_mat.T @ (mu_up - mu_lo), lb, ub)


def solve_box_qp(
    h_mat: NDArray[np.float64],
    v0: NDArray[np.float64],
    v_lo: NDArray[np.float64],
    v_hi: NDArray[np.float64],
    lb: NDArray[np.float64],
    ub: NDArray[np.float64],
    tol: float = 1e-9,
    max_iter: int = 60000,
) -> BoxQpResult:
    """Minimize 0.5||q||^2 s.t. v_lo <= v0 + H q <= v_hi and lb <= q <= ub.

    ``tol`` bounds the accepted positive violation of the linear constraints.
    If the constraints cannot be met (or degeneracy defeats the polish) the
    best iterate is returned with ``converged=False``.
    """
    m, n = h_mat.shape
    mu_up = np.zeros(m)
    mu_lo = np.zeros(m)
    hht_norm = float(np.linalg.eigvalsh(h_mat @ h_mat.T)[-1]) if m else 0.0
    step = 1.0 / hht_norm if hht_norm > 0 else 1.0

    best = None
    it = 0
    while it < max_iter:
        chunk = min(250, max_iter - it)
        for _ in range(chunk):
            q = _box_qp_point(h_mat, mu_up, mu_lo, lb, ub)
            v = v0 + h_mat @ q
            mu_up = np.maximum(mu_up + step * (v - v_hi), 0.0)
            mu_lo = np.maximum(mu_lo + step * (v_lo - v), 0.0)
        it += chunk

        q = _box_qp_point(h_mat, mu_up, mu_lo, lb, ub)
        v = v0 + h_mat @ q
        residual = float(max(np.max(v - v_hi, initial=0.0), np.max(v_lo - v, initial=0.0)))
        if best is None or residual < best.residual:
            best = BoxQpResult(q, mu_up.copy(), mu_lo.copy(), residual, residual <= tol, it)

        polished = _polish_box_qp(h_mat, v0, v_lo, v_hi, lb, ub, mu_up, mu_lo, tol)
        if polished is not None:
            polished.iterations = it
            return polished
        if residual <= tol:
            return BoxQpResult(q, mu_up, mu_lo, residual, True, it)
    return best


def _polish_box_qp(h_mat, v0, v_lo, v_hi, lb, ub, mu_up, mu_lo, tol):
    """Solve the KKT system for the active set suggested by the duals.

    Returns an exact (machine-precision) solution if the guessed active set
    verifies all KKT conditions, else None.
    """
    m, n = h_mat.shape
    q_guess = _box_qp_point(h_mat, mu_up, mu_lo, lb, ub)
    v_guess = v0 + h_mat @ q_guess
    act_eps = 1e-7
    up_rows = np.where((mu_up > act_eps) | (v_guess > v_hi - act_eps))[0]
    lo_rows = np.where((mu_lo > act_eps) | (v_guess < v_lo + act_eps))[0]
    box_lo = q_guess <= lb + act_eps * np.maximum(1.0, np.abs(lb))
    box_hi = q_guess >= ub - act_eps * np.maximum(1.0, np.abs(ub))
    free = ~(box_lo | box_hi)

    # Signed constraint rows: +H q <= v_hi - v0 ; -H q <= v0 - v_lo.
    rows = np.vstack([h_mat[up_rows], -h_mat[lo_rows]]) if (len(up_rows) + len(lo_rows)) else np.zeros((0, n))
    rhs = np.concatenate([(v_hi - v0)[up_rows], (v0 - v_lo)[lo_rows]])

    q = np.where(box_lo, lb, np.where(box_hi, ub, 0.0))
    if rows.shape[0] == 0:
        mu = np.zeros(0)
    else:
        c = rhs - rows[:, ~free] @ q[~free]
        gram = rows[:, free] @ rows[:, free].T
        mu, *_ = np.linalg.lstsq(gram, -c, rcond=None)
        q[free] = -rows[:, free].T @ mu

    if np.any(mu < -1e-9):
        return None
    mu = np.maximum(mu, 0.0)
    if np.any(q < lb - 1e-9) or np.any(q > ub + 1e-9):
        return None
    q = project_box(q, lb, ub)
    # Box-clamp multiplier consistency: the unclamped gradient must point
    # outward at each clamped coordinate.
    grad = q + rows.T @ mu if rows.shape[0] else q.copy()
    if np.any(grad[box_lo] < -1e-8) or np.any(grad[box_hi] > 1e-8):
        return None
    v = v0 + h_mat @ q
    residual = float(max(np.max(v - v_hi, initial=0.0), np.max(v_lo - v, initial=0.0)))
    if residual > tol:
        return None

    mu_up_full = np.zeros(m)
    mu_lo_full = np.zeros(m)
    mu_up_full[up_rows] = mu[: len(up_rows)]
    mu_lo_full[lo_rows] = mu[len(up_rows):]
    return BoxQpResult(q, mu_up_full, mu_lo_full, residual, True, 0)


@dataclass
class LsQpResult:
    y: NDArray[np.float64]
    converged: bool
    iterations: int
    max_violation: float


def solve_ls_qp(
    p_mat: NDArray[np.float64],
    c: NDArray[np.float64],
    g_mat: NDArray[np.float64],
    h_vec: NDArray[np.float64],
    a_eq: NDArray[np.float64],
    b_eq: NDArray[np.float64],
    tol: float = 1e-9,
    max_iter: int = 60000,
) -> LsQpResult:
    """Minimize 0.5 y'Py - c'y s.t. Gy <= h and A_eq y = b_eq (P positive definite)."""
    n = p_mat.shape[0]
    g_mat = g_mat.reshape(-1, n)
    a_eq = a_eq.reshape(-1, n)
    k_mat = np.vstack([g_mat, a_eq])
    n_in = g_mat.shape[0]

    p_inv_kt = np.linalg.solve(p_mat, k_mat.T) if k_mat.size else np.zeros((n, 0))
    p_inv_c = np.linalg.solve(p_mat, c)
    if k_mat.size:
        lip = float(np.linalg.eigvalsh(k_mat @ p_inv_kt)[-1])
        step = 1.0 / lip if lip > 0 else 1.0
    else:
        step = 1.0

    lam = np.zeros(k_mat.shape[0])  # inequality rows first, then equalities

    def primal(lam_vec):
        return p_inv_c - p_inv_kt @ lam_vec

    it = 0
    best = None
    while it < max_iter:
        chunk = min(250, max_iter - it)
        for _ in range(chunk):
            y = primal(lam)
            grad = k_mat @ y - np.concatenate([h_vec, b_eq])
            lam = lam + step * grad
            lam[:n_in] = np.maximum(lam[:n_in], 0.0)
        it += chunk

        y = primal(lam)
        resid = k_mat @ y - np.concatenate([h_vec, b_eq])
        viol = float(max(np.max(resid[:n_in], initial=0.0), np.max(np.abs(resid[n_in:]), initial=0.0)))
        if best is None or viol < best.max_violation:
            best = LsQpResult(y.copy(), viol <= tol, it, viol)

        polished = _polish_ls_qp(p_mat, c, g_mat, h_vec, a_eq, b_eq, lam[:n_in], tol)
        if polished is not None:
            polished.iterations = it
            return polished
        if viol <= tol:
            return LsQpResult(y, True, it, viol)
    return best


def _polish_ls_qp(p_mat, c, g_mat, h_vec, a_eq, b_eq, lam_in, tol):
    n = p_mat.shape[0]
    y_guess = np.linalg.solve(p_mat, c - g_mat.T @ lam_in) if g_mat.size else np.linalg.solve(p_mat, c)
    slack = h_vec - g_mat @ y_guess if g_mat.size else np.zeros(0)
    active = set(np.where((lam_in > 1e-7) | (slack < 1e-7))[0].tolist())

    # Active-set refinement. At degenerate vertices (redundant active rows)
    # the least-norm multipliers from lstsq can assign negative weight to one
    # of the redundant rows; dropping it and re-solving recovers a valid KKT
    # certificate instead of abandoning the polish. Least-index drop/add rules
    # keep the loop from cycling on ties.
    for _ in range(3 * (g_mat.shape[0] + 2)):
        act = np.array(sorted(active), dtype=int)
        rows = np.vstack([g_mat[act], a_eq]) if (len(act) + a_eq.shape[0]) else np.zeros((0, n))
        rhs = np.concatenate([h_vec[act], b_eq])
        k = rows.shape[0]
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = p_mat
        kkt[:n, n:] = rows.T
        kkt[n:, :n] = rows
        sol, *_ = np.linalg.lstsq(kkt, np.concatenate([c, rhs]), rcond=None)
        y = sol[:n]
        in_mult = sol[n : n + len(act)]

        neg = np.where(in_mult < -1e-9)[0]
        if len(neg):
            active.discard(int(act[neg[0]]))
            continue
        viol_vec = g_mat @ y - h_vec if g_mat.size else np.zeros(0)
        viol = float(np.max(viol_vec, initial=0.0))
        eq_viol = float(np.max(np.abs(a_eq @ y - b_eq), initial=0.0)) if a_eq.size else 0.0
        if eq_viol > tol:
            return None
        if viol > tol:
            worst = int(np.flatnonzero(viol_vec > tol)[0])
            if worst in active:
                return None
            active.add(worst)
            continue
        return LsQpResult(y, True, 0, max(viol, eq_viol))
    return None
