"""Dense convex quadratic programming.

Solves

    minimize    0.5 x'Qx + c'x
    subject to  A_eq x  = b_eq
                G x    <= h
                x      >= lb

with an operator-splitting (ADMM) iteration in the style of OSQP, followed
by an active-set polish that solves the KKT system of the guessed active set
exactly. A solution is only reported ``Optimal`` once :func:`check_kkt` passes
at the requested tolerance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import cho_factor, cho_solve, qr
from scipy.optimize import nnls

from .exceptions import ParameterError

__all__ = [
    "QuadraticProgram",
    "QpStatus",
    "QpSolution",
    "KktResiduals",
    "Multipliers",
    "solve_qp",
    "check_kkt",
]

_INF = np.inf


def _as_matrix(a, n_cols, name):
    if a is None:
        return np.zeros((0, n_cols))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return np.zeros((0, n_cols))
    if a.shape[1] != n_cols:
        raise ParameterError(f"{name} has {a.shape[1]} columns, expected {n_cols}")
    return a


def _as_vector(v, size, name):
    if v is None:
        return np.zeros(0) if size == 0 else None
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape[0] != size:
        raise ParameterError(f"{name} has length {v.shape[0]}, expected {size}")
    return v


@dataclass
class QuadraticProgram:
    """Problem data. ``lb`` may contain ``-inf``; ``None`` means unbounded below."""

    Q: np.ndarray
    c: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    lb: np.ndarray | None = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        n = Q.shape[0]
        if Q.shape != (n, n):
            raise ParameterError(f"Q must be square, got shape {Q.shape}")
        if not np.all(np.isfinite(Q)):
            raise ParameterError("Q contains non-finite entries")
        if np.max(np.abs(Q - Q.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(Q), initial=0.0)):
            raise ParameterError("Q is not symmetric")
        self.Q = 0.5 * (Q + Q.T)
        self.c = _as_vector(self.c, n, "c")
        self.A_eq = _as_matrix(self.A_eq, n, "A_eq")
        self.b_eq = _as_vector(self.b_eq, self.A_eq.shape[0], "b_eq")
        self.G = _as_matrix(self.G, n, "G")
        self.h = _as_vector(self.h, self.G.shape[0], "h")
        if self.b_eq is None or self.h is None:
            raise ParameterError("constraint matrix given without right-hand side")
        if self.lb is None:
            self.lb = np.full(n, -_INF)
        else:
            self.lb = _as_vector(self.lb, n, "lb")
        if np.any(np.isnan(self.lb)) or np.any(self.lb == _INF):
            raise ParameterError("lb must be finite or -inf")
        for name in ("c", "A_eq", "b_eq", "G", "h"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ParameterError(f"{name} contains non-finite entries")

    @property
    def n_vars(self):
        return self.Q.shape[0]

    def min_eigenvalue(self):
        if self.n_vars == 0:
            return 0.0
        return float(np.linalg.eigvalsh(self.Q)[0])

    def objective(self, x):
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.Q @ x + self.c @ x)

    def with_ridge(self, ridge):
        return QuadraticProgram(
            self.Q + ridge * np.eye(self.n_vars), self.c, self.A_eq, self.b_eq, self.G, self.h, self.lb
        )

    def to_json(self):
        """Debug dump; ``-inf`` bounds are written as ``null``."""
        lb = [None if not np.isfinite(v) else float(v) for v in self.lb]
        return json.dumps(
            {
                "Q": self.Q.tolist(),
                "c": self.c.tolist(),
                "A_eq": self.A_eq.tolist(),
                "b_eq": self.b_eq.tolist(),
                "G": self.G.tolist(),
                "h": self.h.tolist(),
                "lb": lb,
            }
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        n = len(d["c"])
        lb = np.array([-_INF if v is None else v for v in d["lb"]], dtype=float)
        return cls(
            np.array(d["Q"], dtype=float).reshape(n, n),
            d["c"],
            np.array(d["A_eq"], dtype=float).reshape(-1, n),
            d["b_eq"],
            np.array(d["G"], dtype=float).reshape(-1, n),
            d["h"],
            lb,
        )


class QpStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    ITERATION_LIMIT = "IterationLimit"


@dataclass
class Multipliers:
    """Lagrange multipliers for Qx + c + A_eq'y + G'z - z_lb = 0."""

    y_eq: np.ndarray
    z_ineq: np.ndarray
    z_lb: np.ndarray


@dataclass
class KktResiduals:
    primal_eq: float
    primal_ineq: float
    dual: float
    complementarity: float

    def max(self):
        return max(self.primal_eq, self.primal_ineq, self.dual, self.complementarity)

    def within(self, tol):
        return self.max() <= tol


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    status: QpStatus
    kkt_residuals: KktResiduals
    multipliers: Multipliers | None = None
    iterations: int = 0
    ridge: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def optimal(self):
        return self.status is QpStatus.OPTIMAL


def check_kkt(qp, x, multipliers, tol=1e-8):
    """Return the four KKT residual norms (infinity norms) at ``(x, multipliers)``.

    ``dual`` also absorbs sign violations of the inequality multipliers.
    ``tol`` is accepted for interface symmetry; the residuals are returned raw.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (qp.n_vars,):
        raise ParameterError(f"x has shape {x.shape}, expected ({qp.n_vars},)")
    y = np.asarray(multipliers.y_eq, dtype=float).reshape(-1)
    z = np.asarray(multipliers.z_ineq, dtype=float).reshape(-1)
    zl = np.asarray(multipliers.z_lb, dtype=float).reshape(-1)
    if y.shape[0] != qp.A_eq.shape[0] or z.shape[0] != qp.G.shape[0] or zl.shape[0] != qp.n_vars:
        raise ParameterError("multiplier dimensions do not match the program")

    primal_eq = float(np.max(np.abs(qp.A_eq @ x - qp.b_eq), initial=0.0))
    slack = qp.h - qp.G @ x
    finite_lb = np.isfinite(qp.lb)
    lb_gap = np.where(finite_lb, x - np.where(finite_lb, qp.lb, 0.0), _INF)
    primal_ineq = max(
        float(np.max(np.maximum(-slack, 0.0), initial=0.0)),
        float(np.max(np.maximum(-lb_gap[finite_lb], 0.0), initial=0.0)),
    )

    grad = qp.Q @ x + qp.c + qp.A_eq.T @ y + qp.G.T @ z - zl
    dual = max(
        float(np.max(np.abs(grad), initial=0.0)),
        float(np.max(np.maximum(-z, 0.0), initial=0.0)),
        float(np.max(np.maximum(-zl, 0.0), initial=0.0)),
        # a bound multiplier on an infinite bound is meaningless
        float(np.max(np.abs(zl[~finite_lb]), initial=0.0)),
    )
    complementarity = max(
        float(np.max(np.abs(z * slack), initial=0.0)),
        float(np.max(np.abs(zl[finite_lb] * lb_gap[finite_lb]), initial=0.0)),
    )
    return KktResiduals(primal_eq, primal_ineq, dual, complementarity)


class _Stacked:
    """Constraints in the form l <= A x <= u (equality rows have l == u)."""

    def __init__(self, qp):
        n = qp.n_vars
        m_eq, m_in = qp.A_eq.shape[0], qp.G.shape[0]
        self.bound_idx = np.flatnonzero(np.isfinite(qp.lb))
        B = np.eye(n)[self.bound_idx]
        self.A = np.vstack([qp.A_eq, qp.G, B])
        self.l = np.concatenate([qp.b_eq, np.full(m_in, -_INF), qp.lb[self.bound_idx]])
        self.u = np.concatenate([qp.b_eq, qp.h, np.full(len(self.bound_idx), _INF)])
        self.m_eq, self.m_in = m_eq, m_in
        self.is_eq = np.zeros(self.A.shape[0], dtype=bool)
        self.is_eq[:m_eq] = True
        self.n = n

    @property
    def m(self):
        return self.A.shape[0]

    def split(self, y):
        """Map stacked duals onto the public multiplier layout."""
        y_eq = y[: self.m_eq].copy()
        z_in = y[self.m_eq : self.m_eq + self.m_in].copy()
        z_lb = np.zeros(self.n)
        z_lb[self.bound_idx] = -y[self.m_eq + self.m_in :]
        return Multipliers(y_eq, z_in, z_lb)


def _tight_multipliers(P, q, st, x, tight_tol):
    """Sign-constrained least-squares multipliers over the rows tight at ``x``.

    Robust to degenerate vertices where more than ``n`` rows are active and
    the working-set KKT system is singular.
    """
    A, l, u = st.A, st.l, st.u
    Ax = A @ x
    up = np.isfinite(u) & (np.abs(Ax - u) <= tight_tol * (1 + np.abs(u)))
    lo = np.isfinite(l) & (np.abs(Ax - l) <= tight_tol * (1 + np.abs(np.where(np.isfinite(l), l, 0.0))))
    up &= ~st.is_eq
    lo &= ~st.is_eq
    eq = np.flatnonzero(st.is_eq)
    iu, il = np.flatnonzero(up), np.flatnonzero(lo)
    cols = [A[eq].T, -A[eq].T, A[iu].T, -A[il].T]
    M = np.hstack(cols) if any(c.shape[1] for c in cols) else np.zeros((st.n, 0))
    g = P @ x + q
    y = np.zeros(st.m)
    if M.shape[1] == 0:
        return y
    coef = nnls(M, -g, maxiter=50 * M.shape[1] + 100)[0]
    k = len(eq)
    y[eq] = coef[:k] - coef[k : 2 * k]
    y[iu] += coef[2 * k : 2 * k + len(iu)]
    y[il] -= coef[2 * k + len(iu) :]
    return y


def _independent_rows(AW, keep_first):
    """Indices of a maximal linearly independent subset of the rows of ``AW``.

    The first ``keep_first`` rows (equalities) are preferred.
    """
    if AW.shape[0] == 0:
        return np.zeros(0, dtype=int)
    _, R, piv = qr(AW.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > 1e-10 * max(1.0, diag[0] if diag.size else 1.0)))
    if keep_first and rank < AW.shape[0]:
        # re-run with equality rows forced to the front
        order = np.concatenate([np.arange(keep_first), np.arange(keep_first, AW.shape[0])])
        chosen = []
        basis = np.zeros((0, AW.shape[1]))
        for i in order:
            cand = np.vstack([basis, AW[i]])
            if np.linalg.matrix_rank(cand, tol=1e-10 * max(1.0, np.abs(cand).max())) > basis.shape[0]:
                basis = cand
                chosen.append(i)
        return np.array(chosen, dtype=int)
    return np.sort(piv[:rank])


def _polish(P, q, st, x0, y0, z0, tol, max_steps):
    """Active-set refinement seeded by an ADMM iterate.

    Solves the equality-constrained subproblem on the working set, adds the
    most violated row until the point is feasible, then recovers multipliers
    over every tight row. Wrong-sign working rows are dropped and the loop
    continues if the multipliers fail the stationarity check.
    """
    A, l, u = st.A, st.l, st.u
    # side: +1 upper bound active, -1 lower bound active, 0 inactive
    side = np.zeros(st.m, dtype=int)
    side[(u - z0) < y0] = 1
    side[(z0 - l) < -y0] = -1
    side[st.is_eq] = 1
    n = st.n
    feas_tol = 0.1 * tol
    x = x0
    for _ in range(max_steps):
        W = np.flatnonzero(side != 0)
        W = W[_independent_rows(A[W], int(np.sum(st.is_eq[W])))]
        AW = A[W]
        rhs_b = np.where(side[W] > 0, u[W], l[W])
        K = np.block([[P, AW.T], [AW, np.zeros((len(W), len(W)))]])
        rhs = np.concatenate([-q, rhs_b])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        x = sol[:n]
        yW = sol[n:]
        Ax = A @ x
        viol = np.maximum(Ax - u, 0.0) + np.maximum(l - Ax, 0.0)
        viol[W] = 0.0
        j = int(np.argmax(viol))
        if viol[j] > feas_tol:
            side[j] = 1 if Ax[j] > u[j] else -1
            continue
        y = _tight_multipliers(P, q, st, x, 1e-9)
        if float(np.max(np.abs(P @ x + q + A.T @ y))) <= feas_tol:
            return x, y, True
        # wrong-sign multipliers: upper rows need y >= 0, lower rows y <= 0
        wrong = np.where(st.is_eq[W], 0.0, np.maximum(-side[W] * yW, 0.0))
        if wrong.size == 0 or wrong.max() <= 0.0:
            return x, y, False
        side[W[int(np.argmax(wrong))]] = 0
    return x, np.zeros(st.m), False


def solve_qp(qp, tol=1e-8, max_iter=200000, ridge=1e-9, rho=0.1, sigma=1e-6, alpha=1.6):
    """Solve ``qp``; see the module docstring for the formulation.

    A ``ridge * I`` term is added when Q is singular (reported in
    ``QpSolution.ridge``); the KKT report refers to that regularized problem.
    Infeasibility is detected through a Farkas-type certificate on the dual
    iterate differences and reported as ``Infeasible``; it is never repaired.
    """
    if not isinstance(qp, QuadraticProgram):
        raise ParameterError("qp must be a QuadraticProgram")
    if tol <= 0:
        raise ParameterError("tol must be positive")
    n = qp.n_vars
    eigs = np.linalg.eigvalsh(qp.Q) if n else np.zeros(0)
    scale = max(1.0, float(np.max(np.abs(eigs), initial=0.0)))
    min_eig = float(eigs[0]) if n else 0.0
    if min_eig < -1e-9 * scale:
        raise ParameterError(f"Q is not positive semidefinite (min eigenvalue {min_eig:.3e})")
    applied_ridge = ridge if min_eig <= 1e-12 * scale else 0.0
    prob = qp.with_ridge(applied_ridge) if applied_ridge else qp
    P, q = prob.Q, prob.c
    st = _Stacked(prob)

    def finish(x, y, status, it, extra=None):
        mult = st.split(y)
        res = check_kkt(prob, x, mult, tol)
        if status is QpStatus.OPTIMAL and not res.within(tol):
            status = QpStatus.ITERATION_LIMIT
        return QpSolution(
            x=x,
            objective=qp.objective(x),
            status=status,
            kkt_residuals=res,
            multipliers=mult,
            iterations=it,
            ridge=applied_ridge,
            diagnostics=extra or {},
        )

    if st.m == 0:
        x = cho_solve(cho_factor(P), -q)
        return finish(x, np.zeros(0), QpStatus.OPTIMAL, 0)

    A, l, u = st.A, st.l, st.u
    rho_base = rho

    def rho_vector(r):
        v = np.full(st.m, r)
        v[st.is_eq] = 1e3 * r
        return v

    rho_v = rho_vector(rho_base)
    eye = np.eye(n)
    factor = cho_factor(P + sigma * eye + A.T @ (rho_v[:, None] * A))

    x = np.zeros(n)
    z = np.clip(np.zeros(st.m), l, u)
    y = np.zeros(st.m)
    eps_admm = 1e-5
    check_every = 10
    polish_steps = min(2 * (n + st.m) + 50, 500)
    it = 0
    best = None
    # rho adaptation can cycle; spacing the updates out geometrically lets it freeze
    next_adapt = 5 * check_every
    while it < max_iter:
        it += 1
        y_prev = y
        rhs = sigma * x - q + A.T @ (rho_v * z - y)
        x_tilde = cho_solve(factor, rhs)
        z_tilde = A @ x_tilde
        x = alpha * x_tilde + (1 - alpha) * x
        z_relaxed = alpha * z_tilde + (1 - alpha) * z
        z_new = np.clip(z_relaxed + y / rho_v, l, u)
        y = y + rho_v * (z_relaxed - z_new)
        z = z_new

        if it % check_every:
            continue

        Ax = A @ x
        Px = P @ x
        Aty = A.T @ y
        r_prim = float(np.max(np.abs(Ax - z)))
        r_dual = float(np.max(np.abs(Px + q + Aty)))
        prim_scale = max(float(np.max(np.abs(Ax))), float(np.max(np.abs(z))), 1e-30)
        dual_scale = max(float(np.max(np.abs(Px))), float(np.max(np.abs(Aty))), float(np.max(np.abs(q), initial=0.0)), 1e-30)

        # primal infeasibility certificate
        dy = y - y_prev
        ndy = float(np.max(np.abs(dy)))
        if ndy > 1e-12:
            eps_pinf = 1e-7
            if float(np.max(np.abs(A.T @ dy))) <= eps_pinf * ndy:
                pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
                if not (np.any((pos > 0) & ~np.isfinite(u)) or np.any((neg < 0) & ~np.isfinite(l))):
                    support = float(np.sum(pos * np.where(np.isfinite(u), u, 0.0)) + np.sum(neg * np.where(np.isfinite(l), l, 0.0)))
                    if support < -eps_pinf * ndy:
                        return finish(
                            x, y, QpStatus.INFEASIBLE, it,
                            {"max_primal_residual": r_prim, "certificate": (dy / ndy).tolist()},
                        )

        if r_prim <= eps_admm * (1 + prim_scale) and r_dual <= eps_admm * (1 + dual_scale):
            if eps_admm > 1e-13 or (it // check_every) % 50 == 0:
                xp, yp, ok = _polish(P, q, st, x, y, z, tol, polish_steps)
                if ok:
                    sol = finish(xp, yp, QpStatus.OPTIMAL, it)
                    if sol.optimal:
                        return sol
                    best = sol
                eps_admm = max(eps_admm * 0.1, 1e-13)
            sol = finish(x.copy(), y.copy(), QpStatus.OPTIMAL, it)
            if sol.optimal:
                return sol

        if it >= next_adapt:
            next_adapt = int(next_adapt * 1.5)
            ratio = np.sqrt((r_prim / prim_scale) / max(r_dual / dual_scale, 1e-30))
            if ratio > 5.0 or ratio < 0.2:
                rho_base = float(np.clip(rho_base * ratio, 1e-6, 1e6))
                rho_v = rho_vector(rho_base)
                factor = cho_factor(P + sigma * eye + A.T @ (rho_v[:, None] * A))

    if best is not None:
        return best
    return finish(x, y, QpStatus.ITERATION_LIMIT, it, {"max_primal_residual": float(np.max(np.abs(A @ x - z)))})
