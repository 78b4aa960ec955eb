"""Core-selecting surplus: the strong epsilon-core program and its sampled variant.

Decision variables are ``(pi_1..pi_n, eps)``. The server surplus is eliminated
through feasibility, ``pi_0 = w(N) - sum(pi)``, so ``pi_0 >= 0`` becomes the
row ``sum(pi) <= w(N)`` and the constraint of coalition ``S`` becomes

    sum_{i not in S} pi_i - eps <= w(N) - w(S).

The objective ``sum_i (pi_i - vcg_i + eps)^2`` is flat along
``(pi - t, eps + t)``; a tiny penalty on ``eps`` picks the optimum with the
least relaxation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import CapabilityError, MechanismError, ParameterError
from .game import Coalition, CharacteristicTable, vcg_surplus
from .qp import Multipliers, QpStatus, QuadraticProgram, check_kkt, solve_qp

__all__ = [
    "SurplusVector",
    "PaymentVector",
    "build_program",
    "solve_core_selecting",
    "payments_from_surplus",
    "first_price_surplus",
    "core_slacks",
    "core_accuracy",
    "sample_size",
    "sample_coalitions",
    "probable_core_check",
    "CoreSelector",
]

EXACT_MAX_PLAYERS = 20
CORE_TOL = 1e-6


@dataclass
class SurplusVector:
    pi: np.ndarray
    pi0: float
    eps: float
    sigma2: float = float("nan")
    diagnostics: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float).reshape(-1)
        self.pi0 = float(self.pi0)
        self.eps = float(self.eps)

    @property
    def n(self):
        return self.pi.shape[0]

    def total(self):
        return float(self.pi.sum() + self.pi0)


@dataclass
class PaymentVector:
    p: np.ndarray

    @property
    def budget_spent(self):
        return float(np.sum(self.p))


def _normalize_constraints(constraints, n):
    seen = {}
    for S, worth in constraints:
        m = S.bits if isinstance(S, Coalition) else int(S)
        if m <= 0 or m >> n:
            raise ParameterError(f"constraint coalition {m:#x} is empty or outside 0..{n - 1}")
        seen[m] = float(worth)
    return seen


def build_program(constraints, vcg, wN, relax=True, eps_tiebreak=1e-9):
    """Assemble the core-selecting QP over the supplied ``(coalition, w(S))`` pairs.

    ``relax=False`` pins ``eps = 0`` (the classical core-selecting program,
    which may be infeasible when the core is empty).
    """
    vcg = np.asarray(vcg, dtype=float).reshape(-1)
    n = vcg.shape[0]
    if n < 1:
        raise ParameterError("need at least one participant")
    cons = _normalize_constraints(constraints, n)
    if not cons:
        raise ParameterError("constraint list is empty")
    full = (1 << n) - 1
    B = np.hstack([np.eye(n), np.ones((n, 1))])
    Q = 2.0 * B.T @ B
    Q[n, n] += eps_tiebreak
    c = -2.0 * B.T @ vcg

    rows = [np.concatenate([np.ones(n), [0.0]])]
    rhs = [float(wN)]
    for m in sorted(cons):
        if m == full:
            continue  # implied by eps >= 0
        outside = np.array([0.0 if m >> i & 1 else 1.0 for i in range(n)])
        rows.append(np.concatenate([outside, [-1.0]]))
        rhs.append(float(wN) - cons[m])
    A_eq = b_eq = None
    if not relax:
        A_eq = np.zeros((1, n + 1))
        A_eq[0, n] = 1.0
        b_eq = np.zeros(1)
    return QuadraticProgram(Q, c, A_eq, b_eq, np.array(rows), np.array(rhs), np.zeros(n + 1))


def _solve_by_row_generation(qp, tol, max_iter, batch):
    """Solve over a growing subset of the inequality rows.

    Starts from the ``pi_0 >= 0`` row and repeatedly adds the most violated
    rows. The optimum of a row subset that is feasible for every row is
    optimal for the full program, and its multipliers padded with zeros
    certify it. Programs with thousands of nearly parallel coalition rows are
    far better conditioned this way than solved whole.
    """
    G, h = qp.G, qp.h
    work = np.zeros(G.shape[0], dtype=bool)
    work[0] = True
    total_iters = 0
    while True:
        sub = QuadraticProgram(qp.Q, qp.c, qp.A_eq, qp.b_eq, G[work], h[work], qp.lb)
        sol = solve_qp(sub, tol=tol, max_iter=max_iter)
        total_iters += sol.iterations
        if not sol.optimal:
            return sol, sub, total_iters
        viol = G @ sol.x - h
        viol[work] = -np.inf
        bad = np.flatnonzero(viol > 1e-10 * (1.0 + np.abs(h)))
        if bad.size == 0:
            z = np.zeros(G.shape[0])
            z[work] = sol.multipliers.z_ineq
            mult = Multipliers(sol.multipliers.y_eq, z, sol.multipliers.z_lb)
            res = check_kkt(qp, sol.x, mult, tol)
            status = QpStatus.OPTIMAL if res.within(tol) else QpStatus.ITERATION_LIMIT
            return replace(sol, status=status, kkt_residuals=res, multipliers=mult), qp, total_iters
        work[bad[np.argsort(-viol[bad], kind="stable")[:batch]]] = True


def solve_core_selecting(constraints, vcg, wN, relax=True, tol=1e-8, max_iter=200000, eps_tiebreak=1e-9):
    """Solve the (possibly sampled) core-selecting program.

    Raises ``MechanismError`` with the solver diagnostics when the QP does not
    reach an optimal status.
    """
    vcg = np.asarray(vcg, dtype=float).reshape(-1)
    n = vcg.shape[0]
    qp = build_program(constraints, vcg, wN, relax, eps_tiebreak)
    sol, last, iters = _solve_by_row_generation(qp, tol, max_iter, batch=max(20, 2 * n))
    if not sol.optimal:
        raise MechanismError(
            f"core-selecting QP ended with status {sol.status.value}",
            {"status": sol.status.value, "kkt": vars(sol.kkt_residuals), **sol.diagnostics, "qp": last.to_json()},
        )
    x = sol.x
    pi, eps = x[:n].copy(), float(x[n])
    # clean solver round-off at the bounds
    pi[np.abs(pi) < 1e-12] = 0.0
    eps = 0.0 if abs(eps) < 1e-12 else eps
    pi0 = float(wN) - float(pi.sum())
    sigma2 = float(np.sum((pi - vcg + eps) ** 2))
    return SurplusVector(pi, pi0, eps, sigma2, {"iterations": iters, "kkt": vars(sol.kkt_residuals)})


def payments_from_surplus(s, observed_valuations):
    """``p_i = pi_i - v_i``; negative payments are charges."""
    v = np.asarray(observed_valuations, dtype=float).reshape(-1)
    if v.shape != s.pi.shape:
        raise ParameterError("valuation vector length does not match the surplus vector")
    return PaymentVector(s.pi - v)


def first_price_surplus(n, wN):
    """Every participant gets zero surplus; the server keeps ``w(N)``."""
    if wN < 0:
        raise ParameterError("w(N) must be non-negative")
    return SurplusVector(np.zeros(n), wN, 0.0)


def _coalition_sums(pi, n):
    masks = np.arange(1 << n)
    bits = (masks[:, None] >> np.arange(n)) & 1
    return bits @ pi


def core_slacks(s, table):
    """``sum_{i in S} pi_i + pi_0 + eps - w(S)`` for every nonempty ``S`` (index = mask - 1)."""
    if table.n > EXACT_MAX_PLAYERS:
        raise CapabilityError(f"exact core check limited to n <= {EXACT_MAX_PLAYERS}")
    if s.n != table.n:
        raise ParameterError("surplus vector and table disagree on n")
    w = table.as_array()
    return (_coalition_sums(s.pi, table.n) + s.pi0 + s.eps - w)[1:]


def core_accuracy(s, table, tol=CORE_TOL):
    """Fraction of nonempty coalitions whose relaxed core constraint holds (within ``tol``)."""
    if table.n == 0:
        return 1.0
    return float(np.mean(core_slacks(s, table) >= -tol))


def probable_core_check(s, table, delta):
    """True when at most a ``delta`` fraction of coalitions block ``s`` (uniform over nonempty S)."""
    if not 0.0 <= delta < 1.0:
        raise ParameterError(f"delta must be in [0, 1), got {delta}")
    return core_accuracy(s, table) >= 1.0 - delta - 1e-12


def sample_size(n, delta, Delta, C=1.0):
    """``ceil(C * (n + ln(1/Delta)) / delta^2)``, capped at the number of nonempty coalitions."""
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must be in (0, 1), got {delta}")
    if not 0.0 < Delta < 1.0:
        raise ParameterError(f"Delta must be in (0, 1), got {Delta}")
    if C <= 0:
        raise ParameterError("C must be positive")
    m = math.ceil(C * (n + math.log(1.0 / Delta)) / delta**2)
    return max(1, min(m, (1 << n) - 1))


def sample_coalitions(n, m, seed=0):
    """``m`` distinct nonempty coalitions drawn uniformly without replacement.

    Masks are returned in draw order, so with a fixed seed the ``m``-sample is
    a prefix of any larger sample.
    """
    if not 1 <= n <= 30:
        raise ParameterError(f"n must be in 1..30, got {n}")
    total = (1 << n) - 1
    if not 1 <= m <= total:
        raise ParameterError(f"m must be in 1..{total}, got {m}")
    rng = np.random.default_rng(seed)
    seen = set()
    out = []
    while len(out) < m:
        for v in rng.integers(1, total + 1, size=1024).tolist():
            if v not in seen:
                seen.add(v)
                out.append(v)
                if len(out) == m:
                    break
    return [Coalition(v, n) for v in out]


class CoreSelector(BaseEstimator):
    """Fit the core-selecting surplus to a characteristic table.

    Parameters
    ----------
    relax : bool
        Optimize the relaxation ``eps`` (strong eps-core). ``False`` pins it
        to zero.
    tol, max_iter : QP solver settings.
    eps_tiebreak : float
        Weight of the ``eps**2`` tie-break term.

    After ``fit`` the estimator exposes ``vcg_``, ``surplus_``, ``pi_``,
    ``pi0_``, ``eps_``, ``sigma2_`` and ``n_constraints_``.
    """

    def __init__(self, relax=True, tol=1e-8, max_iter=200000, eps_tiebreak=1e-9):
        self.relax = relax
        self.tol = tol
        self.max_iter = max_iter
        self.eps_tiebreak = eps_tiebreak

    def fit(self, table, coalitions=None):
        """Use every nonempty coalition in ``table`` unless ``coalitions`` restricts them.

        ``N`` and every ``N \\ {i}`` are always included.
        """
        if not isinstance(table, CharacteristicTable):
            raise ParameterError("fit expects a CharacteristicTable")
        n = table.n
        full = table.full_mask
        masks = table.nonempty_masks() if coalitions is None else [int(c) for c in coalitions]
        masks = set(masks) | {full} | {full & ~(1 << i) for i in range(n)}
        masks.discard(0)
        self.vcg_ = vcg_surplus(table)
        cons = [(m, table[m]) for m in sorted(masks)]
        self.surplus_ = solve_core_selecting(
            cons, self.vcg_, table.wN, self.relax, self.tol, self.max_iter, self.eps_tiebreak
        )
        self.pi_ = self.surplus_.pi
        self.pi0_ = self.surplus_.pi0
        self.eps_ = self.surplus_.eps
        self.sigma2_ = self.surplus_.sigma2
        self.n_constraints_ = len(cons)
        return self

    def payments(self, observed_valuations):
        return payments_from_surplus(self.surplus_, observed_valuations).p

    def core_accuracy(self, table):
        return core_accuracy(self.surplus_, table)
