"""Round-by-round federated incentive mechanism.

Each round: participants train locally from the previous global model, a set
of coalitions is evaluated (all of them, a uniform sample, or only ``N`` and
``N \\ {i}``), the characteristic table feeds VCG and the core-selecting QP,
and reputations (the aggregation weights of the next round) are updated from
the selected surplus.

Two backends produce coalition accuracies. ``trained`` really aggregates
local models and evaluates them on the server's test set. ``analytic`` uses
the closed-form accuracy model from :mod:`fedcore.game`, which is fast enough
for statistical checks.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core_select import (
    SurplusVector,
    core_accuracy,
    sample_coalitions,
    sample_size,
    solve_core_selecting,
)
from .datasets import InputStrategy, LabeledDataset, apply_strategy, partition
from .exceptions import CapabilityError, MechanismError, ParameterError
from .game import AccuracyModel, CharacteristicTable, ValuationParams, analytic_oracle, characteristic_value, vcg_surplus
from .learning import Arch, ModelParams, TrainConfig, check_n_features, evaluate_accuracy, init_params, local_update, predict
from .seeding import sub_rng, sub_seed

__all__ = [
    "Mode",
    "MechanismConfig",
    "ReputationState",
    "RoundReport",
    "SimulationResult",
    "ValidationRow",
    "aggregate",
    "update_reputation",
    "make_backend",
    "initial_state",
    "run_round",
    "run_simulation",
    "run_exact_vs_sampled",
    "IncentiveMechanism",
]

EXACT_MAX_PLAYERS = 20
VALIDATE_MAX_PLAYERS = 12


class Mode(str, Enum):
    EXACT = "exact"
    SAMPLED = "sampled"
    VCG_ONLY = "vcg_only"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "_").replace("vcgonly", "vcg_only")
        try:
            return cls(key)
        except ValueError:
            raise ParameterError(f"unknown mode {value!r}; expected exact, sampled or vcg_only") from None


@dataclass(frozen=True)
class MechanismConfig:
    n: int
    rounds: int = 1
    delta: float = 0.3
    Delta: float = 0.3
    C: float = 1.0
    b0: float = 2.0
    k: float = 2.0
    phi0: float = 0.01
    train: TrainConfig = field(default_factory=TrainConfig)
    mode: Mode = Mode.SAMPLED
    eval_repeats: int = 1
    seed: int = 0
    m: int | None = None
    audit: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if not 1 <= self.n <= 30:
            raise ParameterError(f"n must be in 1..30, got {self.n}")
        if self.rounds < 1:
            raise ParameterError("rounds must be >= 1")
        if not self.phi0 > 0:
            raise ParameterError("phi0 must be positive")
        if self.mode is Mode.EXACT and self.n > EXACT_MAX_PLAYERS:
            raise ParameterError(f"exact mode needs n <= {EXACT_MAX_PLAYERS}")
        if self.eval_repeats < 1:
            raise ParameterError("eval_repeats must be >= 1")
        if self.n_jobs < 1:
            raise ParameterError("n_jobs must be >= 1")
        if self.k <= 0 or self.b0 < 0:
            raise ParameterError("need k > 0 and b0 >= 0")
        if self.m is not None and not 1 <= self.m <= (1 << self.n) - 1:
            raise ParameterError(f"m must be in 1..{(1 << self.n) - 1}")
        sample_size(self.n, self.delta, self.Delta, self.C)  # validates the sampling parameters

    @property
    def n_samples(self):
        """Coalitions drawn per round in sampled mode."""
        return self.m if self.m is not None else sample_size(self.n, self.delta, self.Delta, self.C)


@dataclass(frozen=True)
class ReputationState:
    R: np.ndarray
    cumulative_surplus: np.ndarray

    @classmethod
    def initial(cls, n, phi0):
        return cls(np.full(n, float(phi0)), np.zeros(n))


def update_reputation(state, round_surplus, phi0):
    """Accumulate the round's surplus; reputation is the accumulation floored at ``phi0``."""
    pi = np.asarray(round_surplus, dtype=float)
    if pi.shape != state.cumulative_surplus.shape:
        raise ParameterError("surplus length does not match the reputation state")
    cum = state.cumulative_surplus + pi
    return ReputationState(np.maximum(phi0, cum), cum)


def aggregate(models, weights):
    """Weighted average of parameter vectors, weights normalized over the members."""
    models = list(models)
    if not models:
        raise ParameterError("cannot aggregate an empty coalition")
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != len(models):
        raise ParameterError("one weight per model is required")
    if np.any(~(w > 0)):
        raise ParameterError("aggregation weights must be positive")
    arch = models[0].arch
    if any(m.arch != arch for m in models):
        raise ParameterError("cannot aggregate models with different architectures")
    if len(models) == 1:
        return models[0]
    w = w / w.sum()
    return ModelParams(arch, w @ np.stack([m.theta for m in models]))


# --- accuracy backends -----------------------------------------------------------


class _AnalyticRound:
    def __init__(self, backend, t, R):
        self.b, self.t, self.R = backend, t, R
        n = backend.n
        self.solo = np.array([self.accuracy(1 << i) for i in range(n)])
        self.solo_true = np.array([self._eval(backend.truth, 1 << i) for i in range(n)])

    def _eval(self, oracle, mask):
        rng = sub_rng(self.b.seed, "eval-noise", self.t, mask) if self.b.model.noise else None
        return oracle(mask, self.R, rng)

    def accuracy(self, mask):
        return self._eval(self.b.oracle, mask)

    def commit(self, full_mask):
        return None


class AnalyticBackend:
    """Coalition accuracies from the closed-form model, weighted by reputation."""

    kind = "analytic"

    def __init__(self, strategies, model=None, seed=0):
        self.n = len(strategies)
        self.model = model or AccuracyModel()
        self.seed = seed
        self.oracle = analytic_oracle(strategies, self.model)
        self.truth = analytic_oracle([InputStrategy.truthful()] * self.n, self.model)

    def start_round(self, t, R):
        return _AnalyticRound(self, t, R)


class _TrainedRound:
    def __init__(self, backend, t, R, models, true_models, n_jobs):
        self.b, self.t, self.R = backend, t, R
        self.models = models
        self.solo = np.array(_pmap(lambda i: self._acc(models[i], 1 << i), range(backend.n), n_jobs))
        solo_true = self.solo.copy()
        for i, m in true_models.items():
            solo_true[i] = self._acc(m, 1 << i)
        self.solo_true = solo_true

    def _acc(self, params, mask):
        b = self.b
        if b.eval_repeats == 1:
            return evaluate_accuracy(params, b.test)
        rng = sub_rng(b.seed, "bootstrap", self.t, mask)
        pred = predict(params, b.test.features)
        hits = pred == b.test.labels
        N = hits.shape[0]
        return float(np.mean([hits[rng.integers(0, N, N)].mean() for _ in range(b.eval_repeats)]))

    def aggregate(self, mask):
        idx = [i for i in range(self.b.n) if mask >> i & 1]
        return aggregate([self.models[i] for i in idx], self.R[idx])

    def accuracy(self, mask):
        return self._acc(self.aggregate(mask), mask)

    def commit(self, full_mask):
        self.b.global_params = self.aggregate(full_mask)
        return self.b.global_params


class TrainedBackend:
    """Real local training and coalition model evaluation on the server's test set."""

    kind = "trained"

    def __init__(self, shards, test, strategies, arch, train, seed=0, eval_repeats=1, n_jobs=1):
        if len(shards) != len(strategies):
            raise ParameterError("one strategy per participant is required")
        if len(test) == 0:
            raise ParameterError("the server test set is empty")
        self.n = len(shards)
        self.shards, self.test = list(shards), test
        self.strategies = list(strategies)
        self.arch, self.train = arch, train
        self.seed, self.eval_repeats, self.n_jobs = seed, eval_repeats, n_jobs
        self.inputs = [
            apply_strategy(d, s, sub_seed(seed, "strategy", i)) for i, (d, s) in enumerate(zip(shards, strategies))
        ]
        self.global_params = init_params(arch, sub_seed(seed, "init"))

    def start_round(self, t, R):
        g = self.global_params

        def train(i, data):
            return local_update(g, data, self.train, sub_seed(self.seed, "train", t, i))

        models = _pmap(lambda i: train(i, self.inputs[i]), range(self.n), self.n_jobs)
        # what a deviator would have trained on its true data, for the utility it really gets
        true_models = {
            i: train(i, self.shards[i]) for i, s in enumerate(self.strategies) if not s.is_identity
        }
        return _TrainedRound(self, t, R, models, true_models, self.n_jobs)


def make_backend(kind, strategies, config, data=None, arch=None, model=None):
    """``kind`` is ``"analytic"`` or ``"trained"``; the trained backend needs ``(shards, test)``."""
    strategies = _as_strategies(strategies, config.n)
    if kind == "analytic":
        return AnalyticBackend(strategies, model, sub_seed(config.seed, "oracle"))
    if kind == "trained":
        if data is None:
            raise ParameterError("the trained backend needs participant data")
        shards, test = data
        if arch is None:
            arch = Arch.logistic(test.n_features, test.n_classes)
        return TrainedBackend(shards, test, strategies, arch, config.train, config.seed, config.eval_repeats, config.n_jobs)
    raise ParameterError(f"unknown backend {kind!r}")


def _as_strategies(strategies, n):
    if strategies is None:
        return [InputStrategy.truthful()] * n
    out = [s if isinstance(s, InputStrategy) else InputStrategy.parse(str(s)) for s in strategies]
    if len(out) != n:
        raise ParameterError(f"expected {n} strategies, got {len(out)}")
    return out


def _pmap(fn, items, n_jobs):
    items = list(items)
    if n_jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, items))  # map keeps input order


# --- rounds ----------------------------------------------------------------------


@dataclass
class RoundReport:
    round: int
    coalitions: tuple
    accuracies: np.ndarray
    w: np.ndarray
    global_accuracy: float
    solo_accuracy: np.ndarray
    valuations: np.ndarray
    true_valuations: np.ndarray
    vcg_surplus: np.ndarray
    surplus: SurplusVector
    payments: np.ndarray
    reputations: np.ndarray
    accumulated_payments: np.ndarray
    utilities: np.ndarray
    core_accuracy: float | None
    wall_times: dict

    @property
    def coalition_count(self):
        return len(self.coalitions)

    @property
    def eps(self):
        return self.surplus.eps

    @property
    def budget_spent(self):
        return float(self.payments.sum())

    def is_consistent(self, tol=1e-9):
        return bool(np.all(np.abs(self.payments - (self.surplus.pi - self.valuations)) <= tol))


@dataclass
class MechanismState:
    reputation: ReputationState
    accumulated_payments: np.ndarray
    accumulated_utility: np.ndarray
    round: int = 0


def initial_state(config):
    n = config.n
    return MechanismState(ReputationState.initial(n, config.phi0), np.zeros(n), np.zeros(n))


def _round_masks(config, t):
    n = config.n
    full = (1 << n) - 1
    base = {full} | {full & ~(1 << i) for i in range(n)}
    if config.mode is Mode.EXACT:
        return list(range(1, full + 1))
    if config.mode is Mode.SAMPLED:
        drawn = sample_coalitions(n, config.n_samples, sub_seed(config.seed, "sampling", t))
        base |= {c.bits for c in drawn}
    base.discard(0)
    return sorted(base)


def _valuations(acc_global, solo, k):
    return k * np.maximum(acc_global - solo, 0.0)


def run_round(state, config, backend):
    """Run one round against ``backend``; returns ``(new_state, report)``."""
    n, t = config.n, state.round + 1
    full = (1 << n) - 1
    R = state.reputation.R
    times = {}

    t0 = time.perf_counter()
    ctx = backend.start_round(t, R)
    times["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    masks = _round_masks(config, t)
    acc = np.array(_pmap(ctx.accuracy, masks, config.n_jobs))
    ctx.commit(full)
    times["aggregate_eval"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    vp = ValuationParams(np.full(n, config.k), config.b0, ctx.solo)
    table = CharacteristicTable(n)
    for m, a in zip(masks, acc):
        table.set(m, characteristic_value(m, a, vp), a)
    w = np.array([table[m] for m in masks])
    acc_global = table.accuracies[full]
    v = _valuations(acc_global, ctx.solo, config.k)
    v_true = _valuations(acc_global, ctx.solo_true, config.k)
    vcg = vcg_surplus(table)
    if config.mode is Mode.VCG_ONLY:
        surplus = SurplusVector(vcg, table.wN - vcg.sum(), 0.0, 0.0)
    else:
        try:
            surplus = solve_core_selecting([(m, table[m]) for m in masks], vcg, table.wN)
        except MechanismError as exc:
            raise MechanismError(f"round {t}: {exc}", {**exc.diagnostics, "round": t}) from exc
    payments = surplus.pi - v
    times["qp"] = time.perf_counter() - t0

    core_acc = None
    if config.mode is Mode.EXACT:
        core_acc = core_accuracy(surplus, table)
    elif config.audit and n <= EXACT_MAX_PLAYERS:
        # reporting only: evaluated outside the timed phases and coalition count
        audit = CharacteristicTable(n, dict(table.values))
        for m in range(1, full + 1):
            if m not in audit:
                audit.set(m, characteristic_value(m, ctx.accuracy(m), vp))
        core_acc = core_accuracy(surplus, audit)

    rep = update_reputation(state.reputation, surplus.pi, config.phi0)
    P = state.accumulated_payments + payments
    u = v_true + payments
    new_state = MechanismState(rep, P, state.accumulated_utility + u, t)
    report = RoundReport(
        round=t,
        coalitions=tuple(masks),
        accuracies=acc,
        w=w,
        global_accuracy=float(acc_global),
        solo_accuracy=ctx.solo.copy(),
        valuations=v,
        true_valuations=v_true,
        vcg_surplus=vcg,
        surplus=surplus,
        payments=payments,
        reputations=rep.R.copy(),
        accumulated_payments=P.copy(),
        utilities=u,
        core_accuracy=core_acc,
        wall_times=times,
    )
    return new_state, report


@dataclass
class SimulationResult:
    reports: list
    accumulated_payments: np.ndarray
    accumulated_utility: np.ndarray
    reputations: np.ndarray

    def utility_series(self):
        """Cumulative actual utility, one row per round."""
        return np.cumsum(np.stack([r.utilities for r in self.reports]), axis=0)


def run_simulation(config, strategies=None, backend="analytic", data=None, arch=None, model=None):
    """Run ``config.rounds`` rounds. ``backend`` is a kind name or a ready backend object."""
    if isinstance(backend, str):
        backend = make_backend(backend, strategies, config, data, arch, model)
    state = initial_state(config)
    reports = []
    for _ in range(config.rounds):
        state, rep = run_round(state, config, backend)
        reports.append(rep)
    return SimulationResult(reports, state.accumulated_payments, state.accumulated_utility, state.reputation.R)


@dataclass(frozen=True)
class ValidationRow:
    m: int
    sigma2_error: float
    core_accuracy: float
    time_ms: float


def run_exact_vs_sampled(config, m_grid, strategies=None, backend="analytic", data=None, arch=None, model=None):
    """Compare the sampled program at each ``m`` with the exact one on a first-round table.

    ``sigma2_error`` is ``|sigma2_sampled - sigma2_exact|``; ``time_ms`` covers
    evaluating the sampled coalitions plus the QP. Rows come back sorted by ``m``.
    """
    n = config.n
    if n > VALIDATE_MAX_PLAYERS:
        raise CapabilityError(f"exact comparison is exponential; n={n} exceeds {VALIDATE_MAX_PLAYERS}")
    total = (1 << n) - 1
    full = total
    grid = sorted({min(int(m), total) for m in m_grid})
    if not grid or grid[0] < 1:
        raise ParameterError("m grid must hold positive sample counts")
    if isinstance(backend, str):
        backend = make_backend(backend, strategies, config, data, arch, model)
    ctx = backend.start_round(1, np.full(n, config.phi0))
    vp = ValuationParams(np.full(n, config.k), config.b0, ctx.solo)
    table = CharacteristicTable(n)
    for m in range(1, total + 1):
        table.set(m, characteristic_value(m, ctx.accuracy(m), vp))
    vcg = vcg_surplus(table)
    exact = solve_core_selecting([(m, table[m]) for m in range(1, total + 1)], vcg, table.wN)

    base = {full} | {full & ~(1 << i) for i in range(n)}
    base.discard(0)
    drawn = [c.bits for c in sample_coalitions(n, grid[-1], sub_seed(config.seed, "sampling", 1))]
    rows = []
    for m in grid:
        t0 = time.perf_counter()
        masks = sorted(base | set(drawn[:m]))
        worth = [characteristic_value(s, ctx.accuracy(s), vp) for s in masks]
        sampled = solve_core_selecting(list(zip(masks, worth)), vcg, table.wN)
        elapsed = (time.perf_counter() - t0) * 1e3
        rows.append(ValidationRow(m, abs(sampled.sigma2 - exact.sigma2), core_accuracy(sampled, table), elapsed))
    return rows


# --- estimator facade -------------------------------------------------------------


class IncentiveMechanism(ClassifierMixin, BaseEstimator):
    """Federated training with core-selecting payments, as a scikit-learn classifier.

    ``fit(X, y)`` holds out a test set, shards the rest over ``n_participants``,
    runs the mechanism on the trained backend and keeps the final global model
    for ``predict``.

    Fitted attributes: ``reports_``, ``payments_`` (accumulated), ``utilities_``
    (accumulated), ``reputations_``, ``global_params_``, ``classes_``.
    """

    def __init__(
        self,
        n_participants=4,
        rounds=5,
        mode="sampled",
        strategies=None,
        delta=0.3,
        Delta=0.3,
        C=1.0,
        b0=2.0,
        k=2.0,
        phi0=0.01,
        model="logistic",
        hidden=16,
        batch_size=32,
        local_epochs=1,
        learning_rate=0.1,
        l2=0.0,
        eval_repeats=1,
        test_fraction=0.2,
        n_jobs=1,
        random_state=0,
    ):
        self.n_participants = n_participants
        self.rounds = rounds
        self.mode = mode
        self.strategies = strategies
        self.delta = delta
        self.Delta = Delta
        self.C = C
        self.b0 = b0
        self.k = k
        self.phi0 = phi0
        self.model = model
        self.hidden = hidden
        self.batch_size = batch_size
        self.local_epochs = local_epochs
        self.learning_rate = learning_rate
        self.l2 = l2
        self.eval_repeats = eval_repeats
        self.test_fraction = test_fraction
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _config(self):
        train = TrainConfig(self.batch_size, self.local_epochs, self.learning_rate, self.l2)
        return MechanismConfig(
            n=self.n_participants, rounds=self.rounds, delta=self.delta, Delta=self.Delta, C=self.C,
            b0=self.b0, k=self.k, phi0=self.phi0, train=train, mode=self.mode,
            eval_repeats=self.eval_repeats, seed=self.random_state, n_jobs=self.n_jobs,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes; got 1 class")
        self.n_features_in_ = X.shape[1]
        config = self._config()
        data = LabeledDataset(X, np.searchsorted(self.classes_, y), len(self.classes_))
        shards, test = partition(data, config.n, self.test_fraction, sub_seed(config.seed, "partition"))
        C = len(self.classes_)
        arch = Arch.mlp(X.shape[1], self.hidden, C) if self.model == "mlp" else Arch.logistic(X.shape[1], C)
        backend = make_backend("trained", self.strategies, config, (shards, test), arch)
        result = run_simulation(config, backend=backend)
        self.reports_ = result.reports
        self.payments_ = result.accumulated_payments
        self.utilities_ = result.accumulated_utility
        self.reputations_ = result.reputations
        self.global_params_ = backend.global_params
        return self

    def predict(self, X):
        check_is_fitted(self, "global_params_")
        X = check_n_features(self, check_array(X))
        return self.classes_[predict(self.global_params_, X)]
