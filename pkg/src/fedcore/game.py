"""The data-sharing game: coalitions, valuations, characteristic function, VCG.

Coalitions are bit-sets over participant indices ``0..n-1`` (``n <= 30``);
tables are keyed by the integer bitmask so lookups stay cheap for the
exponential paths.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .datasets import InputStrategy
from .exceptions import CapabilityError, ParameterError

__all__ = [
    "MAX_PLAYERS",
    "Coalition",
    "ValuationParams",
    "CharacteristicTable",
    "valuation",
    "characteristic_value",
    "build_table",
    "vcg_surplus",
    "vcg_payment",
    "epsilon_lower_bound",
    "AccuracyModel",
    "analytic_oracle",
]

MAX_PLAYERS = 30
EXACT_BOUND_MAX_PLAYERS = 12


def _popcount(x):
    return bin(x).count("1")


@dataclass(frozen=True, order=True)
class Coalition:
    bits: int
    n: int

    def __post_init__(self):
        if not 0 <= self.n <= MAX_PLAYERS:
            raise ParameterError(f"n must be in 0..{MAX_PLAYERS}, got {self.n}")
        if self.bits < 0 or self.bits >> self.n:
            raise ParameterError(f"bits {self.bits:#x} not a subset of 0..{self.n - 1}")

    @classmethod
    def from_members(cls, members: Iterable[int], n: int):
        bits = 0
        for i in members:
            if not 0 <= i < n:
                raise ParameterError(f"member {i} out of range for n={n}")
            bits |= 1 << i
        return cls(bits, n)

    @classmethod
    def full(cls, n):
        return cls((1 << n) - 1, n)

    @classmethod
    def empty(cls, n):
        return cls(0, n)

    def members(self):
        return [i for i in range(self.n) if self.bits >> i & 1]

    def __iter__(self):
        return iter(self.members())

    def __len__(self):
        return _popcount(self.bits)

    def __contains__(self, i):
        return 0 <= i < self.n and bool(self.bits >> i & 1)

    def __int__(self):
        return self.bits

    def __index__(self):
        return self.bits

    def without(self, i):
        return Coalition(self.bits & ~(1 << i), self.n)

    def __str__(self):
        return "{" + ",".join(map(str, self.members())) + "}"


def _mask(S):
    return S.bits if isinstance(S, Coalition) else int(S)


@dataclass
class ValuationParams:
    k: np.ndarray
    b0: float
    solo_accuracy: np.ndarray

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float).reshape(-1)
        self.solo_accuracy = np.asarray(self.solo_accuracy, dtype=float).reshape(-1)
        if self.k.shape != self.solo_accuracy.shape:
            raise ParameterError("k and solo_accuracy must have the same length")
        if np.any(self.k <= 0):
            raise ParameterError("preference constants k_i must be positive")
        if self.b0 < 0:
            raise ParameterError("budget b0 must be non-negative")
        if np.any((self.solo_accuracy < 0) | (self.solo_accuracy > 1)):
            raise ParameterError("solo accuracies must lie in [0, 1]")

    @property
    def n(self):
        return self.k.shape[0]


@dataclass
class CharacteristicTable:
    """Worth ``w(S)`` per coalition; ``w(empty) = 0`` is always present.

    Missing coalitions raise ``KeyError``: there is no silent default.
    """

    n: int
    values: dict = field(default_factory=dict)
    accuracies: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.n <= MAX_PLAYERS:
            raise ParameterError(f"n must be in 0..{MAX_PLAYERS}")
        self.values = {int(k): float(v) for k, v in self.values.items()}
        if self.values.get(0, 0.0) != 0.0:
            raise ParameterError("w(empty set) must be 0")
        self.values[0] = 0.0

    @property
    def full_mask(self):
        return (1 << self.n) - 1

    def __getitem__(self, S):
        m = _mask(S)
        try:
            return self.values[m]
        except KeyError:
            raise KeyError(f"coalition {m:#x} not in characteristic table") from None

    def __contains__(self, S):
        return _mask(S) in self.values

    def set(self, S, worth, accuracy=None):
        m = _mask(S)
        if m >> self.n:
            raise ParameterError(f"coalition {m:#x} outside 0..{self.n - 1}")
        if m == 0:
            if worth != 0:
                raise ParameterError("w(empty set) must be 0")
            return
        self.values[m] = float(worth)
        if accuracy is not None:
            self.accuracies[m] = float(accuracy)

    @property
    def wN(self):
        return self[self.full_mask]

    def is_complete(self):
        return len(self.values) == 1 << self.n

    def as_array(self):
        """Dense ``w`` indexed by bitmask; requires a complete table."""
        if not self.is_complete():
            raise CapabilityError("operation needs all 2^n characteristic values")
        w = np.empty(1 << self.n)
        for m, v in self.values.items():
            w[m] = v
        return w

    def nonempty_masks(self):
        return sorted(m for m in self.values if m)

    def to_csv(self, fh=None):
        """Write ``coalition_bitmask,size,accuracy,w`` rows (ascending mask).

        Returns the text when ``fh`` is None.
        """
        out = io.StringIO() if fh is None else fh
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["coalition_bitmask", "size", "accuracy", "w"])
        for m in sorted(self.values):
            acc = self.accuracies.get(m)
            writer.writerow([m, _popcount(m), "" if acc is None else repr(acc), repr(self.values[m])])
        return out.getvalue() if fh is None else None


def valuation(global_accuracy, solo_accuracy, k):
    """``k * max(A(global) - A(solo), 0)``: one realized draw of the expected gain."""
    for name, a in (("global_accuracy", global_accuracy), ("solo_accuracy", solo_accuracy)):
        if not 0.0 <= a <= 1.0:
            raise ParameterError(f"{name} must be in [0, 1], got {a}")
    if k <= 0:
        raise ParameterError("k must be positive")
    return k * max(global_accuracy - solo_accuracy, 0.0)


def characteristic_value(S, coalition_accuracy, vp):
    """``b0 + sum_{i in S} v_i`` for nonempty ``S``; 0 for the empty coalition."""
    if not 0.0 <= coalition_accuracy <= 1.0:
        raise ParameterError(f"coalition accuracy must be in [0, 1], got {coalition_accuracy}")
    m = _mask(S)
    if m == 0:
        return 0.0
    gains = np.maximum(coalition_accuracy - vp.solo_accuracy, 0.0) * vp.k
    return vp.b0 + float(sum(gains[i] for i in range(vp.n) if m >> i & 1))


def build_table(n, coalitions, accuracy_of: Callable[[int], float], vp):
    """Evaluate ``accuracy_of`` on each coalition mask and record ``w`` and accuracy."""
    table = CharacteristicTable(n)
    for m in coalitions:
        m = _mask(m)
        if m == 0:
            continue
        acc = accuracy_of(m)
        table.set(m, characteristic_value(m, acc, vp), acc)
    return table


def vcg_surplus(table):
    """Marginal contributions ``w(N) - w(N \\ {i})``; may be negative."""
    full = table.full_mask
    wN = table[full]
    return np.array([wN - table[full & ~(1 << i)] for i in range(table.n)])


def vcg_payment(i, global_valuations, drop_i_valuations):
    """Externality payment: others' valuations with ``i`` minus without ``i``."""
    g = np.asarray(global_valuations, dtype=float)
    d = np.asarray(drop_i_valuations, dtype=float)
    if g.shape != d.shape:
        raise ParameterError("valuation vectors must have equal length")
    mask = np.arange(g.shape[0]) != i
    return float(g[mask].sum() - d[mask].sum())


def epsilon_lower_bound(table):
    """Smallest relaxation the marginal-contribution bound certifies for the VCG surplus.

    Computes ``max_S alpha(S) * (n - |S|)`` over nonempty ``S`` where
    ``alpha(S) = max_{T >= S} max_{i in S} [(w(N) - w(N-i)) - (w(T) - w(T-i))]``,
    clamped at 0. Uses a superset-max transform per player, O(n^2 2^n).
    """
    n = table.n
    if n > EXACT_BOUND_MAX_PLAYERS:
        raise CapabilityError(f"epsilon bound is exponential; n={n} exceeds {EXACT_BOUND_MAX_PLAYERS}")
    if n == 0:
        return 0.0
    w = table.as_array()
    size = 1 << n
    masks = np.arange(size)
    full = size - 1
    alpha = np.full(size, -np.inf)
    for i in range(n):
        bit = 1 << i
        has_i = (masks & bit) != 0
        d = np.full(size, -np.inf)
        d[has_i] = (w[full] - w[full ^ bit]) - (w[has_i] - w[masks[has_i] ^ bit])
        # superset max: M[S] = max_{T >= S} d[T]
        for b in range(n):
            v = d.reshape(-1, 2, 1 << b)
            np.maximum(v[:, 0, :], v[:, 1, :], out=v[:, 0, :])
        alpha = np.where(has_i, np.maximum(alpha, d), alpha)
    sizes = np.array([_popcount(int(m)) for m in masks])
    vals = alpha[1:] * (n - sizes[1:])
    return max(float(np.max(vals)), 0.0)


@dataclass(frozen=True)
class AccuracyModel:
    """Closed-form coalition accuracy used to exercise the mechanism without training.

    ``a(S) = a_max - c1 / (1 + |S|_eff) - c2 * sum_{i in S} share_i * sev_i * f_i``
    clamped to [0, 1]. ``|S|_eff`` counts members that did not quit,
    ``share_i = |S| R_i / sum_{j in S} R_j`` is the aggregation-weight share
    (1 under uniform weights) and ``sev`` scales each strategy kind's harm.
    ``noise`` adds a Gaussian evaluation error, seeded per coalition.
    """

    a_max: float = 0.95
    c1: float = 0.5
    c2: float = 0.2
    noise: float = 0.0
    severity: tuple = (("noise", 0.5), ("removal", 0.5), ("labelflip", 1.0), ("quit", 0.0), ("truthful", 0.0))

    def sev(self, kind):
        return dict(self.severity)[kind]


def _as_strategy(s):
    if isinstance(s, InputStrategy):
        return s
    if isinstance(s, str):
        return InputStrategy.parse(s)
    return InputStrategy("labelflip", float(s))


class _OracleAccuracy:
    def __init__(self, profile, base):
        strategies = [_as_strategy(s) for s in profile]
        self.n = len(strategies)
        self.base = base
        self.harm = np.array([base.sev(s.kind) * s.degree for s in strategies])
        self.size_weight = np.array([0.0 if s.kind == "quit" else 1.0 for s in strategies])

    def __call__(self, S, weights=None, rng=None):
        m = _mask(S)
        idx = np.array([i for i in range(self.n) if m >> i & 1], dtype=int)
        if idx.size == 0:
            raise ParameterError("accuracy of the empty coalition is undefined")
        if weights is None:
            share = np.ones(idx.size)
        else:
            w = np.asarray(weights, dtype=float)[idx]
            share = idx.size * w / w.sum()
        b = self.base
        a = b.a_max - b.c1 / (1.0 + self.size_weight[idx].sum()) - b.c2 * float(share @ self.harm[idx])
        if b.noise and rng is not None:
            a += b.noise * rng.normal()
        return float(min(max(a, 0.0), 1.0))


def analytic_oracle(profile, base=None):
    """Return ``accuracy(S, weights=None, rng=None)`` for a strategy profile.

    ``profile`` holds one ``InputStrategy``, strategy string or bare degree
    (read as a label flip) per participant. Without noise the result is deterministic,
    strictly decreasing in each member's degree (until clamped) and, for a
    truthful profile, nondecreasing as the coalition grows.
    """
    return _OracleAccuracy(profile, base or AccuracyModel())
