import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcore.datasets import InputStrategy
from fedcore.exceptions import CapabilityError, ParameterError
from fedcore.game import (
    AccuracyModel,
    CharacteristicTable,
    Coalition,
    ValuationParams,
    analytic_oracle,
    build_table,
    characteristic_value,
    epsilon_lower_bound,
    valuation,
    vcg_payment,
    vcg_surplus,
)
from oracles import brute_epsilon_bound, exhaustive_core_violations, random_worths


def table_from(w, n):
    return CharacteristicTable(n, {m: v for m, v in w.items()})


# --- coalitions ---


def test_coalition_members_ascending():
    c = Coalition.from_members([3, 0, 2], 5)
    assert c.members() == [0, 2, 3] and list(c) == [0, 2, 3] and len(c) == 3
    assert 2 in c and 1 not in c
    assert c.without(2).members() == [0, 3]


def test_coalition_bounds():
    with pytest.raises(ParameterError):
        Coalition(0b100, 2)
    with pytest.raises(ParameterError):
        Coalition(0, 31)
    with pytest.raises(ParameterError):
        Coalition.from_members([5], 3)


def test_table_has_no_silent_default():
    t = CharacteristicTable(2, {1: 1.0})
    assert t[0] == 0.0
    with pytest.raises(KeyError):
        t[2]
    with pytest.raises(CapabilityError):
        t.as_array()


def test_table_csv_columns():
    t = CharacteristicTable(2)
    t.set(3, 4.0, 0.9)
    lines = t.to_csv().splitlines()
    assert lines[0] == "coalition_bitmask,size,accuracy,w"
    assert lines[-1] == "3,2,0.9,4.0"


# --- valuation and characteristic function ---


def test_valuation_examples():
    assert valuation(0.9, 0.8, 2) == pytest.approx(0.2, abs=1e-15)
    assert valuation(0.7, 0.8, 2) == 0
    assert valuation(0.6, 0.6, 5) == 0


def test_valuation_rejects_out_of_range():
    with pytest.raises(ParameterError):
        valuation(1.2, 0.5, 1)
    with pytest.raises(ParameterError):
        valuation(0.5, 0.5, 0)


def test_characteristic_examples():
    vp = ValuationParams([2, 2, 2], 2.0, [0.8, 0.85, 0.95])
    assert characteristic_value(0, 0.9, vp) == 0.0
    assert characteristic_value(0b111, 0.9, vp) == pytest.approx(2.3, abs=1e-12)
    assert characteristic_value(0b011, 0.7, vp) == 2.0


@settings(max_examples=50, deadline=None)
@given(g=st.floats(0, 1), s=st.floats(0, 1), dg=st.floats(0, 1), k=st.floats(0.01, 10))
def test_valuation_nonnegative_and_monotone(g, s, dg, k):
    hi = min(g + dg, 1.0)
    assert 0 <= valuation(g, s, k) <= valuation(hi, s, k)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 5))
def test_worth_at_least_budget(seed, n):
    rng = np.random.default_rng(seed)
    vp = ValuationParams(rng.uniform(0.1, 3, n), 1.5, rng.uniform(0, 1, n))
    for m in range(1, 1 << n):
        assert characteristic_value(m, rng.uniform(0, 1), vp) >= 1.5


# --- VCG ---


def test_vcg_additive():
    c = [1.0, 2.0, 3.0]
    w = {m: (2.0 + sum(c[i] for i in range(3) if m >> i & 1)) if m else 0.0 for m in range(8)}
    np.testing.assert_allclose(vcg_surplus(table_from(w, 3)), [1, 2, 3], atol=1e-12)


def test_vcg_symmetric_two_player():
    np.testing.assert_allclose(vcg_surplus(CharacteristicTable(2, {1: 3, 2: 3, 3: 4})), [1, 1])


def test_vcg_null_player():
    assert vcg_surplus(CharacteristicTable(2, {1: 3, 2: 4, 3: 4}))[0] == 0.0


def test_vcg_payment_trivial_cases():
    assert vcg_payment(0, [0.2, 0.3], [0.2, 0.3]) == 0.0
    assert vcg_payment(0, [0.4], [0.1]) == 0.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 6))
def test_vcg_identity_against_surplus(seed, n):
    # v_i + p_i^VCG = w(N) - w(N \ i); b0 cancels
    rng = np.random.default_rng(seed)
    vp = ValuationParams(rng.uniform(0.5, 3, n), rng.uniform(0, 3), rng.uniform(0, 1, n))
    full = (1 << n) - 1
    acc = {m: rng.uniform(0, 1) for m in [full] + [full & ~(1 << i) for i in range(n)] if m}
    t = build_table(n, acc, acc.__getitem__, vp)
    pi = vcg_surplus(t)
    v_glob = vp.k * np.maximum(acc[full] - vp.solo_accuracy, 0)
    for i in range(n):
        drop = full & ~(1 << i)
        v_drop = vp.k * np.maximum(acc[drop] - vp.solo_accuracy, 0) if drop else np.zeros(n)
        if drop == 0:
            # w(empty) = 0 carries no budget term, so the identity shifts by b0
            assert v_glob[i] + vcg_payment(i, v_glob, v_drop) + vp.b0 == pytest.approx(pi[i], abs=1e-12)
        else:
            assert v_glob[i] + vcg_payment(i, v_glob, v_drop) == pytest.approx(pi[i], abs=1e-12)


# --- epsilon bound ---


def test_epsilon_bound_additive_is_zero():
    c = [0.5, 1.0, 0.25, 2.0]
    w = {m: (1.0 + sum(c[i] for i in range(4) if m >> i & 1)) if m else 0.0 for m in range(16)}
    assert epsilon_lower_bound(table_from(w, 4)) == pytest.approx(0.0, abs=1e-12)


def test_epsilon_bound_two_player_example():
    assert epsilon_lower_bound(CharacteristicTable(2, {1: 3, 2: 3, 3: 4})) == 0.0


def test_epsilon_bound_guards_size():
    with pytest.raises(CapabilityError):
        epsilon_lower_bound(CharacteristicTable(13))


def test_epsilon_bound_matches_brute_force_and_certifies_vcg():
    rng = np.random.default_rng(21)
    for _ in range(50):
        n = int(rng.integers(1, 7))
        w = random_worths(rng, n)
        t = table_from(w, n)
        eps = epsilon_lower_bound(t)
        assert eps == pytest.approx(brute_epsilon_bound(w, n), abs=1e-12)
        vcg = vcg_surplus(t)
        assert exhaustive_core_violations(vcg, t.wN - vcg.sum(), eps, w, n, tol=1e-9) == []


# --- analytic oracle ---


def test_oracle_monotone_in_coalition_when_truthful():
    f = analytic_oracle([0.0] * 5)
    for S in range(1, 32):
        for j in range(5):
            assert f(S) <= f(S | 1 << j) + 1e-15


@pytest.mark.parametrize("kind", ["noise", "removal", "labelflip"])
def test_oracle_strictly_decreasing_in_degree(kind):
    for S in (0b001, 0b011, 0b111):
        accs = [analytic_oracle([InputStrategy(kind, f), "truthful", "truthful"])(S) for f in (0.0, 0.25, 0.5, 1.0)]
        assert all(a > b for a, b in zip(accs, accs[1:]))


def test_oracle_truthful_table_is_monotone():
    n = 5
    f = analytic_oracle([0.0] * n)
    vp = ValuationParams([2.0] * n, 2.0, [f(1 << i) for i in range(n)])
    t = build_table(n, range(1, 1 << n), f, vp)
    for S in range(1 << n):
        for j in range(n):
            assert t[S] <= t[S | 1 << j] + 1e-12


def test_oracle_noise_needs_rng_and_is_reproducible():
    f = analytic_oracle([0.0] * 3, AccuracyModel(noise=0.05))
    assert f(0b111) == analytic_oracle([0.0] * 3)(0b111)
    a = f(0b111, rng=np.random.default_rng(1))
    assert a == f(0b111, rng=np.random.default_rng(1)) != f(0b111)


def test_oracle_weights_shift_harm():
    f = analytic_oracle([InputStrategy.label_flip(1.0), "truthful"])
    assert f(0b11, weights=[0.01, 1.0]) > f(0b11) > f(0b11, weights=[1.0, 0.01])


def _vcg_utility(f_i, n=4):
    profile = [f_i] + [0.0] * (n - 1)
    obs = analytic_oracle(profile)
    truth = analytic_oracle([0.0] * n)
    vp = ValuationParams([2.0] * n, 2.0, [obs(1 << j) for j in range(n)])
    t = build_table(n, range(1, 1 << n), obs, vp)
    full = (1 << n) - 1
    v_obs = valuation(obs(full), vp.solo_accuracy[0], 2.0)
    v_true = valuation(obs(full), truth(1), 2.0)
    return v_true + vcg_surplus(t)[0] - v_obs


def test_truthful_input_maximizes_vcg_utility():
    grid = [0.0, 0.25, 0.5, 1.0]
    u = [_vcg_utility(f) for f in grid]
    assert int(np.argmax(u)) == 0
    assert all(u[0] >= x for x in u[1:])
