from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.datasets import load_iris

from fedcore.datasets import (
    InputStrategy,
    LabeledDataset,
    apply_strategy,
    generate_synthetic,
    load_csv,
    partition,
)
from fedcore.exceptions import ParameterError


def blobs(m=100, C=2, seed=0):
    return generate_synthetic(m, 3, C, 3.0, seed=seed)


def test_synthetic_shape_and_balance():
    d = generate_synthetic(200, 4, 2, 3.0, seed=7)
    assert d.features.shape == (200, 4)
    counts = np.bincount(d.labels)
    assert abs(counts[0] - 100) <= 1 and abs(counts[1] - 100) <= 1


def test_synthetic_is_deterministic():
    a, b = generate_synthetic(200, 4, 2, 3.0, seed=7), generate_synthetic(200, 4, 2, 3.0, seed=7)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


@pytest.mark.parametrize("args", [(1, 2, 2), (10, 0, 2), (10, 2, 1)])
def test_synthetic_rejects_bad_counts(args):
    with pytest.raises(ParameterError):
        generate_synthetic(*args)


def test_dataset_invariants():
    with pytest.raises(ParameterError):
        LabeledDataset(np.zeros((3, 2)), np.zeros(2, dtype=int), 2)
    with pytest.raises(ParameterError):
        LabeledDataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(ParameterError):
        LabeledDataset(np.array([[np.nan, 0.0]]), np.array([0]), 2)
    with pytest.raises(ParameterError):
        LabeledDataset(np.zeros((1, 2)), np.array([0]), 1)


def test_csv_three_rows(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n1,2,0\n3,4,1\n5,6,0\n")
    d = load_csv(p, "label")
    assert len(d) == 3 and d.n_features == 2


def test_csv_missing_label_column_names_it(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ParameterError, match="target"):
        load_csv(p, "target")


def test_csv_bad_cell_reports_row(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,label\n1,0\nx,1\n")
    with pytest.raises(ParameterError, match="3"):
        load_csv(p, "label")


def test_csv_iris(tmp_path):
    iris = load_iris()
    p = tmp_path / "iris.csv"
    rows = ["sl,sw,pl,pw,species"] + [
        ",".join(map(repr, x.tolist())) + "," + iris.target_names[y] for x, y in zip(iris.data, iris.target)
    ]
    p.write_text("\n".join(rows) + "\n")
    d = load_csv(p, "species")
    assert (len(d), d.n_features, d.n_classes) == (150, 4, 3)


def test_partition_ten_parts():
    shards, test = partition(generate_synthetic(150, 4, 3, seed=1), 10, 0.1, seed=2)
    assert len(test) == 15
    assert sorted({len(s) for s in shards}) == [13, 14]


def test_partition_single_shard():
    shards, test = partition(blobs(100), 1, 0.1, seed=0)
    assert len(shards) == 1 and len(shards[0]) == 90


def test_partition_too_few_samples():
    with pytest.raises(ParameterError):
        partition(blobs(10), 10, 0.1, seed=0)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 8), frac=st.floats(0.05, 0.5), seed=st.integers(0, 1000))
def test_partition_is_a_bijection(n, frac, seed):
    d = blobs(120, C=3, seed=1)
    shards, test = partition(d, n, frac, seed=seed)
    rows = np.vstack([s.features for s in shards] + [test.features])
    assert rows.shape[0] == len(d)
    key = lambda A: sorted(map(tuple, A.tolist()))
    assert key(rows) == key(d.features)
    labels = np.concatenate([s.labels for s in shards] + [test.labels])
    assert Counter(labels.tolist()) == Counter(d.labels.tolist())
    sizes = [len(s) for s in shards]
    assert max(sizes) - min(sizes) <= 1


def test_truthful_is_identity():
    d = blobs()
    out = apply_strategy(d, InputStrategy.truthful(), seed=3)
    assert out.features.tobytes() == d.features.tobytes() and out.labels.tobytes() == d.labels.tobytes()


@pytest.mark.parametrize("s", [InputStrategy.noise(0), InputStrategy.removal(0), InputStrategy.label_flip(0)])
def test_zero_degree_is_identity(s):
    d = blobs()
    out = apply_strategy(d, s, seed=3)
    assert out.features.tobytes() == d.features.tobytes() and out.labels.tobytes() == d.labels.tobytes()


def test_removal_counts_rows():
    d = blobs(100)
    out = apply_strategy(d, InputStrategy.removal(0.3), seed=1)
    assert len(out) == 70
    original = set(map(tuple, d.features.tolist()))
    assert all(tuple(r) in original for r in out.features.tolist())


def test_label_flip_two_classes_changes_exactly_half():
    d = blobs(100, C=2)
    out = apply_strategy(d, InputStrategy.label_flip(0.5), seed=1)
    assert int(np.sum(out.labels != d.labels)) == 50


def test_label_flip_always_moves_to_other_class():
    d = generate_synthetic(90, 2, 3, seed=4)
    out = apply_strategy(d, InputStrategy.label_flip(1.0), seed=9)
    assert np.all(out.labels != d.labels)


def test_noise_scale_follows_feature_std():
    d = generate_synthetic(4000, 2, 2, 3.0, seed=0)
    out = apply_strategy(d, InputStrategy.noise(0.5), seed=2)
    diff = out.features - d.features
    np.testing.assert_allclose(diff.std(axis=0), 0.5 * d.features.std(axis=0), rtol=0.05)
    np.testing.assert_array_equal(out.labels, d.labels)


def test_quit_gives_empty():
    out = apply_strategy(blobs(), InputStrategy.quit(), seed=0)
    assert len(out) == 0 and out.n_features == 3


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(["noise", "removal", "labelflip"]), f=st.floats(0, 1), seed=st.integers(0, 99))
def test_strategies_keep_dims_and_classes_and_are_deterministic(kind, f, seed):
    d = generate_synthetic(60, 3, 4, seed=1)
    s = InputStrategy(kind, f)
    a, b = apply_strategy(d, s, seed), apply_strategy(d, s, seed)
    assert a.n_features == 3 and a.n_classes == 4
    assert a.labels.min(initial=0) >= 0 and a.labels.max(initial=0) < 4
    assert a.features.tobytes() == b.features.tobytes() and a.labels.tobytes() == b.labels.tobytes()


def test_strategy_parse_and_validation():
    assert InputStrategy.parse("labelflip:0.5") == InputStrategy.label_flip(0.5)
    assert str(InputStrategy.parse("Label-Flip:0.25")) == "labelflip:0.25"
    with pytest.raises(ParameterError):
        InputStrategy("noise", 1.5)
    with pytest.raises(ParameterError):
        InputStrategy.parse("bogus")
