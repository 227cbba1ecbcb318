import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import auc_all_pairs
from structage.evalkit import binary_auc, classification_metrics, regression_metrics


def test_regression_examples():
    r = regression_metrics([1, 2, 3], [1, 2, 3])
    assert r.mae == 0 and r.r2 == 1
    assert regression_metrics([2, 2, 2], [1, 2, 3]).r2 == 0
    r = regression_metrics([1, 2, 4], [1, 2, 3])
    assert abs(r.mae - 1 / 3) < 1e-12 and abs(r.r2 - 0.5) < 1e-12
    with pytest.raises(ValueError):
        regression_metrics([1, 2], [5, 5])
    with pytest.raises(ValueError):
        regression_metrics([1], [1])


def test_auc_examples():
    assert binary_auc([0.9, 0.8, 0.7, 0.1], [1, 1, 0, 0]) == 1.0
    assert binary_auc([0.9, 0.7, 0.8, 0.1], [1, 1, 0, 0]) == 0.75
    assert binary_auc([0.5, 0.5], [1, 0]) == 0.5
    with pytest.raises(ValueError):
        binary_auc([1, 2], [1, 1])


def test_classification_examples():
    perfect = classification_metrics(["a", "b", "b"], np.array([[1, 0], [0, 1], [0, 1.0]]), ["a", "b", "b"])
    assert perfect.acc == perfect.bacc == perfect.auc == 1.0
    truth = ["M"] * 90 + ["m"] * 10
    r = classification_metrics(["M"] * 100, None, truth, ["M", "m"])
    assert r.acc == 0.9 and r.bacc == 0.5
    assert r.confusion.sum(axis=1).tolist() == [90, 10]


def test_absent_class_warns_and_is_excluded():
    with pytest.warns(UserWarning):
        r = classification_metrics(["a", "c"], None, ["a", "a"], ["a", "b", "c"])
    assert r.bacc == 0.5


def test_multiclass_auc_is_macro_one_vs_rest():
    rng = np.random.default_rng(0)
    truth = list(rng.choice(["x", "y", "z"], 60))
    scores = rng.normal(size=(60, 3))
    r = classification_metrics([truth[0]] * 60, scores, truth, ["x", "y", "z"])
    t = np.array(truth)
    expect = np.mean([auc_all_pairs(scores[:, i], t == c) for i, c in enumerate("xyz")])
    assert r.auc == pytest.approx(expect, abs=1e-12)


def test_auc_matches_all_pairs_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 60))
        scores = rng.integers(0, 8, n) / 4.0  # coarse values force ties
        pos = rng.random(n) < 0.5
        pos[0], pos[1] = True, False
        assert binary_auc(scores, pos) == auc_all_pairs(scores, pos)


@given(st.lists(st.integers(-100, 100), min_size=4, max_size=40), st.integers(0, 2 ** 32 - 1))
def test_auc_monotone_invariance(scores, seed):
    s = np.array(scores, dtype=np.float64)
    pos = np.random.default_rng(seed).random(s.size) < 0.5
    pos[0], pos[1] = True, False
    assert binary_auc(s, pos) == binary_auc(np.exp(s / 50) * 3 + 1, pos)


@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 4))
def test_bacc_prevalence_invariance(seed, rep):
    rng = np.random.default_rng(seed)
    truth = list(rng.choice(["a", "b", "c"], 30))
    pred = list(rng.choice(["a", "b", "c"], 30))
    base = classification_metrics(pred, None, truth, ["a", "b", "c"])
    extra = [(p, t) for p, t in zip(pred, truth) if t == "a"] * (rep - 1)
    more = classification_metrics(pred + [p for p, _ in extra], None, truth + [t for _, t in extra], ["a", "b", "c"])
    assert more.bacc == pytest.approx(base.bacc, abs=1e-12)
    assert base.acc == np.trace(base.confusion) / base.confusion.sum()
