import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from structage.bsa import (CorrectionModel, FeatureTable, apply_bias_correction, build_table, compute_bsa, compute_bsage,
                           compute_structure_volumes, fit_bias_correction, global_brainage, impute_missing,
                           missing_structures, read_features, write_features)
from structage.volgrid import LabelVolume


def test_bsa_examples():
    lab = LabelVolume(np.array([1, 1, 2, 0, 2]).reshape(5, 1, 1), 2)
    assert compute_bsa(np.full((5, 1, 1), 50.0), lab).tolist() == [50.0, 50.0]
    m = np.array([40.0, 60.0, 1.0, 99.0, 3.0]).reshape(5, 1, 1)
    assert compute_bsa(m, lab).tolist() == [50.0, 2.0]
    with pytest.raises(ValueError):
        compute_bsa(np.zeros((4, 1, 1)), lab)


def test_bsa_matches_per_label_accumulation():
    rng = np.random.default_rng(0)
    lab = rng.integers(0, 6, size=(7, 8, 9))
    lab[lab == 4] = 0  # structure 4 absent
    agemap = rng.uniform(0, 100, size=lab.shape).astype(np.float32)
    sums = {j: 0.0 for j in range(1, 6)}
    counts = {j: 0 for j in range(1, 6)}
    for idx in np.ndindex(*lab.shape):
        j = int(lab[idx])
        if j:
            sums[j] += float(agemap[idx])
            counts[j] += 1
    out = compute_bsa(agemap, LabelVolume(lab, 5))
    for j in range(1, 6):
        if counts[j]:
            assert out[j - 1] == pytest.approx(sums[j] / counts[j], rel=1e-12)
    assert missing_structures(out) == [4]


@given(st.floats(-1e3, 1e3), st.integers(0, 2 ** 32 - 1))
def test_constant_map_gives_constant_bsa(c, seed):
    lab = np.random.default_rng(seed).integers(1, 4, size=(3, 4, 5))
    lab[0, 0, :3] = (1, 2, 3)
    out = compute_bsa(np.full(lab.shape, c), LabelVolume(lab, 3))
    # sums of n equal terms divided by n can differ from c in the last ulp
    assert np.allclose(out, c, rtol=1e-13, atol=1e-13)


def test_volumes():
    lab = LabelVolume(np.array([1, 1, 1, 2, 2, 2, 2, 2]).reshape(2, 2, 2), 2)
    assert compute_structure_volumes(lab).tolist() == [3.0, 5.0]
    assert compute_structure_volumes(LabelVolume(np.ones((10, 1, 1), int), 1), 8.0).tolist() == [80.0]


def test_correction_examples():
    y = np.array([20.0, 45.0, 70.0])
    assert fit_bias_correction(y, y).beta.tolist() == [1.0]
    assert fit_bias_correction(np.array([1.0, 2.0, 3.0]), np.array([2.0, 4.0, 6.0])).beta.tolist() == [2.0]
    m = fit_bias_correction(2 * y, y)
    assert m.beta[0] == 0.5
    assert np.allclose(apply_bias_correction(m, (2 * y)[:, None])[:, 0], y)
    ident = CorrectionModel(np.ones(3))
    assert apply_bias_correction(ident, [1.0, 2.0, 3.0]).tolist() == [1.0, 2.0, 3.0]
    assert apply_bias_correction(CorrectionModel(np.array([2.0])), [30.0]).tolist() == [60.0]
    with pytest.raises(ValueError):
        apply_bias_correction(ident, [1.0, 2.0])
    with pytest.raises(ValueError, match="zero denominator"):
        fit_bias_correction(np.zeros((3, 1)), y)
    with pytest.raises(ValueError):
        fit_bias_correction(np.array([[1.0]]), np.array([1.0]))


def test_correction_minimizes_residual_among_scalings():
    rng = np.random.default_rng(1)
    y = rng.uniform(20, 90, 40)
    x = y * 0.8 + rng.normal(0, 4, 40) + 5
    beta = fit_bias_correction(x, y).beta[0]
    best = np.sum((beta * x - y) ** 2)
    for cand in np.linspace(beta - 0.2, beta + 0.2, 401):
        assert np.sum((cand * x - y) ** 2) >= best - 1e-9


def test_intercept_variant():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    m = fit_bias_correction(x, 3 * x + 7, intercept=True)
    assert m.beta[0] == pytest.approx(3.0) and m.intercept[0] == pytest.approx(7.0)
    assert CorrectionModel.from_dict(m.to_dict()).intercept[0] == pytest.approx(7.0)


@given(st.floats(0.1, 10) | st.floats(-10, -0.1), st.integers(0, 2 ** 32 - 1))
def test_correction_scale_consistency(c, seed):
    rng = np.random.default_rng(seed)
    y = rng.uniform(20, 90, 15)
    X = y[:, None] * rng.uniform(0.5, 1.5, 3) + rng.normal(0, 3, (15, 3))
    a = fit_bias_correction(X, y)
    b = fit_bias_correction(c * X, y)
    assert np.allclose(b.beta, a.beta / c, rtol=1e-9)
    assert np.allclose(apply_bias_correction(b, c * X), apply_bias_correction(a, X), rtol=1e-9, atol=1e-9)


@given(st.floats(-50, 50), st.integers(0, 2 ** 32 - 1))
def test_bsage_translation_covariance(delta, seed):
    rng = np.random.default_rng(seed)
    corr = rng.uniform(0, 100, (4, 3))
    age = rng.uniform(0, 100, 4)
    assert np.allclose(compute_bsage(corr + delta, age), compute_bsage(corr, age) + delta)


def test_bsage_examples():
    assert compute_bsage(np.full(3, 70.0), 70.0).tolist() == [0.0, 0.0, 0.0]
    assert compute_bsage(np.array([75.0]), 70.0).tolist() == [5.0]
    with pytest.raises(ValueError):
        compute_bsage(np.array([1.0]), -1.0)


def test_global_brainage():
    lab = LabelVolume(np.array([0, 1, 2, 2]).reshape(4, 1, 1), 2)
    assert global_brainage(np.array([0.0, 60, 60, 60]).reshape(4, 1, 1), lab, 60.0) == 0.0
    assert global_brainage(np.array([0.0, 70, 70, 70]).reshape(4, 1, 1), lab, 60.0) == 10.0
    with pytest.raises(ValueError):
        global_brainage(np.zeros((4, 1, 1)), LabelVolume(np.zeros((4, 1, 1), int), 2), 50.0)


def test_impute_missing_uses_healthy_mean():
    bsa = np.array([[50.0, 60.0], [70.0, np.nan], [10.0, 80.0]])
    t = FeatureTable(["a", "b", "c"], np.array([50.0, 60.0, 70.0]), ["CN", "CN", "A"], bsa, bsa - [[50], [60], [70]],
                     np.ones((3, 2)))
    out = impute_missing(t)
    assert out.bsa[1, 1] == 60.0  # only the CN rows count, so 80 is ignored
    assert out.bsage[1, 1] == 0.0
    assert not np.isnan(out.bsa).any()


def test_build_table_and_csv_roundtrip(tmp_path):
    t = build_table(["s1", "s2"], [30.0, 40.0], ["CN", "B"], [[31.5, 29.0], [44.0, 38.0]], [[10, 20], [11, 19]],
                    CorrectionModel(np.array([1.0, 2.0])))
    assert t.bsage.tolist() == [[1.5, 28.0], [4.0, 36.0]]
    write_features(t, tmp_path / "f.csv")
    header = (tmp_path / "f.csv").read_text().splitlines()[0]
    assert header == "subject,age,class,bsa_1,bsa_2,bsage_1,bsage_2,vol_1,vol_2"
    back = read_features(tmp_path / "f.csv")
    assert back.subjects == t.subjects and back.classes == t.classes
    for name in ("ages", "bsa", "bsage", "volumes"):
        assert np.array_equal(getattr(back, name), getattr(t, name))
    (tmp_path / "bad.csv").write_text("x,y\n")
    with pytest.raises(ValueError):
        read_features(tmp_path / "bad.csv")
