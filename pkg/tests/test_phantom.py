import numpy as np
import pytest

from structage.phantom import (DiseaseEffect, PhantomSpec, allocate_classes, default_effects, generate_cohort,
                               generate_subject, read_manifest, without_variation, write_manifest)
from structage.volgrid import voxel_counts_per_label

CN = DiseaseEffect("CN")


def test_noiseless_formula():
    spec = PhantomSpec(noise_sigma=0.0)
    s = generate_subject(spec, CN, 40.0, 1)
    for j in range(1, spec.num_structures + 1):
        vals = s.volume[s.labels.labels == j]
        assert vals.size > 0
        assert np.all(vals == np.float32(spec.base[j - 1] + spec.slope[j - 1] * 40.0))
    assert np.all(s.volume[s.labels.labels == 0] == 0)


def test_same_seed_bit_identical():
    spec = PhantomSpec()
    a = generate_subject(spec, default_effects()["B"], 55.5, 42)
    b = generate_subject(spec, default_effects()["B"], 55.5, 42)
    assert a.volume.tobytes() == b.volume.tobytes()
    assert np.array_equal(a.labels.labels, b.labels.labels)


def test_disease_offset_is_age_substitution():
    spec = without_variation(PhantomSpec(noise_sigma=0.0))
    eff = DiseaseEffect("A", {1}, 10.0)
    sick = generate_subject(spec, eff, 50.0, 3)
    cn50 = generate_subject(spec, CN, 50.0, 3)
    cn60 = generate_subject(spec, CN, 60.0, 3)
    lab = sick.labels.labels
    assert np.array_equal(sick.volume[lab == 1], cn60.volume[lab == 1])
    assert np.array_equal(sick.volume[lab != 1], cn50.volume[lab != 1])


def test_effect_is_localized_and_labels_static():
    spec = without_variation(PhantomSpec(noise_sigma=0.0))
    effects = default_effects()
    ref = generate_subject(spec, CN, 30.0, 9)
    for name, eff in effects.items():
        for age in (25.0, 70.0):
            s = generate_subject(spec, DiseaseEffect(name, eff.affected, eff.delta), age, 9)
            assert np.array_equal(s.labels.labels, ref.labels.labels)
        s = generate_subject(spec, DiseaseEffect(name, eff.affected, eff.delta), 30.0, 9)
        outside = ~np.isin(s.labels.labels, list(eff.affected))
        assert np.array_equal(s.volume[outside], ref.volume[outside])


def test_atrophy_shrinks_affected_structures_only():
    spec = without_variation(PhantomSpec())
    eff = default_effects()["C"]
    cn = generate_subject(spec, CN, 50.0, 4)
    sick = generate_subject(spec, eff, 50.0, 4)
    for j in range(1, spec.num_structures + 1):
        if j in eff.affected:
            assert sick.region_sizes[j - 1] < cn.region_sizes[j - 1]
        else:
            assert sick.region_sizes[j - 1] == cn.region_sizes[j - 1]


def test_default_noise_and_tables():
    spec = PhantomSpec()
    assert spec.sigma == pytest.approx(0.02 * spec.dynamic_range)
    assert all(a < 0 for a in spec.slope)
    assert PhantomSpec(noise_sigma=0.5).sigma == 0.5
    with pytest.raises(ValueError):
        PhantomSpec(noise_sigma=-1.0)
    with pytest.raises(ValueError):
        PhantomSpec(num_structures=2, slope=(0.0, 0.0), base=(1.0, 1.0))


def test_default_disease_table():
    eff = default_effects()
    assert (eff["A"].affected, eff["A"].delta) == ({1, 2}, 12.0)
    assert (eff["B"].affected, eff["B"].delta) == ({3, 4, 5}, 14.0)
    assert (eff["C"].affected, eff["C"].delta) == ({6}, 15.0)
    assert (eff["D"].affected, eff["D"].delta) == ({7}, 2.0)
    assert (eff["E"].affected, eff["E"].delta) == ({3, 8}, 7.0)
    sets = [e.affected for n, e in eff.items() if n != "CN"]
    assert len(set(sets)) == len(sets)
    with pytest.raises(ValueError):
        DiseaseEffect("CN", {1}, 3.0)


def test_subject_errors():
    with pytest.raises(ValueError):
        generate_subject(PhantomSpec(), CN, 101.0, 0)
    overlapping = PhantomSpec(num_structures=2, base=(1.0, 1.0), slope=(-0.01, -0.01),
                              centers=((10, 10, 10), (12, 10, 10)), radii=((4, 4, 4), (4, 4, 4)), radius_jitter=0.0)
    with pytest.raises(ValueError, match="overlap"):
        generate_subject(overlapping, CN, 50.0, 0)


def test_region_sizes_match_labels():
    s = generate_subject(PhantomSpec(), default_effects()["E"], 33.0, 8)
    assert np.array_equal(s.region_sizes, voxel_counts_per_label(s.labels))


def test_cohort_mix_and_manifest(tmp_path):
    spec = PhantomSpec(dims=(16, 24, 16))
    subjects = generate_cohort(spec, {"CN": 1.0}, (20, 80), 50, 5)
    assert len(subjects) == 50 and {s.klass for s in subjects} == {"CN"}
    write_manifest(subjects, tmp_path / "a.csv")
    write_manifest(generate_cohort(spec, {"CN": 1.0}, (20, 80), 50, 5), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = read_manifest(tmp_path / "a.csv")
    assert [r["id"] for r in rows] == [s.id for s in subjects]
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "id,age,class,seed"
    with pytest.raises(ValueError):
        generate_cohort(spec, {}, (20, 80), 5, 0)
    with pytest.raises(ValueError):
        generate_cohort(spec, {"Z": 1.0}, (20, 80), 5, 0)


def test_cohort_age_mean():
    # only ages matter here; the per-subject draw order is ages first, so a tiny spec is enough
    spec = PhantomSpec(dims=(8, 12, 8), num_structures=2)
    n = 400
    ages = np.array([s.age for s in generate_cohort(spec, {"CN": 1.0}, (20, 80), n, 11)])
    sd = 60 / np.sqrt(12) / np.sqrt(n)
    assert abs(ages.mean() - 50) < 3 * sd
    assert ages.min() >= 20 and ages.max() <= 80


def test_exact_class_allocation():
    out = allocate_classes({"CN": 1, "A": 1, "B": 1}, 10, np.random.default_rng(0), exact=True)
    assert sorted(out.count(c) for c in "CN A B".split()) == [3, 3, 4]
