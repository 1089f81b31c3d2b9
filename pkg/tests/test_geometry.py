import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from crossshape.geometry import (
    FAMILY_PARTS, PART_FRACTION_BOUNDS, LabeledPointCloud, ShapeSpec, d2_descriptor, generate_collection,
    generate_shape, knn_indices, knn_query, normalize_positions, subsample_indices, subsample_points,
)


def sort_oracle(points, k, exclude_self=True):
    """Sort every row of exact squared distances by (distance, index)."""
    p = np.asarray(points, dtype=np.float64)
    out = []
    for i in range(len(p)):
        d = [(float(((p[i] - p[j]) ** 2).sum()), j) for j in range(len(p)) if not (exclude_self and j == i)]
        out.append([j for _, j in sorted(d)[:k]])
    return np.array(out)


def test_knn_collinear_example():
    pts = np.array([[0.0], [1.0], [3.0]])
    np.testing.assert_array_equal(knn_indices(pts, 1), [[1], [0], [1]])


def test_knn_all_others_when_k_is_p_minus_one(rng):
    pts = rng.normal(size=(7, 3))
    nb = knn_indices(pts, 6)
    for i, row in enumerate(nb):
        assert sorted(row) == [j for j in range(7) if j != i]


def test_knn_matches_sort_oracle(rng):
    pts = rng.normal(size=(64, 3))
    np.testing.assert_array_equal(knn_indices(pts, 8), sort_oracle(pts, 8))


def test_knn_include_self(rng):
    pts = rng.normal(size=(10, 3))
    nb = knn_indices(pts, 3, exclude_self=False)
    np.testing.assert_array_equal(nb[:, 0], np.arange(10))
    np.testing.assert_array_equal(nb, sort_oracle(pts, 3, exclude_self=False))


def test_knn_ties_go_to_lower_index():
    pts = np.array([[0.0, 0], [1, 0], [-1, 0], [0, 1], [0, -1]])
    np.testing.assert_array_equal(knn_indices(pts, 2)[0], [1, 2])
    np.testing.assert_array_equal(knn_indices(pts, 2), sort_oracle(pts, 2))


def test_knn_rejects_large_k(rng):
    with pytest.raises(ValueError):
        knn_indices(rng.normal(size=(5, 3)), 5)


@given(st.integers(5, 40), st.integers(1, 4), st.integers(0, 2 ** 32 - 1), st.booleans())
def test_grid_knn_equals_brute_force(n, k, seed, lattice):
    r = np.random.default_rng(seed)
    pts = r.integers(0, 4, size=(n, 3)).astype(float) if lattice else r.normal(size=(n, 3))
    k = min(k, n - 1)
    np.testing.assert_array_equal(knn_indices(pts, k, method="grid"), knn_indices(pts, k))
    np.testing.assert_array_equal(knn_indices(pts, k), sort_oracle(pts, k))


@given(st.integers(5, 30), st.integers(0, 2 ** 32 - 1))
def test_knn_permutation_consistent(n, seed):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(n, 3))
    perm = r.permutation(n)
    inv = np.argsort(perm)
    base = knn_indices(pts, 3)
    permuted = knn_indices(pts[perm], 3)
    # row perm[i] of the permuted result is row i of base relabelled
    np.testing.assert_array_equal(perm[permuted[inv]], base)


def test_knn_query_matches_oracle(rng):
    src, tgt = rng.normal(size=(20, 3)), rng.normal(size=(50, 3))
    d = ((tgt[:, None] - src[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(knn_query(src, tgt)[:, 0], np.argmin(d, axis=1))


def test_subsample_identity_and_determinism():
    np.testing.assert_array_equal(subsample_indices(10, 10, 3), np.arange(10))
    np.testing.assert_array_equal(subsample_indices(2500, 1000, 7), subsample_indices(2500, 1000, 7))
    idx = subsample_indices(2500, 1000, 7)
    assert len(np.unique(idx)) == 1000 and np.all(np.diff(idx) > 0)
    with pytest.raises(ValueError):
        subsample_indices(5, 6, 0)


@given(st.integers(4, 60), st.integers(0, 2 ** 32 - 1))
def test_subsample_carries_labels(n, seed):
    r = np.random.default_rng(seed)
    cloud = LabeledPointCloud(r.normal(size=(n, 3)), r.integers(0, 3, n), 3, "s")
    count = int(r.integers(4, n + 1))
    sub, idx = subsample_points(cloud, count, seed)
    np.testing.assert_array_equal(sub.labels, cloud.labels[idx])
    np.testing.assert_array_equal(sub.positions, cloud.positions[idx])
    assert sorted(sub.labels.tolist()) == sorted(cloud.labels[idx].tolist())


def test_subsample_matrix(rng):
    m = rng.normal(size=(9, 2))
    sub, idx = subsample_points(m, 4, 1)
    np.testing.assert_array_equal(sub, m[idx])


def test_cloud_validation():
    with pytest.raises(ValueError):
        LabeledPointCloud(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        LabeledPointCloud(np.full((4, 3), np.nan))
    with pytest.raises(ValueError):
        LabeledPointCloud(np.zeros((4, 3)), [0, 1, 2, 3], 3)


def test_normalize_positions(rng):
    p = normalize_positions(rng.normal(size=(30, 3)) * 5 + 2)
    np.testing.assert_allclose(p.mean(0), 0, atol=1e-6)
    assert np.linalg.norm(p, axis=1).max() == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("family", sorted(FAMILY_PARTS))
def test_generate_shape_structure(family):
    cloud = generate_shape(ShapeSpec(family, 512, seed=3))
    assert cloud.n_points == 512 and cloud.part_count == 4
    assert set(np.unique(cloud.labels)) == {0, 1, 2, 3}
    assert np.linalg.norm(cloud.positions, axis=1).max() == pytest.approx(1.0, abs=1e-5)
    np.testing.assert_allclose(cloud.positions.mean(0), 0, atol=1e-5)
    again = generate_shape(ShapeSpec(family, 512, seed=3))
    np.testing.assert_array_equal(cloud.positions, again.positions)
    np.testing.assert_array_equal(cloud.labels, again.labels)


def test_generate_shape_rejects_bad_specs():
    for spec in (ShapeSpec("sofa"), ShapeSpec("chair", style="rocking"), ShapeSpec("chair", params={"width": 9.0}),
                 ShapeSpec("chair", params={"wheels": 1.0}), ShapeSpec("chair", n_points=8)):
        with pytest.raises(ValueError):
            generate_shape(spec)


@given(st.sampled_from(sorted(FAMILY_PARTS)), st.integers(0, 2 ** 31 - 1))
def test_label_count_equals_part_count(family, seed):
    cloud = generate_shape(ShapeSpec(family, 128, seed))
    assert len(np.unique(cloud.labels)) == len(FAMILY_PARTS[family]) == cloud.part_count


def test_part_fractions_within_bounds():
    lo, hi = PART_FRACTION_BOUNDS
    shapes = generate_collection(["chair", "table", "lamp"], 200, 256, seed=11)
    fracs = np.array([np.bincount(s.labels, minlength=4) / s.n_points for s in shapes])
    # floor rounding moves a count by at most one point
    assert fracs.min() >= lo - 1 / 256
    assert fracs.max() <= hi + 4 / 256


def test_d2_descriptor_basics(rng):
    two = np.array([[0.0, 0, 0], [1, 0, 0]])
    h = d2_descriptor(two, bins=8, exhaustive=True)
    assert np.count_nonzero(h) == 1 and h.sum() == pytest.approx(1.0)
    cloud = generate_shape(ShapeSpec("chair", 256, 0))
    assert d2_descriptor(cloud).sum() == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        d2_descriptor(cloud, bins=4)
    with pytest.raises(ValueError):
        d2_descriptor(np.zeros((5, 3)))


def test_d2_exhaustive_matches_pair_oracle(rng):
    pts = rng.uniform(-0.5, 0.5, size=(12, 3))
    h = d2_descriptor(pts, bins=16, exhaustive=True)
    dists = [np.linalg.norm(pts[i] - pts[j]) for i, j in itertools.combinations(range(12), 2)]
    ref, _ = np.histogram(dists, bins=16, range=(0, 2))
    np.testing.assert_allclose(h, ref / ref.sum())


def test_d2_separates_families():
    chairs = [generate_shape(ShapeSpec("chair", 512, s)) for s in range(10)]
    lamps = [generate_shape(ShapeSpec("lamp", 512, 100 + s)) for s in range(10)]
    desc = np.stack([d2_descriptor(c, samples=20000) for c in chairs + lamps])
    d = np.linalg.norm(desc[:, None] - desc[None], axis=-1)
    fam = np.array([0] * 10 + [1] * 10)
    same = d[(fam[:, None] == fam[None]) & ~np.eye(20, dtype=bool)].mean()
    cross = d[fam[:, None] != fam[None]].mean()
    assert same < cross
