import itertools
from collections import Counter

import numpy as np
import pytest

from mpcnet.pointcloud import UNLABELED, MultispectralPointCloud, generate_synthetic_scene, long_tailed_scene_spec
from mpcnet.sampling import (GridBalancedSampler, RandomSampler, Role, assign_eval_mask,
                             build_grid, extract_samples, knn_indices, majority_labels,
                             random_sampling_baseline, select_training_centroids, sparsify,
                             train_quota)


def brute_knn(points, queries, k):
    out = []
    for q in queries:
        d2 = ((points - q) ** 2).sum(axis=1)
        out.append(sorted(range(len(points)), key=lambda i: (d2[i], i))[:k])
    return np.array(out)


def floor_cell(p, size):
    return tuple(int(np.floor(v / size)) for v in p)


def test_grid_single_cell(cube_cloud):
    grid = build_grid(cube_cloud, 2.0)
    assert grid.n_cells == 1
    assert sorted(next(iter(grid.cells.values())).tolist()) == list(range(8))


def test_grid_one_point_per_cell(cube_cloud):
    grid = build_grid(cube_cloud, 0.6)
    assert grid.n_cells == 8
    for key, members in grid.cells.items():
        assert len(members) == 1
        assert floor_cell(cube_cloud.positions[members[0]], 0.6) == key


def test_grid_rejects_nonpositive(cube_cloud):
    with pytest.raises(ValueError):
        build_grid(cube_cloud, 0.0)


def test_grid_partition(small_cloud):
    grid = build_grid(small_cloud, 1.7)
    merged = np.concatenate(list(grid.cells.values()))
    assert Counter(merged.tolist()) == Counter(range(small_cloud.n_points))
    for key, members in grid.cells.items():
        assert all(floor_cell(small_cloud.positions[i], 1.7) == key for i in members)


def cell_cloud(labels):
    n = len(labels)
    return MultispectralPointCloud(np.full((n, 3), 0.5), np.zeros((n, 1)), labels, ("a", "b"))


@pytest.mark.parametrize("labels,expected", [
    ([0, 0, 1], 0),
    ([0, UNLABELED, UNLABELED], UNLABELED),
    ([0, 0, 1, 1], 0),
    ([UNLABELED, 1], 1),
])
def test_majority_label(labels, expected):
    cloud = cell_cloud(labels)
    (c,) = sparsify(build_grid(cloud, 1.0), cloud)
    assert c.majority_label == expected
    np.testing.assert_allclose(c.position, [0.5, 0.5, 0.5])


def test_majority_tie_break_exhaustive():
    # every multiset of up to 6 labels over {0, 1, UNLABELED}
    for size in range(1, 7):
        for combo in itertools.combinations_with_replacement([0, 1, UNLABELED], size):
            counts = Counter(combo)
            best = max(counts.values())
            tied = [lab for lab, cnt in counts.items() if cnt == best]
            labeled = sorted(t for t in tied if t != UNLABELED)
            expected = labeled[0] if labeled else UNLABELED
            row = [[counts[0], counts[1], counts[UNLABELED]]]
            assert majority_labels(row, 2)[0] == expected


def centroids_with(majorities):
    from mpcnet.sampling import Centroid
    return [Centroid((i, 0, 0), np.zeros(3), m) for i, m in enumerate(majorities)]


@pytest.mark.parametrize("m,expected", [(40, 2), (3, 1), (10, 1), (30, 2), (100, 5)])
def test_train_quota(m, expected):
    cents = select_training_centroids(centroids_with([0] * m), 0.05, seed=1)
    assert sum(c.role is Role.TRAIN for c in cents) == expected == train_quota(m, 0.05)


def test_unlabeled_never_train():
    cents = select_training_centroids(centroids_with([UNLABELED] * 100 + [1] * 5), 0.5, seed=0)
    assert not any(c.role is Role.TRAIN for c in cents[:100])
    assert sum(c.role is Role.TRAIN for c in cents[100:]) == 3


def test_selection_deterministic_and_validated():
    cents = centroids_with([0, 1, 0, 1, 0, 2] * 10)
    a = [c.role for c in select_training_centroids(cents, 0.2, seed=5)]
    b = [c.role for c in select_training_centroids(cents, 0.2, seed=5)]
    assert a == b
    with pytest.raises(ValueError):
        select_training_centroids(cents, 1.0, seed=0)


def test_knn_k1_and_kN():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(30, 3))
    q = rng.normal(size=(4, 3))
    idx, padded = knn_indices(pts, q, 1)
    np.testing.assert_array_equal(idx[:, 0], brute_knn(pts, q, 1)[:, 0])
    idx, padded = knn_indices(pts, q, 30)
    np.testing.assert_array_equal(idx, brute_knn(pts, q, 30))
    assert not padded.any()


def test_knn_matches_bruteforce_500():
    rng = np.random.default_rng(42)
    pts = rng.uniform(0, 10, size=(500, 3))
    q = rng.uniform(0, 10, size=(25, 3))
    idx, _ = knn_indices(pts, q, 32)
    np.testing.assert_array_equal(idx, brute_knn(pts, q, 32))


def test_knn_ties_by_index():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0], [5.0, 0, 0]])
    idx, _ = knn_indices(pts, np.zeros((1, 3)), 3)
    assert idx[0].tolist() == [0, 1, 2]
    grid_pts = np.array(list(itertools.product(range(6), repeat=3)), dtype=float)
    q = np.array([[2.0, 2.0, 2.0], [0.5, 0.5, 0.5]])
    idx, _ = knn_indices(grid_pts, q, 20)
    np.testing.assert_array_equal(idx, brute_knn(grid_pts, q, 20))


def test_knn_padding_when_cloud_small():
    pts = np.arange(9.0).reshape(3, 3)
    idx, padded = knn_indices(pts, pts[:1], 5)
    assert padded.all()
    assert idx[0].tolist() == [0, 1, 2, 0, 1]


def test_random_baseline(small_cloud):
    assert len(random_sampling_baseline(small_cloud, 0, 8, seed=0)) == 0
    a = random_sampling_baseline(small_cloud, 5, 8, seed=3)
    b = random_sampling_baseline(small_cloud, 5, 8, seed=3)
    np.testing.assert_array_equal(a.indices, b.indices)
    assert a.indices.shape == (5, 8)


def test_random_baseline_count_matches_gbs():
    cloud = generate_synthetic_scene(long_tailed_scene_spec(label_rate=0.3, seed=7))
    gbs = GridBalancedSampler(k=64, cell_size=2.0, seed=1).fit(cloud)
    rs = RandomSampler(n_samples=len(gbs.train_samples_), k=64, seed=1).fit(cloud)
    assert len(rs.train_samples_) == len(gbs.train_samples_)


def test_eval_mask(small_cloud):
    grid = build_grid(small_cloud, 3.0)
    cents = sparsify(grid, small_cloud)
    assert assign_eval_mask(grid, cents).all()
    for c in cents:
        c.role = Role.TRAIN
    assert not assign_eval_mask(grid, cents).any()
    for i, c in enumerate(cents):
        c.role = Role.TEST if i % 3 == 0 else Role.TRAIN
    expected = sum(len(grid.cells[c.cell]) for c in cents if c.role is Role.TEST)
    assert assign_eval_mask(grid, cents).sum() == expected


def test_extract_samples_roles(small_cloud):
    grid = build_grid(small_cloud, 3.0)
    cents = select_training_centroids(sparsify(grid, small_cloud), 0.2, seed=0)
    train = extract_samples(small_cloud, cents, 16, Role.TRAIN)
    test = extract_samples(small_cloud, cents, 16, Role.TEST)
    assert len(train) + len(test) == len(cents)
    assert all(cents[i].role is Role.TRAIN for i in train.centroid_ids)
    centers = np.array([cents[i].position for i in test.centroid_ids])
    np.testing.assert_array_equal(test.indices, brute_knn(small_cloud.positions, centers, 16))


def test_sampler_estimator_params_and_manifest():
    cloud = generate_synthetic_scene(long_tailed_scene_spec(label_rate=0.3, seed=7))
    s = GridBalancedSampler(k=64, cell_size=2.0, train_ratio=0.05, seed=4)
    assert s.get_params()["k"] == 64
    train, test = s.fit_transform(cloud)
    man = s.manifest_
    assert man["eval_points"] == int(s.eval_mask_.sum())
    assert man["n_train_samples"] == len(train)
    for row in man["per_class"]:
        if row["labeled_centroids"]:
            assert row["train_centroids"] == train_quota(row["labeled_centroids"], 0.05)
