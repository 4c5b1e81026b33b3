"""Grid-balanced sampling of training and test samples from sparsely labeled clouds.

The strategy has three steps: partition the cloud into a regular grid and
reduce each cell to a centroid carrying the cell's majority label; pick a
fixed fraction of the labeled centroids of every class for training; cut a
fixed-size k-nearest-neighbour sample around every centroid.
"""

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from .pointcloud import UNLABELED
from .validation import check_cloud, check_is_fitted


class Role(str, enum.Enum):
    TRAIN = "TRAIN"
    TEST = "TEST"


@dataclass
class GridIndex:
    """Cells of a regular grid; ``cells`` maps integer coordinates to point indices.

    ``point_cell[i]`` is the position of point ``i``'s cell in ``coords``.
    """

    cell_size: float
    coords: np.ndarray
    point_cell: np.ndarray
    cells: dict = field(repr=False)

    @property
    def n_cells(self):
        return self.coords.shape[0]


@dataclass
class Centroid:
    cell: tuple
    position: np.ndarray
    majority_label: int
    role: Role = Role.TEST


@dataclass
class SampleSet:
    """Fixed-size point index sets, one row of ``indices`` per sample."""

    indices: np.ndarray
    centers: np.ndarray
    centroid_ids: np.ndarray
    k: int
    role: Role
    padded: np.ndarray

    def __len__(self):
        return self.indices.shape[0]

    @classmethod
    def empty(cls, k, role):
        return cls(np.zeros((0, k), dtype=np.int64), np.zeros((0, 3)),
                   np.zeros(0, dtype=np.int64), k, role, np.zeros(0, dtype=bool))

    def to_dict(self):
        return {"k": self.k, "role": self.role.value,
                "centroid_ids": self.centroid_ids.tolist(),
                "centers": self.centers.tolist(),
                "indices": self.indices.tolist(),
                "padded": self.padded.tolist()}

    @classmethod
    def from_dict(cls, data):
        k = int(data["k"])
        idx = np.asarray(data["indices"], dtype=np.int64).reshape(-1, k)
        return cls(idx, np.asarray(data["centers"], dtype=np.float64).reshape(-1, 3),
                   np.asarray(data["centroid_ids"], dtype=np.int64), k, Role(data["role"]),
                   np.asarray(data["padded"], dtype=bool))


def default_cell_size(cloud, k):
    """Cell edge giving roughly k/16 points per cell for a uniform cloud."""
    extent = float(np.ptp(cloud.positions, axis=0).max()) or 1.0
    return extent * (k / (16.0 * cloud.n_points)) ** (1.0 / 3.0)


def build_grid(cloud, cell_size):
    if not cell_size > 0:
        raise ValueError(f"cell_size must be positive, got {cell_size}")
    coords = np.floor(np.asarray(cloud.positions, dtype=np.float64) / cell_size).astype(np.int64)
    uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(uniq.shape[0] + 1))
    cells = {tuple(int(v) for v in uniq[c]): order[bounds[c]:bounds[c + 1]]
             for c in range(uniq.shape[0])}
    return GridIndex(float(cell_size), uniq, inverse, cells)


def majority_labels(counts, n_classes):
    """Modal label of each row of category counts; UNLABELED loses ties."""
    winner = np.argmax(np.asarray(counts), axis=1)
    return np.where(winner == n_classes, UNLABELED, winner)


def sparsify(grid, cloud):
    """One centroid per non-empty cell, at the mean position of its points."""
    L = cloud.n_classes
    code = np.where(cloud.labels == UNLABELED, L, cloud.labels)
    counts = np.bincount(grid.point_cell * (L + 1) + code,
                         minlength=grid.n_cells * (L + 1)).reshape(grid.n_cells, L + 1)
    sizes = np.bincount(grid.point_cell, minlength=grid.n_cells)
    sums = np.zeros((grid.n_cells, 3))
    np.add.at(sums, grid.point_cell, cloud.positions)
    means = sums / sizes[:, None]
    majority = majority_labels(counts, L)
    return [Centroid(tuple(int(v) for v in grid.coords[c]), means[c], int(majority[c]))
            for c in range(grid.n_cells)]


def train_quota(m, ratio):
    """max(1, round(ratio * m)) with halves rounded up."""
    return max(1, int(math.floor(ratio * m + 0.5)))


def select_training_centroids(centroids, ratio, seed):
    """Mark ``max(1, round(ratio * m_c))`` labeled centroids of each class TRAIN.

    Everything else, including every UNLABELED-majority centroid, becomes
    TEST. Classes without a labeled centroid trigger a warning.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    out = [Centroid(c.cell, c.position, c.majority_label, Role.TEST) for c in centroids]
    majority = np.array([c.majority_label for c in centroids], dtype=np.int64)
    classes = sorted(set(majority[majority != UNLABELED].tolist()))
    for cls in classes:
        members = np.flatnonzero(majority == cls)
        chosen = rng.choice(members, size=train_quota(members.size, ratio), replace=False)
        for i in np.sort(chosen):
            out[i].role = Role.TRAIN
    return out


def unsampled_classes(centroids, n_classes):
    majority = {c.majority_label for c in centroids if c.role is Role.TRAIN}
    return [c for c in range(n_classes) if c not in majority]


def knn_indices(points, queries, k):
    """Indices of the k nearest points to each query, nearest first.

    Equal distances are ordered by point index. When fewer than k points
    exist, the sorted list is repeated cyclically and the row is flagged.
    Returns ``(indices, padded)``.
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    padded = np.zeros(queries.shape[0], dtype=bool)
    if queries.shape[0] == 0:
        return out, padded
    if k >= n:
        all_idx = np.arange(n)
        for q, c in enumerate(queries):
            d2 = ((points - c) ** 2).sum(axis=1)
            order = np.lexsort((all_idx, d2))
            out[q] = order[np.arange(k) % n]
        padded[:] = k > n
        return out, padded
    tree = cKDTree(points)
    dist, _ = tree.query(queries, k=k)
    dist = dist.reshape(queries.shape[0], k)
    for q, c in enumerate(queries):
        # every point tied with the k-th distance is a candidate
        r = dist[q, -1] * (1.0 + 1e-9) + 1e-12
        cand = np.asarray(tree.query_ball_point(c, r), dtype=np.int64)
        d2 = ((points[cand] - c) ** 2).sum(axis=1)
        out[q] = cand[np.lexsort((cand, d2))[:k]]
    return out, padded


def extract_samples(cloud, centroids, k, role=None):
    """k-NN samples around centroids; ``role`` filters which centroids are used."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    ids = np.array([i for i, c in enumerate(centroids) if role is None or c.role is role],
                   dtype=np.int64)
    role = role if role is not None else Role.TEST
    if ids.size == 0:
        return SampleSet.empty(k, role)
    centers = np.array([centroids[i].position for i in ids], dtype=np.float64)
    idx, padded = knn_indices(cloud.positions, centers, k)
    if padded.any():
        warnings.warn(f"cloud has {cloud.n_points} points < k={k}; samples padded", stacklevel=2)
    return SampleSet(idx, centers, ids, k, role, padded)


def random_sampling_baseline(cloud, n_samples, k, seed):
    """Samples around centroids drawn uniformly from the cloud's points."""
    rng = np.random.default_rng(seed)
    if n_samples == 0:
        return SampleSet.empty(k, Role.TRAIN)
    picks = rng.choice(cloud.n_points, size=n_samples, replace=n_samples > cloud.n_points)
    centers = np.asarray(cloud.positions[picks], dtype=np.float64)
    idx, padded = knn_indices(cloud.positions, centers, k)
    return SampleSet(idx, centers, picks.astype(np.int64), k, Role.TRAIN, padded)


def assign_eval_mask(grid, centroids):
    """True for points whose cell centroid is a TEST centroid."""
    is_test = np.array([c.role is Role.TEST for c in centroids], dtype=bool)
    if is_test.shape[0] != grid.n_cells:
        raise ValueError("centroids do not match the grid cells")
    return is_test[grid.point_cell]


def sample_manifest(cloud, centroids, eval_mask, train, test, strategy="gbs"):
    L = cloud.n_classes
    majority = np.array([c.majority_label for c in centroids], dtype=np.int64)
    train_mask = np.array([c.role is Role.TRAIN for c in centroids], dtype=bool)
    per_class = []
    for cls in range(L):
        per_class.append({"class": cls, "name": cloud.class_names[cls],
                          "labeled_centroids": int(np.count_nonzero(majority == cls)),
                          "train_centroids": int(np.count_nonzero((majority == cls) & train_mask))})
    return {
        "strategy": strategy,
        "n_points": cloud.n_points,
        "n_centroids": len(centroids),
        "unlabeled_centroids": int(np.count_nonzero(majority == UNLABELED)),
        "per_class": per_class,
        "unsampled_classes": unsampled_classes(centroids, L),
        "eval_points": int(np.count_nonzero(eval_mask)),
        "k": int(train.k),
        "n_train_samples": len(train),
        "n_test_samples": len(test),
        "centroids": [{"cell": list(c.cell), "position": [float(v) for v in c.position],
                       "majority_label": c.majority_label, "role": c.role.value}
                      for c in centroids],
    }


class GridBalancedSampler(BaseEstimator):
    """Grid-balanced train/test sample generator.

    Parameters
    ----------
    k : int
        Points per sample (the network receptive field).
    train_ratio : float
        Fraction of each class's labeled centroids used for training.
    cell_size : float or None
        Grid edge in metres; ``None`` uses :func:`default_cell_size`.
    seed : int
        Seed of the centroid selection.
    """

    def __init__(self, k=4096, train_ratio=0.05, cell_size=None, seed=0):
        self.k = k
        self.train_ratio = train_ratio
        self.cell_size = cell_size
        self.seed = seed

    def fit(self, cloud, y=None):
        cloud = check_cloud(cloud)
        size = self.cell_size if self.cell_size is not None else default_cell_size(cloud, self.k)
        self.grid_ = build_grid(cloud, size)
        centroids = sparsify(self.grid_, cloud)
        self.centroids_ = select_training_centroids(centroids, self.train_ratio, self.seed)
        missing = unsampled_classes(self.centroids_, cloud.n_classes)
        if missing:
            warnings.warn(f"classes without labeled centroids: {missing}", stacklevel=2)
        self.unsampled_classes_ = missing
        self.eval_mask_ = assign_eval_mask(self.grid_, self.centroids_)
        self.train_samples_ = extract_samples(cloud, self.centroids_, self.k, Role.TRAIN)
        self.test_samples_ = extract_samples(cloud, self.centroids_, self.k, Role.TEST)
        self.manifest_ = sample_manifest(cloud, self.centroids_, self.eval_mask_,
                                         self.train_samples_, self.test_samples_)
        return self

    def transform(self, cloud=None):
        check_is_fitted(self, "train_samples_")
        return self.train_samples_, self.test_samples_

    def fit_transform(self, cloud, y=None):
        return self.fit(cloud).transform()


class RandomSampler(BaseEstimator):
    """Random-centroid training samples, the baseline to grid-balanced sampling."""

    def __init__(self, n_samples=16, k=4096, seed=0):
        self.n_samples = n_samples
        self.k = k
        self.seed = seed

    def fit(self, cloud, y=None):
        cloud = check_cloud(cloud)
        self.train_samples_ = random_sampling_baseline(cloud, self.n_samples, self.k, self.seed)
        idx = self.train_samples_.indices.reshape(-1)
        lab = np.asarray(cloud.labels)[idx]
        counts = np.bincount(lab[lab != UNLABELED], minlength=cloud.n_classes)
        self.manifest_ = {
            "strategy": "rs",
            "n_points": cloud.n_points,
            "n_train_samples": len(self.train_samples_),
            "k": self.k,
            "labeled_fraction": float(np.mean(lab != UNLABELED)) if lab.size else 0.0,
            "per_class_labeled_points": {cloud.class_names[c]: int(n) for c, n in enumerate(counts)},
        }
        return self

    def transform(self, cloud=None):
        check_is_fitted(self, "train_samples_")
        return self.train_samples_

    def fit_transform(self, cloud, y=None):
        return self.fit(cloud).transform()
