"""Multispectral point clouds: data model, file I/O and a synthetic scene generator."""

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNLABELED = -1
_BIN_MAGIC = b"MPC1"
_BLOB_SIZE = 2048


class CloudFormatError(ValueError):
    pass


class SceneSpecError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _float_array(x):
    arr = np.array(x)
    return arr if arr.dtype.kind == "f" else arr.astype(np.float64)


@dataclass(frozen=True, eq=False)
class MultispectralPointCloud:
    """N points with 3-D positions, d spectral bands and optional labels.

    ``labels`` holds class ids in ``0..L-1`` or :data:`UNLABELED`. Arrays are
    made read-only on construction so a cloud can be shared freely.
    """

    positions: np.ndarray
    spectra: np.ndarray
    labels: np.ndarray
    class_names: tuple

    def __post_init__(self):
        pos = _float_array(self.positions)
        spec = _float_array(self.spectra)
        lab = np.array(self.labels, dtype=np.int64).reshape(-1)
        if spec.ndim == 1:
            spec = spec.reshape(-1, 1)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be N x 3, got {pos.shape}")
        n = pos.shape[0]
        if n < 1:
            raise ValueError("a cloud needs at least one point")
        if spec.shape[0] != n or lab.shape[0] != n:
            raise ValueError(
                f"leading lengths differ: positions {n}, spectra {spec.shape[0]}, labels {lab.shape[0]}")
        if not np.all(np.isfinite(spec)):
            raise ValueError("spectra contain non-finite values")
        names = tuple(str(c) for c in self.class_names)
        if np.any(lab >= len(names)) or np.any(lab < UNLABELED):
            raise ValueError("label out of range")
        for arr in (pos, spec, lab):
            arr.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "spectra", spec)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "class_names", names)

    @property
    def n_points(self):
        return self.positions.shape[0]

    @property
    def n_bands(self):
        return self.spectra.shape[1]

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def labeled(self):
        return self.labels != UNLABELED

    def __len__(self):
        return self.n_points

    def __eq__(self, other):
        if not isinstance(other, MultispectralPointCloud):
            return NotImplemented
        return (self.class_names == other.class_names
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.spectra, other.spectra)
                and np.array_equal(self.labels, other.labels))

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return MultispectralPointCloud(self.positions[idx], self.spectra[idx],
                                       self.labels[idx], self.class_names)

    def with_labels(self, labels):
        return MultispectralPointCloud(self.positions, self.spectra, labels, self.class_names)


def class_histogram(cloud):
    """Per-class label counts followed by the UNLABELED count (length L+1)."""
    lab = cloud.labels
    counts = np.bincount(lab[lab != UNLABELED], minlength=cloud.n_classes)
    return np.append(counts, np.count_nonzero(lab == UNLABELED)).astype(np.int64)


@dataclass
class ClassSpec:
    name: str
    point_count: int
    object_scale: float
    spectral_signature: tuple


@dataclass
class SceneSpec:
    classes: list
    label_rate: float = 1.0
    noise_sigma: float = 0.05
    extent: float = 50.0
    seed: int = 0

    def __post_init__(self):
        self.classes = [c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes]

    def validate(self):
        if len(self.classes) < 2:
            raise SceneSpecError("classes", "at least 2 classes are required")
        d = len(self.classes[0].spectral_signature)
        for c in self.classes:
            if int(c.point_count) <= 0:
                raise SceneSpecError("point_count", f"class {c.name!r} must have a positive count")
            if c.object_scale <= 0:
                raise SceneSpecError("object_scale", f"class {c.name!r} must have positive scale")
            if len(c.spectral_signature) != d or d == 0:
                raise SceneSpecError("spectral_signature", "all signatures need the same nonzero length")
        if not 0 < self.label_rate <= 1:
            raise SceneSpecError("label_rate", "must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise SceneSpecError("noise_sigma", "must be non-negative")
        if self.extent <= 0:
            raise SceneSpecError("extent", "must be positive")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise SceneSpecError("seed", "must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def to_dict(self):
        return {
            "classes": [dict(name=c.name, point_count=int(c.point_count),
                             object_scale=float(c.object_scale),
                             spectral_signature=[float(v) for v in c.spectral_signature])
                        for c in self.classes],
            "label_rate": self.label_rate, "noise_sigma": self.noise_sigma,
            "extent": self.extent, "seed": int(self.seed),
        }


def _label_quotas(counts, label_rate):
    # largest-remainder split of ceil(rate * N) across classes
    counts = np.asarray(counts, dtype=np.int64)
    target = math.ceil(label_rate * counts.sum() - 1e-9)
    raw = label_rate * counts
    quotas = np.minimum(np.floor(raw + 1e-9).astype(np.int64), counts)
    order = sorted(range(len(counts)), key=lambda c: (-(raw[c] - quotas[c]), c))
    i = 0
    while quotas.sum() < target:
        c = order[i % len(order)]
        if quotas[c] < counts[c]:
            quotas[c] += 1
        i += 1
    return quotas


def generate_synthetic_scene(spec):
    """Sample a labeled scene of isotropic Gaussian blobs.

    Each class contributes ``ceil(point_count / 2048)`` blobs of standard
    deviation ``object_scale`` placed uniformly in the cube ``[0, extent]^3``.
    Spectra are the class signature plus Gaussian noise, clipped to [0, 1].
    Exactly ``ceil(label_rate * N)`` points keep their label; per class, the
    kept labels form a compact patch around a random anchor point, mimicking
    region-wise manual annotation.
    """
    spec.validate()
    rng = np.random.default_rng(int(spec.seed))
    pos_parts, spec_parts, lab_parts = [], [], []
    for cid, c in enumerate(spec.classes):
        n = int(c.point_count)
        n_blobs = math.ceil(n / _BLOB_SIZE)
        sizes = np.full(n_blobs, n // n_blobs)
        sizes[: n % n_blobs] += 1
        centers = rng.uniform(0.0, spec.extent, size=(n_blobs, 3))
        pts = np.concatenate([centers[b] + rng.normal(0.0, c.object_scale, size=(s, 3))
                              for b, s in enumerate(sizes)])
        sig = np.asarray(c.spectral_signature, dtype=np.float64)
        bands = np.clip(sig + rng.normal(0.0, spec.noise_sigma, size=(n, sig.size)), 0.0, 1.0)
        pos_parts.append(pts)
        spec_parts.append(bands)
        lab_parts.append(np.full(n, cid, dtype=np.int64))

    quotas = _label_quotas([c.point_count for c in spec.classes], spec.label_rate)
    for cid, pts in enumerate(pos_parts):
        q = quotas[cid]
        if q == pts.shape[0]:
            continue
        anchor = pts[rng.integers(pts.shape[0])]
        d2 = ((pts - anchor) ** 2).sum(axis=1)
        keep = np.lexsort((np.arange(pts.shape[0]), d2))[:q]
        mask = np.ones(pts.shape[0], dtype=bool)
        mask[keep] = False
        lab_parts[cid][mask] = UNLABELED

    positions = np.concatenate(pos_parts)
    perm = rng.permutation(positions.shape[0])
    return MultispectralPointCloud(
        positions[perm], np.concatenate(spec_parts)[perm], np.concatenate(lab_parts)[perm],
        tuple(c.name for c in spec.classes))


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("csv", "bin"):
            raise ValueError(f"unknown format {fmt!r}")
        return fmt
    return "bin" if Path(path).suffix.lower() in (".bin", ".mpc") else "csv"


def save_cloud(cloud, path, fmt=None):
    fmt = _infer_format(path, fmt)
    n, d, L = cloud.n_points, cloud.n_bands, cloud.n_classes
    if fmt == "csv":
        with open(path, "w") as fh:
            fh.write(f"{n} {d} {L}\n")
            fh.write("# " + json.dumps(list(cloud.class_names)) + "\n")
            for p, s, lab in zip(cloud.positions.tolist(), cloud.spectra.tolist(),
                                 cloud.labels.tolist()):
                fh.write(",".join(repr(float(v)) for v in p + s) + f",{lab}\n")
        return
    names = json.dumps(list(cloud.class_names)).encode()
    rec = np.dtype([("xyzb", "<f4", (3 + d,)), ("label", "<i4")])
    rows = np.empty(n, dtype=rec)
    rows["xyzb"] = np.hstack([cloud.positions, cloud.spectra])
    rows["label"] = cloud.labels
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC + struct.pack("<iiii", n, d, L, len(names)) + names)
        fh.write(rows.tobytes())


def load_cloud(path, fmt=None):
    fmt = _infer_format(path, fmt)
    if fmt == "bin":
        return _load_bin(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    try:
        n, d, L = (int(v) for v in lines[0].split())
    except (IndexError, ValueError):
        raise CloudFormatError("malformed header: expected 'N d L'") from None
    body = lines[1:]
    names = [f"class_{i}" for i in range(L)]
    if body and body[0].startswith("#"):
        names = json.loads(body[0][1:])
        body = body[1:]
    body = [ln for ln in body if ln.strip()]
    if len(body) != n:
        raise CloudFormatError(f"header declares {n} points, found {len(body)} rows")
    pos = np.empty((n, 3))
    spec = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    for i, ln in enumerate(body):
        cols = ln.split(",")
        if len(cols) != 3 + d + 1:
            raise CloudFormatError(f"row {i}: expected {3 + d + 1} columns, got {len(cols)}")
        vals = [float(v) for v in cols[:-1]]
        pos[i], spec[i] = vals[:3], vals[3:]
        labels[i] = int(cols[-1])
    _check_labels(labels, L)
    return MultispectralPointCloud(pos, spec, labels, names)


def _check_labels(labels, L):
    if np.any(labels >= L) or np.any(labels < UNLABELED):
        raise CloudFormatError("label out of range")


def _load_bin(path):
    raw = Path(path).read_bytes()
    if raw[:4] != _BIN_MAGIC or len(raw) < 20:
        raise CloudFormatError("malformed header: bad magic")
    n, d, L, name_len = struct.unpack("<iiii", raw[4:20])
    names = json.loads(raw[20:20 + name_len].decode())
    rec = np.dtype([("xyzb", "<f4", (3 + d,)), ("label", "<i4")])
    body = raw[20 + name_len:]
    if len(body) != n * rec.itemsize:
        raise CloudFormatError("row length mismatch: body size does not match header")
    rows = np.frombuffer(body, dtype=rec)
    labels = rows["label"].astype(np.int64)
    _check_labels(labels, L)
    xyzb = rows["xyzb"]
    return MultispectralPointCloud(xyzb[:, :3], xyzb[:, 3:], labels, names)


def _corner_signatures(n_classes, n_bands, low=0.2, high=0.8):
    """Distinct cube corners ordered by how many bands are high."""
    codes = sorted(range(2 ** n_bands), key=lambda c: (bin(c).count("1"), c))
    if n_classes > len(codes):
        return None
    return [tuple(high if (c >> b) & 1 else low for b in range(n_bands))
            for c in codes[:n_classes]]


def long_tailed_scene_spec(counts=(4096, 1024, 256, 64, 16), label_rate=0.3, seed=7,
                           n_bands=3, noise_sigma=0.05, extent=40.0, separated=True):
    """Scene with one class per count, shrinking object scale with count.

    With ``separated`` the spectral signatures sit on distinct corners of
    ``[0.2, 0.8]^d`` (falling back to random draws when there are more
    classes than corners), so every class is spectrally recoverable and
    only the class imbalance makes the scene hard.
    """
    rng = np.random.default_rng(1000 + seed)
    corners = _corner_signatures(len(counts), n_bands) if separated else None
    classes = []
    for i, n in enumerate(counts):
        sig = corners[i] if corners else rng.uniform(0.15, 0.85, size=n_bands)
        classes.append(ClassSpec(f"class_{i}", int(n), float(max(0.5, 0.12 * n ** 0.5)),
                                 tuple(float(v) for v in sig)))
    return SceneSpec(classes, label_rate=label_rate, noise_sigma=noise_sigma,
                     extent=extent, seed=seed)
