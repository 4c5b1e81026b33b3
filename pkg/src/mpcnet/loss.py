"""Adaptive hybrid loss: multi-scale cross-entropy plus a dual-head long-tailed loss.

Multi-scale part: every coarse decoder output ``F^i`` (i = 1..4, coarsest
first) gets a three-layer classifier whose softmax output is gated by a
learned per-class weight ``omega^i`` and renormalised per row. The
base-2, class-weighted cross-entropy ``L^i`` is summed over the labeled
rows at that level and the levels are combined as
``sum_i L^i / (4**(i-1) * ||omega^i||)``.

Long-tailed part: two single-layer classifiers on ``F^5`` gated by
``omega~^1`` and ``omega~^2``. Head 1 regresses the full one-hot truth,
head 2 the one-hot truth with head-class rows zeroed. The losses are mean
squared errors over labeled rows, each divided by the norm of its gate.
The prediction map is the sum of both gated heads.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .network import N_LEVELS, linear, mlp
from .pointcloud import UNLABELED

OMEGA_EPS = 1e-6


@dataclass
class ClassWeights:
    w: np.ndarray
    truncation: float


def compute_class_weights(train_histogram, truncation=0.05):
    """Inverse-frequency weights, floored at ``truncation * max`` and summing to one.

    ``train_histogram`` holds one count per class (no UNLABELED bin).
    Classes with zero count receive the largest weight.
    """
    counts = np.asarray(train_histogram, dtype=np.float64)
    if counts.sum() <= 0:
        raise ValueError("class histogram is all zero")
    freq = counts / counts.sum()
    raw = np.zeros_like(freq)
    present = freq > 0
    raw[present] = 1.0 / freq[present]
    raw[~present] = raw[present].max()
    w = raw / raw.sum()
    w = np.maximum(w, truncation * w.max())
    return ClassWeights(w / w.sum(), truncation)


def determine_tail(train_histogram, threshold=0.05):
    """Classes whose share of the labeled training points is below ``threshold``."""
    counts = np.asarray(train_histogram, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return frozenset()
    return frozenset(int(c) for c in np.flatnonzero(counts / total < threshold))


def one_hot(labels, n_classes, dtype=np.float64):
    labels = np.asarray(labels)
    y = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    rows = np.flatnonzero(labels != UNLABELED)
    y[rows, labels[rows]] = 1.0
    return y


def downsample_labels(labels, plan):
    """Labels at the resolutions of ``F^1..F^4`` (coarsest first)."""
    labels = np.asarray(labels)
    return [labels[plan.composed(N_LEVELS - i)] for i in range(1, N_LEVELS)]


def scale_probabilities(f, params, i):
    logits = linear(mlp(mlp(f, params, f"scale{i}.fc1"), params, f"scale{i}.fc2"),
                    params, f"scale{i}.fc3")
    return T.normalize_rows(T.mul_broadcast(T.softmax_rows(logits), params[f"scale{i}.omega"]))


def multiscale_terms(z_levels, y_levels, omegas, class_weights=None):
    """``L^scale`` from gated per-level probabilities and one-hot targets.

    Kept separate from the classifiers so the level arithmetic can be checked
    on injected probability maps. Returns ``(L_scale, [L^1..L^4])``.
    """
    w = None if class_weights is None else class_weights.w
    total = None
    per_level = []
    for i, (z, y, omega) in enumerate(zip(z_levels, y_levels, omegas), start=1):
        li = T.cross_entropy(z, y, w)
        per_level.append(li)
        term = T.div(li, T.scale(T.l2_norm(omega), 4.0 ** (i - 1)))
        total = term if total is None else T.add(total, term)
    return total, per_level


def multiscale_loss(decoder_outputs, label_levels, params, class_weights=None):
    L = params["scale1.omega"].shape[1]
    zs, ys, omegas = [], [], []
    for i in range(1, N_LEVELS):
        zs.append(scale_probabilities(decoder_outputs[i - 1], params, i))
        ys.append(one_hot(label_levels[i - 1], L, zs[-1].dtype))
        omegas.append(params[f"scale{i}.omega"])
    return multiscale_terms(zs, ys, omegas, class_weights)


def tail_targets(labels, n_classes, tail_set, dtype=np.float64):
    y1 = one_hot(labels, n_classes, dtype)
    y2 = y1.copy()
    labels = np.asarray(labels)
    head_rows = (labels != UNLABELED) & ~np.isin(labels, sorted(tail_set))
    y2[head_rows] = 0.0
    return y1, y2


def longtail_terms(z1, z2, labels, tail_set, omegas):
    """``(L^tail, [L~^1, L~^2])`` from gated head outputs."""
    L = z1.shape[1]
    y1, y2 = tail_targets(labels, L, tail_set, z1.dtype)
    mask = np.asarray(labels) != UNLABELED
    l1, l2 = T.mse(z1, y1, mask), T.mse(z2, y2, mask)
    total = T.add(T.div(l1, T.l2_norm(omegas[0])), T.div(l2, T.l2_norm(omegas[1])))
    return total, [l1, l2]


def tail_heads(f5, params):
    return [T.mul_broadcast(T.softmax_rows(linear(f5, params, f"tail{i}")), params[f"tail{i}.omega"])
            for i in (1, 2)]


def longtail_loss(f5, labels, params, tail_set):
    """Returns ``(L^tail, Z^tail)``."""
    z1, z2 = tail_heads(f5, params)
    total, _ = longtail_terms(z1, z2, labels, tail_set,
                              [params["tail1.omega"], params["tail2.omega"]])
    return total, T.add(z1, z2)


def ce_head_loss(f5, labels, params, class_weights=None):
    """Class-weighted mean base-2 cross-entropy of the single head on ``F^5``.

    Returns ``(loss, probabilities)``.
    """
    z = T.softmax_rows(linear(f5, params, "ce"))
    y = one_hot(labels, z.shape[1], z.dtype)
    w = np.ones(z.shape[1]) if class_weights is None else class_weights.w
    norm = float((y * w).sum())
    if norm == 0.0:
        return T.scale(T.cross_entropy(z, y, w), 0.0), z
    return T.scale(T.cross_entropy(z, y, w), 1.0 / norm), z


def hybrid_loss(l_scale, l_tail, lam=1.0):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return T.add(T.scale(l_scale, lam), l_tail)


def predict(z):
    """Arg-max class per row; ties go to the smallest class id."""
    z = z.value if isinstance(z, T.Tensor) else np.asarray(z)
    return np.argmax(z, axis=1)


def guard_omegas(params, upper=None):
    """Keep adaptive weights usable after an update.

    Multi-scale gates feed a logarithm, so their entries stay at or above
    ``OMEGA_EPS``; long-tailed gates are only rescaled when their norm
    collapses below ``OMEGA_EPS``. With ``upper`` set, every entry is
    clipped into ``[OMEGA_EPS, upper]``: the losses divide by ``||omega||``,
    so an unbounded gate can shrink them by inflating (in either sign)
    columns the classifier never selects.
    """
    for name, t in params.items():
        if not name.endswith(".omega"):
            continue
        if upper is not None:
            np.clip(t.value, OMEGA_EPS, upper, out=t.value)
        if name.startswith("scale"):
            np.maximum(t.value, OMEGA_EPS, out=t.value)
        norm = float(np.sqrt((t.value ** 2).sum()))
        if norm < OMEGA_EPS:
            if norm == 0.0:
                t.value[...] = 1.0
                norm = float(np.sqrt(t.value.size))
            t.value *= OMEGA_EPS / norm
