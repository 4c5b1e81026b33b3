"""Finite-difference verification of every differentiable building block.

Each component is wrapped into a scalar (a fixed random projection of its
output, or the loss itself) and its tape gradients are compared with
central differences in 64-bit arithmetic.
"""

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .loss import (compute_class_weights, downsample_labels, hybrid_loss, longtail_loss,
                   multiscale_loss)
from .network import (N_LEVELS, NetworkConfig, decode, encode, forward, init_params,
                      local_feature_encode, local_input, msff, plan_sampling)

COMPONENTS = ("local_feature_encode", "msff", "decode", "multiscale_loss", "longtail_loss",
              "hybrid_loss")


@dataclass
class GradResult:
    component: str
    seed: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.max_rel_error <= self.tolerance)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.component} seed={self.seed} "
                f"max_rel_error={self.max_rel_error:.3e} tol={self.tolerance:g}")


def _projection(rng, out):
    return rng.normal(size=out.shape)


def _project(t, r):
    return T.sum_all(T.mul(t, T.Tensor(r)))


@contextmanager
def _relu_margin():
    """Record the smallest nonzero ``|x|`` fed to any relu inside the block."""
    seen = [np.inf]
    real = T.relu

    def watched(x):
        v = np.abs(T.as_tensor(x).value)
        v = v[v > 0]
        if v.size:
            seen[0] = min(seen[0], float(v.min()))
        return real(x)

    T.relu = watched
    try:
        yield seen
    finally:
        T.relu = real


class _Fixture:
    """Tiny random scene, network and labels shared by all components of one seed.

    Central differences are only meaningful away from relu kinks, so biases
    and gates are redrawn until no relu input lies within ``margin`` of zero
    (inputs that are exactly zero stay on the flat side for both probes).
    """

    def __init__(self, seed, n=64, base_channels=2, classes=3, margin=1e-4, attempts=50):
        self.rng = np.random.default_rng(seed)
        self.cfg = NetworkConfig(bands=3, classes=classes, base_channels=base_channels,
                                 receptive_field=n, head_hidden=4)
        self.params = init_params(self.cfg, seed=seed)
        self.positions = self.rng.uniform(0, 4, size=(n, 3))
        self.spectra = self.rng.uniform(0, 1, size=(n, 3))
        self.labels = self.rng.integers(-1, classes, size=n)
        self.labels[:classes] = np.arange(classes)
        self.plan = plan_sampling(self.positions, np.random.default_rng(seed + 100))
        self.class_weights = compute_class_weights(np.bincount(self.labels[self.labels >= 0],
                                                               minlength=classes))
        self.tail_set = frozenset({classes - 1})
        x_local = local_input(self.positions, self.spectra, self.cfg.knn_neighbors)
        for _ in range(attempts):
            self._perturb()
            with _relu_margin() as seen:
                forward(x_local, self.positions, self.params, self.cfg, plan=self.plan)
            if seen[0] > margin:
                break

    def _perturb(self):
        for name, p in self.params.items():
            if name.endswith(".omega"):
                p.value[:] = self.rng.uniform(0.5, 1.5, size=p.shape)
            elif name.endswith(".b"):
                p.value[:] = self.rng.uniform(-0.1, 0.1, size=p.shape)

    def group(self, *prefixes):
        return {k: v for k, v in self.params.items() if k.startswith(prefixes)}

    def leaf(self, shape):
        return T.Tensor(self.rng.normal(size=shape), requires_grad=True)


def _components(fx):
    """Map component name to ``(scalar_fn, tensors_to_check)``."""
    p = fx.params
    out = {}
    r0 = None

    def local():
        nonlocal r0
        f0 = local_feature_encode(fx.positions, fx.spectra, p, fx.cfg.knn_neighbors)
        if r0 is None:
            r0 = _projection(fx.rng, f0)
        return _project(f0, r0)

    out["local_feature_encode"] = (local, list(fx.group("local").values()))

    c = fx.cfg.channels(1)
    f_s, f_l, f_d = fx.leaf((64, c // 4)), fx.leaf((16, c)), fx.leaf((4, 4 * c))
    kept, parent = fx.plan.kept[1], fx.plan.parents[2]
    r1 = fx.rng.normal(size=(16, c))

    def fuse():
        o, _, _ = msff(f_s, f_l, f_d, kept, parent, p, "msff1")
        return _project(o, r1)

    out["msff"] = (fuse, [f_s, f_l, f_d, *fx.group("msff1").values()])

    feats = [fx.leaf((fx.cfg.rows(e, 64), fx.cfg.channels(e))) for e in range(N_LEVELS)]
    state = encode(feats[0], fx.positions, p, plan=fx.plan)
    state.features = feats
    rd = [fx.rng.normal(size=(fx.cfg.rows(N_LEVELS - i, 64), fx.cfg.channels(N_LEVELS - i)))
          for i in range(1, N_LEVELS + 1)]

    def dec():
        outs = decode(state, p, use_msff=True)
        total = _project(outs[0], rd[0])
        for o, r in zip(outs[1:], rd[1:]):
            total = T.add(total, _project(o, r))
        return total

    out["decode"] = (dec, [*feats, *fx.group("dec", "msff").values()])

    lab_levels = downsample_labels(fx.labels, fx.plan)
    dec_feats = [fx.leaf((fx.cfg.rows(N_LEVELS - i, 64), fx.cfg.channels(N_LEVELS - i)))
                 for i in range(1, N_LEVELS)]

    def scale():
        total, _ = multiscale_loss(dec_feats, lab_levels, p, fx.class_weights)
        return total

    out["multiscale_loss"] = (scale, [*dec_feats, *fx.group("scale").values()])

    f5 = fx.leaf((64, fx.cfg.channels(0)))

    def tail():
        total, _ = longtail_loss(f5, fx.labels, p, fx.tail_set)
        return total

    out["longtail_loss"] = (tail, [f5, *fx.group("tail").values()])

    x_local = local_input(fx.positions, fx.spectra, fx.cfg.knn_neighbors)

    def hybrid():
        outs, st = forward(x_local, fx.positions, p, fx.cfg, plan=fx.plan)
        l_tail, _ = longtail_loss(outs[-1], fx.labels, p, fx.tail_set)
        l_scale, _ = multiscale_loss(outs[:-1], downsample_labels(fx.labels, st.plan), p,
                                     fx.class_weights)
        return hybrid_loss(l_scale, l_tail, 0.7)

    out["hybrid_loss"] = (hybrid, list(p.values()))
    return out


def gradient_suite(seeds=(0, 1, 2), tolerance=1e-3, max_entries=6, components=COMPONENTS):
    """Run every component check for every seed; returns a list of :class:`GradResult`."""
    results = []
    for seed in seeds:
        fx = _Fixture(seed)
        checks = _components(fx)
        for name in components:
            fn, tensors = checks[name]
            worst = 0.0
            for i, t in enumerate(tensors):
                worst = max(worst, T.grad_check(fn, [t], eps=1e-5, max_entries=max_entries,
                                                seed=seed * 1000 + i))
            results.append(GradResult(name, seed, worst, tolerance))
    return results
