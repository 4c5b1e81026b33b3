"""Five-level encoder/decoder with multi-scale feature fusion skip connections.

Encoder level ``e`` (0..4) holds ``ceil(N / 4**e)`` points with
``C0 * 4**e`` channels. Level 0 is the local feature encoding of the raw
sample; every further level keeps a seeded random quarter of the previous
level's points and widens the channels four-fold. Decoder output ``i``
(1..5) sits at encoder level ``5 - i``, so ``F^1`` is the coarsest and
``F^5`` is ``N x C0``.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .tensor import Tensor

N_LEVELS = 5
MSFF_LEVELS = (1, 2, 3)


@dataclass
class NetworkConfig:
    bands: int = 3
    classes: int = 5
    base_channels: int = 4
    channel_multiplier: int = 4
    downsample_ratio: int = 4
    receptive_field: int = 4096
    knn_neighbors: int = 8
    head_hidden: int = 32
    msff: bool = True
    msl: bool = True
    ltl: bool = True

    def __post_init__(self):
        if self.channel_multiplier != 4 or self.downsample_ratio != 4:
            raise ValueError("the shape law requires channel_multiplier = downsample_ratio = 4")
        for name in ("bands", "classes", "base_channels", "receptive_field", "knn_neighbors",
                     "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def channels(self, level):
        return self.base_channels * self.channel_multiplier ** level

    def rows(self, level, n=None):
        n = self.receptive_field if n is None else n
        for _ in range(level):
            n = math.ceil(n / self.downsample_ratio)
        return n

    def to_dict(self):
        return asdict(self)


def glorot(rng, fan_in, fan_out, dtype=np.float64):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_params(config, seed=0, dtype=np.float64):
    """All learned tensors of the network and its classification heads.

    Which groups exist depends on the ``msff``, ``msl`` and ``ltl`` toggles:
    without ``ltl`` a single cross-entropy head ``ce`` classifies ``F^5``.
    """
    rng = np.random.default_rng(seed)
    p = {}

    def dense(name, fan_in, fan_out):
        p[f"{name}.w"] = Tensor(glorot(rng, fan_in, fan_out, dtype), requires_grad=True, name=f"{name}.w")
        p[f"{name}.b"] = Tensor(np.zeros((1, fan_out), dtype), requires_grad=True, name=f"{name}.b")

    d, L, h = config.bands, config.classes, config.head_hidden
    c = config.channels
    dense("local1", 2 * d + 3, c(0))
    dense("local2", c(0), c(0))
    for e in range(1, N_LEVELS):
        dense(f"enc{e}", c(e - 1), c(e))
    if config.msff:
        for e in MSFF_LEVELS:
            p[f"msff{e}.p_ls"] = Tensor(glorot(rng, c(e), c(e - 1), dtype), requires_grad=True)
            p[f"msff{e}.p_ld"] = Tensor(glorot(rng, c(e), c(e + 1), dtype), requires_grad=True)
            dense(f"msff{e}.m", c(e - 1) + c(e) + c(e + 1), c(e))
    dense("dec1", c(N_LEVELS - 1), c(N_LEVELS - 1))
    for i in range(2, N_LEVELS + 1):
        e = N_LEVELS - i
        dense(f"dec{i}", c(e + 1) + c(e), c(e))
    if config.msl:
        for i in range(1, N_LEVELS):
            width = c(N_LEVELS - i)
            dense(f"scale{i}.fc1", width, h)
            dense(f"scale{i}.fc2", h, h)
            dense(f"scale{i}.fc3", h, L)
            p[f"scale{i}.omega"] = Tensor(np.ones((1, L), dtype), requires_grad=True)
    if config.ltl:
        for i in (1, 2):
            dense(f"tail{i}", c(0), L)
            p[f"tail{i}.omega"] = Tensor(np.ones((1, L), dtype), requires_grad=True)
    else:
        dense("ce", c(0), L)
    return p


def param_count(params, prefix=""):
    return sum(t.value.size for k, t in params.items() if k.startswith(prefix))


def linear(x, params, name):
    return T.add(T.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def mlp(x, params, name):
    return T.relu(linear(x, params, name))


@dataclass
class SamplingPlan:
    """Random downsampling bookkeeping for one sample.

    ``kept[e]`` indexes rows of level ``e - 1`` kept at level ``e``;
    ``parents[e]`` maps each row of level ``e - 1`` to its nearest kept row
    at level ``e``; ``positions[e]`` are the level's point positions.
    """

    kept: list
    parents: list
    positions: list

    def composed(self, level):
        """Indices into level 0 of the rows at ``level``."""
        idx = np.arange(self.positions[0].shape[0])
        for e in range(1, level + 1):
            idx = idx[self.kept[e]]
        return idx


def plan_sampling(positions, rng, ratio=4):
    positions = np.asarray(positions, dtype=np.float64)
    kept, parents, levels = [None], [None], [positions]
    for _ in range(1, N_LEVELS):
        prev = levels[-1]
        n = prev.shape[0]
        m = math.ceil(n / ratio)
        keep = np.sort(rng.choice(n, size=m, replace=False))
        _, parent = cKDTree(prev[keep]).query(prev, k=1)
        parent = np.asarray(parent, dtype=np.int64).reshape(-1)
        parent[keep] = np.arange(m)
        kept.append(keep)
        parents.append(parent)
        levels.append(prev[keep])
    return SamplingPlan(kept, parents, levels)


def local_input(positions, spectra, knn_neighbors):
    """Per-point [spectra, offset from neighbourhood mean, neighbourhood mean spectra]."""
    positions = np.asarray(positions, dtype=np.float64)
    spectra = np.asarray(spectra, dtype=np.float64)
    k = min(knn_neighbors, positions.shape[0])
    _, nbr = cKDTree(positions).query(positions, k=k)
    nbr = np.asarray(nbr).reshape(positions.shape[0], k)
    rel = positions - positions[nbr].mean(axis=1)
    return np.hstack([spectra, rel, spectra[nbr].mean(axis=1)])


def local_feature_encode(positions, spectra, params, knn_neighbors=8, dtype=np.float64):
    """F^0 = relu(relu(X W1 + b1) W2 + b2) of the local input features."""
    x = Tensor(local_input(positions, spectra, knn_neighbors), dtype=dtype)
    return encode_local(x, params)


def encode_local(x, params):
    return mlp(mlp(x, params, "local1"), params, "local2")


@dataclass
class EncoderState:
    features: list
    plan: SamplingPlan


def encode(f0, positions, params, seed=0, plan=None):
    """Encoder levels 0..4; each keeps a random quarter then applies the level MLP.

    The level MLP is point-wise, so applying it before or after selecting
    rows gives identical results; selecting first saves work.
    """
    if plan is None:
        plan = plan_sampling(positions, np.random.default_rng(seed))
    feats = [f0]
    for e in range(1, N_LEVELS):
        feats.append(mlp(T.gather_rows(feats[-1], plan.kept[e]), params, f"enc{e}"))
    return EncoderState(feats, plan)


def msff(f_s, f_l, f_d, kept, parent, params, name, gates=None):
    """Fuse shallow (4n x c/4), local (n x c) and deep (n/4 x 4c) features into n x c.

    ``kept`` selects the local rows among the shallow ones; ``parent`` maps
    local rows to deep rows. ``gates`` may override ``(e_S, e_D)``.
    Returns ``(F_O, e_S, e_D)``.
    """
    if f_s.shape[1] * 4 != f_l.shape[1] or f_d.shape[1] != 4 * f_l.shape[1]:
        raise ValueError(f"msff: channel mismatch {f_s.shape}, {f_l.shape}, {f_d.shape}")
    fs = T.gather_rows(f_s, kept)
    fd = T.nearest_upsample(f_d, parent)
    if fs.shape[0] != f_l.shape[0] or fd.shape[0] != f_l.shape[0]:
        raise ValueError("msff: row mismatch after resampling")
    g_l = T.global_avg_pool(f_l)
    if gates is None:
        e_s = T.sigmoid(T.add(T.global_avg_pool(fs), T.matmul(g_l, params[f"{name}.p_ls"])))
        e_d = T.sigmoid(T.mul(T.global_avg_pool(fd), T.matmul(g_l, params[f"{name}.p_ld"])))
    else:
        e_s, e_d = (T.as_tensor(g) for g in gates)
    fs_t = T.mul_broadcast(fs, e_s)
    fd_t = T.mul_broadcast(fd, e_d)
    out = mlp(T.concat_cols(fs_t, f_l, fd_t), params, f"{name}.m")
    return out, e_s, e_d


def skip_features(state, params, use_msff=True):
    """Skip tensor for every encoder level: MSFF output at levels 1-3 when enabled."""
    f, plan = state.features, state.plan
    skips = list(f)
    if use_msff:
        for e in MSFF_LEVELS:
            skips[e], _, _ = msff(f[e - 1], f[e], f[e + 1], plan.kept[e], plan.parents[e + 1],
                                  params, f"msff{e}")
    return skips


def decode(state, params, use_msff=True):
    """Decoder outputs ``[F^1, ..., F^5]``, coarsest first."""
    skips = skip_features(state, params, use_msff)
    top = N_LEVELS - 1
    outs = [mlp(skips[top], params, "dec1")]
    for i in range(2, N_LEVELS + 1):
        e = N_LEVELS - i
        up = T.nearest_upsample(outs[-1], state.plan.parents[e + 1])
        outs.append(mlp(T.concat_cols(up, skips[e]), params, f"dec{i}"))
    return outs


def forward(x_local, positions, params, config, seed=0, plan=None):
    """Run the whole network on one sample.

    ``x_local`` is the precomputed :func:`local_input` matrix. Returns the
    decoder outputs ``[F^1..F^5]`` and the encoder state.
    """
    f0 = encode_local(T.as_tensor(x_local), params)
    state = encode(f0, positions, params, seed=seed, plan=plan)
    return decode(state, params, use_msff=config.msff), state
