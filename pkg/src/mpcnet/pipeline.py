"""Training, evaluation and the ablation / sampling-comparison experiments."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

from pathlib import Path

import numpy as np
from sklearn.preprocessing import StandardScaler

from . import tensor as T
from .loss import (ClassWeights, ce_head_loss, compute_class_weights, determine_tail,
                   downsample_labels, guard_omegas, hybrid_loss, linear, longtail_loss,
                   multiscale_loss, predict, tail_heads)
from .metrics import ConfusionMatrix, accumulate, compute_report
from .network import NetworkConfig, forward, init_params, local_input, plan_sampling
from .pointcloud import UNLABELED
from .sampling import SampleSet

log = logging.getLogger(__name__)

PARAMS_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 0.005
    lr_decay: float = 0.95
    weight_decay: float = 1e-4
    lam: float = 1.0
    seed: int = 0
    msff: bool = True
    msl: bool = True
    ltl: bool = True
    class_weighting: bool = True
    weight_truncation: float = 0.05
    tail_threshold: float = 0.05
    optimizer: str = "sgd"
    omega_max: float = None
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or not 0 < self.lr_decay <= 1 or self.weight_decay < 0:
            raise ValueError("learning_rate, lr_decay and weight_decay out of range")
        if self.omega_max is not None and self.omega_max <= 0:
            raise ValueError("omega_max must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unknown dtype {self.dtype!r}")

    def lr_at(self, epoch):
        return self.learning_rate * self.lr_decay ** epoch

    @property
    def toggles(self):
        return {"msff": self.msff, "msl": self.msl, "ltl": self.ltl}


@dataclass
class RunLog:
    epochs: list = field(default_factory=list)
    report: object = None

    def to_dict(self):
        return {"epochs": self.epochs,
                "report": None if self.report is None else self.report.to_dict()}


@dataclass
class TrainedModel:
    params: dict
    net_config: NetworkConfig
    train_config: TrainConfig
    tail_set: frozenset
    class_weights: object
    log: RunLog
    scaler: object = None


@dataclass
class PreparedSample:
    indices: np.ndarray
    x_local: np.ndarray
    positions: np.ndarray
    labels: np.ndarray


def prepare_samples(cloud, samples, knn_neighbors, label_mask=None, dtype=np.float64,
                    scaler=None):
    """Precompute the parameter-free local inputs of every sample.

    ``label_mask`` (per point) hides labels, e.g. of evaluation points;
    ``scaler`` standardises the input columns.
    """
    labels = np.asarray(cloud.labels)
    if label_mask is not None:
        labels = np.where(label_mask, UNLABELED, labels)
    out = []
    for idx in samples.indices:
        pos = np.asarray(cloud.positions[idx], dtype=np.float64)
        x = local_input(pos, cloud.spectra[idx], knn_neighbors)
        if scaler is not None:
            x = scaler.transform(x)
        x = x.astype(dtype)
        out.append(PreparedSample(idx, x, pos, labels[idx]))
    return out


def training_histogram(prepared, n_classes):
    """Labeled-point counts over all training samples (with repetition)."""
    counts = np.zeros(n_classes, dtype=np.int64)
    for s in prepared:
        lab = s.labels[s.labels != UNLABELED]
        counts += np.bincount(lab, minlength=n_classes)
    return counts


def sample_loss(sample, params, config, lam, tail_set, class_weights, plan):
    """Loss terms and the prediction map for one sample.

    Returns ``(loss, parts, scores)`` with ``parts`` holding the float
    values of ``scale``, ``tail`` and ``ce`` where applicable.
    """
    outs, state = forward(sample.x_local, sample.positions, params, config, plan=plan)
    parts = {}
    if config.ltl:
        final, scores = longtail_loss(outs[-1], sample.labels, params, tail_set)
        parts["tail"] = final.item()
    else:
        final, scores = ce_head_loss(outs[-1], sample.labels, params, class_weights)
        parts["ce"] = final.item()
    if config.msl:
        l_scale, _ = multiscale_loss(outs[:-1], downsample_labels(sample.labels, state.plan),
                                     params, class_weights)
        parts["scale"] = l_scale.item()
        final = hybrid_loss(l_scale, final, lam)
    return final, parts, scores


class SGD:
    """Plain SGD with decoupled weight decay on weight matrices."""

    def __init__(self, weight_decay=0.0):
        self.weight_decay = weight_decay

    def step(self, params, lr):
        for name, p in params.items():
            if _decays(name):
                p.value -= lr * self.weight_decay * p.value
            p.value -= lr * p.grad


class Adam:
    def __init__(self, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, lr):
        self.t += 1
        b1, b2 = self.betas
        for name, p in params.items():
            m = self.m.setdefault(name, np.zeros_like(p.value))
            v = self.v.setdefault(name, np.zeros_like(p.value))
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad ** 2
            if _decays(name):
                p.value -= lr * self.weight_decay * p.value
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.value -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _decays(name):
    return not (name.endswith(".b") or name.endswith(".omega"))


def _plan_rng(seed, epoch, sample_id):
    return np.random.default_rng([int(seed), int(epoch), int(sample_id)])


def train(cloud, samples, net_config, train_config, eval_label_mask=None):
    """Fit network parameters on the TRAIN samples.

    Labels of points flagged in ``eval_label_mask`` are hidden from the loss.
    Returns a :class:`TrainedModel`; its ``log`` lists one entry per epoch.
    """
    tc = train_config
    cfg = replace(net_config, receptive_field=samples.k, **tc.toggles)
    dtype = np.dtype(tc.dtype)
    params = init_params(cfg, seed=tc.seed, dtype=dtype)
    if len(samples) == 0:
        raise TrainingError("no training samples")
    raw = prepare_samples(cloud, samples, cfg.knn_neighbors, eval_label_mask)
    scaler = StandardScaler().fit(np.vstack([s.x_local for s in raw]))
    prepared = [replace(s, x_local=scaler.transform(s.x_local).astype(dtype)) for s in raw]
    hist = training_histogram(prepared, cfg.classes)
    if hist.sum() == 0:
        raise TrainingError("training samples contain no labeled points")
    class_weights = (compute_class_weights(hist, tc.weight_truncation)
                     if tc.class_weighting else None)
    tail_set = determine_tail(hist, tc.tail_threshold)
    opt = SGD(tc.weight_decay) if tc.optimizer == "sgd" else Adam(tc.weight_decay)
    rng = np.random.default_rng(tc.seed)
    run = RunLog()
    plist = list(params.values())
    for epoch in range(tc.epochs):
        lr = tc.lr_at(epoch)
        t0 = time.perf_counter()
        sums = {"loss": 0.0, "scale": 0.0, "tail": 0.0, "ce": 0.0}
        order = rng.permutation(len(prepared))
        for start in range(0, len(order), tc.batch_size):
            batch = order[start:start + tc.batch_size]
            T.zero_grad(plist)
            with T.Tape() as tape:
                total = None
                for sid in batch:
                    plan = plan_sampling(prepared[sid].positions, _plan_rng(tc.seed, epoch, sid))
                    loss, parts, _ = sample_loss(prepared[sid], params, cfg, tc.lam, tail_set,
                                                 class_weights, plan)
                    for key, val in parts.items():
                        sums[key] += val
                    total = loss if total is None else T.add(total, loss)
                total = T.scale(total, 1.0 / len(batch))
                if not np.isfinite(total.item()):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
                tape.backward(total)
                sums["loss"] += total.item() * len(batch)
            opt.step(params, lr)
            guard_omegas(params, tc.omega_max)
        n = len(prepared)
        entry = {"epoch": epoch, "lr": lr, "time": time.perf_counter() - t0}
        entry.update({k: v / n for k, v in sums.items()})
        run.epochs.append(entry)
        log.debug("epoch %d loss %.5f", epoch, entry["loss"])
    return TrainedModel(params, cfg, tc, tail_set, class_weights, run, scaler)


def sample_scores(sample, model, plan):
    """Per-row class scores of one prepared sample, without recording a tape."""
    cfg = model.net_config
    outs, _ = forward(sample.x_local, sample.positions, model.params, cfg, plan=plan)
    if cfg.ltl:
        z1, z2 = tail_heads(outs[-1], model.params)
        return z1.value + z2.value
    return T.softmax_rows(linear(outs[-1], model.params, "ce")).value


def score_sums(cloud, samples, model, eval_seed=0, sample_ids=None):
    """Summed score rows and hit counts per cloud point.

    Partial results over disjoint subsets of samples add up to the
    full-pass result.
    """
    dtype = np.dtype(model.train_config.dtype)
    ids = range(len(samples)) if sample_ids is None else sample_ids
    sums = np.zeros((cloud.n_points, model.net_config.classes))
    hits = np.zeros(cloud.n_points, dtype=np.int64)
    sub = SampleSet(samples.indices[list(ids)], samples.centers[list(ids)],
                    samples.centroid_ids[list(ids)], samples.k, samples.role,
                    samples.padded[list(ids)])
    prepared = prepare_samples(cloud, sub, model.net_config.knn_neighbors, dtype=dtype,
                               scaler=model.scaler)
    for sid, prep in zip(ids, prepared):
        plan = plan_sampling(prep.positions, _plan_rng(eval_seed, 0, sid))
        z = sample_scores(prep, model, plan)
        np.add.at(sums, prep.indices, z)
        np.add.at(hits, prep.indices, 1)
    return sums, hits


def predictions_from_sums(sums, hits):
    covered = hits > 0
    avg = np.zeros_like(sums)
    avg[covered] = sums[covered] / hits[covered, None]
    return predict(avg), covered


def evaluate(cloud, test_samples, model, eval_mask=None, eval_seed=0, n_shards=1):
    """Metrics on labeled points covered by the test samples.

    Points in several samples average their score rows before the arg-max.
    With ``eval_mask``, only flagged points are scored; an all-False mask is
    an error.
    """
    if eval_mask is not None and not np.any(eval_mask):
        raise ValueError("no EVAL points: every centroid is a training centroid")
    if len(test_samples) == 0:
        raise ValueError("no test samples")
    shards = np.array_split(np.arange(len(test_samples)), max(1, n_shards))
    sums, hits = None, None
    for shard in shards:
        s, h = score_sums(cloud, test_samples, model, eval_seed, shard.tolist())
        sums, hits = (s, h) if sums is None else (sums + s, hits + h)
    pred, covered = predictions_from_sums(sums, hits)
    mask = covered if eval_mask is None else covered & np.asarray(eval_mask, dtype=bool)
    cm = accumulate(ConfusionMatrix.zeros(cloud.n_classes), cloud.labels, pred, mask)
    report = compute_report(cm, model.tail_set)
    report.coverage = float(covered[np.asarray(eval_mask, dtype=bool)].mean()
                            if eval_mask is not None else covered.mean())
    return report


def _scaler_arrays(scaler):
    if scaler is None:
        return {}
    return {"scaler:mean": scaler.mean_, "scaler:scale": scaler.scale_, "scaler:var": scaler.var_}


def _scaler_from(data):
    if "scaler:mean" not in data.files:
        return None
    scaler = StandardScaler()
    scaler.mean_ = data["scaler:mean"].copy()
    scaler.scale_ = data["scaler:scale"].copy()
    scaler.var_ = data["scaler:var"].copy()
    scaler.n_features_in_ = scaler.mean_.shape[0]
    scaler.n_samples_seen_ = 0
    return scaler


def save_params(model, path):
    """Write parameters, configs and the input scaler to a versioned ``.npz`` file."""
    arrays = {f"param:{k}": v.value for k, v in model.params.items()}
    arrays.update(_scaler_arrays(model.scaler))
    meta = {"version": PARAMS_VERSION, "net_config": model.net_config.to_dict(),
            "train_config": asdict(model.train_config), "tail_set": sorted(model.tail_set),
            "class_weights": None if model.class_weights is None else model.class_weights.w.tolist(),
            "weight_truncation": model.train_config.weight_truncation}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_params(path):
    """Inverse of :func:`save_params`; the returned model has an empty log."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != PARAMS_VERSION:
            raise ValueError(f"unsupported parameter file version {meta.get('version')}")
        params = {k[len("param:"):]: T.Tensor(data[k].copy(), requires_grad=True)
                  for k in data.files if k.startswith("param:")}
        scaler = _scaler_from(data)
    cw = meta["class_weights"]
    return TrainedModel(params, NetworkConfig(**meta["net_config"]),
                        TrainConfig(**meta["train_config"]), frozenset(meta["tail_set"]),
                        None if cw is None else ClassWeights(np.asarray(cw), meta["weight_truncation"]),
                        RunLog(), scaler)
