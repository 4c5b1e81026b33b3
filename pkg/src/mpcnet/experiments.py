"""Seeded ablation and sampling-comparison experiments built on :mod:`pipeline`."""

import csv
import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .pipeline import evaluate, train
from .sampling import GridBalancedSampler, random_sampling_baseline

ABLATION_CONFIGS = {
    "baseline": {"msff": False, "msl": False, "ltl": False},
    "+MSFF": {"msff": True, "msl": False, "ltl": False},
    "+MSL": {"msff": False, "msl": True, "ltl": False},
    "+LTL": {"msff": False, "msl": False, "ltl": True},
    "+AHL": {"msff": False, "msl": True, "ltl": True},
    "full": {"msff": True, "msl": True, "ltl": True},
}

METRICS = ("oa", "aa", "kappa", "miou", "head_avg", "tail_avg", "head_min", "tail_min")

# Keys accepted by ``ablate --sweep`` and the config field each one varies.
SWEEPS = {
    "receptive_field": ("sampling", "k"),
    "weight_truncation": ("train", "weight_truncation"),
    "lambda": ("train", "lam"),
}


@dataclass
class Experiment:
    """Everything needed to run one seeded train/evaluate cycle except the seed."""

    cloud: object
    net_config: object
    train_config: object
    k: int = 4096
    train_ratio: float = 0.05
    cell_size: float = None
    hide_eval_labels: bool = False

    def sampler(self, seed):
        return GridBalancedSampler(k=self.k, train_ratio=self.train_ratio,
                                   cell_size=self.cell_size, seed=seed).fit(self.cloud)


@dataclass
class RunResult:
    name: str
    seed: int
    report: object
    train_time: float


def run_config(exp, sampler, toggles, seed, train_samples=None):
    """Train with ``toggles`` on GBS (or given) TRAIN samples; score on GBS EVAL points."""
    tc = replace(exp.train_config, seed=seed, **toggles)
    samples = sampler.train_samples_ if train_samples is None else train_samples
    t0 = time.perf_counter()
    hidden = sampler.eval_mask_ if exp.hide_eval_labels else None
    model = train(exp.cloud, samples, exp.net_config, tc, eval_label_mask=hidden)
    elapsed = time.perf_counter() - t0
    report = evaluate(exp.cloud, sampler.test_samples_, model, sampler.eval_mask_)
    return model, report, elapsed


def _nanstats(values):
    arr = np.asarray(values, dtype=np.float64)
    if np.all(np.isnan(arr)):
        return float("nan"), float("nan")
    return float(np.nanmean(arr)), float(np.nanstd(arr))


@dataclass
class AblationTable:
    """Per-configuration runs with mean/std summaries and deltas versus baseline."""

    runs: dict = field(default_factory=dict)

    def mean(self, name, metric):
        return _nanstats([getattr(r.report, metric) for r in self.runs[name]])[0]

    def std(self, name, metric):
        return _nanstats([getattr(r.report, metric) for r in self.runs[name]])[1]

    def delta(self, name, metric, reference="baseline"):
        return self.mean(name, metric) - self.mean(reference, metric)

    def rows(self):
        out = []
        for name in self.runs:
            row = {"config": name, "kind": "mean"}
            row.update({m: self.mean(name, m) for m in METRICS})
            out.append(row)
            row = {"config": name, "kind": "std"}
            row.update({m: self.std(name, m) for m in METRICS})
            out.append(row)
        if "baseline" in self.runs:
            for name in self.runs:
                if name != "baseline":
                    row = {"config": name, "kind": "delta"}
                    row.update({m: self.delta(name, m) for m in METRICS})
                    out.append(row)
        return out

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["config", "kind", *METRICS])
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()

    def to_dict(self):
        return {
            "rows": self.rows(),
            "runs": {name: [{"seed": r.seed, "train_time": r.train_time,
                             "report": r.report.to_dict()} for r in runs]
                     for name, runs in self.runs.items()},
        }


def ablate(exp, seeds=(0, 1, 2), configs=None):
    """Train every configuration once per seed on the same GBS split.

    The seed fixes the sampling split, the parameter initialisation and the
    per-epoch downsampling, so two calls with equal inputs agree bit for bit.
    """
    names = list(ABLATION_CONFIGS) if configs is None else list(configs)
    unknown = [n for n in names if n not in ABLATION_CONFIGS]
    if unknown:
        raise ValueError(f"unknown ablation configs {unknown}")
    table = AblationTable({n: [] for n in names})
    for seed in seeds:
        sampler = exp.sampler(seed)
        for name in names:
            _, report, elapsed = run_config(exp, sampler, ABLATION_CONFIGS[name], seed)
            table.runs[name].append(RunResult(name, seed, report, elapsed))
    return table


def sweep(exp, key, values, seeds=(0, 1, 2)):
    """Full-model metrics while varying one hyperparameter.

    ``key`` is one of :data:`SWEEPS`. Returns ``{value: AblationTable}``.
    """
    if key not in SWEEPS:
        raise ValueError(f"unknown sweep {key!r}; choose from {sorted(SWEEPS)}")
    section, attr = SWEEPS[key]
    out = {}
    for value in values:
        if section == "sampling":
            variant = replace(exp, **{attr: int(value)})
        else:
            variant = replace(exp, train_config=replace(exp.train_config, **{attr: value}))
        out[value] = ablate(variant, seeds, configs=["full"])
    return out


def sweep_csv(results, key):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow([key, "kind", *METRICS])
    for value, table in results.items():
        writer.writerow([value, "mean", *(table.mean("full", m) for m in METRICS)])
        writer.writerow([value, "std", *(table.std("full", m) for m in METRICS)])
    return buf.getvalue()


@dataclass
class SamplingComparison:
    """Random sampling versus grid-balanced sampling over several seeds."""

    runs: dict = field(default_factory=lambda: {"RS": [], "GBS": []})

    ROWS = ("oa", "aa", "kappa", "miou", "time")

    def value(self, strategy, row):
        runs = self.runs[strategy]
        if row == "time":
            return float(np.mean([r.train_time for r in runs]))
        return float(np.mean([getattr(r.report, row) for r in runs]))

    def table(self):
        """Five rows (OA, AA, kappa, mIoU, Time) by two columns (RS, GBS)."""
        return [{"metric": row, "RS": self.value("RS", row), "GBS": self.value("GBS", row)}
                for row in self.ROWS]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["metric", "RS", "GBS"])
        writer.writeheader()
        writer.writerows(self.table())
        return buf.getvalue()

    def to_dict(self):
        return {
            "table": self.table(),
            "runs": {s: [{"seed": r.seed, "train_time": r.train_time, "n_samples": int(r.name),
                          "report": r.report.to_dict()} for r in runs]
                     for s, runs in self.runs.items()},
        }


def compare_sampling(exp, seeds=(0, 1, 2)):
    """Train the full model on RS and GBS TRAIN sets of equal size.

    Both are scored on the GBS EVAL points. Time covers sample generation plus training.
    """
    result = SamplingComparison()
    for seed in seeds:
        t0 = time.perf_counter()
        sampler = exp.sampler(seed)
        gbs_time = time.perf_counter() - t0
        n = len(sampler.train_samples_)
        t0 = time.perf_counter()
        rs = random_sampling_baseline(exp.cloud, n, exp.k, seed)
        rs_time = time.perf_counter() - t0
        if len(rs) != n:
            raise RuntimeError("random and grid-balanced sample counts differ")
        full = ABLATION_CONFIGS["full"]
        _, report, elapsed = run_config(exp, sampler, full, seed)
        result.runs["GBS"].append(RunResult(str(n), seed, report, gbs_time + elapsed))
        _, report, elapsed = run_config(exp, sampler, full, seed, train_samples=rs)
        result.runs["RS"].append(RunResult(str(n), seed, report, rs_time + elapsed))
    return result
