"""Command line entry point: ``mpcnet <subcommand> ...``."""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .experiments import ABLATION_CONFIGS, SWEEPS, ablate, compare_sampling, sweep, sweep_csv
from .gradcheck import gradient_suite
from .pipeline import evaluate, load_params, save_params, train
from .pointcloud import (CloudFormatError, SceneSpecError, generate_synthetic_scene, load_cloud,
                         save_cloud)
from .sampling import GridBalancedSampler, RandomSampler

log = logging.getLogger("mpcnet")


def _write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, default=_jsonable)
    log.info("wrote %s", path)


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _seeds(args, cfg):
    if args.seeds:
        return tuple(args.seeds)
    return (int(cfg.train.get("seed", 0)),) if args.single_seed else (0, 1, 2)


# ---------------------------------------------------------------- subcommands


def cmd_gen(args):
    with open(args.spec) as fh:
        scene = json.load(fh)
    spec = RunConfig(scene=scene).scene_spec()
    cloud = generate_synthetic_scene(spec)
    save_cloud(cloud, args.out, args.format)
    print(f"{cloud.n_points} points, {cloud.n_bands} bands, {cloud.n_classes} classes -> {args.out}")
    return 0


def cmd_sample(args):
    cloud = load_cloud(args.cloud, args.format)
    if args.strategy == "rs":
        sampler = RandomSampler(n_samples=args.n_samples, k=args.k, seed=args.seed).fit(cloud)
        samples = {"train": sampler.train_samples_.to_dict()}
    else:
        sampler = GridBalancedSampler(k=args.k, train_ratio=args.train_ratio,
                                      cell_size=args.cell_size, seed=args.seed).fit(cloud)
        samples = {"train": sampler.train_samples_.to_dict(),
                   "test": sampler.test_samples_.to_dict()}
    _write_json(args.out, sampler.manifest_)
    if args.samples:
        _write_json(args.samples, samples)
    print(f"{sampler.manifest_['n_train_samples']} training samples -> {args.out}")
    return 0


def _train_once(cfg, cloud):
    """Train from a run config; returns (model, gbs sampler)."""
    exp = cfg.experiment(cloud)
    seed = int(cfg.sampling.get("seed", 0))
    split = exp.sampler(seed)
    samples = split.train_samples_
    if cfg.sampling.get("strategy", "gbs") == "rs":
        n = int(cfg.sampling.get("n_samples", len(samples)))
        samples = RandomSampler(n_samples=n, k=exp.k, seed=seed).fit(cloud).train_samples_
    hidden = split.eval_mask_ if exp.hide_eval_labels else None
    model = train(cloud, samples, exp.net_config, exp.train_config, eval_label_mask=hidden)
    return model, split


def _emit_report(report, out, stem, class_names):
    _write_json(out / f"{stem}.json", report.to_dict())
    _write_text(out / f"{stem}.csv", report.to_csv(list(class_names)))


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    cloud = cfg.cloud()
    out = Path(args.out)
    model, split = _train_once(cfg, cloud)
    save_params(model, out / "params.npz")
    report = evaluate(cloud, split.test_samples_, model, split.eval_mask_)
    model.log.report = report
    _write_json(out / "run_log.json", model.log.to_dict())
    _emit_report(report, out, "report", cloud.class_names)
    print(f"OA={report.oa:.4f} AA={report.aa:.4f} kappa={report.kappa:.4f} mIoU={report.miou:.4f}")
    return 0


def cmd_eval(args):
    cfg = RunConfig.load(args.config)
    cloud = cfg.cloud()
    model = load_params(args.params)
    split = cfg.experiment(cloud).sampler(int(cfg.sampling.get("seed", 0)))
    report = evaluate(cloud, split.test_samples_, model, split.eval_mask_,
                      n_shards=args.shards)
    _emit_report(report, Path(args.out), "report", cloud.class_names)
    print(f"OA={report.oa:.4f} AA={report.aa:.4f} kappa={report.kappa:.4f} mIoU={report.miou:.4f}")
    return 0


def cmd_gradcheck(args):
    results = gradient_suite(seeds=tuple(args.seeds), tolerance=args.tol,
                             max_entries=args.max_entries)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return 1 if failed else 0


def _parse_sweep(text):
    key, _, values = text.partition("=")
    if key not in SWEEPS or not values:
        raise ConfigError(f"--sweep expects KEY=V1,V2,... with KEY in {sorted(SWEEPS)}")
    return key, [float(v) if key != "receptive_field" else int(v) for v in values.split(",")]


def cmd_ablate(args):
    cfg = RunConfig.load(args.config)
    exp = cfg.experiment()
    out = Path(args.out)
    seeds = _seeds(args, cfg)
    if args.sweep:
        key, values = _parse_sweep(args.sweep)
        results = sweep(exp, key, values, seeds)
        _write_text(out / f"sweep_{key}.csv", sweep_csv(results, key))
        _write_json(out / f"sweep_{key}.json",
                    {str(v): t.to_dict() for v, t in results.items()})
        print(sweep_csv(results, key), end="")
        return 0
    table = ablate(exp, seeds, args.configs)
    _write_text(out / "ablation.csv", table.to_csv())
    _write_json(out / "ablation.json", table.to_dict())
    print(table.to_csv(), end="")
    return 0


def cmd_compare_sampling(args):
    cfg = RunConfig.load(args.config)
    exp = cfg.experiment()
    result = compare_sampling(exp, _seeds(args, cfg))
    out = Path(args.out)
    _write_text(out / "sampling_comparison.csv", result.to_csv())
    _write_json(out / "sampling_comparison.json", result.to_dict())
    print(result.to_csv(), end="")
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="mpcnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic cloud from a scene description")
    p.add_argument("spec", help="scene JSON (class list or {'preset': ...})")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["csv", "bin"], default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("sample", help="split a cloud into training/test samples")
    p.add_argument("cloud")
    p.add_argument("--out", required=True, help="manifest JSON path")
    p.add_argument("--samples", help="optional JSON path for the sample index sets")
    p.add_argument("--format", choices=["csv", "bin"], default=None)
    p.add_argument("--cell-size", type=float, default=None)
    p.add_argument("--train-ratio", type=float, default=0.05)
    p.add_argument("--k", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strategy", choices=["gbs", "rs"], default="gbs")
    p.add_argument("--n-samples", type=int, default=16, help="sample count for --strategy rs")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train and evaluate one run")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved parameters")
    p.add_argument("--config", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", default="run")
    p.add_argument("--shards", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--max-entries", type=int, default=6)
    p.set_defaults(func=cmd_gradcheck)

    for name, func, helptext in (("ablate", cmd_ablate, "module ablation over seeds"),
                                 ("compare-sampling", cmd_compare_sampling,
                                  "random versus grid-balanced sampling")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default="run")
        group = p.add_mutually_exclusive_group()
        group.add_argument("--seeds", type=int, nargs="+")
        group.add_argument("--single-seed", action="store_true",
                           help="use only the train seed from the config")
        if name == "ablate":
            p.add_argument("--configs", nargs="+", choices=list(ABLATION_CONFIGS))
            p.add_argument("--sweep", help="KEY=V1,V2,... with KEY in " + ", ".join(SWEEPS))
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SceneSpecError, CloudFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
