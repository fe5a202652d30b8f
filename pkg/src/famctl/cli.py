"""Command-line entry point.

    famctl train --config exp.json [--out-dir DIR] [--workers K]
    famctl eval --checkpoint DIR/checkpoint.json [--count N] [--seed S]
    famctl export-controls --checkpoint CK [--grid grid.json]
    famctl baseline --family zz (--framework-time T | --checkpoint CK) [--circuit FILE]
    famctl hpsearch --config search.json

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
``FAMCTL_OUT_DIR`` and ``FAMCTL_WORKERS`` override the defaults of
``--out-dir`` and ``--workers``.
"""

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from famctl import hpsearch, training
from famctl.baseline import UnsupportedFamily, average_decomposition_time, load_circuit_file
from famctl.targets import family_from_config, get_family
from famctl.training import NumericalError, TrainingConfig, atomic_write

log = logging.getLogger("famctl")

SCHEMA_VERSION = 1
EXPERIMENT_KEYS = {"schema_version", "out_dir", "checkpoint_every", "export"}


class ConfigError(ValueError):
    pass


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def load_experiment(path):
    """Split an experiment file into ``(TrainingConfig, extras)``."""
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    extras = {k: doc[k] for k in EXPERIMENT_KEYS if k in doc}
    train_keys = {k: v for k, v in doc.items() if k not in EXPERIMENT_KEYS}
    try:
        cfg = TrainingConfig.from_dict(train_keys)
        family_from_config(cfg.family, cfg.domain_inflation)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg, extras


def experiment_document(cfg: TrainingConfig, **extras):
    doc = {"schema_version": SCHEMA_VERSION}
    doc.update(cfg.to_dict())
    doc.update(extras)
    return doc


def _write_json(path, obj):
    atomic_write(path, lambda fh: (json.dump(obj, fh, indent=1), fh.write("\n")))


def _out_dir(args, default):
    return args.out_dir or os.environ.get("FAMCTL_OUT_DIR") or default


def cmd_train(args):
    cfg, extras = load_experiment(args.config)
    out_dir = _out_dir(args, extras.get("out_dir", "famctl-out"))
    state = None
    if args.resume:
        ck = os.path.join(out_dir, "checkpoint.json")
        if os.path.exists(ck):
            state = _load_checkpoint(ck)
            # only the iteration budget may change between sessions
            if dataclasses.replace(state.config, iterations=cfg.iterations) != cfg:
                raise ConfigError("checkpoint in out_dir was produced by a different config")
            state.config = cfg

    def progress(it, cost):
        if it % 10 == 0:
            log.info("iteration %d  cost %.4e", it, cost)

    state, report = training.train(
        cfg, out_dir=out_dir, workers=args.workers,
        checkpoint_every=extras.get("checkpoint_every", 50), state=state, progress=progress,
    )
    if extras.get("export") is not None:
        write_controls(state, extras["export"], out_dir)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "samples"}))
    return 0


def _load_checkpoint(path):
    try:
        return training.load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_eval(args):
    state = _load_checkpoint(args.checkpoint)
    report = training.evaluate(state, count=args.count, seed=args.seed, workers=args.workers)
    out_dir = _out_dir(args, os.path.dirname(os.path.abspath(args.checkpoint)))
    tag = "" if args.seed is None else f"_seed{args.seed}"
    _write_json(os.path.join(out_dir, f"eval{tag}.json"), report.to_dict())
    report.write_csv(os.path.join(out_dir, f"eval{tag}.csv"))
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "samples"}))
    return 0


def _axis_values(axis, lo, hi, name):
    if isinstance(axis, (int, float)):
        values = np.array([float(axis)])
    elif isinstance(axis, dict):
        unknown = set(axis) - {"lo", "hi", "num"}
        if unknown:
            raise ConfigError(f"unknown keys in grid axis {name}: {sorted(unknown)}")
        values = np.linspace(float(axis.get("lo", lo)), float(axis.get("hi", hi)), int(axis.get("num", 5)))
    else:
        values = np.asarray(axis, dtype=float).reshape(-1)
    if np.any(values < lo - 1e-12) or np.any(values > hi + 1e-12):
        raise ConfigError(f"grid axis {name} leaves the domain [{lo}, {hi}]")
    return values


def control_grid(state, grid):
    """Rows of (alpha..., t, f_1..f_C) for every grid point, and the alpha grid."""
    grid = grid or {}
    unknown = set(grid) - {"alpha", "t_points"}
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    lo, hi = state.family.box(inflated=True)
    axes = grid.get("alpha", [{"num": 5}] * state.family.d)
    if len(axes) != state.family.d:
        raise ConfigError(f"grid needs {state.family.d} alpha axes")
    values = [_axis_values(ax, lo[j], hi[j], f"alpha{j + 1}") for j, ax in enumerate(axes)]
    mesh = np.stack(np.meshgrid(*values, indexing="ij"), axis=-1).reshape(-1, state.family.d)
    t_points = int(grid.get("t_points", 20))
    if t_points < 1:
        raise ConfigError("t_points must be >= 1")
    frac = np.linspace(0.0, 1.0, t_points) if t_points > 1 else np.array([0.5])
    durations, _ = state.durations(mesh)
    f, _ = state.model.controls(mesh, frac, durations)
    rows = []
    for i, a in enumerate(mesh):
        for k, fr in enumerate(frac):
            rows.append(list(a) + [fr * durations[i]] + list(f[i, k]))
    return mesh, durations, rows


def write_controls(state, grid, out_dir):
    """Write ``controls.csv`` (and ``durations.csv`` in per-target-T mode)."""
    mesh, durations, rows = control_grid(state, grid)
    d = state.family.d
    header = [f"alpha{j + 1}" for j in range(d)] + ["t"] + state.model.layout.names

    def write_rows(fh):
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) for x in r])

    atomic_write(os.path.join(out_dir, "controls.csv"), write_rows)
    if state.config.mode == "per-target-T":
        def write_durations(fh):
            w = csv.writer(fh)
            w.writerow([f"alpha{j + 1}" for j in range(d)] + ["duration"])
            for a, t in zip(mesh, durations):
                w.writerow([repr(float(x)) for x in a] + [repr(float(t))])

        atomic_write(os.path.join(out_dir, "durations.csv"), write_durations)
    return len(rows)


def cmd_export_controls(args):
    state = _load_checkpoint(args.checkpoint)
    grid = _read_json(args.grid) if args.grid else None
    out_dir = _out_dir(args, os.path.dirname(os.path.abspath(args.checkpoint)))
    n_rows = write_controls(state, grid, out_dir)
    print(json.dumps({"rows": n_rows, "channels": len(state.model.layout)}))
    return 0


def framework_time(state, count=250, seed=None):
    """Average gate time of a trained model over the held-out ensemble."""
    cfg = state.config
    if cfg.mode == "fixed-T":
        return float(cfg.duration)
    if cfg.mode == "shared-T":
        return float(state.shared_duration[0])
    return training.evaluate(state, count=count, seed=seed).mean_duration


def cmd_baseline(args):
    if args.checkpoint:
        state = _load_checkpoint(args.checkpoint)
        family = state.family
        t_fw = framework_time(state)
    else:
        if not args.family:
            raise ConfigError("--family is required without --checkpoint")
        if args.framework_time is None:
            raise ConfigError("--framework-time is required without --checkpoint")
        family = get_family(args.family)
        t_fw = args.framework_time
    if args.framework_time is not None:
        t_fw = args.framework_time
    template = load_circuit_file(args.circuit, family.n, family.d) if args.circuit else None
    seed = 0 if args.seed is None else args.seed
    t_dec = average_decomposition_time(family, args.count, seed, template)
    out = {
        "family": family.name,
        "count": args.count,
        "seed": seed,
        "mean_decomposition_time": t_dec,
        "framework_time": t_fw,
        "R": t_dec / t_fw,
    }
    print(json.dumps(out))
    return 0


def cmd_hpsearch(args):
    doc = _read_json(args.config)
    try:
        spec = hpsearch.SearchSpec.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    ranked = hpsearch.screen(spec, workers=args.workers)
    out_dir = _out_dir(args, "famctl-hpsearch")

    def write_ranked(fh):
        w = csv.writer(fh)
        w.writerow(["rank", "trial", "n_layers", "n_units", "lr", "beta", "score", "error"])
        for r, res in enumerate(ranked, 1):
            h = res.hyper
            w.writerow([r, res.index, h.n_layers, h.n_units, repr(h.lr), repr(h.beta), repr(res.score), res.error or ""])

    atomic_write(os.path.join(out_dir, "ranked.csv"), write_ranked)
    best = hpsearch.winning_config(spec, ranked)
    _write_json(os.path.join(out_dir, "winning_config.json"), experiment_document(best))
    print(json.dumps({"best_trial": ranked[0].index, "score": ranked[0].score, "hyper": ranked[0].hyper.to_dict()}))
    return 0


def _default_workers():
    env = os.environ.get("FAMCTL_WORKERS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def build_parser():
    p = argparse.ArgumentParser(prog="famctl", description="Neural-network control of gate families.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--workers", type=int, default=_default_workers())
        sp.add_argument("--out-dir")

    sp = sub.add_parser("train", help="train from an experiment config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--resume", action="store_true", help="continue from out_dir/checkpoint.json")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on held-out targets")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int)
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export-controls", help="tabulate controls over an (alpha, t) grid")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--grid", help="JSON grid spec")
    common(sp)
    sp.set_defaults(func=cmd_export_controls)

    sp = sub.add_parser("baseline", help="gate-decomposition time and ratio R")
    sp.add_argument("--family")
    sp.add_argument("--circuit", help="circuit template file")
    sp.add_argument("--framework-time", type=float)
    sp.add_argument("--checkpoint")
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--seed", type=int)
    common(sp)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("hpsearch", help="random hyperparameter search")
    sp.add_argument("--config", required=True)
    common(sp)
    sp.set_defaults(func=cmd_hpsearch)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "count", None) is not None and args.count < 1:
        print("error: --count must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, UnsupportedFamily, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
