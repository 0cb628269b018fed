"""Command-line entry point.

Subcommands: gen-data, partition, train, eval, rollout, perf, compare.
Exit codes: 1 config error, 2 I/O or data error, 3 numeric error, 4 replica
divergence. Failures additionally emit one machine-readable JSON line on
standard error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import datagen, evaluation, perf
from .config import RunConfig
from .errors import (ConfigError, DivergenceError, FormatError, HaloGnnError,
                     NumericError, ValidationError)
from .mesh import read_manifest, read_trajectory, write_trajectory, Trajectory
from .partition import partition, quality, write_plan
from .perf import Tracer
from .runner import Trainer
from .training import load_checkpoint

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_DIVERGENCE = 1, 2, 3, 4


def _fail(code: int, exc: Exception) -> int:
    line = json.dumps({"code": code, "error": type(exc).__name__, "message": str(exc)})
    print(line, file=sys.stderr)
    return code


def _load_split(manifest_path, split: str) -> tuple[list, list[str]]:
    entries = [e for e in read_manifest(manifest_path) if e.split == split]
    if not entries:
        raise ValidationError(f"manifest {manifest_path} has no '{split}' trajectories")
    return [read_trajectory(e.path) for e in entries], [e.path.name for e in entries]


def _parse_horizons(text: str) -> list:
    out = []
    for item in text.split(","):
        item = item.strip()
        out.append("full" if item == "full" else int(item))
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = datagen.dataset_spec_from_dict(json.loads(Path(args.spec).read_text()))
    manifest = datagen.make_dataset(spec, args.out)
    print(f"wrote dataset manifest {manifest}")
    return 0


def cmd_partition(args) -> int:
    trajectory = read_trajectory(args.trajectory)
    plan = partition(trajectory.mesh, args.parts, seed=args.seed)
    q = quality(trajectory.mesh, plan)
    if args.out:
        write_plan(plan, args.out)
    print(f"parts: {plan.n_parts}, edge_cut: {q.edge_cut}, balance: {q.balance:.4f}")
    for p in range(plan.n_parts):
        print(f"part {p}: owned {plan.n_owned(p)}, halo {len(plan.halo[p])}")
    return 0


def _resolve_run(config: RunConfig):
    trajectories, _ = _load_split(config.data.manifest, "train")
    first = trajectories[0]
    names = first.schema.names
    for t in trajectories:
        if t.schema.names != names or t.mesh.n_types != first.mesh.n_types \
                or t.mesh.dim != first.mesh.dim:
            raise ValidationError("training trajectories disagree on channels/types/dim")
    schema = config.data.resolve_schema(names)
    model_config = config.model.resolve(
        node_in=len(schema.input_channels) + first.mesh.n_types,
        edge_in=first.mesh.dim + 1,
        node_out=schema.n_outputs)
    trajectories = [Trajectory(mesh=t.mesh, schema=schema, states=t.states)
                    for t in trajectories]
    return trajectories, schema, model_config


def cmd_train(args) -> int:
    config = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
    overrides = {}
    for key in ("mode", "steps", "seed"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if args.parts is not None:
        overrides["n_parts"] = args.parts
    if args.manifest is not None:
        doc = config.to_dict()
        doc["data"]["manifest"] = args.manifest
        config = RunConfig.from_dict(doc)
    if overrides:
        doc = config.to_dict()
        for key, val in overrides.items():
            if key == "seed":
                doc["seed"] = val
            else:
                doc["train"][key] = val
        config = RunConfig.from_dict(doc)
    if not config.data.manifest:
        raise ConfigError("no dataset manifest configured")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.write_resolved(out_dir / "resolved_config.json")
    trajectories, _, model_config = _resolve_run(config)
    tracer = Tracer() if config.trace else None
    trainer = Trainer(trajectories, trajectories[0].schema, model_config,
                      config.train, tracer=tracer)
    try:
        history = trainer.run(config.train.steps, log_path=out_dir / "train_log.csv")
        trainer.save_checkpoint(out_dir / "checkpoint.mgnc")
    finally:
        trainer.close()
    if tracer is not None:
        tracer.save(out_dir / "trace.json")
    print(f"trained {len(history)} steps; final loss {history[-1].loss:.6e}")
    print(f"outputs in {out_dir}")
    return 0


def _evaluate_checkpoint(checkpoint_path, manifest_path, horizons, split: str):
    params, _, normalizer, schema, _, _ = load_checkpoint(checkpoint_path)
    trajectories, names = _load_split(manifest_path, split)
    trajectories = [Trajectory(mesh=t.mesh, schema=schema, states=t.states)
                    for t in trajectories]
    predictor = evaluation.make_predictor(params, normalizer)
    return evaluation.evaluate_set(predictor, trajectories, horizons, names=names)


def cmd_eval(args) -> int:
    horizons = _parse_horizons(args.horizons)
    report = _evaluate_checkpoint(args.checkpoint, args.manifest, horizons, args.split)
    if args.out:
        evaluation.write_metrics_csv(report, args.out)
    for key in report.aggregate_mean:
        flag = " (single trajectory)" if report.single_trajectory else ""
        print(f"{key}: {report.aggregate_mean[key]:.6e} "
              f"+/- {report.aggregate_se[key]:.6e}{flag}")
    for row in report.per_trajectory:
        e_mu = row.e_temporal_mean * 100.0
        e_sd = row.e_temporal_std * 100.0
        note = " [near-stationary]" if row.stationary else ""
        print(f"{row.name}: e(temporal mean) {e_mu:.2f}%, "
              f"e(temporal std) {e_sd:.2f}%{note}")
    return 0


def cmd_rollout(args) -> int:
    params, _, normalizer, schema, _, _ = load_checkpoint(args.checkpoint)
    raw = read_trajectory(args.trajectory)
    trajectory = Trajectory(mesh=raw.mesh, schema=schema, states=raw.states)
    predictor = evaluation.make_predictor(params, normalizer)
    horizon = trajectory.n_steps - 1 - args.start if args.horizon is None else args.horizon
    result = evaluation.rollout(predictor, trajectory, args.start, horizon)
    dump = Trajectory(mesh=trajectory.mesh, schema=trajectory.schema,
                      states=np.concatenate([trajectory.states[args.start:args.start + 1],
                                             result.states]))
    write_trajectory(dump, args.out)
    out_idx = schema.output_indices()
    truth = trajectory.states[args.start + 1:args.start + 1 + horizon][:, :, out_idx]
    err = evaluation.rmse(result.states[:, :, out_idx], truth)
    print(f"rollout of {horizon} steps written to {args.out}; rmse {err:.6e}")
    return 0


def cmd_perf(args) -> int:
    events = perf.load_trace(args.trace)
    report = perf.runtime_distribution(events)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scope", "name", "value"])
            for row in perf.report_rows(report):
                writer.writerow(row)
    print(perf.report_summary(report))
    return 0


def cmd_compare(args) -> int:
    horizons = _parse_horizons(args.horizons)
    report_a = _evaluate_checkpoint(args.checkpoint_a, args.manifest, horizons, args.split)
    report_b = _evaluate_checkpoint(args.checkpoint_b, args.manifest, horizons, args.split)
    rows = []
    for key in report_a.aggregate_mean:
        rows.append((key, report_a.aggregate_mean[key], report_a.aggregate_se[key],
                     report_b.aggregate_mean[key], report_b.aggregate_se[key]))
    stat_a = [r.e_temporal_std for r in report_a.per_trajectory]
    stat_b = [r.e_temporal_std for r in report_b.per_trajectory]
    rows.append(("e_temporal_std_mean", float(np.mean(stat_a)), 0.0,
                 float(np.mean(stat_b)), 0.0))
    width = max(len(r[0]) for r in rows)
    print(f"{'metric'.ljust(width)}  {'A mean':>12} {'A se':>10} {'B mean':>12} {'B se':>10}")
    for name, am, ase, bm, bse in rows:
        print(f"{name.ljust(width)}  {am:12.4e} {ase:10.2e} {bm:12.4e} {bse:10.2e}")
    flags_a = sum(r.stationary for r in report_a.per_trajectory)
    flags_b = sum(r.stationary for r in report_b.per_trajectory)
    print(f"near-stationary trajectories: A {flags_a}/{len(report_a.per_trajectory)}, "
          f"B {flags_b}/{len(report_b.per_trajectory)}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "a_mean", "a_se", "b_mean", "b_se"])
            for row in rows:
                writer.writerow([row[0]] + [f"{v:.12e}" for v in row[1:]])
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="halognn",
                                     description="Partition-parallel mesh graph "
                                                 "network training and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="dataset spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("partition", help="partition a mesh and report quality")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--parts", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="plan JSON output path")
    p.set_defaults(fn=cmd_partition)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--manifest", help="dataset manifest (overrides config)")
    p.add_argument("--mode", choices=("single", "halo", "nocomm"))
    p.add_argument("--parts", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="valid", choices=("train", "valid"))
    p.add_argument("--horizons", default="1,10,full")
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("rollout", help="dump an autoregressive rollout")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--horizon", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("perf", help="analyze a trace file")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", help="report CSV path")
    p.set_defaults(fn=cmd_perf)

    p = sub.add_parser("compare", help="side-by-side metrics for two checkpoints")
    p.add_argument("--checkpoint-a", required=True)
    p.add_argument("--checkpoint-b", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="valid", choices=("train", "valid"))
    p.add_argument("--horizons", default="1,10,full")
    p.add_argument("--out", help="comparison CSV path")
    p.set_defaults(fn=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGENCE, exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (FormatError, ValidationError, FileNotFoundError, OSError,
            json.JSONDecodeError) as exc:
        return _fail(EXIT_IO, exc)
    except HaloGnnError as exc:
        return _fail(EXIT_IO, exc)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
