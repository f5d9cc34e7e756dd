"""Command-line driver: ``mmtl {gen,train,trace,attn,detect,edit,sweep}``.

Every command reads ``--config`` (JSON, optional) plus flag overrides,
writes its artifacts under ``--out`` and a ``config.<command>.json`` with
the resolved configuration.

Exit status: 0 ok, 1 other error, 2 malformed config, 3 missing input
artifact (world or checkpoint), 4 numerical failure.
Thread count for the BLAS pool comes from ``MMTL_NUM_THREADS`` (default 1).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import attribution as at
from . import pipeline as pl
from .checkpoint import CheckpointError, atomic_write, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .editing import apply_edit, edit_report, summarize_results
from .heatmap import render_svg
from .numerics import NumericalError
from .training import DivergenceError
from .world import World, WorldError

THREADS_ENV = "MMTL_NUM_THREADS"
EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("mmtl")


class MissingArtifact(FileNotFoundError):
    pass


def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    atomic_write(path, text.encode())
    return path


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _load_world(out: Path) -> World:
    path = out / "world.json"
    if not path.exists():
        raise MissingArtifact(f"world file not found: {path} (run 'mmtl gen' first)")
    return World.from_json(path.read_text())


def _load_model(out: Path, name: str = "model.mmtl"):
    path = out / name
    if not path.exists():
        raise MissingArtifact(f"checkpoint not found: {path} (run 'mmtl train' first)")
    model, _ = load_checkpoint(path)
    return model


# -- commands ----------------------------------------------------------------

def cmd_gen(cfg: RunConfig, out: Path) -> None:
    world = pl.world_from_config(cfg)
    _write(out, "world.json", world.to_json() + "\n")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    world = _load_world(out)
    res = pl.train_from_config(cfg, world)
    save_checkpoint(out / "model.mmtl", res.model, extra={"world_seed": world.seed})
    _write(out, "curves.csv", res.curves_csv())
    last = res.history[-1] if res.history else {}
    _write(out, "train_summary.json", _json({"epochs_run": len(res.losses), **last}))


def cmd_trace(cfg: RunConfig, out: Path) -> None:
    world, model = _load_world(out), _load_model(out)
    t = cfg.trace
    facts = pl.trace_facts(world, t.n_facts, cfg.seed)
    run = pl.trace_suite(model, world, facts, t.site, t.window, t.corruption, t.noise_scale, cfg.seed)
    tag = f"{t.site}_w{t.window}_{t.corruption}"
    gdir = out / f"trace_{tag}"
    for f, g in zip(run.facts, run.grids):
        _write(gdir, f"fact{f.fact_id:04d}.json", g.to_json() + "\n")
        _write(gdir, f"fact{f.fact_id:04d}.csv", g.to_csv())
    metrics = pl.trace_metrics(run)
    _write(out, f"trace_{tag}_summary.json", _json(metrics))
    summary = pl.summarize(run.grids)
    _write(out, f"trace_{tag}_summary.csv", summary.to_csv())
    first = run.grids[0]
    rows = [f"{i}" for i in range(first.iee.shape[0])]
    _write(out, f"trace_{tag}_fact{run.facts[0].fact_id:04d}.svg",
           render_svg(first.iee, rows, [str(l) for l in range(first.iee.shape[1])],
                      title=f"IEE {t.site} window {t.window}"))


def cmd_attn(cfg: RunConfig, out: Path) -> None:
    world, model = _load_world(out), _load_model(out)
    facts = pl.trace_facts(world, cfg.trace.n_facts, cfg.seed)
    profiles = pl.visual_profiles(model, world, facts)
    mean = profiles.mean(axis=0)
    _write(out, "attn_visual_constraint.csv", at.profile_csv(mean))
    last = np.mean([at.constraint_to_last_profile(model, pl.trace_prompt(world, f)) for f in facts], axis=0)
    _write(out, "attn_constraint_last.csv", at.profile_csv(last))
    _write(out, "attn_visual_constraint.svg",
           render_svg(mean, [str(i) for i in range(mean.shape[0])], [str(l) for l in range(mean.shape[1])],
                      title="visual -> constraint contribution"))
    sig = world.signature_positions
    _write(out, "attn_summary.json", _json({
        "n_prompts": len(facts), "signature_positions": sig,
        "layer0_signature_mass": at.position_mass(mean, sig, 0)}))


def cmd_detect(cfg: RunConfig, out: Path) -> None:
    world, model = _load_world(out), _load_model(out)
    ds = pl.detection_set(model, world, cfg.detect.sigma_levels, cfg.detect.validation_fraction, cfg.seed)
    det, metrics = pl.detector_metrics(ds)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "split", "correct", "confidence"] + [f"layer{l}" for l in range(ds.profiles.shape[1])])
    for i in range(len(ds.prompts)):
        w.writerow([i, "validation" if ds.validation[i] else "heldout", int(ds.correct[i]),
                    repr(float(ds.confidence[i]))] + [repr(float(v)) for v in ds.profiles[i]])
    _write(out, "detect_profiles.csv", buf.getvalue())
    _write(out, "detect_report.json", _json(metrics))


def cmd_edit(cfg: RunConfig, out: Path) -> None:
    world, model = _load_world(out), _load_model(out)
    fix, longtail = pl.edit_suites(world, cfg.edit, cfg.seed)
    reports = {}
    for name, cases in (("fix", fix), ("longtail", longtail)):
        if not cases:
            continue
        results = pl.run_cases(model, cases)
        s = summarize_results(results)
        reports[name] = {"n": s.n, "efficacy": s.efficacy, "pre_efficacy": s.pre_efficacy,
                         "generalization": s.generalization, "specificity_drop": s.specificity_drop,
                         "edits": [json.loads(edit_report(c.request, r)) for c, r in zip(cases, results)]}
    _write(out, f"edit_layer{cfg.edit.layer}_report.json", _json(reports))
    if fix:
        edited, _ = apply_edit(model, fix[0].request)
        save_checkpoint(out / f"edited_layer{cfg.edit.layer}.mmtl", edited,
                        extra={"edit": fix[0].request.to_dict()})


def cmd_sweep(cfg: RunConfig, out: Path) -> None:
    world, model = _load_world(out), _load_model(out)
    fix, _ = pl.edit_suites(world, cfg.edit, cfg.seed)
    cases = fix[:cfg.edit.sweep_requests]
    layers = cfg.edit.sweep_layers or tuple(range(model.config.n_layers))
    table = pl.sweep_table(model, cases, layers)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "efficacy"])
    for l, e in table.items():
        w.writerow([l, repr(e)])
    _write(out, "sweep.csv", buf.getvalue())


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "trace": cmd_trace, "attn": cmd_attn,
            "detect": cmd_detect, "edit": cmd_edit, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmtl", description="Toy multimodal fact model: train, trace, analyse and edit.",
        epilog=f"Environment: {THREADS_ENV} sets the BLAS thread count (default 1). "
               "Exit codes: 2 malformed config, 3 missing world/checkpoint, 4 numerical failure.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"gen": "generate the synthetic world", "train": "train the model on the world",
             "trace": "causal tracing over trained facts", "attn": "attention contribution profiles",
             "detect": "fit and score the failure detector", "edit": "run the editing suites",
             "sweep": "editing efficacy per layer"}
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="global seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--site", choices=["mlp", "attn", "hidden"], help="tracing site")
        p.add_argument("--window", type=int, help="tracing window size")
        p.add_argument("--corruption", choices=["replace", "gaussian"], help="corruption strategy")
        p.add_argument("--layer", type=int, help="editing layer")
        p.add_argument("--lambda", dest="lam", type=float, help="editing regularizer")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    cfg = cfg.override("trace", site=args.site, window=args.window, corruption=args.corruption)
    return cfg.override("edit", layer=args.layer, lam=args.lam)


def _thread_limit() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.window is not None and args.window < 1:
            raise ConfigError("--window must be >= 1")
        if args.lam is not None and not args.lam > 0:
            raise ConfigError("--lambda must be positive")
        n_threads = _thread_limit()
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        _write(out, f"config.{args.command}.json", cfg.to_json())
        with threadpool_limits(limits=n_threads):
            COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"mmtl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, CheckpointError) as exc:
        print(f"mmtl: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, DivergenceError, FloatingPointError) as exc:
        print(f"mmtl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (WorldError, ValueError) as exc:
        print(f"mmtl: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
