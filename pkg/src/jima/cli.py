"""Command-line entry point: ``jima {simulate,train,evaluate,run,report,gradcheck}``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import eval_runner, gradcheck
from .joint_model import JointModel, ModelConfig, TrainingDiverged, evaluate, train
from .nn_core import NonFiniteError
from .obs_store import SchemaError, load_dataset, save_dataset, split
from .ratings_ingest import load_ratings_manifest, write_synthetic_ratings
from .simgen import generate, spec_from_dict

log = logging.getLogger("jima")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


def bundled_configs() -> list[str]:
    return sorted(p.name for p in resources.files("jima").joinpath("configs").iterdir() if p.name.endswith(".json"))


def resolve_config(path: str) -> Path:
    """A filesystem path, or the name of a bundled config such as ``tableA1.json``."""
    p = Path(path)
    if p.exists():
        return p
    name = p.name if p.suffix else p.name + ".json"
    bundled = resources.files("jima").joinpath("configs", name)
    if bundled.is_file():
        return Path(str(bundled))
    raise ValidationError(f"config {path!r} not found (bundled: {', '.join(bundled_configs())})")


def read_config(path: str) -> tuple[dict, Path]:
    """Parsed config plus the directory its relative data paths resolve against.

    Paths in a user config are relative to that file; paths in a bundled
    config are relative to the working directory.
    """
    p = resolve_config(path)
    base = p.parent if Path(path).exists() else Path.cwd()
    try:
        return json.loads(p.read_text()), base
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: invalid JSON: {exc}") from exc


def _load_schema(cfg: dict, base: Path, seed: int | None):
    if "generator" in cfg:
        return generate(spec_from_dict(cfg["generator"], seed=seed)).schema
    data = cfg.get("data") or {}
    if "manifest" in data:
        return load_ratings_manifest(base / data["manifest"]).schema
    if "schema" in data and "observations" in data:
        return load_dataset(base / data["schema"], base / data["observations"])
    raise ValidationError("config needs 'generator' or 'data' with schema/observations or manifest")


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    cfg, _ = read_config(args.config)
    out = Path(args.out)
    gen = cfg.get("generator", cfg)
    if gen.get("kind") == "synthetic_ratings":
        seed = args.seed if args.seed is not None else int(gen.get("seed", 0))
        dims = tuple(gen.get("dims", (386, 50, 50)))
        path = write_synthetic_ratings(out, dims=dims, counts=gen.get("counts"), seed=seed)
        print(f"wrote synthetic rating files and {path}")
        return EXIT_OK
    spec = spec_from_dict(gen, seed=args.seed)
    data = generate(spec)
    sj, oc = save_dataset(data.schema, out)
    np.savez(out / "factors.npz", **{f.label: m for f, m in zip(data.schema.fibers, data.factors)})
    for s in data.schema.sources:
        print(f"{s.name}: {len(s)} cells, shape {data.schema.source_shape(s)}")
    print(f"wrote {sj}, {oc}, {out / 'factors.npz'}")
    return EXIT_OK


def _train_setup(args):
    cfg, base = read_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    schema = _load_schema(cfg, base, seed).without_empty()
    plan = split(schema, float(cfg.get("train_fraction", 0.2)), int(cfg.get("split_seed", seed)))
    mcfg = {**eval_runner.DESK_NEURAL, **cfg.get("model", {}), "seed": seed}
    return cfg, schema, plan, ModelConfig.from_dict(mcfg)


def cmd_train(args) -> int:
    _, schema, plan, mcfg = _train_setup(args)
    model = JointModel(schema, mcfg)
    result = train(model, schema, plan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.npz")
    with open(out / "loss_trace.csv", "w") as fh:
        fh.write("epoch,train_loss\n")
        for i, v in enumerate(result.epoch_loss):
            fh.write(f"{i},{v!r}\n")
    print(f"trained {', '.join(model.source_names)} for {result.steps} steps; model saved to {out / 'model.npz'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _, schema, plan, _ = _train_setup(args)
    out = Path(args.out)
    model_path = out / "model.npz"
    if not model_path.exists():
        raise ValidationError(f"no trained model at {model_path}; run 'train' first")
    model = JointModel.load(model_path)
    metrics = evaluate(model, schema, plan)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    for name, m in metrics.items():
        print(f"{name:>6}  rmse {m['rmse']:.3f}  mae {m['mae']:.3f}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg, base = read_config(args.config)
    if args.seed is not None:
        cfg["base_seed"] = args.seed
    if args.reps is not None:
        cfg["replications"] = args.reps
    if args.methods:
        wanted = [m.strip() for m in args.methods.split(",") if m.strip()]
        by_name = {(m if isinstance(m, str) else m["name"]): m for m in cfg.get("methods", [])}
        cfg["methods"] = [by_name.get(m, m) for m in wanted]
    spec = eval_runner.ExperimentSpec.from_dict(cfg, base_dir=base)
    table = eval_runner.run_experiment(spec, progress=lambda msg: log.info(msg))
    paths = eval_runner.report(table, args.out)
    print((Path(args.out) / "results.txt").read_text())
    print("wrote " + ", ".join(map(str, paths)))
    failed = table.failed_methods()
    if failed:
        print(f"methods failing in >= 50% of replications: {failed}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.config)
    raw = src / "raw.csv" if src.is_dir() else src
    if not raw.exists():
        raise ValidationError(f"no raw results at {raw}")
    table = eval_runner.read_results(raw)
    paths = eval_runner.report(table, args.out)
    print(eval_runner.render_text(table))
    print("wrote " + ", ".join(map(str, paths)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = gradcheck.run_all(tol=args.tol, n_instances=args.reps or 100, seed=seed)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("gradcheck: " + ("all checks passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "run": cmd_run,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jima", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    needs_config = {"simulate", "train", "evaluate", "run", "report"}
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name in needs_config:
            p.add_argument("--config", required=True, help="JSON config path or bundled config name")
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        if name in ("run", "gradcheck"):
            p.add_argument("--reps", type=int, default=None, help="replications (run) or instances (gradcheck)")
        if name == "run":
            p.add_argument("--methods", default=None, help="comma-separated subset of methods")
        if name == "gradcheck":
            p.add_argument("--tol", type=float, default=1e-4)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValidationError, SchemaError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
