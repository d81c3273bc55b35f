"""Replication harness: generate, split, fit every method, evaluate, aggregate.

Method names understood in an experiment's method list:

``gmi``           global mean, one per source
``mf``            matrix factorization, one per matrix source
``cp``            CP-ALS, one per tensor source (order >= 3)
``ncf``           neural head without interactions, one per matrix source
``ntf``           neural head without interactions, one per tensor source
``nfx``           neural head with interactions, one per source
``jima``          joint model with interactions over every source
``nf:a+b+...``    joint model without interactions over the listed sources
``nfx:a+b+...``   joint model with interactions over the listed sources
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import baselines
from .joint_model import JointModel, ModelConfig, error_metrics, train
from .obs_store import Schema, SplitPlan, load_dataset, split
from .simgen import generate, spec_from_dict

log = logging.getLogger(__name__)

METRICS = ("rmse", "mae")
COLUMNS = ("method", "source", "rmse_mean", "rmse_std", "mae_mean", "mae_std", "time_mean_s", "time_std_s", "r_effective")

# Schedule used by the bundled desk-scale experiment configs. Matrix heads see
# far fewer observations than tensor heads and get a stronger penalty.
DESK_NEURAL = {
    "epochs": 60,
    "batch_size": 512,
    "learning_rate": 5e-3,
    "lambdas": {"tensor": 1e-3, "matrix": 5e-3},
    "embedding_lambda": 1e-4,
}


@dataclass
class MethodSpec:
    name: str
    params: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, item: str | dict) -> "MethodSpec":
        if isinstance(item, str):
            return cls(item)
        return cls(item["name"], dict(item.get("params", {})))


@dataclass
class ExperimentSpec:
    methods: list[MethodSpec]
    generator: dict | None = None
    data: dict | None = None
    train_fraction: float = 0.2
    replications: int = 10
    base_seed: int = 0
    metrics: tuple[str, ...] = METRICS
    time_limit: float | None = None
    workers: int = 1
    name: str = "experiment"
    # overrides of DESK_NEURAL shared by every neural method
    neural: dict = field(default_factory=dict)

    def __post_init__(self):
        self.methods = [m if isinstance(m, MethodSpec) else MethodSpec.parse(m) for m in self.methods]
        self.metrics = tuple(self.metrics)
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.methods:
            raise ValueError("method list is empty")
        if (self.generator is None) == (self.data is None):
            raise ValueError("exactly one of 'generator' or 'data' must be given")
        bad = set(self.metrics) - set(METRICS)
        if bad:
            raise ValueError(f"unknown metrics {sorted(bad)}")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentSpec":
        d = dict(d)
        if d.get("data") and base_dir is not None:
            d["data"] = {k: str((base_dir / v).resolve()) if isinstance(v, str) else v for k, v in d["data"].items()}
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentSpec":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)


@dataclass
class ResultRow:
    method: str
    source: str
    stats: dict[str, tuple[float, float]]
    r_effective: int


@dataclass
class ResultTable:
    """Aggregated rows plus the raw per-replication values they came from.

    ``raw[(method, source)]`` maps each successful replication index to a
    dict of metric values and ``time_s``.
    """

    raw: dict[tuple[str, str], dict[int, dict[str, float]]]
    source_order: list[str]
    method_order: list[str]
    replications: int
    failures: dict[str, list[int]] = field(default_factory=dict)

    @property
    def rows(self) -> list[ResultRow]:
        out = []
        for method in self.method_order:
            for src in self.source_order:
                reps = self.raw.get((method, src))
                if reps is None:
                    continue
                stats = {}
                for key in ("rmse", "mae", "time_s"):
                    vals = [v[key] for v in reps.values() if key in v]
                    if vals:
                        stats[key] = mean_std(vals)
                out.append(ResultRow(method, src, stats, len(reps)))
        return out

    def cell(self, method: str, source: str, metric: str = "rmse") -> tuple[float, float] | None:
        for row in self.rows:
            if row.method == method and row.source == source:
                return row.stats.get(metric)
        return None

    def mean(self, method: str, source: str, metric: str = "rmse") -> float:
        c = self.cell(method, source, metric)
        if c is None:
            raise KeyError(f"no {metric} for {method} on {source}")
        return c[0]

    def failed_methods(self) -> list[str]:
        """Methods that failed in at least half of the replications."""
        return [m for m, reps in self.failures.items() if len(set(reps)) * 2 >= self.replications]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ResultTable):
            return NotImplemented
        strip = lambda t: {k: {r: {m: x for m, x in v.items() if m != "time_s"} for r, v in reps.items()}
                           for k, reps in t.raw.items()}
        return (strip(self) == strip(other) and self.source_order == other.source_order
                and self.method_order == other.method_order)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    a = np.asarray(values, dtype=np.float64)
    if len(a) == 1:
        return float(a[0]), 0.0
    return float(a.mean()), float(a.std(ddof=1))


# -------------------------------------------------------------- methods


@dataclass
class Fit:
    """One model to train: the sources it covers and how to fit/predict."""

    sources: list[str]
    run: Callable[[Schema, SplitPlan, int], Callable[[str, np.ndarray], np.ndarray]]


def method_seed(rep_seed: int, label: str) -> int:
    return int(np.random.SeedSequence([rep_seed, zlib.crc32(label.encode())]).generate_state(1)[0])


def _neural(sources: list[str], interactions: bool, params: dict) -> Fit:
    def run(schema: Schema, plan: SplitPlan, seed: int):
        cfg = ModelConfig.from_dict({**params, "sources": tuple(sources),
                                     "use_interactions": interactions, "seed": seed})
        model = JointModel(schema, cfg)
        train(model, schema, plan)
        return model.predict_batch

    return Fit(list(sources), run)


def _gmi(src: str, params: dict) -> Fit:
    def run(schema, plan, seed):
        s = schema.source(src)
        m = baselines.gmi_fit_predict(s.values[plan.train(s.source_id)])
        return lambda _name, cells: m.predict(cells)

    return Fit([src], run)


def _mf(src: str, params: dict) -> Fit:
    def run(schema, plan, seed):
        s = schema.source(src)
        m = baselines.mf_fit(s, plan, schema.source_shape(s), seed=seed, **params)
        return lambda _name, cells: m.predict(cells)

    return Fit([src], run)


def _cp(src: str, params: dict) -> Fit:
    def run(schema, plan, seed):
        s = schema.source(src)
        m = baselines.cp_fit(s, plan, schema.source_shape(s), seed=seed, **params)
        return lambda _name, cells: m.predict(cells)

    return Fit([src], run)


def resolve_method(method: MethodSpec, schema: Schema, neural: dict | None = None) -> list[Fit]:
    name, params = method.name, method.params
    neural_params = {**DESK_NEURAL, **(neural or {}), **params}
    names = [s.name for s in schema.sources]
    matrices = [s.name for s in schema.sources if s.order == 2]
    tensors = [s.name for s in schema.sources if s.order >= 3]
    if name == "gmi":
        return [_gmi(s, params) for s in names]
    if name == "mf":
        return [_mf(s, params) for s in matrices]
    if name == "cp":
        return [_cp(s, params) for s in tensors]
    if name == "ncf":
        return [_neural([s], False, neural_params) for s in matrices]
    if name == "ntf":
        return [_neural([s], False, neural_params) for s in tensors]
    if name == "nfx":
        return [_neural([s], True, neural_params) for s in names]
    if name == "jima":
        return [_neural(names, True, neural_params)]
    if name.startswith(("nf:", "nfx:")):
        head, _, body = name.partition(":")
        listed = [p for p in body.split("+") if p]
        unknown = [p for p in listed if p not in names]
        if not listed or unknown:
            raise ValueError(f"method {name!r} names unknown sources {unknown}")
        return [_neural(listed, head == "nfx", neural_params)]
    raise ValueError(f"unknown method {name!r}")


# ------------------------------------------------------------ execution


def _load_data(spec: ExperimentSpec, rep_seed: int) -> Schema:
    if spec.generator is not None:
        return generate(spec_from_dict(spec.generator, seed=rep_seed)).schema
    data = spec.data
    if "manifest" in data:
        from .ratings_ingest import load_ratings_manifest

        return load_ratings_manifest(data["manifest"]).schema
    return load_dataset(data["schema"], data["observations"])


def run_replication(spec: ExperimentSpec, rep: int) -> tuple[dict, dict]:
    """Run every method once; returns ``(values, failures)`` for replication ``rep``."""
    rep_seed = spec.base_seed + rep
    schema = _load_data(spec, rep_seed).without_empty()
    plan = split(schema, spec.train_fraction, rep_seed)
    values: dict[tuple[str, str], dict[str, float]] = {}
    failures: dict[str, str] = {}
    started = time.perf_counter()
    for method in spec.methods:
        if spec.time_limit is not None and time.perf_counter() - started > spec.time_limit:
            failures[method.name] = "replication time limit exceeded"
            continue
        try:
            fits = resolve_method(method, schema, spec.neural)
            got = {}
            for fit in fits:
                label = f"{method.name}|{'+'.join(fit.sources)}"
                t0 = time.perf_counter()
                predictor = fit.run(schema, plan, method_seed(rep_seed, label))
                preds = {}
                for src_name in fit.sources:
                    s = schema.source(src_name)
                    test = plan.test(s.source_id)
                    preds[src_name] = (s.values[test], predictor(src_name, s.indices[test]))
                elapsed = time.perf_counter() - t0
                for src_name, (y, p) in preds.items():
                    m = error_metrics(y, p, spec.metrics)
                    if not all(math.isfinite(v) for v in m.values()):
                        raise FloatingPointError(f"non-finite metric on {src_name}")
                    got[(method.name, src_name)] = {**m, "time_s": elapsed}
            values.update(got)
        except Exception as exc:  # recorded, excluded from aggregation
            log.warning("replication %d: method %s failed: %s", rep, method.name, exc)
            failures[method.name] = f"{type(exc).__name__}: {exc}"
    return values, failures


def run_experiment(spec: ExperimentSpec, progress: Callable[[str], None] | None = None) -> ResultTable:
    reps = range(spec.replications)
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            outs = list(pool.map(run_replication, [spec] * spec.replications, reps))
    else:
        outs = []
        for rep in reps:
            outs.append(run_replication(spec, rep))
            if progress:
                progress(f"replication {rep + 1}/{spec.replications} done")

    raw: dict[tuple[str, str], dict[int, dict[str, float]]] = {}
    failures: dict[str, list[int]] = {}
    source_order: list[str] = []
    for rep, (values, failed) in zip(reps, outs):
        for (method, src), v in values.items():
            raw.setdefault((method, src), {})[rep] = v
            if src not in source_order:
                source_order.append(src)
        for method in failed:
            failures.setdefault(method, []).append(rep)
    # a failed method contributes nothing for that replication on any source
    for method, bad in failures.items():
        for key in [k for k in raw if k[0] == method]:
            for rep in bad:
                raw[key].pop(rep, None)
            if not raw[key]:
                del raw[key]
    return ResultTable(raw, source_order, [m.name for m in spec.methods], spec.replications, failures)


# -------------------------------------------------------------- reports


def is_joint(method: str) -> bool:
    """True when one fitted model covers all of the method's sources."""
    return method == "jima" or method.startswith(("nf:", "nfx:"))


def table_to_csv(table: ResultTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for row in table.rows:
            cells = [row.method, row.source]
            for key in ("rmse", "mae", "time_s"):
                mean, std = row.stats.get(key, (None, None))
                cells += ["" if mean is None else repr(mean), "" if std is None else repr(std)]
            w.writerow(cells + [row.r_effective])


def raw_to_csv(table: ResultTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "source", "replication", "rmse", "mae", "time_s"])
        for (method, src), reps in table.raw.items():
            for rep, v in sorted(reps.items()):
                w.writerow([method, src, rep] + [repr(v[k]) if k in v else "" for k in ("rmse", "mae", "time_s")])


def read_results(raw_csv: str | Path, replications: int | None = None) -> ResultTable:
    """Rebuild a :class:`ResultTable` from a raw per-replication CSV."""
    raw: dict[tuple[str, str], dict[int, dict[str, float]]] = {}
    methods, sources = [], []
    max_rep = -1
    with open(raw_csv, newline="") as fh:
        for rec in csv.DictReader(fh):
            key = (rec["method"], rec["source"])
            rep = int(rec["replication"])
            max_rep = max(max_rep, rep)
            raw.setdefault(key, {})[rep] = {k: float(rec[k]) for k in ("rmse", "mae", "time_s") if rec[k] != ""}
            if key[0] not in methods:
                methods.append(key[0])
            if key[1] not in sources:
                sources.append(key[1])
    return ResultTable(raw, sources, methods, replications or max_rep + 1)


def render_text(table: ResultTable, metric: str = "rmse", with_time: bool = True) -> str:
    """Fitted models as rows, sources as columns, ``mean (std)`` cells, blanks where unmodelled.

    A joint method is one row; a per-source method (gmi, mf, ncf, ...) gets
    one row per fitted source, labelled ``method (source)``.
    """
    header = ["method", *table.source_order] + (["time_s"] if with_time else [])
    groups: list[tuple[str, list[str]]] = []
    for method in table.method_order:
        covered = [s for s in table.source_order if table.cell(method, s, metric) is not None]
        if not covered:
            groups.append((method, []))
        elif is_joint(method) or len(covered) == 1:
            groups.append((method, covered))
        else:
            groups += [(f"{method} ({s})", [s]) for s in covered]
    lines = []
    for label, covered in groups:
        method = label.split(" (")[0]
        if not covered:
            lines.append([label, "failed"] + [""] * (len(header) - 2))
            continue
        cells = [label]
        for src in table.source_order:
            c = table.cell(method, src, metric) if src in covered else None
            cells.append("" if c is None else f"{c[0]:.3f} ({c[1]:.3f})")
        if with_time:
            # one fit covers every source of a row, so its time is counted once
            t = table.cell(method, covered[0], "time_s")
            cells.append("" if t is None else f"{t[0]:.3f}")
        lines.append(cells)
    widths = [max(len(r[i]) for r in [header, *lines]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    out = [f"{metric.upper()} mean (std) over replications", fmt(header), fmt(["-" * w for w in widths])]
    out += [fmt(r) for r in lines]
    if table.failures:
        out.append("")
        for m, reps in table.failures.items():
            out.append(f"failed: {m} in replications {sorted(set(reps))}")
    return "\n".join(out) + "\n"


def report(table: ResultTable, outdir: str | Path, formats: Sequence[str] = ("csv", "text")) -> list[Path]:
    if not table.raw:
        raise ValueError("cannot report an empty result table")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        table_to_csv(table, outdir / "results.csv")
        raw_to_csv(table, outdir / "raw.csv")
        written += [outdir / "results.csv", outdir / "raw.csv"]
    if "text" in formats:
        text = "".join(render_text(table, m, with_time=(m == "rmse")) + "\n" for m in METRICS)
        (outdir / "results.txt").write_text(text)
        written.append(outdir / "results.txt")
    return written


def spec_to_dict(spec: ExperimentSpec) -> dict[str, Any]:
    return {
        "name": spec.name,
        "generator": spec.generator,
        "data": spec.data,
        "methods": [{"name": m.name, "params": m.params} if m.params else m.name for m in spec.methods],
        "train_fraction": spec.train_fraction,
        "replications": spec.replications,
        "base_seed": spec.base_seed,
        "metrics": list(spec.metrics),
        "time_limit": spec.time_limit,
        "workers": spec.workers,
        "neural": spec.neural,
    }
