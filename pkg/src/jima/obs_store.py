"""Sparse multi-source observation storage, splits and minibatching.

A :class:`Schema` binds a set of fibers (modes of the master tensor) to a set
of :class:`DataSource` objects, each of which holds the observed cells of one
tensor over a subset of those fibers. All indices are 0-based.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

LOSS_KINDS = ("squared", "cross_entropy")


class SchemaError(ValueError):
    """Raised when fibers, sources or observation files fail validation."""


@dataclass(frozen=True)
class FiberSpec:
    fiber_id: int
    dim: int
    label: str = ""

    def __post_init__(self):
        if self.dim < 1:
            raise SchemaError(f"fiber {self.fiber_id}: dim must be >= 1, got {self.dim}")


@dataclass
class DataSource:
    """One observed tensor over ``fibers``.

    ``indices`` is an ``(n_obs, order)`` integer array and ``values`` the
    matching float64 vector.
    """

    source_id: int
    fibers: tuple[int, ...]
    indices: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    loss_kind: str = "squared"
    name: str = ""

    def __post_init__(self):
        self.fibers = tuple(int(f) for f in self.fibers)
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size == 0:
            idx = idx.reshape(0, len(self.fibers))
        self.indices = idx
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not self.name:
            self.name = f"s{self.source_id}"

    @property
    def order(self) -> int:
        return len(self.fibers)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class SplitPlan:
    train_fraction: float
    seed: int
    per_source: dict[int, tuple[np.ndarray, np.ndarray]]

    def train(self, source_id: int) -> np.ndarray:
        return self.per_source[source_id][0]

    def test(self, source_id: int) -> np.ndarray:
        return self.per_source[source_id][1]


class Schema:
    """Validated, read-only binding of sources to fibers."""

    def __init__(self, fibers: Sequence[FiberSpec], sources: Sequence[DataSource]):
        self.fibers: tuple[FiberSpec, ...] = tuple(sorted(fibers, key=lambda f: f.fiber_id))
        self.sources: tuple[DataSource, ...] = tuple(sources)
        self._by_id = {s.source_id: s for s in self.sources}
        self._by_name = {s.name: s for s in self.sources}
        for s in self.sources:
            s.indices.setflags(write=False)
            s.values.setflags(write=False)

    @property
    def K(self) -> int:
        return len(self.fibers)

    @property
    def L(self) -> int:
        return len(self.sources)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.dim for f in self.fibers)

    def fiber_dim(self, fiber_id: int) -> int:
        return self.dims[fiber_id]

    def source(self, key: int | str) -> DataSource:
        try:
            return self._by_name[key] if isinstance(key, str) else self._by_id[key]
        except KeyError:
            raise KeyError(f"unknown source {key!r}") from None

    def source_shape(self, source: DataSource) -> tuple[int, ...]:
        return tuple(self.dims[f] for f in source.fibers)

    def density(self, key: int | str) -> float:
        src = self.source(key)
        return len(src) / math.prod(self.source_shape(src))

    def densities(self) -> dict[str, float]:
        return {s.name: self.density(s.source_id) for s in self.sources}

    def without_empty(self) -> "Schema":
        return Schema(self.fibers, [s for s in self.sources if len(s) > 0])

    def __repr__(self) -> str:
        srcs = ", ".join(f"{s.name}:{len(s)}" for s in self.sources)
        return f"Schema(K={self.K}, dims={self.dims}, sources=[{srcs}])"


def build_schema(fibers: Sequence[FiberSpec], sources: Sequence[DataSource]) -> Schema:
    """Validate fibers and sources and return an immutable :class:`Schema`."""
    ids = [f.fiber_id for f in fibers]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"duplicate fiber_id in {ids}")
    if sorted(ids) != list(range(len(ids))):
        raise SchemaError(f"fiber ids must be 0..K-1, got {sorted(ids)}")
    K = len(fibers)
    dims = {f.fiber_id: f.dim for f in fibers}

    if len(sources) > 2**K - K - 1:
        raise SchemaError(f"{len(sources)} sources exceed the bound 2^K-K-1 = {2**K - K - 1}")
    seen_sig, seen_id, seen_name = set(), set(), set()
    for src in sources:
        if src.source_id in seen_id:
            raise SchemaError(f"duplicate source_id {src.source_id}")
        if src.name in seen_name:
            raise SchemaError(f"duplicate source name {src.name!r}")
        seen_id.add(src.source_id)
        seen_name.add(src.name)
        if not 2 <= src.order <= K:
            raise SchemaError(f"source {src.name}: order {src.order} outside [2, {K}]")
        if len(set(src.fibers)) != src.order:
            raise SchemaError(f"source {src.name}: repeated fiber in {src.fibers}")
        missing = [f for f in src.fibers if f not in dims]
        if missing:
            raise SchemaError(f"source {src.name}: unknown fibers {missing}")
        sig = frozenset(src.fibers)
        if sig in seen_sig:
            raise SchemaError(f"source {src.name}: duplicate fiber signature {src.fibers}")
        seen_sig.add(sig)
        if src.loss_kind not in LOSS_KINDS:
            raise SchemaError(f"source {src.name}: unknown loss_kind {src.loss_kind!r}")
        _check_cells(src, tuple(dims[f] for f in src.fibers))
    return Schema(fibers, sources)


def _check_cells(src: DataSource, shape: tuple[int, ...]) -> None:
    idx = src.indices
    if idx.shape != (len(src.values), src.order):
        raise SchemaError(f"source {src.name}: indices shape {idx.shape} does not match values")
    if len(idx) == 0:
        return
    if idx.min() < 0 or np.any(idx >= np.asarray(shape)):
        bad = np.flatnonzero(np.any((idx < 0) | (idx >= np.asarray(shape)), axis=1))[0]
        raise SchemaError(
            f"source {src.name}: index {tuple(idx[bad])} out of range for shape {shape}"
        )
    flat = np.ravel_multi_index(idx.T, shape)
    if len(np.unique(flat)) != len(flat):
        raise SchemaError(f"source {src.name}: duplicate cells")
    if not np.all(np.isfinite(src.values)):
        raise SchemaError(f"source {src.name}: non-finite values")


def split(schema: Schema, train_fraction: float, seed: int) -> SplitPlan:
    """Split every source independently into train/test observation indices."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    per_source = {}
    for src in schema.sources:
        n = len(src)
        if n == 0:
            raise ValueError(f"source {src.name} has no observations")
        n_train = int(round(train_fraction * n))
        perm = rng.permutation(n)
        per_source[src.source_id] = (np.sort(perm[:n_train]), np.sort(perm[n_train:]))
    return SplitPlan(train_fraction, seed, per_source)


def minibatches(
    source: DataSource, index_list: np.ndarray, batch_size: int, seed: int, epoch: int
) -> Iterator[np.ndarray]:
    """Yield one epoch of shuffled minibatches of ``index_list``.

    Batches hold observation indices into ``source``; the shuffle is a pure
    function of ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    index_list = np.asarray(index_list)
    if len(index_list) == 0:
        raise ValueError(f"empty index list for source {source.name}")
    rng = np.random.default_rng([seed, source.source_id, epoch])
    perm = index_list[rng.permutation(len(index_list))]
    for start in range(0, len(perm), batch_size):
        yield perm[start:start + batch_size]


# ---------------------------------------------------------------- file io


def schema_to_dict(schema: Schema) -> dict:
    return {
        "fibers": [{"fiber_id": f.fiber_id, "dim": f.dim, "label": f.label} for f in schema.fibers],
        "sources": [
            {"source_id": s.source_id, "name": s.name, "fibers": list(s.fibers), "loss_kind": s.loss_kind}
            for s in schema.sources
        ],
    }


def write_schema_json(schema: Schema, path: str | Path) -> None:
    Path(path).write_text(json.dumps(schema_to_dict(schema), indent=2))


def read_schema_json(path: str | Path) -> tuple[list[FiberSpec], list[DataSource]]:
    """Read a schema declaration; returned sources carry no observations."""
    cfg = json.loads(Path(path).read_text())
    return parse_schema_dict(cfg)


def parse_schema_dict(cfg: dict) -> tuple[list[FiberSpec], list[DataSource]]:
    try:
        fibers = [FiberSpec(int(f["fiber_id"]), int(f["dim"]), f.get("label", "")) for f in cfg["fibers"]]
        sources = [
            DataSource(
                int(s["source_id"]),
                tuple(s["fibers"]),
                loss_kind=s.get("loss_kind", "squared"),
                name=s.get("name", ""),
            )
            for s in cfg["sources"]
        ]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed schema declaration: {exc}") from exc
    return fibers, sources


def write_observations_csv(schema: Schema, path: str | Path) -> None:
    """Write all observations as ``source_id,idx_1,...,idx_k,value`` rows."""
    with open(path, "w", newline="") as fh:
        for src in schema.sources:
            for idx, val in zip(src.indices.tolist(), src.values.tolist()):
                fh.write(f"{src.source_id},{','.join(map(str, idx))},{val!r}\n")


def read_observation_rows(
    path: str | Path, sources: Sequence[DataSource]
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Parse ``source_id,idx...,value`` rows into per-source index and value arrays.

    Only the row format is checked here; ranges and duplicates are the
    schema's job.
    """
    by_id = {s.source_id: s for s in sources}
    rows: dict[int, tuple[list, list]] = {sid: ([], []) for sid in by_id}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                sid = int(row[0])
                src = by_id[sid]
            except (ValueError, KeyError):
                raise SchemaError(f"{path}:{lineno}: unknown or malformed source id {row[0]!r}") from None
            if len(row) != src.order + 2:
                raise SchemaError(
                    f"{path}:{lineno}: expected {src.order + 2} fields for source {src.name}, got {len(row)}"
                )
            try:
                idx = [int(x) for x in row[1:-1]]
                val = float(row[-1])
            except ValueError:
                raise SchemaError(f"{path}:{lineno}: malformed row {row!r}") from None
            rows[sid][0].append(idx)
            rows[sid][1].append(val)
    return {
        sid: (np.asarray(idx, dtype=np.int64).reshape(-1, by_id[sid].order), np.asarray(vals, dtype=np.float64))
        for sid, (idx, vals) in rows.items()
    }


def load_observations_csv(
    path: str | Path, fibers: Sequence[FiberSpec], sources: Sequence[DataSource]
) -> Schema:
    """Populate ``sources`` from a CSV file and return the validated schema.

    Observations already present on the sources are kept; file rows are
    appended after them.
    """
    parsed = read_observation_rows(path, sources)
    filled = []
    for src in sources:
        new_idx, new_vals = parsed[src.source_id]
        filled.append(
            DataSource(
                src.source_id,
                src.fibers,
                np.concatenate([src.indices.reshape(-1, src.order), new_idx]),
                np.concatenate([src.values, new_vals]),
                src.loss_kind,
                src.name,
            )
        )
    return build_schema(fibers, filled)


def load_dataset(schema_json: str | Path, observations_csv: str | Path) -> Schema:
    fibers, sources = read_schema_json(schema_json)
    return load_observations_csv(observations_csv, fibers, sources)


def save_dataset(schema: Schema, outdir: str | Path) -> tuple[Path, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    sj, oc = outdir / "schema.json", outdir / "observations.csv"
    write_schema_json(schema, sj)
    write_observations_csv(schema, oc)
    return sj, oc
