"""Loader for user-outfit / user-top / user-bottom / top-bottom rating files.

A JSON manifest names one CSV file per role::

    {
      "roles": {"utb": "utb.csv", "ut": "ut.csv", "ub": "ub.csv", "tb": "tb.csv"},
      "scale": [1, 5, 0.5],
      "dims": {"user": 386, "top": 50, "bottom": 50}
    }

Each file uses the observation CSV cell format (``source_id,idx...,value``)
with source ids utb=0, ut=1, ub=2, tb=3. ``dims`` may be omitted, in which
case they are inferred from the largest index seen. The tb file may be empty
or absent; the resulting schema then has three sources.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .obs_store import DataSource, FiberSpec, Schema, SchemaError, build_schema, read_observation_rows

log = logging.getLogger(__name__)

ROLES = {"utb": (0, (0, 1, 2)), "ut": (1, (0, 1)), "ub": (2, (0, 2)), "tb": (3, (1, 2))}
FIBER_LABELS = ("user", "top", "bottom")


@dataclass
class RatingsLayout:
    paths: dict[str, Path | None]
    scale: tuple[float, float, float] = (1.0, 5.0, 0.5)
    dims: tuple[int, int, int] | None = None

    @classmethod
    def from_manifest(cls, path: str | Path) -> "RatingsLayout":
        path = Path(path)
        cfg = json.loads(path.read_text())
        roles = cfg.get("roles", {})
        unknown = set(roles) - set(ROLES)
        if unknown:
            raise SchemaError(f"unknown roles in manifest: {sorted(unknown)}")
        paths = {r: (path.parent / roles[r]) if roles.get(r) else None for r in ROLES}
        dims = cfg.get("dims")
        if isinstance(dims, dict):
            dims = tuple(int(dims[label]) for label in FIBER_LABELS)
        return cls(paths, tuple(cfg.get("scale", (1.0, 5.0, 0.5))), tuple(dims) if dims else None)


@dataclass
class LoadedRatings:
    schema: Schema
    densities: dict[str, float]


def _read_role(path: Path | None, role: str) -> tuple[np.ndarray, np.ndarray]:
    sid, fibers = ROLES[role]
    empty = (np.zeros((0, len(fibers)), dtype=np.int64), np.zeros(0))
    if path is None or not path.exists() or path.stat().st_size == 0:
        if path is not None and not path.exists():
            raise FileNotFoundError(path)
        return empty
    idx, vals = read_observation_rows(path, [DataSource(sid, fibers, name=role)])[sid]
    if len(idx) and idx.min() < 0:
        raise SchemaError(f"{role}: negative index in {path}")
    return idx, vals


def load_ratings(layout: RatingsLayout) -> LoadedRatings:
    """Build the user/top/bottom schema and report observed densities."""
    lo, hi, _step = layout.scale
    cells = {role: _read_role(layout.paths.get(role), role) for role in ROLES}
    inferred = [0, 0, 0]
    for role, (idx, vals) in cells.items():
        if len(vals) and (vals.min() < lo or vals.max() > hi):
            bad = vals[(vals < lo) | (vals > hi)][0]
            raise SchemaError(f"{role}: value {bad} outside rating scale [{lo}, {hi}]")
        for j, f in enumerate(ROLES[role][1]):
            if len(idx):
                inferred[f] = max(inferred[f], int(idx[:, j].max()) + 1)
    if layout.dims is not None:
        for f, (d, need) in enumerate(zip(layout.dims, inferred)):
            if need > d:
                raise SchemaError(f"dimension conflict on {FIBER_LABELS[f]}: declared {d}, files need {need}")
        dims = layout.dims
    else:
        dims = tuple(max(1, d) for d in inferred)
    fibers = [FiberSpec(k, dims[k], FIBER_LABELS[k]) for k in range(3)]
    sources = [
        DataSource(ROLES[role][0], ROLES[role][1], idx, vals, name=role)
        for role, (idx, vals) in cells.items()
        if len(vals)
    ]
    schema = build_schema(fibers, sources)
    dens = schema.densities()
    for name, d in dens.items():
        log.info("%s: %d cells observed (%.2f%%)", name, len(schema.source(name)), 100 * d)
    return LoadedRatings(schema, dens)


def load_ratings_manifest(path: str | Path) -> LoadedRatings:
    return load_ratings(RatingsLayout.from_manifest(path))


# Counts of the offline fashion study; used only to size synthetic files.
STUDY_DIMS = (386, 50, 50)
STUDY_COUNTS = {"utb": 16254, "ut": 4712, "ub": 4569, "tb": 2500}


def write_synthetic_ratings(
    outdir: str | Path,
    dims: tuple[int, int, int] = STUDY_DIMS,
    counts: dict[str, int] | None = None,
    seed: int = 0,
    r: int = 5,
) -> Path:
    """Write schema-conformant SYNTHETIC rating files plus a manifest.

    These are not study data: values come from a latent-factor model with
    planted top/bottom compatibility, shifted onto the 1..5 scale, clamped,
    and rounded to half points (tb values are left as unrounded means).
    """
    counts = dict(STUDY_COUNTS if counts is None else counts)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    x, u, v = (rng.standard_normal((n, r)) / np.sqrt(r) for n in dims)
    scores = {
        "utb": lambda c: (x[c[:, 0]] * u[c[:, 1]]).sum(1) + (x[c[:, 0]] * v[c[:, 2]]).sum(1)
        + 2 * (u[c[:, 1]] * v[c[:, 2]]).sum(1),
        "ut": lambda c: (x[c[:, 0]] * u[c[:, 1]]).sum(1),
        "ub": lambda c: (x[c[:, 0]] * v[c[:, 1]]).sum(1),
        "tb": lambda c: (u[c[:, 0]] * v[c[:, 1]]).sum(1),
    }
    roles = {}
    for role, (sid, fibers) in ROLES.items():
        shape = tuple(dims[f] for f in fibers)
        total = int(np.prod(shape))
        n = min(counts.get(role, 0), total)
        flat = np.sort(rng.choice(total, size=n, replace=False))
        c = np.stack(np.unravel_index(flat, shape), axis=1)
        val = 3.0 + scores[role](c) + 0.3 * rng.standard_normal(n)
        val = np.clip(val, 1.0, 5.0)
        if role != "tb":
            val = np.round(val * 2) / 2
        fname = f"{role}.csv"
        with open(outdir / fname, "w") as fh:
            for cell, value in zip(c.tolist(), val.tolist()):
                fh.write(f"{sid},{','.join(map(str, cell))},{value!r}\n")
        roles[role] = fname
    manifest = {
        "note": "SYNTHETIC rating files for pipeline testing; not study data",
        "roles": roles,
        "scale": [1, 5, 0.5],
        "dims": dict(zip(FIBER_LABELS, dims)),
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
