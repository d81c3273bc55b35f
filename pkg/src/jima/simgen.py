"""Synthetic multi-level preference data with planted item compatibility.

Three-way setting (user, top, bottom)::

    utb = <x,u> + <x,v> + 2<u,v> + e     ut = <x,u> + e
    ub  = <x,v> + e                      tb = <u,v>          (noise-free)

Four-way setting (user, top, bottom, hat) with sources utbh, utb, ut, ub, uh,
where every item pair inside a composite contributes ``2 * <a,b>``.
All latent vectors are i.i.d. N(0, I_r); noise is N(0, noise_sd**2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .obs_store import DataSource, FiberSpec, Schema, build_schema


@dataclass(frozen=True)
class SimSpec3:
    N: int
    T: int
    B: int
    r: int = 5
    noise_sd: float = 0.1
    interaction_weight: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if min(self.N, self.T, self.B, self.r) < 1:
            raise ValueError("entity counts and r must be >= 1")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")


@dataclass(frozen=True)
class SimSpec4:
    n: tuple[int, int, int, int]
    r: int = 5
    noise_sd: float = 0.1
    interaction_weight: float = 2.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        if len(self.n) != 4 or min(self.n) < 1 or self.r < 1:
            raise ValueError("need four entity counts >= 1 and r >= 1")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")


@dataclass
class SimData:
    schema: Schema
    factors: list[np.ndarray]
    # noise-free value of every source, as dense arrays over the source shape
    truth: dict[str, np.ndarray] = field(default_factory=dict)


def _full_source(sid: int, name: str, fibers: tuple[int, ...], dense: np.ndarray) -> DataSource:
    idx = np.indices(dense.shape).reshape(dense.ndim, -1).T
    return DataSource(sid, fibers, idx, dense.ravel(), name=name)


def gen_three_way(spec: SimSpec3, factors: list[np.ndarray] | None = None) -> SimData:
    """Fully observed utb tensor plus ut, ub, tb matrices."""
    rng = np.random.default_rng(spec.seed)
    if factors is None:
        x = rng.standard_normal((spec.N, spec.r))
        u = rng.standard_normal((spec.T, spec.r))
        v = rng.standard_normal((spec.B, spec.r))
    else:
        x, u, v = (np.asarray(f, dtype=np.float64) for f in factors)
    xu, xv, uv = x @ u.T, x @ v.T, u @ v.T
    w = spec.interaction_weight
    truth = {
        "utb": xu[:, :, None] + xv[:, None, :] + w * uv[None, :, :],
        "ut": xu,
        "ub": xv,
        "tb": uv,
    }
    sd = spec.noise_sd
    observed = {
        "utb": truth["utb"] + sd * rng.standard_normal(truth["utb"].shape),
        "ut": truth["ut"] + sd * rng.standard_normal(truth["ut"].shape),
        "ub": truth["ub"] + sd * rng.standard_normal(truth["ub"].shape),
        "tb": truth["tb"].copy(),
    }
    fibers = [FiberSpec(0, spec.N, "user"), FiberSpec(1, spec.T, "top"), FiberSpec(2, spec.B, "bottom")]
    layout = {"utb": (0, 1, 2), "ut": (0, 1), "ub": (0, 2), "tb": (1, 2)}
    sources = [_full_source(i, name, layout[name], observed[name]) for i, name in enumerate(layout)]
    return SimData(build_schema(fibers, sources), [x, u, v], truth)


def gen_four_way(spec: SimSpec4, factors: list[np.ndarray] | None = None) -> SimData:
    """Fully observed utbh and utb tensors plus ut, ub, uh matrices."""
    rng = np.random.default_rng(spec.seed)
    if factors is None:
        fs = [rng.standard_normal((n, spec.r)) for n in spec.n]
    else:
        fs = [np.asarray(f, dtype=np.float64) for f in factors]
    x1, x2, x3, x4 = fs
    w = spec.interaction_weight
    p12, p13, p14 = x1 @ x2.T, x1 @ x3.T, x1 @ x4.T
    p23, p24, p34 = x2 @ x3.T, x2 @ x4.T, x3 @ x4.T
    utb = p12[:, :, None] + p13[:, None, :] + w * p23[None, :, :]
    utbh = (
        utb[..., None]
        + p14[:, None, None, :]
        + w * p24[None, :, None, :]
        + w * p34[None, None, :, :]
    )
    truth = {"utbh": utbh, "utb": utb, "ut": p12, "ub": p13, "uh": p14}
    sd = spec.noise_sd
    observed = {k: t + sd * rng.standard_normal(t.shape) for k, t in truth.items()}
    fibers = [
        FiberSpec(0, spec.n[0], "user"),
        FiberSpec(1, spec.n[1], "top"),
        FiberSpec(2, spec.n[2], "bottom"),
        FiberSpec(3, spec.n[3], "hat"),
    ]
    layout = {"utbh": (0, 1, 2, 3), "utb": (0, 1, 2), "ut": (0, 1), "ub": (0, 2), "uh": (0, 3)}
    sources = [_full_source(i, name, layout[name], observed[name]) for i, name in enumerate(layout)]
    return SimData(build_schema(fibers, sources), fs, truth)


def oracle_predict(data: SimData, source: str, cells: np.ndarray) -> np.ndarray:
    """Noise-free generator value at the given cells."""
    t = data.truth[source]
    return t[tuple(np.asarray(cells).T)]


def generate(spec: SimSpec3 | SimSpec4) -> SimData:
    if isinstance(spec, SimSpec3):
        return gen_three_way(spec)
    return gen_four_way(spec)


def spec_from_dict(d: dict, seed: int | None = None) -> SimSpec3 | SimSpec4:
    """Build a generator spec from ``{"kind": "three_way"|"four_way", "shape": [...], ...}``."""
    kind = d.get("kind", "three_way" if len(d["shape"]) == 3 else "four_way")
    extra = {k: d[k] for k in ("r", "noise_sd", "interaction_weight") if k in d}
    s = int(d.get("seed", 0) if seed is None else seed)
    if kind == "three_way":
        N, T, B = d["shape"]
        return SimSpec3(int(N), int(T), int(B), seed=s, **extra)
    if kind == "four_way":
        return SimSpec4(tuple(d["shape"]), seed=s, **extra)
    raise ValueError(f"unknown generator kind {kind!r}")
