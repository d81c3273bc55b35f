"""Joint interaction model over shared latent factors.

Every entity along every fiber owns one ``r``-dimensional embedding row.
Each modelled source ``l`` has its own feed-forward head which reads the
embeddings of the entities in a cell, optionally followed by all their
element-wise interaction products, and predicts the cell value. All heads
are trained together against the sum of per-source mean losses.

The single-source, no-interaction configurations are neural collaborative
filtering (matrix source) and neural tensor factorization (tensor source).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .nn_core import (
    DEFAULT_HIDDEN,
    AdamState,
    Mlp,
    NonFiniteError,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
)
from .obs_store import DataSource, Schema, SplitPlan, minibatches

log = logging.getLogger(__name__)

MODEL_FORMAT = "jima-model/1"


class TrainingDiverged(NonFiniteError):
    pass


# ------------------------------------------------------------ interactions


def subset_masks(k: int) -> list[int]:
    """Bitmasks of all subsets of ``k`` inputs with at least two members, ascending."""
    return [m for m in range(1, 1 << k) if bin(m).count("1") >= 2]


def _members(mask: int, k: int) -> list[int]:
    return [j for j in range(k) if mask >> j & 1]


def interaction_blocks(vectors: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Element-wise products for every subset of size >= 2 (rows may be batched)."""
    k = len(vectors)
    if k < 2:
        raise ValueError(f"need at least two vectors, got {k}")
    shape = np.shape(vectors[0])
    if any(np.shape(v) != shape for v in vectors):
        raise ValueError("interaction inputs must have equal shapes")
    blocks = []
    for mask in subset_masks(k):
        idx = _members(mask, k)
        p = vectors[idx[0]] * vectors[idx[1]]
        for j in idx[2:]:
            p = p * vectors[j]
        blocks.append(p)
    return blocks


def interaction_features(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenated interaction blocks, length ``(2**k - k - 1) * r``."""
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    return np.concatenate(interaction_blocks(vectors), axis=-1)


def head_input_dim(order: int, r: int, use_interactions: bool) -> int:
    return ((1 << order) - 1) * r if use_interactions else order * r


def _interaction_backward(
    vectors: Sequence[np.ndarray], block_grads: Sequence[np.ndarray]
) -> list[np.ndarray]:
    k = len(vectors)
    out = [np.zeros_like(v) for v in vectors]
    for mask, g in zip(subset_masks(k), block_grads):
        idx = _members(mask, k)
        for j in idx:
            p = g
            for i in idx:
                if i != j:
                    p = p * vectors[i]
            out[j] += p
    return out


# ------------------------------------------------------------------ config


@dataclass
class ModelConfig:
    sources: tuple = ()
    r: int = 5
    use_interactions: bool = True
    head_hidden: tuple[int, ...] = DEFAULT_HIDDEN
    lambdas: float | dict = 1e-4
    embedding_lambda: float = 1e-4
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 200
    batch_size: int = 256
    seed: int = 0
    init_scale: float = 0.1
    clamp_range: tuple[float, float] | None = None

    def __post_init__(self):
        self.sources = tuple(self.sources)
        self.head_hidden = tuple(self.head_hidden)
        if self.clamp_range is not None:
            self.clamp_range = tuple(self.clamp_range)
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.embedding_lambda < 0:
            raise ValueError("embedding_lambda must be non-negative")

    def lambda_for(self, name: str, order: int | None = None) -> float:
        """Head penalty for a source: by name, else by ``"matrix"``/``"tensor"`` key, else 1e-4."""
        lam = self.lambdas
        if isinstance(lam, Mapping):
            kind = None if order is None else ("matrix" if order == 2 else "tensor")
            lam = lam.get(name, lam.get(kind, 1e-4))
        if lam < 0:
            raise ValueError(f"negative penalty weight for {name}")
        return float(lam)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class _SourceLayout:
    source_id: int
    name: str
    fibers: tuple[int, ...]
    loss_kind: str


@dataclass
class TrainResult:
    model: "JointModel"
    epoch_loss: list[float]
    steps: int


@dataclass
class ColdStartResult:
    value: float
    trained_by: dict[tuple[int, int], list[str]]
    untrained: list[tuple[int, int]] = field(default_factory=list)


# ------------------------------------------------------------------- model


class JointModel:
    """Embedding tables and per-source heads packed into one parameter vector.

    ``factors[k]`` and every head layer are views into ``params``; the
    gradient buffer ``grad`` shares the same layout, so one Adam update
    covers the whole model.
    """

    def __init__(self, schema: Schema, config: ModelConfig):
        if not config.sources:
            config.sources = tuple(s.name for s in schema.sources)
        self.config = config
        self.dims = schema.dims
        self.layouts: dict[int, _SourceLayout] = {}
        for key in config.sources:
            src = schema.source(key)
            self.layouts[src.source_id] = _SourceLayout(src.source_id, src.name, src.fibers, src.loss_kind)
        self._name_to_id = {lay.name: sid for sid, lay in self.layouts.items()}

        rng = np.random.default_rng([config.seed, 0x5EED])
        r = config.r
        init_factors = [rng.normal(0.0, config.init_scale, size=(d, r)) for d in self.dims]
        init_heads = {
            sid: init_mlp(head_input_dim(len(lay.fibers), r, config.use_interactions), config.head_hidden, rng)
            for sid, lay in self.layouts.items()
        }
        self._pack(init_factors, init_heads)
        self._coverage: list[np.ndarray] = [np.zeros((d, 0), dtype=bool) for d in self.dims]
        self._coverage_names: list[str] = []

    # -- layout

    def _pack(self, factors: list[np.ndarray], heads: dict[int, Mlp]) -> None:
        arrays = list(factors) + [p for h in heads.values() for p in h.parameters()]
        total = sum(a.size for a in arrays)
        self.params = np.empty(total)
        self.grad = np.zeros(total)
        self.lam_vec = np.zeros(total)
        off = 0

        def take(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, slice]:
            nonlocal off
            sl = slice(off, off + a.size)
            off += a.size
            self.params[sl] = a.ravel()
            return self.params[sl].reshape(a.shape), self.grad[sl].reshape(a.shape), sl

        self.factors, self.factor_grads, self._factor_slices = [], [], []
        for a in factors:
            p, g, sl = take(a)
            self.factors.append(p)
            self.factor_grads.append(g)
            self._factor_slices.append(sl)
        self.heads: dict[int, Mlp] = {}
        self._head_grads: dict[int, list[np.ndarray]] = {}
        self._head_slices: dict[int, slice] = {}
        for sid, head in heads.items():
            start = off
            grads = []
            for layer in head.layers:
                layer.weights, gw, _ = take(layer.weights)
                layer.bias, gb, _ = take(layer.bias)
                grads += [gw, gb]
            self.heads[sid] = head
            self._head_grads[sid] = grads
            self._head_slices[sid] = slice(start, off)
            lay = self.layouts[sid]
            self.lam_vec[start:off] = self.config.lambda_for(lay.name, len(lay.fibers))

    def source_id(self, key: int | str) -> int:
        sid = self._name_to_id.get(key, key) if isinstance(key, str) else key
        if sid not in self.layouts:
            raise KeyError(f"source {key!r} is not modelled by this configuration")
        return sid

    @property
    def source_names(self) -> list[str]:
        return [lay.name for lay in self.layouts.values()]

    def used_fibers(self) -> list[int]:
        return sorted({f for lay in self.layouts.values() for f in lay.fibers})

    def n_params(self) -> int:
        """Head parameters plus embedding tables of the fibers the model touches."""
        emb = sum(self.factors[f].size for f in self.used_fibers())
        return emb + sum(h.n_params() for h in self.heads.values())

    def _bump(self) -> None:
        for h in self.heads.values():
            h.mark_updated()

    # -- forward

    def _head_input(self, sid: int, idx: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        lay = self.layouts[sid]
        vecs = [self.factors[f][idx[:, j]] for j, f in enumerate(lay.fibers)]
        parts = list(vecs)
        if self.config.use_interactions:
            parts += interaction_blocks(vecs)
        return np.concatenate(parts, axis=1), vecs

    def _check_idx(self, sid: int, idx: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
        fibers = self.layouts[sid].fibers
        if idx.shape[1] != len(fibers):
            raise ValueError(f"expected {len(fibers)} indices per cell, got {idx.shape[1]}")
        hi = np.asarray([self.dims[f] for f in fibers])
        if np.any(idx < 0) or np.any(idx >= hi):
            raise IndexError(f"index out of range for source shape {tuple(hi)}")
        return idx

    def _output(self, sid: int, raw: np.ndarray) -> np.ndarray:
        if self.layouts[sid].loss_kind == "cross_entropy":
            raw = 1.0 / (1.0 + np.exp(-raw))
        if self.config.clamp_range is not None:
            raw = np.clip(raw, *self.config.clamp_range)
        return raw

    def predict_batch(self, source: int | str, idx: np.ndarray) -> np.ndarray:
        sid = self.source_id(source)
        idx = self._check_idx(sid, idx)
        x, _ = self._head_input(sid, idx)
        out, _ = mlp_forward(self.heads[sid], x)
        return self._output(sid, out)

    # -- objective

    def multi_task_loss(
        self, batches: Mapping[int, tuple[np.ndarray, np.ndarray]]
    ) -> tuple[float, np.ndarray]:
        """Loss and flat gradient for one batch ``(cells, values)`` per source.

        The returned gradient is the model's own buffer; it is overwritten by
        the next call.
        """
        self.grad[:] = 0.0
        total = 0.0
        touched: dict[int, list[np.ndarray]] = {}
        for sid, (idx, y) in batches.items():
            if len(y) == 0:
                continue
            lay = self.layouts[sid]
            x, vecs = self._head_input(sid, idx)
            out, cache = mlp_forward(self.heads[sid], x, check_finite=False)
            n = len(y)
            if lay.loss_kind == "cross_entropy":
                p = 1.0 / (1.0 + np.exp(-out))
                total += float(np.mean(np.logaddexp(0.0, out) - y * out))
                g_out = (p - y) / n
            else:
                resid = out - y
                total += float(resid @ resid) / n
                g_out = 2.0 * resid / n
            grads = mlp_backward(self.heads[sid], cache, g_out)
            for dst, src in zip(self._head_grads[sid], grads.parameters()):
                dst += src
            r = self.config.r
            k = len(lay.fibers)
            gin = grads.input
            g_vecs = [gin[:, j * r:(j + 1) * r] for j in range(k)]
            if self.config.use_interactions:
                nb = len(subset_masks(k))
                blocks = [gin[:, (k + b) * r:(k + b + 1) * r] for b in range(nb)]
                extra = _interaction_backward(vecs, blocks)
                g_vecs = [a + b for a, b in zip(g_vecs, extra)]
            for j, f in enumerate(lay.fibers):
                np.add.at(self.factor_grads[f], idx[:, j], g_vecs[j])
                touched.setdefault(f, []).append(idx[:, j])

        # head penalties only for heads taking part in this step
        for sid, (_, y) in batches.items():
            if len(y) == 0:
                continue
            sl = self._head_slices[sid]
            p, lam = self.params[sl], self.lam_vec[sl]
            total += float(np.sum(lam * p * p))
            self.grad[sl] += 2.0 * lam * p

        lam_e = self.config.embedding_lambda
        if lam_e > 0:
            for f, rows in touched.items():
                rows = np.unique(np.concatenate(rows))
                emb = self.factors[f][rows]
                total += lam_e * float(np.sum(emb * emb))
                self.factor_grads[f][rows] += 2.0 * lam_e * emb
        if not math.isfinite(total):
            raise TrainingDiverged("non-finite loss")
        return total, self.grad

    # -- persistence

    def save(self, path: str | Path) -> None:
        meta = {
            "format": MODEL_FORMAT,
            "config": asdict(self.config),
            "dims": list(self.dims),
            "layouts": [asdict(lay) for lay in self.layouts.values()],
            "coverage_names": self._coverage_names,
        }
        cov = {f"coverage_{k}": c for k, c in enumerate(self._coverage)}
        with open(path, "wb") as fh:
            np.savez(fh, params=self.params, meta=np.asarray(json.dumps(meta)), **cov)

    @classmethod
    def load(cls, path: str | Path) -> "JointModel":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("format") != MODEL_FORMAT:
                raise ValueError(f"unsupported model format {meta.get('format')!r}")
            params = z["params"].copy()
            coverage = [z[f"coverage_{k}"].copy() for k in range(len(meta["dims"]))]
        model = cls.__new__(cls)
        cfg = ModelConfig.from_dict(meta["config"])
        model.config = cfg
        model.dims = tuple(meta["dims"])
        model.layouts = {}
        for d in meta["layouts"]:
            lay = _SourceLayout(d["source_id"], d["name"], tuple(d["fibers"]), d["loss_kind"])
            model.layouts[lay.source_id] = lay
        model._name_to_id = {lay.name: sid for sid, lay in model.layouts.items()}
        rng = np.random.default_rng(0)
        factors = [np.zeros((d, cfg.r)) for d in model.dims]
        heads = {
            sid: init_mlp(head_input_dim(len(lay.fibers), cfg.r, cfg.use_interactions), cfg.head_hidden, rng)
            for sid, lay in model.layouts.items()
        }
        model._pack(factors, heads)
        if params.shape != model.params.shape:
            raise ValueError("parameter vector does not match the stored layout")
        model.params[:] = params
        model._coverage = coverage
        model._coverage_names = list(meta["coverage_names"])
        return model


# --------------------------------------------------------------- operations


def build_model(schema: Schema, config: ModelConfig) -> JointModel:
    return JointModel(schema, config)


def predict(model: JointModel, source: int | str, index_tuple: Sequence[int]) -> float:
    return float(model.predict_batch(source, np.asarray(index_tuple)[None, :])[0])


def multi_task_loss(
    model: JointModel, batches: Mapping[int, tuple[np.ndarray, np.ndarray]]
) -> tuple[float, np.ndarray]:
    return model.multi_task_loss(batches)


def _batch_stream(
    src: DataSource, train_idx: np.ndarray, batch_size: int, seed: int
) -> Iterator[np.ndarray]:
    epoch = 0
    while True:
        yield from minibatches(src, train_idx, batch_size, seed, epoch)
        epoch += 1


def train(model: JointModel, schema: Schema, split_plan: SplitPlan) -> TrainResult:
    """Minimize the multi-task objective with Adam.

    Each optimization step draws one minibatch from every modelled source
    with training data; an epoch is one pass over the largest source while
    smaller sources recycle through fresh shuffles.
    """
    cfg = model.config
    active: dict[int, DataSource] = {}
    train_idx: dict[int, np.ndarray] = {}
    for sid in model.layouts:
        if sid not in split_plan.per_source:
            raise KeyError(f"split plan does not cover source {model.layouts[sid].name}")
        tr = split_plan.train(sid)
        if len(tr) == 0:
            log.info("source %s has no training data; its loss is dropped", model.layouts[sid].name)
            continue
        active[sid] = schema.source(sid)
        train_idx[sid] = tr

    model._coverage_names = [model.layouts[sid].name for sid in active]
    model._coverage = [np.zeros((d, len(active)), dtype=bool) for d in model.dims]
    for c, (sid, src) in enumerate(active.items()):
        cells = src.indices[train_idx[sid]]
        for j, f in enumerate(src.fibers):
            model._coverage[f][cells[:, j], c] = True

    if not active or cfg.epochs == 0:
        return TrainResult(model, [], 0)

    streams = {sid: _batch_stream(active[sid], train_idx[sid], cfg.batch_size, cfg.seed) for sid in active}
    steps_per_epoch = max(math.ceil(len(t) / cfg.batch_size) for t in train_idx.values())
    state = AdamState(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    params = [model.params]
    epoch_loss = []
    steps = 0
    for epoch in range(cfg.epochs):
        acc = 0.0
        for _ in range(steps_per_epoch):
            batches = {}
            for sid, stream in streams.items():
                b = next(stream)
                src = active[sid]
                batches[sid] = (src.indices[b], src.values[b])
            try:
                loss, grad = model.multi_task_loss(batches)
                adam_step(params, [grad], state)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"diverged at epoch {epoch}, step {steps}: {exc}") from exc
            model._bump()
            acc += loss
            steps += 1
        epoch_loss.append(acc / steps_per_epoch)
    return TrainResult(model, epoch_loss, steps)


def evaluate(
    model: JointModel,
    schema: Schema,
    split_plan: SplitPlan,
    metrics: Sequence[str] = ("rmse", "mae"),
    sources: Sequence[int | str] | None = None,
) -> dict[str, dict[str, float]]:
    """Per-source test-set RMSE / MAE keyed by source name."""
    keys = sources if sources is not None else list(model.layouts)
    out = {}
    for key in keys:
        sid = model.source_id(key)
        src = schema.source(sid)
        test = split_plan.test(sid)
        if len(test) == 0:
            raise ValueError(f"source {src.name} has an empty test set")
        pred = model.predict_batch(sid, src.indices[test])
        out[src.name] = error_metrics(src.values[test], pred, metrics)
    return out


def error_metrics(y: np.ndarray, pred: np.ndarray, metrics: Sequence[str] = ("rmse", "mae")) -> dict[str, float]:
    err = np.asarray(pred, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    res = {}
    for m in metrics:
        if m == "rmse":
            res[m] = float(np.sqrt(np.mean(err * err)))
        elif m == "mae":
            res[m] = float(np.mean(np.abs(err)))
        else:
            raise ValueError(f"unknown metric {m!r}")
    return res


def cold_start_predict(model: JointModel, source: int | str, index_tuple: Sequence[int]) -> ColdStartResult:
    """Predict a cell and report which training sources shaped each entity's embedding."""
    sid = model.source_id(source)
    value = predict(model, sid, index_tuple)
    trained_by, untrained = {}, []
    for f, m in zip(model.layouts[sid].fibers, index_tuple):
        cov = model._coverage[f][m] if model._coverage[f].shape[1] else np.zeros(0, dtype=bool)
        names = [n for n, hit in zip(model._coverage_names, cov) if hit]
        trained_by[(f, int(m))] = names
        if not names:
            untrained.append((f, int(m)))
    if untrained:
        log.warning("entities %s have no training observations; prediction uses initial embeddings", untrained)
    return ColdStartResult(value, trained_by, untrained)


def ncf_config(source: str, **kw) -> ModelConfig:
    return ModelConfig(sources=(source,), use_interactions=False, **kw)


def ntf_config(source: str, **kw) -> ModelConfig:
    return ModelConfig(sources=(source,), use_interactions=False, **kw)
