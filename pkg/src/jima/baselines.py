"""Non-neural baselines: global mean, matrix factorization, masked CP-ALS."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .nn_core import AdamState, NonFiniteError, adam_step
from .obs_store import DataSource, SplitPlan, minibatches

log = logging.getLogger(__name__)


@dataclass
class GmiModel:
    mean: float

    def predict(self, cells: np.ndarray) -> np.ndarray:
        return np.full(len(cells), self.mean)


def gmi_fit_predict(train_values: np.ndarray) -> GmiModel:
    train_values = np.asarray(train_values, dtype=np.float64)
    if train_values.size == 0:
        raise ValueError("global mean needs at least one training value")
    return GmiModel(float(train_values.mean()))


# --------------------------------------------------------------------- MF


@dataclass
class MfModel:
    a: np.ndarray
    b: np.ndarray
    lam: float
    trained: bool = False
    epoch_loss: list[float] = field(default_factory=list)

    @property
    def r(self) -> int:
        return self.a.shape[1]

    def predict(self, cells: np.ndarray) -> np.ndarray:
        cells = np.asarray(cells)
        return np.einsum("ij,ij->i", self.a[cells[:, 0]], self.b[cells[:, 1]])


def mf_objective(model: MfModel, cells: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean over cells of squared error plus ``lam * (|a_i|^2 + |b_j|^2)``, with gradients."""
    ai, bj = model.a[cells[:, 0]], model.b[cells[:, 1]]
    resid = np.einsum("ij,ij->i", ai, bj) - y
    n = len(y)
    lam = model.lam
    loss = (float(resid @ resid) + lam * float(np.sum(ai * ai) + np.sum(bj * bj))) / n
    ga = np.zeros_like(model.a)
    gb = np.zeros_like(model.b)
    np.add.at(ga, cells[:, 0], (2.0 * resid[:, None] * bj + 2.0 * lam * ai) / n)
    np.add.at(gb, cells[:, 1], (2.0 * resid[:, None] * ai + 2.0 * lam * bj) / n)
    return loss, ga, gb


def mf_fit(
    source: DataSource,
    split_plan: SplitPlan,
    shape: tuple[int, int],
    r: int = 5,
    lam: float = 0.02,
    epochs: int = 20,
    batch_size: int = 256,
    learning_rate: float = 1e-3,
    init_scale: float = 0.1,
    seed: int = 0,
    full_batch: bool = False,
) -> MfModel:
    """Fit ``y_ij ~ <a_i, b_j>`` on the training cells of a matrix source with Adam."""
    if source.order != 2:
        raise ValueError(f"matrix factorization needs an order-2 source, got order {source.order}")
    if r < 1:
        raise ValueError("r must be >= 1")
    rng = np.random.default_rng([seed, 0xAF])
    model = MfModel(
        rng.normal(0.0, init_scale, size=(shape[0], r)),
        rng.normal(0.0, init_scale, size=(shape[1], r)),
        lam,
    )
    tr = split_plan.train(source.source_id)
    if len(tr) == 0:
        raise ValueError(f"source {source.name} has no training cells")
    state = AdamState(learning_rate=learning_rate)
    params = [model.a, model.b]
    bs = len(tr) if full_batch else batch_size
    for epoch in range(epochs):
        acc, nb = 0.0, 0
        for b in minibatches(source, tr, bs, seed, epoch):
            loss, ga, gb = mf_objective(model, source.indices[b], source.values[b])
            if not math.isfinite(loss):
                raise NonFiniteError(f"matrix factorization diverged at epoch {epoch}")
            adam_step(params, [ga, gb], state)
            acc += loss
            nb += 1
        model.epoch_loss.append(acc / nb)
    model.trained = True
    return model


# --------------------------------------------------------------------- CP


@dataclass
class CpModel:
    factors: list[np.ndarray]
    sweeps: int = 0
    converged: bool = False
    loss_trace: list[float] = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    def predict(self, cells: np.ndarray) -> np.ndarray:
        cells = np.asarray(cells)
        prod = self.factors[0][cells[:, 0]].copy()
        for k in range(1, len(self.factors)):
            prod *= self.factors[k][cells[:, k]]
        return prod.sum(axis=1)


def _cp_objective(factors: list[np.ndarray], cells: np.ndarray, y: np.ndarray, ridge: float) -> float:
    resid = CpModel(factors).predict(cells) - y
    return float(resid @ resid) + ridge * sum(float(np.sum(f * f)) for f in factors)


def cp_fit(
    source: DataSource,
    split_plan: SplitPlan | None,
    shape: tuple[int, ...],
    r: int = 5,
    iterations: int = 100,
    tol: float = 1e-6,
    ridge: float = 1e-8,
    seed: int = 0,
) -> CpModel:
    """Masked alternating least squares on the observed training cells.

    Each row of each factor matrix is the ridge solution over the cells in
    which that entity appears, holding the other factors fixed. Iteration
    stops after ``iterations`` sweeps or when the relative change of the
    objective drops below ``tol``.
    """
    if r < 1:
        raise ValueError("CP rank must be >= 1")
    if source.order < 3:
        raise ValueError(f"CP baseline needs a tensor source of order >= 3, got {source.order}")
    tr = split_plan.train(source.source_id) if split_plan is not None else np.arange(len(source))
    if len(tr) == 0:
        raise ValueError(f"source {source.name} has no training cells")
    cells = source.indices[tr]
    y = source.values[tr]
    order = source.order
    rng = np.random.default_rng([seed, 0xCB])
    factors = [rng.standard_normal((n, r)) for n in shape]

    # per-mode grouping of observations by entity, computed once
    groups = []
    for k in range(order):
        perm = np.argsort(cells[:, k], kind="stable")
        rows, starts = np.unique(cells[perm, k], return_index=True)
        groups.append((perm, rows, starts))

    model = CpModel(factors)
    prev = _cp_objective(factors, cells, y, ridge)
    model.loss_trace.append(prev)
    eye = np.eye(r)
    for sweep in range(iterations):
        for k in range(order):
            z = np.ones((len(y), r))
            for j in range(order):
                if j != k:
                    z *= factors[j][cells[:, j]]
            perm, rows, starts = groups[k]
            zp = z[perm]
            outer = (zp[:, :, None] * zp[:, None, :]).reshape(len(y), r * r)
            gram = np.add.reduceat(outer, starts, axis=0).reshape(-1, r, r)
            rhs = np.add.reduceat(zp * y[perm, None], starts, axis=0)
            new = np.zeros_like(factors[k])
            new[rows] = np.linalg.solve(gram + ridge * eye, rhs[:, :, None])[:, :, 0]
            factors[k][:] = new
        cur = _cp_objective(factors, cells, y, ridge)
        model.loss_trace.append(cur)
        model.sweeps = sweep + 1
        if abs(prev - cur) <= tol * max(abs(prev), 1e-300):
            model.converged = True
            break
        prev = cur
    if not model.converged:
        log.info("CP-ALS on %s stopped after %d sweeps without meeting tol=%g", source.name, model.sweeps, tol)
    return model
