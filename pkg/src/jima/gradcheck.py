"""Central finite-difference checks of every hand-derived gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .joint_model import JointModel, ModelConfig
from .nn_core import init_mlp, l2_penalty, mlp_backward, mlp_forward
from .obs_store import DataSource, FiberSpec, build_schema

H = 1e-5
DENOM_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    instances: int
    coords: int
    skipped: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.coords > 0 and self.max_rel_err < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: {self.instances} instances, {self.coords} coordinates "
                f"({self.skipped} skipped at kinks), max rel err {self.max_rel_err:.2e} (tol {self.tol:g})")


def rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), DENOM_FLOOR)


def _relu_pattern_mlp(net, x) -> np.ndarray:
    _, cache = mlp_forward(net, x)
    return np.concatenate([(z > 0).ravel() for z in cache.preacts])


def check_mlp(n_instances: int = 100, tol: float = 1e-4, seed: int = 0) -> CheckResult:
    """Weights, biases and input of random heads, summed output weighted by random upstream grads."""
    rng = np.random.default_rng(seed)
    worst, coords, skipped = 0.0, 0, 0
    for _ in range(n_instances):
        d = int(rng.integers(2, 7))
        hidden = tuple(int(w) for w in rng.integers(2, 6, size=int(rng.integers(1, 4))))
        net = init_mlp(d, hidden, rng)
        for layer in net.layers:
            layer.bias[:] = rng.normal(0, 0.3, size=layer.bias.shape)
        if rng.random() < 0.5:
            for layer in net.layers:
                layer.activation = "identity"
        x = rng.normal(size=(3, d))
        up = rng.normal(size=3)
        _, cache = mlp_forward(net, x)
        g = mlp_backward(net, cache, up)
        f = lambda: float(up @ mlp_forward(net, x)[0])
        base = _relu_pattern_mlp(net, x)
        targets = [(p, ga) for p, ga in zip(net.parameters(), g.parameters())] + [(x, g.input)]
        for arr, ga in targets:
            for i in np.ndindex(arr.shape):
                old = arr[i]
                arr[i] = old + H
                fp, pp = f(), _relu_pattern_mlp(net, x)
                arr[i] = old - H
                fm, pm = f(), _relu_pattern_mlp(net, x)
                arr[i] = old
                if not (np.array_equal(pp, base) and np.array_equal(pm, base)):
                    skipped += 1
                    continue
                worst = max(worst, rel_err(ga[i], (fp - fm) / (2 * H)))
                coords += 1
    return CheckResult("mlp weights/biases/input", n_instances, coords, skipped, worst, tol)


def check_l2(n_instances: int = 100, tol: float = 1e-4, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, coords = 0.0, 0
    for _ in range(n_instances):
        net = init_mlp(int(rng.integers(2, 6)), (3, 2), rng)
        lam = float(rng.uniform(0, 2))
        _, grads = l2_penalty(net, lam)
        for arr, ga in zip(net.parameters(), grads):
            for i in np.ndindex(arr.shape):
                old = arr[i]
                arr[i] = old + H
                fp = l2_penalty(net, lam)[0]
                arr[i] = old - H
                fm = l2_penalty(net, lam)[0]
                arr[i] = old
                worst = max(worst, rel_err(ga[i], (fp - fm) / (2 * H)))
                coords += 1
    return CheckResult("l2 penalty", n_instances, coords, 0, worst, tol)


def toy_schema(rng: np.random.Generator, k_max: int = 4, n: int = 2):
    """Fully observed random data on ``k_max`` fibers with ``n`` entities each."""
    fibers = [FiberSpec(k, n, f"f{k}") for k in range(k_max)]
    sigs = [(0, 1, 2, 3), (0, 1, 2), (0, 1), (1, 2)] if k_max == 4 else [(0, 1, 2), (0, 1), (0, 2), (1, 2)]
    sources = []
    for sid, sig in enumerate(sigs):
        idx = np.indices((n,) * len(sig)).reshape(len(sig), -1).T
        loss = "cross_entropy" if sid == len(sigs) - 1 and rng.random() < 0.5 else "squared"
        vals = rng.integers(0, 2, size=len(idx)).astype(float) if loss == "cross_entropy" else rng.normal(size=len(idx))
        sources.append(DataSource(sid, sig, idx, vals, loss_kind=loss, name="".join(map(str, sig))))
    return build_schema(fibers, sources)


def _relu_pattern_model(model: JointModel, batches) -> np.ndarray:
    out = []
    for sid, (idx, _y) in batches.items():
        x, _ = model._head_input(sid, idx)
        _, cache = mlp_forward(model.heads[sid], x)
        out += [(z > 0).ravel() for z in cache.preacts]
    return np.concatenate(out)


def check_joint(
    n_instances: int = 100, tol: float = 1e-4, seed: int = 2, head_coords: int = 30
) -> CheckResult:
    """Full multi-task loss: every embedding coordinate plus sampled head coordinates.

    Instances alternate interactions on/off and 3- vs 4-fiber toy schemas
    (2 entities per fiber, r = 2) with non-zero penalties.
    """
    rng = np.random.default_rng(seed)
    worst, coords, skipped = 0.0, 0, 0
    for inst in range(n_instances):
        schema = toy_schema(rng, k_max=4 if inst % 2 else 3)
        cfg = ModelConfig(
            r=2,
            use_interactions=inst % 4 < 2,
            head_hidden=(6, 4),
            lambdas=float(rng.uniform(0, 0.1)),
            embedding_lambda=float(rng.uniform(0, 0.1)),
            seed=int(rng.integers(2**31)),
            init_scale=1.0,
        )
        model = JointModel(schema, cfg)
        for h in model.heads.values():
            for layer in h.layers:
                layer.bias[:] = rng.normal(0, 0.3, size=layer.bias.shape)
        batches = {}
        for src in schema.sources:
            take = rng.choice(len(src), size=min(len(src), 5), replace=False)
            batches[src.source_id] = (src.indices[take], src.values[take])
        _, g = model.multi_task_loss(batches)
        g = g.copy()
        base = _relu_pattern_model(model, batches)
        n_emb = sum(f.size for f in model.factors)
        head_idx = rng.choice(np.arange(n_emb, model.params.size), size=head_coords, replace=False)
        for i in np.concatenate([np.arange(n_emb), head_idx]):
            old = model.params[i]
            model.params[i] = old + H
            fp, pp = model.multi_task_loss(batches)[0], _relu_pattern_model(model, batches)
            model.params[i] = old - H
            fm, pm = model.multi_task_loss(batches)[0], _relu_pattern_model(model, batches)
            model.params[i] = old
            if not (np.array_equal(pp, base) and np.array_equal(pm, base)):
                skipped += 1
                continue
            worst = max(worst, rel_err(g[i], (fp - fm) / (2 * H)))
            coords += 1
    return CheckResult("joint model (heads, interactions, embeddings, penalties)", n_instances, coords,
                       skipped, worst, tol)


def run_all(tol: float = 1e-4, n_instances: int = 100, seed: int = 0) -> list[CheckResult]:
    return [
        check_mlp(n_instances, tol, seed),
        check_l2(n_instances, tol, seed + 1),
        check_joint(n_instances, tol, seed + 2),
    ]
