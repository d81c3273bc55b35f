import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jima.gradcheck import check_joint
from jima.joint_model import (
    JointModel,
    ModelConfig,
    cold_start_predict,
    error_metrics,
    evaluate,
    head_input_dim,
    interaction_features,
    multi_task_loss,
    ntf_config,
    predict,
    subset_masks,
    train,
)
from jima.nn_core import default_param_count, mlp_forward
from jima.obs_store import DataSource, FiberSpec, build_schema, split
from jima.simgen import SimSpec3, gen_three_way


def test_interaction_example():
    x, u, v = np.array([1.0, 2]), np.array([3.0, 4]), np.array([5.0, 6])
    np.testing.assert_array_equal(interaction_features([x, u, v]), [3, 8, 5, 12, 15, 24, 15, 48])


def test_ones_vector_is_identity():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=4), rng.normal(size=4)
    feats = interaction_features([a, np.ones(4), b]).reshape(-1, 4)
    # masks 3 (a,1) 5 (a,b) 6 (1,b) 7 (a,1,b)
    np.testing.assert_array_equal(feats[0], a)
    np.testing.assert_array_equal(feats[2], b)
    np.testing.assert_array_equal(feats[3], feats[1])


def test_four_way_lengths():
    vecs = [np.ones(5)] * 4
    assert interaction_features(vecs).size == 55
    assert head_input_dim(4, 5, True) == 75
    n_subsets = sum(1 for m in range(16) if bin(m).count("1") >= 2)
    assert len(subset_masks(4)) == n_subsets == 11


@pytest.mark.parametrize("k", [2, 3, 4])
@pytest.mark.parametrize("r", [1, 5])
def test_dimension_law(k, r):
    assert head_input_dim(k, r, False) == k * r
    assert head_input_dim(k, r, True) == (2**k - 1) * r
    assert len(interaction_features([np.ones(r)] * k)) + k * r == head_input_dim(k, r, True)


def test_interaction_errors():
    with pytest.raises(ValueError):
        interaction_features([np.ones(3)])
    with pytest.raises(ValueError):
        interaction_features([np.ones(3), np.ones(2)])


@settings(max_examples=40, deadline=None)
@given(k=st.integers(2, 4), seed=st.integers(0, 2**32 - 1), data=st.data())
def test_permutation_property(k, seed, data):
    perm = data.draw(st.permutations(range(k)))
    rng = np.random.default_rng(seed)
    vecs = [rng.normal(size=3) for _ in range(k)]
    base = interaction_features(vecs).reshape(-1, 3)
    permuted = interaction_features([vecs[p] for p in perm]).reshape(-1, 3)
    masks = subset_masks(k)
    for b, mask in enumerate(masks):
        # position j of the permuted list holds original input perm[j]
        orig = sum(1 << perm[j] for j in range(k) if mask >> j & 1)
        np.testing.assert_allclose(permuted[b], base[masks.index(orig)], rtol=1e-15)
    key = lambda a: tuple(np.round(a, 12))
    assert sorted(map(key, base)) == sorted(map(key, permuted))


def utb_schema(seed=0, shape=(6, 4, 5)):
    return gen_three_way(SimSpec3(*shape, seed=seed)).schema


def test_head_input_35_for_utb():
    model = JointModel(utb_schema(), ModelConfig())
    assert model.heads[0].input_dim == 35
    assert model.heads[1].input_dim == 15


def test_zero_model_predicts_zero():
    model = JointModel(utb_schema(), ModelConfig())
    model.params[:] = 0
    assert predict(model, "utb", (1, 2, 3)) == 0.0


def test_ntf_semantics():
    schema = utb_schema()
    model = JointModel(schema, ntf_config("utb"))
    cell = (2, 1, 4)
    x = np.concatenate([model.factors[f][m] for f, m in zip((0, 1, 2), cell)])
    assert predict(model, "utb", cell) == mlp_forward(model.heads[0], x)[0]


def test_ablation_parameter_count():
    schema = utb_schema()
    ntf = JointModel(schema, ntf_config("utb"))
    assert ntf.n_params() == sum(schema.dims) * 5 + default_param_count(15)
    ncf = JointModel(schema, ModelConfig(sources=("ut",), use_interactions=False))
    assert ncf.n_params() == (schema.dims[0] + schema.dims[1]) * 5 + default_param_count(10)


def test_predict_errors():
    model = JointModel(utb_schema(), ModelConfig(sources=("utb",)))
    with pytest.raises(KeyError):
        predict(model, "ut", (0, 0))
    with pytest.raises(IndexError):
        predict(model, "utb", (6, 0, 0))


def single_cell_schema(y):
    src = DataSource(0, (0, 1), [[0, 0]], [y], name="m")
    return build_schema([FiberSpec(0, 1), FiberSpec(1, 1)], [src])


def test_loss_example():
    schema = single_cell_schema(2.0)
    model = JointModel(schema, ModelConfig(lambdas=0.0, embedding_lambda=0.0, use_interactions=False))
    head = model.heads[0]
    head.layers[-1].weights[:] = 0
    head.layers[-1].bias[:] = 0
    loss, grad = multi_task_loss(model, {0: (np.array([[0, 0]]), np.array([2.0]))})
    assert loss == 4.0
    # output-bias gradient equals dloss/dyhat
    assert grad[model._head_slices[0]][-1] == -4.0


def test_perfect_prediction_zero_loss():
    schema = utb_schema()
    model = JointModel(schema, ModelConfig(lambdas=0.0, embedding_lambda=0.0))
    batches = {}
    for src in schema.sources:
        cells = src.indices[:7]
        batches[src.source_id] = (cells, model.predict_batch(src.source_id, cells))
    assert model.multi_task_loss(batches)[0] == 0.0


def test_embedding_gradient_through_pair_block():
    # r=2, two fibers, no raw part contribution: check x gets (dL/dfeature) * u
    schema = single_cell_schema(1.0)
    model = JointModel(schema, ModelConfig(r=2, head_hidden=(), lambdas=0.0, embedding_lambda=0.0))
    w = model.heads[0].layers[0].weights
    w[:] = 0
    w[0, 4:6] = [0.7, -1.3]  # weights on the x*u block
    loss, grad = model.multi_task_loss({0: (np.array([[0, 0]]), np.array([1.0]))})
    yhat = model.predict_batch(0, [[0, 0]])[0]
    u = model.factors[1][0]
    np.testing.assert_allclose(model.factor_grads[0][0], 2 * (yhat - 1.0) * np.array([0.7, -1.3]) * u, rtol=1e-12)


def test_full_gradient_suite():
    res = check_joint(n_instances=12, seed=11)
    assert res.passed, res.line()


def test_epochs_zero_keeps_initialization():
    schema = utb_schema()
    model = JointModel(schema, ModelConfig(epochs=0))
    before = model.params.copy()
    result = train(model, schema, split(schema, 0.2, 0))
    np.testing.assert_array_equal(model.params, before)
    assert result.epoch_loss == []


def test_rank_one_matrix_capacity():
    rng = np.random.default_rng(3)
    y = np.outer(rng.normal(size=10), rng.normal(size=10))
    idx = np.indices((10, 10)).reshape(2, -1).T
    schema = build_schema([FiberSpec(0, 10), FiberSpec(1, 10)], [DataSource(0, (0, 1), idx, y.ravel(), name="m")])
    plan = split(schema, 0.5, 0)
    plan.per_source[0] = (np.arange(100), np.arange(100))
    model = JointModel(schema, ModelConfig(use_interactions=False, epochs=500, learning_rate=1e-2, seed=1))
    train(model, schema, plan)
    assert evaluate(model, schema, plan)["m"]["rmse"] < 0.05


def test_shared_embedding_row():
    schema = utb_schema()
    model = JointModel(schema, ModelConfig(sources=("utb", "ut"), epochs=2))
    train(model, schema, split(schema, 0.5, 0))
    before_utb = predict(model, "utb", (3, 1, 2))
    before_ut = predict(model, "ut", (3, 1))
    model.factors[0][3] += 0.5
    assert predict(model, "utb", (3, 1, 2)) != before_utb
    assert predict(model, "ut", (3, 1)) != before_ut


def test_cold_start_through_matrix():
    schema = utb_schema(shape=(5, 4, 4))
    plan = split(schema, 0.5, 0)
    utb = schema.source("utb")
    tr, te = plan.per_source[utb.source_id]
    # user 0 never appears in utb training rows
    keep = utb.indices[tr, 0] != 0
    plan.per_source[utb.source_id] = (tr[keep], np.sort(np.concatenate([te, tr[~keep]])))
    model = JointModel(schema, ModelConfig(epochs=2))
    train(model, schema, plan)
    res = cold_start_predict(model, "utb", (0, 1, 2))
    assert np.isfinite(res.value)
    assert res.untrained == []
    assert "utb" not in res.trained_by[(0, 0)]
    assert "ut" in res.trained_by[(0, 0)]


def test_cold_start_flags_untrained(caplog):
    schema = utb_schema(shape=(5, 4, 4))
    plan = split(schema, 0.5, 0)
    for sid, src in enumerate(schema.sources):
        tr, te = plan.per_source[sid]
        if 0 in src.fibers:
            j = src.fibers.index(0)
            keep = src.indices[tr, j] != 4
            plan.per_source[sid] = (tr[keep], np.sort(np.concatenate([te, tr[~keep]])))
    model = JointModel(schema, ModelConfig(epochs=1))
    before = model.factors[0][4].copy()
    train(model, schema, plan)
    np.testing.assert_array_equal(model.factors[0][4], before)
    with caplog.at_level("WARNING"):
        res = cold_start_predict(model, "utb", (4, 0, 0))
    assert res.untrained == [(0, 4)]
    assert "no training observations" in caplog.text
    warm = cold_start_predict(model, "utb", (1, 0, 0))
    assert warm.untrained == []


def test_empty_source_is_dropped():
    schema = utb_schema()
    plan = split(schema, 0.5, 0)
    tb = schema.source("tb").source_id
    plan.per_source[tb] = (np.array([], dtype=np.int64), plan.per_source[tb][1])
    model = JointModel(schema, ModelConfig(epochs=1))
    before = model.heads[tb].layers[0].weights.copy()
    train(model, schema, plan)
    np.testing.assert_array_equal(model.heads[tb].layers[0].weights, before)


def test_save_load_bit_exact(tmp_path):
    schema = utb_schema()
    model = JointModel(schema, ModelConfig(epochs=2, clamp_range=(-3, 3)))
    plan = split(schema, 0.5, 0)
    train(model, schema, plan)
    model.save(tmp_path / "m.npz")
    again = JointModel.load(tmp_path / "m.npz")
    for src in schema.sources:
        np.testing.assert_array_equal(model.predict_batch(src.name, src.indices), again.predict_batch(src.name, src.indices))
    assert cold_start_predict(again, "utb", (0, 0, 0)).trained_by == cold_start_predict(model, "utb", (0, 0, 0)).trained_by


def test_training_is_deterministic():
    schema = utb_schema()
    plan = split(schema, 0.5, 0)
    runs = []
    for _ in range(2):
        m = JointModel(schema, ModelConfig(epochs=3, seed=4))
        runs.append(train(m, schema, plan).epoch_loss)
    assert runs[0] == runs[1]


def test_monotone_training_default_hyperparameters():
    schema = utb_schema(seed=2, shape=(20, 10, 15))
    model = JointModel(schema, ModelConfig())
    loss = train(model, schema, split(schema, 0.2, 2)).epoch_loss
    assert len(loss) == 200 and all(np.isfinite(loss))
    tenth = len(loss) // 10
    assert np.mean(loss[-tenth:]) < np.mean(loss[:tenth])


def test_cross_entropy_source():
    rng = np.random.default_rng(0)
    idx = np.array(list(itertools.product(range(4), range(3))))
    src = DataSource(0, (0, 1), idx, rng.integers(0, 2, len(idx)).astype(float), loss_kind="cross_entropy", name="b")
    schema = build_schema([FiberSpec(0, 4), FiberSpec(1, 3)], [src])
    model = JointModel(schema, ModelConfig(epochs=5))
    train(model, schema, split(schema, 0.5, 0))
    p = model.predict_batch("b", idx)
    assert np.all((p > 0) & (p < 1))


@pytest.mark.parametrize(
    "err, rmse, mae", [((0.0, 0.0), 0.0, 0.0), ((1.0, -1.0), 1.0, 1.0), ((0.0, 2.0), np.sqrt(2), 1.0)]
)
def test_error_metrics(err, rmse, mae):
    y = np.array([3.0, 1.0])
    m = error_metrics(y, y + np.array(err))
    assert m["rmse"] == pytest.approx(rmse, rel=1e-15)
    assert m["mae"] == pytest.approx(mae, rel=1e-15)
