import math

import numpy as np
import pytest

from conftest import tiny_model_config, tiny_shape, toy_run_config
from crossshape import tensorgrad as tg
from crossshape.compatibility import DescriptorCache
from crossshape.config import TrainConfig
from crossshape.formats import FormatError
from crossshape.geometry import generate_collection
from crossshape.model import init_params, is_compat, predict
from crossshape.training import (
    AdamState, adam_step, format_log, initial_graph, load_checkpoint, phase_predicate, run_training,
    save_checkpoint, shape_loss, train_epoch, validate,
)


def scalar_store(value=0.5, dtype=np.float64):
    s = tg.ParameterStore()
    s.add("x", np.array([value], dtype=dtype))
    return s


def test_adam_zero_gradient_is_identity():
    s = scalar_store()
    st = AdamState.fresh(s)
    adam_step(s, {"x": np.zeros(1)}, st)
    assert s["x"][0] == 0.5 and st.t == 1


def test_adam_first_step_magnitude():
    s = scalar_store()
    adam_step(s, {"x": np.ones(1)}, AdamState.fresh(s))
    assert 0.5 - s["x"][0] == pytest.approx(1e-3, rel=1e-6)


def reference_adam(x, target, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    x = list(x)
    for t in range(1, steps + 1):
        for i in range(len(x)):
            g = x[i] - target[i]
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            x[i] -= lr * (m[i] / (1 - b1 ** t)) / (math.sqrt(v[i] / (1 - b2 ** t)) + eps)
    return x


def test_adam_matches_64bit_reference_on_quadratic(rng):
    x0, target = rng.normal(size=4), rng.normal(size=4)
    s = tg.ParameterStore()
    s.add("x", x0.copy())
    st = AdamState.fresh(s, lr=0.05)
    for _ in range(5):
        adam_step(s, {"x": s["x"] - target}, st)
    np.testing.assert_allclose(s["x"], reference_adam(x0, target, 5, lr=0.05), atol=1e-6)


def test_adam_errors_and_frozen_names():
    s = scalar_store()
    s.add("y", np.array([2.0]), trainable=False)
    st = AdamState.fresh(s)
    with pytest.raises(KeyError):
        adam_step(s, {}, st)
    with pytest.raises(tg.NonFiniteError):
        adam_step(s, {"x": np.array([np.nan])}, st)
    assert st.t == 0
    adam_step(s, {"x": np.ones(1), "y": np.ones(1)}, st)
    assert s["y"][0] == 2.0


def test_adam_keeps_float32():
    s = scalar_store(dtype=np.float32)
    adam_step(s, {"x": np.ones(1, dtype=np.float32)}, AdamState.fresh(s))
    assert s["x"].dtype == np.float32


def test_phase_predicates():
    assert phase_predicate("csn")("head.1.W") and not phase_predicate("csn")("compat.Vq")
    assert phase_predicate("compat")("compat.1.W") and not phase_predicate("compat")("ssa.1.Wq")
    with pytest.raises(ValueError):
        phase_predicate("warmup")


def test_default_batch_sizes():
    assert TrainConfig(graph_k=1).batch() == 6
    assert TrainConfig(graph_k=3).batch() == 3
    assert TrainConfig(graph_k=5).batch() == 2
    assert TrainConfig(graph_k=3, batch_size=4).batch() == 4


@pytest.fixture(scope="module")
def toy():
    cfg = toy_run_config()
    shapes = generate_collection(["chair", "table"], 11, 64, seed=0)
    train, val = shapes[:8], shapes[8:]
    graph = initial_graph(train, val, 1)
    return cfg, train, val, graph, {c.shape_id: c for c in shapes}


@pytest.mark.parametrize("phase", ["csn", "compat"])
def test_frozen_parameters_are_bit_identical(toy, phase):
    cfg, train, val, graph, by_id = toy
    store = init_params(cfg.model, 0)
    before = store.copy()
    train_epoch(train[:4], by_id, graph, store, AdamState.fresh(store), phase, cfg.model, 2, seed=1)
    frozen = [n for n in store.names() if not phase_predicate(phase)(n)]
    moving = [n for n in store.names() if phase_predicate(phase)(n)]
    assert frozen and moving
    for n in frozen:
        np.testing.assert_array_equal(store[n], before[n])
    assert any(not np.array_equal(store[n], before[n]) for n in moving)


def test_toy_loss_moving_average_decreases(toy):
    cfg, train, val, graph, by_id = toy
    store = init_params(cfg.model, 0)
    state = AdamState.fresh(store)
    losses = [train_epoch(train, by_id, graph, store, state, "csn", cfg.model, 2, seed=e).loss for e in range(5)]
    avg = np.convolve(losses, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(avg) < 0), losses


def test_train_epoch_is_deterministic(toy):
    cfg, train, val, graph, by_id = toy
    runs = []
    for _ in range(2):
        store = init_params(cfg.model, 0)
        m = train_epoch(train[:4], by_id, graph, store, AdamState.fresh(store), "csn", cfg.model, 2, seed=7)
        runs.append((m.loss, store["head.1.W"].copy()))
    assert runs[0][0] == runs[1][0]
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


def test_nan_loss_aborts(toy):
    cfg, train, val, graph, by_id = toy
    store = init_params(cfg.model, 0)
    store["head.5.b"] = np.full_like(store["head.5.b"], np.nan)
    with pytest.raises(tg.NonFiniteError):
        shape_loss(train[0], [by_id[graph.neighbors(train[0].shape_id)[0]]], store, cfg.model)
    with pytest.raises(FloatingPointError):
        train_epoch(train[:2], by_id, graph, store, AdamState.fresh(store), "csn", cfg.model, 2, seed=0)


def test_validate_matches_predict(toy):
    cfg, train, val, graph, by_id = toy
    store = init_params(cfg.model, 0)
    part, shape = validate(val, by_id, graph, store, cfg.model, DescriptorCache(cfg.model.compat), 0)
    assert 0 <= part <= 1 and 0 <= shape <= 1


def test_checkpoint_round_trip(tmp_path, toy):
    cfg, train, val, graph, by_id = toy
    store = init_params(cfg.model, 3)
    store.set_trainable(lambda n: not is_compat(n))
    state = AdamState.fresh(store)
    train_epoch(train[:2], by_id, graph, store, state, "csn", cfg.model, 2, seed=0)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(store, state, graph, a, {"note": "x"})
    ck = load_checkpoint(a, expect=store)
    save_checkpoint(ck.store, ck.state, ck.graph, b, ck.meta)
    assert a.read_bytes() == b.read_bytes()
    assert ck.state.t == state.t and ck.graph.edges == graph.edges
    for n in store.names():
        np.testing.assert_array_equal(ck.store[n], store[n])
        assert ck.store.trainable[n] == store.trainable[n]
        np.testing.assert_array_equal(ck.state.m[n], state.m[n])
    q, nb = val[0], [by_id[n] for n in graph.neighbors(val[0].shape_id)]
    np.testing.assert_array_equal(predict(ck.store, q, nb, cfg.model), predict(store, q, nb, cfg.model))


def test_checkpoint_errors(tmp_path):
    store = init_params(tiny_model_config(), 0)
    path = tmp_path / "c.ckpt"
    save_checkpoint(store, None, None, path)
    data = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-7])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "m.ckpt")
    other = init_params(tiny_model_config(num_classes=5), 0)
    with pytest.raises(ValueError):
        load_checkpoint(path, expect=other)
    assert not (tmp_path / "c.ckpt.tmp").exists()


def test_run_training_protocol(tmp_path):
    cfg = toy_run_config()
    shapes = generate_collection(list(cfg.data.families), 9, 64, seed=0)
    train, val = shapes[:6], shapes[6:]
    res = run_training(cfg, train, val, out_dir=tmp_path)
    assert res.phases_run == ["csn", "compat", "csn", "compat", "csn"]
    assert res.graph_versions == [0, 1, 2]
    assert (tmp_path / "metrics.csv").read_text() == res.log_csv()
    labels = {r["phase"] for r in res.log}
    assert labels == {"1-csn", "2-compat", "3-csn", "4-compat", "5-csn"}
    ck = load_checkpoint(tmp_path / "best.ckpt")
    res.graph.check()
    assert ck.graph.edges == res.graph.edges
    assert ck.config().train.graph_k == 1
    again = run_training(cfg, train, val)
    assert again.log_csv() == res.log_csv()


def test_run_training_without_neighbours_skips_compat():
    cfg = toy_run_config(graph_k=0)
    shapes = generate_collection(list(cfg.data.families), 9, 64, seed=0)
    res = run_training(cfg, shapes[:6], shapes[6:])
    assert res.phases_run == ["csn", "csn", "csn"]
    assert res.graph_versions == [0]


def test_best_validation_never_decreases():
    cfg = toy_run_config()
    shapes = generate_collection(list(cfg.data.families), 9, 64, seed=1)
    seen = []
    res = run_training(cfg, shapes[:6], shapes[6:], progress=seen.append)
    assert seen == res.log
    # every logged score is bounded by its phase best, which the overall best dominates
    assert res.best_val >= max(r["val_part_miou"] for r in res.log)


def test_format_log_columns():
    text = format_log([{"phase": "1-csn", "epoch": 1, "train_loss": 0.5, "val_part_miou": 0.25, "val_shape_miou": 0.5}])
    assert text.splitlines() == ["phase,epoch,train_loss,val_part_miou,val_shape_miou", "1-csn,1,0.5,0.25,0.5"]


def test_run_training_rejects_empty_splits():
    cfg = toy_run_config()
    with pytest.raises(ValueError):
        run_training(cfg, [tiny_shape("chair", 0)], [])
