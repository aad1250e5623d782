from __future__ import annotations

import json
from types import SimpleNamespace

import numpy as np
import pytest

from gcsa.affinity import SideInfoConfig
from gcsa.errors import ConfigError, NonFiniteError
from gcsa.model import GCSAModel, load_params, save_params
from gcsa.synthworld import WorldConfig, generate
from gcsa.trainer import (
    AdamState, ContextBuilder, TrainConfig, TrainingExample, _projection_loss, adam_step, eval_examples, gradcheck_instance, load_state,
    make_examples, save_state, score_example, train,
)

SIDE = SideInfoConfig(fov_radius=8.0, delta_max=30.0, beta=0.01, blocks=("vis", "rad"), query_side=("rad",))
TINY = dict(K=8, L=4, proj_dim=16, width=8, heads=2, epochs=2, lr0=1e-3, batch_size=8, max_examples=40)


@pytest.fixture(scope="module")
def ds():
    return generate(WorldConfig(cells=4, images_per_cell=12, endpoints=4, session_length=10,
                                query_fraction=0.3, dim=32, seed=11))


@pytest.fixture(scope="module")
def stage1(ds):
    return train(ds, TrainConfig(stage="projection", **TINY), SIDE)


# -- optimizer -------------------------------------------------------------------

def test_adam_zero_gradient_and_zero_lr_leave_params():
    p = {"a": np.array([1.0, -2.0], np.float32)}
    st = AdamState()
    adam_step(p, {"a": np.zeros(2)}, st, lr=1e-2)
    np.testing.assert_array_equal(p["a"], [1.0, -2.0])
    adam_step(p, {"a": np.array([3.0, -1.0])}, st, lr=0.0)
    np.testing.assert_array_equal(p["a"], [1.0, -2.0])


def test_adam_constant_gradient_moves_by_lr_times_sign():
    p = {"a": np.zeros(3)}
    st = AdamState()
    g = np.array([5.0, -0.01, 300.0])
    prev = p["a"].copy()
    for _ in range(200):
        adam_step(p, {"a": g}, st, lr=1e-3)
        step = p["a"] - prev
        prev = p["a"].copy()
        np.testing.assert_allclose(step, -1e-3 * np.sign(g), rtol=1e-3)


def test_adam_decoupled_weight_decay_and_errors():
    p = {"a": np.array([2.0])}
    adam_step(p, {"a": np.zeros(1)}, AdamState(), lr=0.1, weight_decay=0.5)
    assert p["a"][0] == pytest.approx(2.0 * (1 - 0.05))
    with pytest.raises(NonFiniteError):
        adam_step(p, {"a": np.array([np.nan])}, AdamState(), lr=0.1)
    with pytest.raises(ConfigError):
        adam_step(p, {"b": np.zeros(1)}, AdamState(), lr=0.1)


# -- config ----------------------------------------------------------------------

def test_lr_schedule_and_validation():
    cfg = TrainConfig(lr0=1e-4)
    assert [cfg.lr(e) for e in range(3)] == pytest.approx([1e-4, 9e-5, 8.1e-5])
    with pytest.raises(ConfigError):
        TrainConfig(K=4, L=5)
    with pytest.raises(ConfigError):
        TrainConfig(stage="both")
    with pytest.raises(ConfigError):
        TrainConfig(input_dropout=1.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 2, "momentum": 0.9})


# -- examples ----------------------------------------------------------------------

def test_training_examples_exclude_own_session_and_need_positives(ds):
    cfg = TrainConfig(**TINY)
    stats: dict = {}
    ex = make_examples(ds, cfg, SIDE, "db", stats)
    assert ex and len(ex) <= TINY["max_examples"]
    for e in ex:
        assert ds.sessions[e.query] not in set(ds.sessions[e.candidates])
        assert e.labels.any() and len(e.candidates) == cfg.K
        assert e.relevant >= e.labels.sum()
    for e in eval_examples(ds, cfg, "query"):
        assert ds.records[e.query].split == "query"
        assert all(ds.records[c].split == "db" for c in e.candidates)


# -- training ----------------------------------------------------------------------

def test_gnn_stage_needs_projection(ds):
    with pytest.raises(ConfigError):
        train(ds, TrainConfig(stage="gnn", **TINY), SIDE)


def test_training_deterministic_and_log(ds, stage1, tmp_path):
    again = train(ds, TrainConfig(stage="projection", **TINY), SIDE)
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    save_params(stage1.model, a)
    save_params(again.model, b)
    assert a.read_bytes() == b.read_bytes()
    assert [e["epoch"] for e in stage1.log] == [0, 1]
    assert stage1.log[1]["lr"] == pytest.approx(0.9e-3)
    vals = [e["val_map10"] for e in stage1.log]
    assert stage1.best_val == max(vals) and stage1.best_epoch == vals.index(max(vals))


def test_gnn_stage_keeps_projection_frozen(ds, stage1, tmp_path):
    log = tmp_path / "log.jsonl"
    r = train(ds, TrainConfig(stage="gnn", **TINY), SIDE, init=stage1.model, log_path=log)
    np.testing.assert_array_equal(r.model.params["W"], stage1.model.params["W"])
    lines = [json.loads(x) for x in log.read_text().splitlines()]
    assert [set(x) for x in lines] == [{"epoch", "lr", "train_loss", "val_map10", "wall_time"}] * 2
    assert r.model.meta["side_config"]["blocks"] == ["vis", "rad"]
    # the checkpoint reproduces the scores
    path = tmp_path / "m.bin"
    save_params(r.model, path)
    m2 = load_params(path)
    b = ContextBuilder(ds, SIDE, TINY["L"])
    b.set_projection(m2.params["W"])
    ex = eval_examples(ds, TrainConfig(**TINY), "query")[0]
    np.testing.assert_array_equal(score_example(m2, b, ex), score_example(r.model, b, ex))


def test_resume_matches_uninterrupted_run(ds, stage1, tmp_path):
    cfg = TrainConfig(stage="gnn", **{**TINY, "epochs": 3})
    full = train(ds, cfg, SIDE, init=stage1.model)
    state = tmp_path / "state.npz"

    def stop_after_first(epoch, model, adam, extra):
        save_state(state, epoch, model, adam, extra)
        if epoch == 0:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        train(ds, cfg, SIDE, init=stage1.model, on_epoch=stop_after_first)
    resumed = train(ds, cfg, SIDE, init=stage1.model, resume=load_state(state))
    for k in full.model.params:
        np.testing.assert_array_equal(resumed.model.params[k], full.model.params[k])
    assert [e["val_map10"] for e in resumed.log] == [e["val_map10"] for e in full.log]


def test_diverging_training_raises(ds, stage1):
    with pytest.raises(NonFiniteError):
        train(ds, TrainConfig(stage="gnn", **{**TINY, "lr0": 1e300}), SIDE, init=stage1.model)


# -- gradients -------------------------------------------------------------------------

def test_full_loss_gradcheck_float64():
    rep = gradcheck_instance(seed=0)
    assert rep.max_error < 1e-5, rep


def test_stage1_learns_separable_projection():
    # the class signal lives in one weak direction under large shared nuisance
    rng = np.random.default_rng(0)
    dim, K, n_ex = 12, 10, 24
    X, examples = [], []
    for e in range(n_ex):
        sign = rng.choice([-1.0, 1.0], size=K + 1)
        sign[1] = sign[0]                       # at least one positive
        labels = sign[1:] == sign[0]
        block = rng.standard_normal((K + 1, dim))
        block[:, 0] = 0.5 * sign
        base = len(X)
        X.extend(block)
        examples.append(TrainingExample(base, np.arange(base + 1, base + K + 1), labels, int(labels.sum())))
    ds = SimpleNamespace(descriptors=np.asarray(X, dtype=np.float32))
    cfg = TrainConfig(stage="projection", K=K, L=0, proj_dim=4, input_dropout=0.0)
    model = GCSAModel(cfg.model_config(dim, SideInfoConfig(blocks=("vis",), query_side=())), seed=0)
    st = AdamState()

    def mean_loss():
        return float(np.mean([_projection_loss(model, ds, ex, cfg, None)[0] for ex in examples]))

    start = mean_loss()
    for _ in range(200):
        grads = [_projection_loss(model, ds, ex, cfg, None)[1]["W"] for ex in examples]
        adam_step(model.params, {"W": np.mean(grads, axis=0)}, st, lr=3e-2)
    assert start > 0.2 and mean_loss() < 0.05
