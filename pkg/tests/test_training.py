import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_array_equal

from margin_metric.dataset import SyntheticConfig, generate
from margin_metric.losses import ClassifierWeights, PrototypeSet, ems_loss
from margin_metric.training import (
    AdamHyper,
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    embed,
    lr_schedule,
    train,
)

# large-step recipe used for desk-scale runs; the defaults mirror the
# reference optimiser settings and are too slow for a unit test
FAST = dict(lr=3e-3, batch_size=64)


def test_lr_schedule_examples():
    assert lr_schedule(0, 100, 1e-4) == 1e-4
    assert lr_schedule(100, 100, 1e-4) == 0.0
    assert lr_schedule(50, 100, 1e-4) == pytest.approx(5e-5, rel=1e-15)
    with pytest.raises(ValueError):
        lr_schedule(101, 100, 1e-4)


@given(st.integers(1, 10_000), st.floats(1e-6, 1.0))
def test_lr_schedule_is_affine(total, base):
    steps = np.arange(total + 1)
    lrs = np.array([lr_schedule(int(s), total, base) for s in steps[:: max(1, total // 50)]])
    diffs = np.diff(lrs)
    assert np.allclose(diffs, diffs[0], rtol=1e-9, atol=1e-18) if len(diffs) else True
    assert lr_schedule(total, total, base) == 0.0


def test_adam_first_step_moves_by_lr():
    p = {"x": np.array([1.0])}
    adam_step(p, {"x": np.array([0.37])}, AdamState(), AdamHyper(lr=1e-3, weight_decay=0.0))
    assert 1.0 - p["x"][0] == pytest.approx(1e-3 * 0.37 / (0.37 + 1e-8), rel=1e-12)


@given(st.integers(1, 20), st.integers(0, 2**31))
def test_adam_zero_gradient_is_fixed_point(steps, seed):
    x = np.random.default_rng(seed).normal(size=(3, 2))
    p = {"x": x.copy()}
    state = AdamState()
    for _ in range(steps):
        adam_step(p, {"x": np.zeros((3, 2))}, state, AdamHyper(weight_decay=0.0))
    assert_array_equal(p["x"], x)


def test_adam_weight_decay_and_exemption():
    p = {"w": np.array([2.0]), "c": np.array([2.0])}
    zero = {"w": np.zeros(1), "c": np.zeros(1)}
    adam_step(p, zero, AdamState(), AdamHyper(lr=0.1, weight_decay=5e-4), no_decay=("c",))
    assert p["w"][0] < 2.0
    assert p["c"][0] == 2.0


def test_adam_errors():
    p = {"x": np.zeros(2)}
    with pytest.raises(ValueError):
        adam_step(p, {"x": np.zeros(3)}, AdamState(), AdamHyper())
    with pytest.raises(ValueError):
        adam_step(p, {"x": np.array([np.nan, 0.0])}, AdamState(), AdamHyper())


@pytest.mark.parametrize("kwargs", [
    {"loss": "triplet"}, {"loss": "ems", "m": 0.5}, {"beta1": 1.0}, {"beta2": 0.0}, {"lr": 0.0},
    {"batch_size": 0}, {"steps": -1}, {"weight_decay": -1.0}, {"proto_mode": "median"},
    {"loss": "softmax", "proto_mode": "batch-mean"}, {"loss": "a-softmax", "m": 2.5},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_lmcl_config_accepted():
    TrainConfig(loss="lmcl", m=0.35, s=30.0)


@pytest.fixture(scope="module")
def small_data():
    return generate(SyntheticConfig(classes=4, dim=8, per_class=50, seed=3))


def test_separable_run_converges(small_data):
    r = train(small_data, TrainConfig(loss="ems", m=4.0, steps=2000, seed=0, **FAST))
    emb = embed(r.params, small_data)
    assert ems_loss(emb, r.head, 4.0).loss < 0.05
    d = ((emb.vectors[:, None, :] - r.head.centers[None]) ** 2).sum(axis=2)
    assert np.all(d.argmin(axis=1) == emb.labels)
    assert r.log.final_prototypes.shape == (4, 16)


def test_zero_steps_returns_initial_parameters(small_data):
    r = train(small_data, TrainConfig(steps=0, seed=1))
    again = train(small_data, TrainConfig(steps=0, seed=1))
    assert all(np.array_equal(r.params.arrays[k], again.params.arrays[k]) for k in r.params.arrays)
    assert r.log.losses == []


def test_same_seed_same_log(small_data):
    cfg = TrainConfig(steps=150, seed=7, **FAST)
    a = train(small_data, cfg)
    b = train(small_data, cfg)
    assert a.log.losses == b.log.losses
    assert_array_equal(a.head.centers, b.head.centers)


@pytest.mark.parametrize("loss, m", [
    ("softmax", 0.0), ("squared-ems", 4.0), ("prototypical", 1.0), ("a-softmax", 2.0), ("lmcl", 0.35),
])
def test_every_loss_trains(small_data, loss, m):
    r = train(small_data, TrainConfig(loss=loss, m=m, steps=300, seed=0, **FAST))
    assert np.all(np.isfinite(r.log.losses))
    assert np.mean(r.log.losses[-30:]) < np.mean(r.log.losses[:30])
    kind = ClassifierWeights if loss in ("softmax", "a-softmax", "lmcl") else PrototypeSet
    assert isinstance(r.head, kind)


def test_prototype_shape_is_fixed(small_data):
    r = train(small_data, TrainConfig(steps=50, seed=0, embed_dim=5, **FAST))
    assert r.head.centers.shape == (4, 5)


def test_batch_mean_prototypes(small_data):
    r = train(small_data, TrainConfig(proto_mode="batch-mean", steps=300, seed=0, **FAST))
    emb = embed(r.params, small_data)
    means = np.vstack([emb.vectors[emb.labels == c].mean(axis=0) for c in range(4)])
    # running means track the class means of the final embedding
    spread = np.linalg.norm(means[:, None] - means[None], axis=2).max()
    assert np.linalg.norm(r.head.centers - means, axis=1).max() < 0.25 * spread


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(small_data):
    bad = small_data.subset(np.arange(len(small_data)))
    bad.vectors[0, 0] = 1e300
    with pytest.raises(TrainingDiverged) as err:
        train(bad, TrainConfig(steps=50, seed=0, lr=1.0, batch_size=len(bad), standardize=False))
    assert err.value.step == 0


def test_training_diverged_names_step():
    err = TrainingDiverged(12, float("nan"))
    assert err.step == 12 and "12" in str(err)


def test_log_csv(tmp_path, small_data):
    r = train(small_data, TrainConfig(steps=20, seed=0))
    r.log.write_csv(tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["step", "lr", "loss"]
    assert len(rows) == 21
    assert float(rows[1][1]) == 1e-4


def test_empty_dataset_rejected(small_data):
    with pytest.raises(ValueError):
        train(small_data.subset(np.zeros(len(small_data), dtype=bool)), TrainConfig(steps=1))
