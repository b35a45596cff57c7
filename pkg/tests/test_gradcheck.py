import numpy as np
import pytest
from hypothesis import given, strategies as st

from margin_metric.batch import EmbeddingBatch
from margin_metric.gradcheck import (
    LossInstance,
    grad_check,
    numerical_gradient,
    random_instance,
    relative_error,
)
from margin_metric.losses import LOSS_IDS, PrototypeSet, ems_loss


def test_ems_fixed_seed():
    assert grad_check("ems", random_instance("ems", seed=0)) <= 1e-5


def test_zero_gradient_convention():
    rng = np.random.default_rng(0)
    inst = LossInstance("ems", EmbeddingBatch(rng.normal(size=(4, 3)), np.zeros(4, int)),
                        PrototypeSet(rng.normal(size=(1, 3))), m=4.0)
    assert grad_check("ems", inst) == 0.0


def test_corrupted_gradient_is_caught():
    inst = random_instance("ems", seed=1)

    def corrupted(i):
        res = ems_loss(i.batch, i.head, i.m)
        res.grad_embeddings = res.grad_embeddings.copy()
        res.grad_embeddings[0, 0] += 0.1
        return res

    assert grad_check(corrupted, inst) > 1e-2


def test_relative_error_floor():
    assert relative_error(np.array([1e-13]), np.array([0.0])) == 0.0
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)
    assert relative_error(np.array([1e-9]), np.array([0.0]), floor=1e-8) == 0.0


def test_numerical_gradient_restores_array():
    x = np.array([1.0, -2.0, 3.0])
    before = x.copy()
    g = numerical_gradient(lambda: float(np.sum(x**3)), x)
    assert np.array_equal(x, before)
    assert np.allclose(g, 3 * before**2, rtol=1e-8)


def test_asoftmax_instances_avoid_kinks():
    for seed in range(20):
        inst = random_instance("a-softmax", seed=seed)
        x, w, y = inst.batch.vectors, inst.head.weights, inst.batch.labels
        cos = np.sum(x * w[y], axis=1) / (np.linalg.norm(x, axis=1) * np.linalg.norm(w[y], axis=1))
        theta = np.arccos(cos)
        step = np.pi / inst.m
        assert np.all(np.abs(theta - np.round(theta / step) * step) >= 1e-3)


@given(st.sampled_from(LOSS_IDS), st.integers(0, 10_000))
def test_random_instances_pass(loss_id, seed):
    tol = 1e-4 if loss_id == "a-softmax" else 1e-5
    assert grad_check(loss_id, random_instance(loss_id, seed=seed)) <= tol


def test_unknown_loss():
    with pytest.raises(ValueError):
        random_instance("hinge")
