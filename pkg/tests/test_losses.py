import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from numpy.testing import assert_allclose

from margin_metric.batch import EmbeddingBatch
from margin_metric.gradcheck import TOLERANCE, grad_check, random_instance
from margin_metric.losses import (
    LOSS_IDS,
    NORM_EPS,
    AngularParams,
    ClassifierWeights,
    LossResult,
    PrototypeSet,
    angular_logits,
    angular_margin_loss,
    compute_loss,
    ems_loss,
    prototypical_loss,
    psi,
    softmax_loss,
    squared_ems_loss,
)

LN2 = math.log(2.0)
LN1PE = math.log1p(math.exp(-1.0))
# distance floor from the stabilised norm: sqrt(0 + NORM_EPS)
D0 = math.sqrt(NORM_EPS)


def one(x, y, k=None):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return EmbeddingBatch(x, np.full(x.shape[0], y))


@st.composite
def distance_instances(draw, max_n=6, max_d=5, max_k=5):
    n = draw(st.integers(1, max_n))
    d = draw(st.integers(1, max_d))
    k = draw(st.integers(1, max_k))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    scale = draw(st.sampled_from([0.1, 1.0, 5.0]))
    x = rng.normal(scale=scale, size=(n, d))
    c = rng.normal(scale=scale, size=(k, d))
    return EmbeddingBatch(x, rng.integers(0, k, size=n)), PrototypeSet(c)


# --- scalar oracles -------------------------------------------------------

def test_softmax_uniform_logits_is_ln2():
    w = ClassifierWeights(np.zeros((2, 3)), np.zeros(2))
    assert softmax_loss(one([1.0, -2.0, 0.5], 0), w).loss == pytest.approx(LN2, abs=1e-15)


def test_softmax_single_class_is_zero():
    w = ClassifierWeights(np.array([[0.3, -1.0]]), np.array([2.0]))
    res = softmax_loss(one([[1.0, 2.0], [-4.0, 0.1]], 0), w)
    assert res.loss == 0.0
    assert np.all(res.grad_embeddings == 0)


@pytest.mark.parametrize("m", [1.0, 2.0, 4.0, 17.5])
def test_ems_single_class_is_zero(m):
    res = ems_loss(one([[3.0, -1.0], [0.0, 2.0]], 0), PrototypeSet(np.array([[1.0, 1.0]])), m)
    assert res.loss == 0.0


@pytest.mark.parametrize("m", [1.0, 1.5, 4.0, 100.0])
def test_ems_at_prototype(m):
    # d_y = 0 and the other center is one unit away; the stabilised norm
    # moves the target distance to D0, which costs at most m * D0
    protos = PrototypeSet(np.array([[0.0, 0.0], [1.0, 0.0]]))
    loss = ems_loss(one([0.0, 0.0], 0), protos, m).loss
    assert loss == pytest.approx(LN1PE, abs=m * D0)


def test_ems_on_wrong_prototype():
    # x sits on c_1 but is labelled with class 2 (index 1): the target distance is 1
    protos = PrototypeSet(np.array([[0.0, 0.0], [1.0, 0.0]]))
    m = 4.0
    d_other = D0
    expected = -math.log(math.exp(-m) / (math.exp(-m) + math.exp(-d_other)))
    assert ems_loss(one([0.0, 0.0], 1), protos, m).loss == pytest.approx(expected, rel=1e-12)


def test_squared_ems_scalar():
    protos = PrototypeSet(np.array([[0.0, 0.0], [1.0, 0.0]]))
    assert squared_ems_loss(one([0.0, 0.0], 0), protos, 1.0).loss == pytest.approx(LN1PE, abs=1e-12)


def test_prototypical_equidistant_is_ln2():
    protos = PrototypeSet(np.array([[0.0, 0.0], [2.0, 0.0]]))
    assert prototypical_loss(one([1.0, 5.0], 1), protos).loss == pytest.approx(LN2, abs=1e-14)


def test_margin_touches_only_target_distance():
    protos = PrototypeSet(np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]]))
    x = np.array([0.5, 0.5])
    d = np.sqrt(((x - protos.centers) ** 2).sum(axis=1))
    m = 2.5
    expected = -(-m * d[0]) + np.log(np.exp(-m * d[0]) + np.exp(-d[1]) + np.exp(-d[2]))
    assert ems_loss(one(x, 0), protos, m).loss == pytest.approx(expected, rel=1e-12)


def test_ems_rejects_small_margin():
    protos = PrototypeSet(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="m"):
        ems_loss(one([1.0, 0.0], 0), protos, 0.99)
    with pytest.raises(ValueError):
        squared_ems_loss(one([1.0, 0.0], 0), protos, 0.5)


def test_dimension_mismatch_and_nonfinite():
    protos = PrototypeSet(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ems_loss(one([1.0, 0.0], 0), protos, 2.0)
    with pytest.raises(ValueError):
        ems_loss(EmbeddingBatch(np.array([[np.nan, 0.0, 0.0]]), np.array([0])), protos, 2.0)
    with pytest.raises(ValueError):
        ems_loss(one([1.0, 0.0, 0.0], 5), protos, 2.0)


def test_loss_result_carries_matching_shapes():
    inst = random_instance("ems", seed=3, n=5, d=4, k=3)
    res = inst.evaluate()
    assert isinstance(res, LossResult)
    assert res.grad_embeddings.shape == (5, 4)
    assert res.grad_centers.shape == (3, 4)


# --- angular logits -------------------------------------------------------

@pytest.mark.parametrize("m", [1, 2, 3, 4, 5])
def test_asoftmax_zero_angle(m):
    x = np.array([3.0, 0.0])
    w = ClassifierWeights(np.array([[2.0, 0.0], [0.0, 1.0]]))
    f = angular_logits(x, w, 0, AngularParams("a-softmax", m))
    assert f[0] == pytest.approx(3.0, rel=1e-12)
    assert f[1] == pytest.approx(0.0, abs=1e-12)


def test_lmcl_logit():
    cos = 0.8
    x = np.array([cos, math.sqrt(1 - cos**2)])
    w = ClassifierWeights(np.array([[1.0, 0.0], [0.0, 1.0]]))
    f = angular_logits(x, w, 0, AngularParams("lmcl", 0.35, 30.0))
    assert f[0] == pytest.approx(13.5, abs=1e-12)
    assert f[1] == pytest.approx(30 * math.sqrt(1 - cos**2), abs=1e-12)


def test_asoftmax_right_angle():
    x = np.array([0.0, 2.0])
    w = ClassifierWeights(np.array([[1.0, 0.0], [0.0, 1.0]]))
    f = angular_logits(x, w, 0, AngularParams("a-softmax", 4))
    assert f[0] == pytest.approx(-6.0, abs=1e-12)


@given(st.integers(1, 6), st.floats(0.0, math.pi))
def test_psi_matches_piecewise_definition(m, theta):
    k = min(math.floor(m * theta / math.pi), m - 1)
    expected = (-1) ** k * math.cos(m * theta) - 2 * k
    value, _ = psi(math.cos(theta), m)
    assert value == pytest.approx(expected, abs=1e-9)


@given(st.integers(1, 6))
def test_psi_is_monotone_decreasing_in_angle(m):
    theta = np.linspace(0.0, math.pi, 2001)
    values, _ = psi(np.cos(theta), m)
    assert np.all(np.diff(values) <= 1e-12)


def test_angular_params_validation():
    with pytest.raises(ValueError):
        AngularParams("a-softmax", 2.5)
    with pytest.raises(ValueError):
        AngularParams("a-softmax", 0)
    with pytest.raises(ValueError):
        AngularParams("lmcl", 0.35, s=0.0)
    with pytest.raises(ValueError):
        AngularParams("arcface", 0.5)


def test_angular_zero_norm_rejected():
    w = ClassifierWeights(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ValueError, match="zero-norm"):
        angular_logits(np.array([1.0, 1.0]), w, 0, AngularParams("lmcl", 0.35, 30))
    w = ClassifierWeights(np.eye(2))
    with pytest.raises(ValueError, match="zero-norm"):
        angular_logits(np.zeros(2), w, 0, AngularParams("a-softmax", 2))


def test_lmcl_without_margin_is_cosine_softmax(rng):
    x = rng.normal(size=(6, 4))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    w = rng.normal(size=(3, 4))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    batch = EmbeddingBatch(x, rng.integers(0, 3, size=6))
    lm = angular_margin_loss(batch, ClassifierWeights(w), AngularParams("lmcl", 0.0, 1.0))
    sm = softmax_loss(batch, ClassifierWeights(w, np.zeros(3)))
    assert lm.loss == pytest.approx(sm.loss, abs=1e-12)


# --- gradients ------------------------------------------------------------

@pytest.mark.parametrize("loss_id", LOSS_IDS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(loss_id, seed):
    assert grad_check(loss_id, random_instance(loss_id, seed=seed)) <= TOLERANCE[loss_id]


def test_gradient_at_prototype_is_finite():
    protos = PrototypeSet(np.array([[0.0, 0.0], [1.0, 0.0]]))
    res = ems_loss(one([0.0, 0.0], 0), protos, 4.0)
    assert np.all(np.isfinite(res.grad_embeddings))
    assert np.all(np.isfinite(res.grad_centers))


# --- properties -----------------------------------------------------------

@given(distance_instances(), st.floats(1.0, 8.0))
def test_squared_ems_m1_is_prototypical_bitwise(inst, _unused):
    batch, protos = inst
    a = squared_ems_loss(batch, protos, 1.0)
    b = prototypical_loss(batch, protos)
    assert a.loss == b.loss
    assert np.array_equal(a.grad_embeddings, b.grad_embeddings)


@given(distance_instances(), st.sampled_from(["ems", "squared-ems", "prototypical"]), st.floats(1.0, 6.0))
def test_probabilities_sum_to_one(inst, loss_id, m):
    batch, protos = inst
    res = compute_loss(loss_id, batch, protos, m)
    assert_allclose(res.probabilities.sum(axis=1), 1.0, atol=1e-12)


@given(distance_instances(), st.sampled_from(["ems", "squared-ems", "prototypical"]),
       st.floats(1.0, 6.0), st.integers(0, 2**32 - 1))
def test_translation_invariance(inst, loss_id, m, seed):
    batch, protos = inst
    t = np.random.default_rng(seed).normal(scale=3.0, size=batch.dim)
    moved = EmbeddingBatch(batch.vectors + t, batch.labels)
    a = compute_loss(loss_id, batch, protos, m).loss
    b = compute_loss(loss_id, moved, PrototypeSet(protos.centers + t), m).loss
    assert b == pytest.approx(a, abs=1e-10, rel=1e-10)


@given(distance_instances(), st.sampled_from(["ems", "squared-ems", "prototypical"]),
       st.floats(1.0, 6.0), st.integers(0, 2**32 - 1))
def test_rotation_invariance(inst, loss_id, m, seed):
    batch, protos = inst
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(batch.dim, batch.dim)))
    rotated = EmbeddingBatch(batch.vectors @ q.T, batch.labels)
    a = compute_loss(loss_id, batch, protos, m).loss
    b = compute_loss(loss_id, rotated, PrototypeSet(protos.centers @ q.T), m).loss
    assert b == pytest.approx(a, abs=1e-9, rel=1e-9)


@given(distance_instances(), st.floats(1.0, 5.0), st.floats(0.0, 5.0))
def test_ems_nondecreasing_in_margin(inst, m, dm):
    batch, protos = inst
    lo = ems_loss(batch, protos, m).loss
    hi = ems_loss(batch, protos, m + dm).loss
    assert hi >= lo - 1e-12


@given(distance_instances(), st.floats(1.0, 20.0))
def test_ems_independent_of_margin_at_prototype(inst, m):
    batch, protos = inst
    at_center = EmbeddingBatch(protos.centers[batch.labels], batch.labels)
    a = ems_loss(at_center, protos, 1.0).loss
    b = ems_loss(at_center, protos, m).loss
    # d loss / d m = d_y (1 - p_y) <= D0 at the prototype
    assert abs(b - a) <= (m - 1.0) * D0 + 1e-12


@given(distance_instances(), st.floats(1.0, 10.0))
def test_ems_nonnegative(inst, m):
    batch, protos = inst
    res = ems_loss(batch, protos, m)
    assert res.loss >= 0.0
    if protos.num_classes > 1:
        assume(res.loss > 0)
        assert res.loss > 0.0
