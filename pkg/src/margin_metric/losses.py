"""Softmax-family losses with analytic gradients.

Every loss takes an :class:`EmbeddingBatch` plus its class parameters and
returns a :class:`LossResult` holding the batch-mean loss and the exact
gradients with respect to the embeddings and the class parameters.

Distance losses (``ems``, ``squared-ems``, ``prototypical``) score class
``j`` by a negated distance to a prototype ``c_j``; the EMS margin ``m``
multiplies only the target-class distance. Classifier losses (``softmax``,
``a-softmax``, ``lmcl``) score classes with a weight matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev

from margin_metric.batch import EmbeddingBatch

# Stabiliser inside the square root of the Euclidean distance, so that the
# gradient stays finite when an embedding sits exactly on a prototype.
NORM_EPS = 1e-12

LOSS_IDS = ("softmax", "ems", "squared-ems", "prototypical", "a-softmax", "lmcl")
DISTANCE_LOSSES = ("ems", "squared-ems", "prototypical")
CLASSIFIER_LOSSES = ("softmax", "a-softmax", "lmcl")


@dataclass
class PrototypeSet:
    """K class centers, one per row."""

    centers: np.ndarray

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise ValueError(f"centers must be a non-empty K x D matrix, got {self.centers.shape}")
        if not np.all(np.isfinite(self.centers)):
            raise ValueError("prototype centers contain non-finite entries")

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


@dataclass
class ClassifierWeights:
    """Linear classifier: row ``j`` of ``weights`` and ``biases[j]`` score class j."""

    weights: np.ndarray
    biases: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] < 1:
            raise ValueError(f"weights must be a non-empty K x D matrix, got {self.weights.shape}")
        if self.biases is None:
            self.biases = np.zeros(self.weights.shape[0])
        self.biases = np.asarray(self.biases, dtype=np.float64).reshape(-1)
        if self.biases.shape[0] != self.weights.shape[0]:
            raise ValueError("one bias per class row is required")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ValueError("classifier parameters contain non-finite entries")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class AngularParams:
    """Margin settings for the angular losses.

    ``variant`` is ``"a-softmax"`` (multiplicative angular margin, integer
    ``m``) or ``"lmcl"`` (additive cosine margin ``m`` with scale ``s``).
    """

    variant: str
    m: float
    s: float = 1.0

    def __post_init__(self):
        if self.variant not in ("a-softmax", "lmcl"):
            raise ValueError(f"unknown angular variant {self.variant!r}")
        if self.variant == "a-softmax":
            if self.m < 1 or float(self.m) != int(self.m):
                raise ValueError(f"a-softmax needs a positive integer margin, got {self.m}")
            self.m = int(self.m)
        elif self.s <= 0:
            raise ValueError(f"lmcl scale must be positive, got {self.s}")


@dataclass
class LossResult:
    loss: float
    grad_embeddings: np.ndarray
    probabilities: np.ndarray
    grad_centers: np.ndarray | None = None
    grad_weights: np.ndarray | None = None
    grad_biases: np.ndarray | None = None


def _check_inputs(batch: EmbeddingBatch, params: np.ndarray) -> None:
    if len(batch) < 1:
        raise ValueError("loss needs at least one sample")
    if batch.dim != params.shape[1]:
        raise ValueError(
            f"embedding dimension {batch.dim} does not match parameter dimension {params.shape[1]}"
        )
    batch.check(params.shape[0])


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy, its gradient w.r.t. the logits, and the probabilities."""
    n = logits.shape[0]
    rows = np.arange(n)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    probs = exp / total
    per_sample = np.log(total[:, 0]) - shifted[rows, labels]
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return float(per_sample.mean()), dlogits, probs


def _distance_softmax(batch, protos, m, squared):
    x = batch.vectors
    c = protos.centers
    y = batch.labels
    rows = np.arange(len(batch))
    diff = x[:, None, :] - c[None, :, :]
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    dist = sq if squared else np.sqrt(sq + NORM_EPS)
    scale = np.ones_like(dist)
    scale[rows, y] = m
    loss, dlogits, probs = _softmax_xent(-scale * dist, y)
    ddist = -dlogits * scale
    coef = 2.0 * ddist if squared else ddist / dist
    grad_x = np.einsum("nk,nkd->nd", coef, diff)
    grad_c = -np.einsum("nk,nkd->kd", coef, diff)
    return LossResult(
        loss=loss, grad_embeddings=grad_x, probabilities=probs, grad_centers=grad_c
    )


def ems_loss(batch: EmbeddingBatch, protos: PrototypeSet, m: float) -> LossResult:
    """Euclidean margin softmax.

    Per sample: ``-log(exp(-m d_y) / (exp(-m d_y) + sum_{j != y} exp(-d_j)))``
    with ``d_j = ||x - c_j||``.
    """
    if not m >= 1:
        raise ValueError(f"EMS margin must satisfy m >= 1, got {m}")
    _check_inputs(batch, protos.centers)
    return _distance_softmax(batch, protos, float(m), squared=False)


def squared_ems_loss(batch: EmbeddingBatch, protos: PrototypeSet, m: float) -> LossResult:
    """EMS with squared Euclidean distances in every exponent."""
    if not m >= 1:
        raise ValueError(f"EMS margin must satisfy m >= 1, got {m}")
    _check_inputs(batch, protos.centers)
    return _distance_softmax(batch, protos, float(m), squared=True)


def prototypical_loss(batch: EmbeddingBatch, protos: PrototypeSet) -> LossResult:
    """Softmax over negative squared distances to the prototypes."""
    _check_inputs(batch, protos.centers)
    return _distance_softmax(batch, protos, 1.0, squared=True)


def softmax_loss(batch: EmbeddingBatch, w: ClassifierWeights) -> LossResult:
    _check_inputs(batch, w.weights)
    x = batch.vectors
    loss, dlogits, probs = _softmax_xent(x @ w.weights.T + w.biases, batch.labels)
    return LossResult(
        loss=loss,
        grad_embeddings=dlogits @ w.weights,
        probabilities=probs,
        grad_weights=dlogits.T @ x,
        grad_biases=dlogits.sum(axis=0),
    )


def psi(cos_theta, m: int):
    """Monotone extension of cos(m*theta) used by A-Softmax, and its derivative.

    ``psi(theta) = (-1)^k cos(m theta) - 2k`` for theta in [k pi/m, (k+1) pi/m].
    Returns ``(psi, dpsi/dcos)``; cos(m theta) is evaluated as the Chebyshev
    polynomial T_m(cos theta) so the derivative has no 1/sin(theta) term.
    """
    c = np.clip(np.asarray(cos_theta, dtype=np.float64), -1.0, 1.0)
    theta = np.arccos(c)
    k = np.minimum(np.floor(m * theta / np.pi), m - 1)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    basis = chebyshev.Chebyshev.basis(m)
    return sign * basis(c) - 2.0 * k, sign * basis.deriv()(c)


def _angular(x, w, y, p: AngularParams):
    """Logits plus the pieces needed for the backward pass."""
    nx = np.linalg.norm(x, axis=1)
    nw = np.linalg.norm(w, axis=1)
    if np.any(nx == 0):
        raise ValueError("angular margin losses are undefined for zero-norm embeddings")
    if np.any(nw == 0):
        raise ValueError("angular margin losses are undefined for zero-norm weight rows")
    rows = np.arange(x.shape[0])
    cos = (x @ w.T) / np.outer(nx, nw)
    if p.variant == "lmcl":
        logits = p.s * cos
        logits[rows, y] -= p.s * p.m
        dcos = np.full_like(cos, p.s)
        dnorm = None
    else:
        g = cos.copy()
        dg = np.ones_like(cos)
        g[rows, y], dg[rows, y] = psi(cos[rows, y], p.m)
        logits = nx[:, None] * g
        dcos = nx[:, None] * dg
        dnorm = g
    return logits, cos, nx, nw, dcos, dnorm


def angular_logits(x, w: ClassifierWeights, target: int, p: AngularParams) -> np.ndarray:
    """Class scores of a single vector under A-Softmax or LMCL."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != w.dim:
        raise ValueError(f"vector dimension {x.shape[1]} does not match weights {w.dim}")
    if not 0 <= target < w.num_classes:
        raise ValueError(f"target {target} out of range for {w.num_classes} classes")
    return _angular(x, w.weights, np.array([target]), p)[0][0]


def angular_margin_loss(batch: EmbeddingBatch, w: ClassifierWeights, p: AngularParams) -> LossResult:
    """Cross-entropy over angular logits. Biases are unused and get zero gradient."""
    _check_inputs(batch, w.weights)
    x, W, y = batch.vectors, w.weights, batch.labels
    logits, cos, nx, nw, dcos, dnorm = _angular(x, W, y, p)
    loss, dlogits, probs = _softmax_xent(logits, y)
    a = dlogits * dcos
    ac = a * cos
    grad_x = (a / nw) @ W / nx[:, None] - (ac.sum(axis=1) / nx**2)[:, None] * x
    if dnorm is not None:
        grad_x += ((dlogits * dnorm).sum(axis=1) / nx)[:, None] * x
    grad_w = (a.T @ (x / nx[:, None])) / nw[:, None] - (ac.sum(axis=0) / nw**2)[:, None] * W
    return LossResult(
        loss=loss,
        grad_embeddings=grad_x,
        probabilities=probs,
        grad_weights=grad_w,
        grad_biases=np.zeros_like(w.biases),
    )


def compute_loss(loss_id: str, batch: EmbeddingBatch, head, m: float = 4.0, s: float = 30.0) -> LossResult:
    """Dispatch by loss name; ``head`` is a PrototypeSet or ClassifierWeights."""
    if loss_id == "ems":
        return ems_loss(batch, head, m)
    if loss_id == "squared-ems":
        return squared_ems_loss(batch, head, m)
    if loss_id == "prototypical":
        return prototypical_loss(batch, head)
    if loss_id == "softmax":
        return softmax_loss(batch, head)
    if loss_id == "a-softmax":
        return angular_margin_loss(batch, head, AngularParams("a-softmax", m))
    if loss_id == "lmcl":
        return angular_margin_loss(batch, head, AngularParams("lmcl", m, s))
    raise ValueError(f"unknown loss {loss_id!r}; expected one of {', '.join(LOSS_IDS)}")
