"""Central finite-difference checks for the analytic loss gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from margin_metric.batch import EmbeddingBatch
from margin_metric.losses import (
    CLASSIFIER_LOSSES,
    LOSS_IDS,
    ClassifierWeights,
    LossResult,
    PrototypeSet,
    compute_loss,
)

# Both gradients below this magnitude count as an exact match.
ZERO_FLOOR = 1e-12
# A-Softmax instances are redrawn when the target angle is this close to a
# piece boundary k*pi/m.
KINK_BAND = 1e-3

TOLERANCE = {loss_id: 1e-5 for loss_id in LOSS_IDS}
TOLERANCE["a-softmax"] = 1e-4


@dataclass
class LossInstance:
    loss_id: str
    batch: EmbeddingBatch
    head: PrototypeSet | ClassifierWeights
    m: float = 4.0
    s: float = 30.0

    def evaluate(self) -> LossResult:
        return compute_loss(self.loss_id, self.batch, self.head, self.m, self.s)

    def parameters(self) -> dict[str, np.ndarray]:
        """The arrays a gradient is reported for, keyed like LossResult fields."""
        out = {"grad_embeddings": self.batch.vectors}
        if isinstance(self.head, PrototypeSet):
            out["grad_centers"] = self.head.centers
        else:
            out["grad_weights"] = self.head.weights
            if self.loss_id == "softmax":
                out["grad_biases"] = self.head.biases
        return out


DEFAULT_MARGINS = {
    "softmax": (0.0, 1.0),
    "ems": (4.0, 1.0),
    "squared-ems": (4.0, 1.0),
    "prototypical": (1.0, 1.0),
    "a-softmax": (2.0, 1.0),
    "lmcl": (0.35, 30.0),
}


def _near_kink(instance: LossInstance) -> bool:
    w = instance.head.weights
    x = instance.batch.vectors
    y = instance.batch.labels
    cos = np.sum(x * w[y], axis=1) / (np.linalg.norm(x, axis=1) * np.linalg.norm(w[y], axis=1))
    theta = np.arccos(np.clip(cos, -1.0, 1.0))
    step = np.pi / instance.m
    nearest = np.round(theta / step) * step
    return bool(np.any(np.abs(theta - nearest) < KINK_BAND))


def random_instance(loss_id: str, seed: int = 0, n: int = 4, d: int = 3, k: int = 3,
                    m: float | None = None, s: float | None = None) -> LossInstance:
    """Seeded random double-precision instance for ``loss_id``."""
    if loss_id not in LOSS_IDS:
        raise ValueError(f"unknown loss {loss_id!r}")
    dm, ds = DEFAULT_MARGINS[loss_id]
    m = dm if m is None else m
    s = ds if s is None else s
    rng = np.random.default_rng(seed)
    while True:
        batch = EmbeddingBatch(rng.normal(size=(n, d)), rng.integers(0, k, size=n), rng.integers(0, 2, size=n))
        if loss_id in CLASSIFIER_LOSSES:
            head = ClassifierWeights(rng.normal(size=(k, d)), rng.normal(size=k))
        else:
            head = PrototypeSet(rng.normal(size=(k, d)))
        inst = LossInstance(loss_id, batch, head, m, s)
        if loss_id != "a-softmax" or not _near_kink(inst):
            return inst


def numerical_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ZERO_FLOOR) -> float:
    """Max-norm relative error of one parameter array's gradient.

    Arrays whose analytic and numeric gradients both stay below ``floor``
    count as an exact match.
    """
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale < floor:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def grad_check(loss: str | Callable[[LossInstance], LossResult], instance: LossInstance,
               h: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss`` is a loss id or any callable mapping the instance to a
    LossResult (used to self-test the harness with corrupted gradients).
    """
    if isinstance(loss, str):
        if loss != instance.loss_id:
            instance = LossInstance(loss, instance.batch, instance.head, instance.m, instance.s)
        evaluate = LossInstance.evaluate
    else:
        evaluate = loss
    analytic = evaluate(instance)
    worst = 0.0
    for name, array in instance.parameters().items():
        numeric = numerical_gradient(lambda: evaluate(instance).loss, array, h)
        worst = max(worst, relative_error(getattr(analytic, name), numeric))
    return worst


def encoder_grad_check(params, inputs: EmbeddingBatch, head, loss_id: str = "ems",
                       m: float = 4.0, s: float = 30.0, h: float = 1e-6) -> tuple[float, int]:
    """Check encoder parameter gradients through a loss.

    Entries whose +/- h perturbation flips any ReLU are skipped. A
    parameter array whose gradient is below the resolution of central
    differences at this loss value (about eps * |loss| / h) is not
    judged. Returns ``(worst relative error, number of skipped entries)``.
    """
    from margin_metric.encoder import activation_pattern, backward, forward

    def run():
        emb, trace = forward(params, inputs.vectors, inputs.domains)
        res = compute_loss(loss_id, EmbeddingBatch(emb, inputs.labels, inputs.domains), head, m, s)
        return res, trace

    res, trace = run()
    analytic, _ = backward(trace, res.grad_embeddings)
    base = activation_pattern(trace)
    floor = max(ZERO_FLOOR, 100.0 * np.finfo(np.float64).eps * max(1.0, abs(res.loss)) / h)
    worst = 0.0
    skipped = 0
    for name, array in params.arrays.items():
        flat = array.reshape(-1)
        numeric = np.zeros(flat.size)
        keep = np.ones(flat.size, dtype=bool)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for delta in (h, -h):
                flat[i] = orig + delta
                r, t = run()
                vals.append(r.loss)
                if activation_pattern(t) != base:
                    keep[i] = False
            flat[i] = orig
            numeric[i] = (vals[0] - vals[1]) / (2.0 * h)
        skipped += int(np.count_nonzero(~keep))
        if keep.any():
            worst = max(worst, relative_error(analytic[name].reshape(-1)[keep], numeric[keep], floor))
    return worst, skipped
