"""Joint training of the encoder and class prototypes.

Adam with coupled L2 weight decay and a learning rate that decays
linearly to zero. Mini-batches are drawn uniformly with replacement from
a seeded generator, so a run is a pure function of its config.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from margin_metric.batch import EmbeddingBatch
from margin_metric.encoder import EncoderParams, backward, forward, init_params
from margin_metric.losses import (
    CLASSIFIER_LOSSES,
    LOSS_IDS,
    AngularParams,
    ClassifierWeights,
    PrototypeSet,
    compute_loss,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def lr_schedule(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside 0..{total_steps}")
    if total_steps == 0:
        return base_lr
    return base_lr * (1.0 - step / total_steps)


def adam_step(params: dict, grads: dict, state: AdamState, hyper: AdamHyper,
              lr: float | None = None, no_decay: tuple = ()) -> None:
    """One bias-corrected Adam update, in place.

    ``weight_decay * param`` is added to each gradient before the moment
    updates, except for names listed in ``no_decay``.
    """
    lr = hyper.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name}")
        if hyper.weight_decay and name not in no_decay:
            g = g + hyper.weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)


@dataclass
class TrainConfig:
    loss: str = "ems"
    m: float = 4.0
    s: float = 30.0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    proto_mode: str = "parameter"
    hidden: list = field(default_factory=lambda: [64, 64])
    embed_dim: int = 16
    squeeze_ratio: int = 4
    proto_momentum: float = 0.9
    standardize: bool = True

    def __post_init__(self):
        if self.loss not in LOSS_IDS:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {', '.join(LOSS_IDS)}")
        if self.loss in ("ems", "squared-ems") and not self.m >= 1:
            raise ValueError(f"{self.loss} needs margin m >= 1, got {self.m}")
        if self.loss in ("a-softmax", "lmcl"):
            AngularParams(self.loss, self.m, self.s)
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.proto_mode not in ("parameter", "batch-mean"):
            raise ValueError(f"unknown prototype mode {self.proto_mode!r}")
        if self.proto_mode == "batch-mean" and self.loss in CLASSIFIER_LOSSES:
            raise ValueError("batch-mean prototypes apply only to distance losses")

    def layer_dims(self, input_dim: int) -> list:
        return [int(input_dim), *[int(h) for h in self.hidden], int(self.embed_dim)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    final_prototypes: np.ndarray | None = None

    def append(self, step: int, lr: float, loss: float) -> None:
        self.steps.append(step)
        self.lrs.append(lr)
        self.losses.append(loss)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "lr", "loss"])
            for row in zip(self.steps, self.lrs, self.losses):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


@dataclass
class TrainResult:
    params: EncoderParams
    head: PrototypeSet | ClassifierWeights
    log: TrainLog
    num_classes: int

    @property
    def prototypes(self) -> PrototypeSet | None:
        return self.head if isinstance(self.head, PrototypeSet) else None


def init_head(config: TrainConfig, num_classes: int, rng) -> PrototypeSet | ClassifierWeights:
    d = config.embed_dim
    if config.loss in CLASSIFIER_LOSSES:
        return ClassifierWeights(rng.normal(0.0, 1.0 / np.sqrt(d), size=(num_classes, d)), np.zeros(num_classes))
    return PrototypeSet(rng.normal(0.0, 1.0 / np.sqrt(d), size=(num_classes, d)))


def embed(params: EncoderParams, data: EmbeddingBatch, chunk: int = 4096) -> EmbeddingBatch:
    parts = [forward(params, data.vectors[i:i + chunk], data.domains[i:i + chunk])[0]
             for i in range(0, len(data), chunk)]
    vecs = np.vstack(parts) if parts else np.zeros((0, params.layer_dims[-1]))
    return EmbeddingBatch(vecs, data.labels, data.domains)


def train(data: EmbeddingBatch, config: TrainConfig, num_classes: int | None = None) -> TrainResult:
    """Mini-batch training of encoder and class head under ``config.loss``.

    Prototypes are Adam parameters exempt from weight decay; in
    ``batch-mean`` mode they are instead exponential running means of each
    class's embeddings.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    data.check()
    k = int(num_classes if num_classes is not None else data.labels.max() + 1)
    rng = np.random.default_rng(config.seed)
    params = init_params(config.layer_dims(data.dim), config.squeeze_ratio, seed=int(rng.integers(2**31)))
    if config.standardize:
        params.fit_standardizer(data.vectors)
    params.meta["train_config"] = config.to_dict()
    params.meta["num_classes"] = k
    head = init_head(config, k, rng)
    sampler = np.random.default_rng([config.seed, 7])
    hyper = AdamHyper(config.lr, config.beta1, config.beta2, 1e-8, config.weight_decay)
    state = AdamState()
    log_ = TrainLog()
    batch_mean = config.proto_mode == "batch-mean"
    seen = np.zeros(k, dtype=bool)

    head_arrays = (
        {"head_w": head.weights, "head_b": head.biases}
        if isinstance(head, ClassifierWeights)
        else ({} if batch_mean else {"head_c": head.centers})
    )
    for step in range(config.steps):
        idx = sampler.integers(0, len(data), size=config.batch_size)
        emb, trace = forward(params, data.vectors[idx], data.domains[idx])
        batch = EmbeddingBatch(emb, data.labels[idx], data.domains[idx])
        if batch_mean:
            _update_running_means(head.centers, seen, batch, config.proto_momentum)
        res = compute_loss(config.loss, batch, head, config.m, config.s)
        lr = lr_schedule(step, config.steps, config.lr)
        if not np.isfinite(res.loss):
            raise TrainingDiverged(step, res.loss)
        log_.append(step, lr, res.loss)
        grads, _ = backward(trace, res.grad_embeddings)
        arrays = dict(params.arrays)
        arrays.update(head_arrays)
        if isinstance(head, ClassifierWeights):
            grads["head_w"] = res.grad_weights
            grads["head_b"] = res.grad_biases
        elif not batch_mean:
            grads["head_c"] = res.grad_centers
        adam_step(arrays, grads, state, hyper, lr=lr, no_decay=("head_c",))
        params.touch()
        if step % 1000 == 0:
            log.debug("step %d lr %.3g loss %.5f", step, lr, res.loss)
    if isinstance(head, PrototypeSet):
        log_.final_prototypes = head.centers.copy()
    return TrainResult(params, head, log_, k)


def _update_running_means(centers, seen, batch: EmbeddingBatch, momentum: float) -> None:
    for c in np.unique(batch.labels):
        mean = batch.vectors[batch.labels == c].mean(axis=0)
        if seen[c]:
            centers[c] = momentum * centers[c] + (1.0 - momentum) * mean
        else:
            centers[c] = mean
            seen[c] = True


def class_means(embeddings: EmbeddingBatch, num_classes: int) -> PrototypeSet:
    return PrototypeSet(np.vstack([embeddings.vectors[embeddings.labels == c].mean(axis=0)
                                   for c in range(num_classes)]))
