"""Synthetic photo/sketch data, zero-shot splits and the EMB1 file format.

Each class has an anchor on a sphere. Photos are the anchor plus Gaussian
noise; sketches are a fixed random rotation of the anchor, scaled by
``1 + gap``, plus the same kind of noise. The rotation is shared by every
class, so the domain gap is a single invertible map.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from margin_metric.batch import PHOTO, SKETCH, EmbeddingBatch

EMB_MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")


@dataclass
class SyntheticConfig:
    classes: int = 10
    per_class: int = 200
    dim: int = 16
    sigma: float = 1.0
    gap: float = 0.5
    seed: int = 0
    # None means 10 * sigma * sqrt(dim) (or sqrt(dim) when sigma is 0).
    anchor_radius: float | None = None

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.per_class < 1 or self.dim < 1:
            raise ValueError("per_class and dim must be at least 1")
        if self.sigma < 0 or self.gap < 0:
            raise ValueError("sigma and gap must be non-negative")
        if self.anchor_radius is not None and self.anchor_radius <= 0:
            raise ValueError("anchor_radius must be positive")

    @property
    def radius(self) -> float:
        if self.anchor_radius is not None:
            return float(self.anchor_radius)
        scale = self.sigma if self.sigma > 0 else 1.0
        return 10.0 * scale * np.sqrt(self.dim)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticConfig":
        return cls(**json.loads(text))

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class SplitSpec:
    mode: str = "standard"
    holdout: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("standard", "zero-shot"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        self.holdout = sorted(int(c) for c in self.holdout)
        if self.mode == "standard" and self.holdout:
            raise ValueError("standard mode holds out no classes")


def domain_transform(config: SyntheticConfig) -> np.ndarray:
    """The fixed orthogonal map from photo anchors to sketch anchors."""
    rng = np.random.default_rng([config.seed, 1])
    q, r = np.linalg.qr(rng.normal(size=(config.dim, config.dim)))
    return q * np.sign(np.diag(r))


def class_anchors(config: SyntheticConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 0])
    a = rng.normal(size=(config.classes, config.dim))
    return config.radius * a / np.linalg.norm(a, axis=1, keepdims=True)


def generate(config: SyntheticConfig) -> EmbeddingBatch:
    """Photos for every class, then sketches for every class, class-major."""
    anchors = class_anchors(config)
    q = domain_transform(config)
    rng = np.random.default_rng([config.seed, 2])
    k, n, d = config.classes, config.per_class, config.dim
    labels = np.repeat(np.arange(k), n)
    photo = anchors[labels] + config.sigma * rng.normal(size=(k * n, d))
    sketch = (1.0 + config.gap) * anchors[labels] @ q.T + config.sigma * rng.normal(size=(k * n, d))
    return EmbeddingBatch(
        np.vstack([photo, sketch]),
        np.concatenate([labels, labels]),
        np.concatenate([np.full(k * n, PHOTO), np.full(k * n, SKETCH)]),
    )


def split_zero_shot(data: EmbeddingBatch, spec: SplitSpec) -> tuple[EmbeddingBatch, EmbeddingBatch]:
    """Partition into (source, target); target holds exactly the held-out classes."""
    present = set(np.unique(data.labels).tolist())
    missing = [c for c in spec.holdout if c not in present]
    if missing:
        raise ValueError(f"held-out classes {missing} are not in the dataset")
    held = np.isin(data.labels, spec.holdout)
    if held.all():
        raise ValueError("holding out every class leaves an empty source set")
    return data.subset(~held), data.subset(held)


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("vec", "<f4", (d,)), ("label", "<u4"), ("domain", "u1")])


def write_embeddings(path, batch: EmbeddingBatch) -> None:
    """Write vectors as little-endian float32 records (values are rounded to float32)."""
    n, d = batch.vectors.shape
    if n >= 2**32 or d >= 2**32:
        raise ValueError("batch too large for 32-bit header fields")
    rec = np.zeros(n, dtype=_record_dtype(d))
    rec["vec"] = batch.vectors
    rec["label"] = batch.labels
    rec["domain"] = batch.domains
    with open(path, "wb") as f:
        f.write(_HEADER.pack(EMB_MAGIC, n, d))
        f.write(rec.tobytes())


def read_embeddings(path) -> EmbeddingBatch:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, n, d = _HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {EMB_MAGIC!r}")
    if d == 0 and n > 0:
        raise ValueError(f"{path}: zero-width vectors")
    dtype = _record_dtype(max(d, 1)) if d else None
    expected = _HEADER.size + n * (dtype.itemsize if dtype else 0)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for N={n}, D={d}, found {len(raw)}")
    if n == 0:
        return EmbeddingBatch(np.zeros((0, d)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.uint8))
    rec = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size)
    return EmbeddingBatch(rec["vec"].astype(np.float64), rec["label"].astype(np.int64), rec["domain"].copy())
