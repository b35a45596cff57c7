"""Prototype hashing: a small autoencoder trained on the class centers.

The encoder ``E(x) = tanh(W x + b)`` maps features to B channels and the
binary code is the sign pattern of ``E(x)``. Training minimises any
combination of

* reconstruction ``rec = mean_j ||c_j - D(E(c_j))||^2``,
* scatter ``scat`` = mean pairwise cosine between the ``E(c_j)``,
* quantisation ``quant = mean_i ||E(x_i) - sign(E(c_{y_i}))||^2``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from margin_metric.batch import EmbeddingBatch
from margin_metric.losses import PrototypeSet
from margin_metric.training import AdamHyper, AdamState, adam_step, lr_schedule

CODE_MAGIC = b"HSH1"
_HEADER = struct.Struct("<4sII")
SUPPORTED_BITS = (32, 64, 128)


@dataclass
class HashAutoencoder:
    enc_w: np.ndarray   # B x D
    enc_b: np.ndarray   # B
    dec_w: np.ndarray   # D x B
    dec_b: np.ndarray   # D

    @property
    def bits(self) -> int:
        return self.enc_w.shape[0]

    @property
    def dim(self) -> int:
        return self.enc_w.shape[1]

    def arrays(self) -> dict:
        return {"enc_w": self.enc_w, "enc_b": self.enc_b, "dec_w": self.dec_w, "dec_b": self.dec_b}

    def copy(self) -> "HashAutoencoder":
        return HashAutoencoder(*(a.copy() for a in self.arrays().values()))

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"hash encoder expects dimension {self.dim}, got {x.shape[-1]}")
        return np.tanh(x @ self.enc_w.T + self.enc_b)

    def decode(self, z) -> np.ndarray:
        return np.asarray(z) @ self.dec_w.T + self.dec_b

    def to_dict(self) -> dict:
        return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.arrays().items()}

    @classmethod
    def from_dict(cls, d: dict) -> "HashAutoencoder":
        get = lambda k: np.asarray(d[k]["data"], dtype=np.float64).reshape(d[k]["shape"])  # noqa: E731
        return cls(get("enc_w"), get("enc_b"), get("dec_w"), get("dec_b"))


@dataclass
class HashLossTerms:
    rec: float
    scat: float
    quant: float
    total: float


def parse_terms(spec) -> frozenset:
    """'r+s' -> {'r', 's'}."""
    if isinstance(spec, str):
        parts = [p.strip() for p in spec.split("+") if p.strip()]
    else:
        parts = list(spec)
    terms = frozenset(parts)
    if not terms or not terms <= {"r", "s", "q"}:
        raise ValueError(f"loss terms must combine r, s and q, got {spec!r}")
    return terms


def init_autoencoder(dim: int, bits: int, seed: int) -> HashAutoencoder:
    if bits < 1 or dim < 1:
        raise ValueError("bit count and dimension must be at least 1")
    rng = np.random.default_rng(seed)
    return HashAutoencoder(
        rng.normal(0.0, 1.0 / np.sqrt(dim), size=(bits, dim)),
        np.zeros(bits),
        rng.normal(0.0, 1.0 / np.sqrt(bits), size=(dim, bits)),
        np.zeros(dim),
    )


def _code_targets(z: np.ndarray) -> np.ndarray:
    """sign(z) as +/-1 with 0 -> -1, matching bit 0 for an exact zero."""
    return np.where(z > 0, 1.0, -1.0)


def _losses_and_grads(protos: PrototypeSet, embeddings: EmbeddingBatch | None,
                      ae: HashAutoencoder, terms: frozenset, need_grads: bool = True):
    c = protos.centers
    k = c.shape[0]
    if k < 2:
        raise ValueError("hashing losses need at least two prototypes")
    if c.shape[1] != ae.dim:
        raise ValueError(f"prototype dimension {c.shape[1]} does not match autoencoder {ae.dim}")
    z = ae.encode(c)
    recon = ae.decode(z)
    resid = c - recon
    rec = float(np.sum(resid**2) / k)

    norms = np.linalg.norm(z, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"encoded prototype {int(zero[0])} has zero norm; cosine undefined")
    u = z / norms[:, None]
    gram = u @ u.T
    scat = float((gram.sum() - np.trace(gram)) / (k * (k - 1)))

    quant = 0.0
    zx = None
    if "q" in terms:
        if embeddings is None or len(embeddings) == 0:
            raise ValueError("the quantisation term needs embeddings")
        zx = ae.encode(embeddings.vectors)
        target = _code_targets(z)[embeddings.labels]
        quant = float(np.sum((zx - target) ** 2) / len(embeddings))

    total = (rec if "r" in terms else 0.0) + (scat if "s" in terms else 0.0) + (quant if "q" in terms else 0.0)
    out = HashLossTerms(rec, scat, quant, total)
    if not need_grads:
        return out, None

    grads = {name: np.zeros_like(a) for name, a in ae.arrays().items()}
    dz = np.zeros_like(z)
    if "r" in terms:
        drecon = -2.0 * resid / k
        grads["dec_w"] += drecon.T @ z
        grads["dec_b"] += drecon.sum(axis=0)
        dz += drecon @ ae.dec_w
    if "s" in terms:
        du = 2.0 * (u.sum(axis=0) - u) / (k * (k - 1))
        dz += (du - np.sum(du * u, axis=1, keepdims=True) * u) / norms[:, None]
    dpre = dz * (1.0 - z**2)
    grads["enc_w"] += dpre.T @ c
    grads["enc_b"] += dpre.sum(axis=0)
    if zx is not None:
        dpre_x = 2.0 * (zx - target) / len(embeddings) * (1.0 - zx**2)
        grads["enc_w"] += dpre_x.T @ embeddings.vectors
        grads["enc_b"] += dpre_x.sum(axis=0)
    return out, grads


def hash_losses(protos: PrototypeSet, embeddings: EmbeddingBatch | None, ae: HashAutoencoder,
                enable_quant: bool = False) -> HashLossTerms:
    """All three terms; ``total`` is rec + scat, plus quant when enabled."""
    if enable_quant and embeddings is None:
        raise ValueError("the quantisation term needs embeddings")
    terms = frozenset("rsq") if enable_quant else frozenset("rs")
    return _losses_and_grads(protos, embeddings, ae, terms, need_grads=False)[0]


def hash_loss_grads(protos, embeddings, ae, terms) -> tuple[HashLossTerms, dict]:
    return _losses_and_grads(protos, embeddings, ae, parse_terms(terms))


def train_hasher(protos: PrototypeSet, embeddings: EmbeddingBatch | None, bits: int,
                 steps: int = 10000, seed: int = 0, terms="r+s",
                 hyper: AdamHyper | None = None) -> tuple[HashAutoencoder, list]:
    """Full-batch Adam on the selected terms. Returns the autoencoder and the
    per-step :class:`HashLossTerms` history (the entry at index i is
    measured before update i; the last entry is measured after training)."""
    terms = parse_terms(terms)
    if bits < 1:
        raise ValueError(f"bit count must be at least 1, got {bits}")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    hyper = hyper or AdamHyper()
    ae = init_autoencoder(protos.dim, bits, seed)
    state = AdamState()
    history = []
    for step in range(steps):
        lt, grads = _losses_and_grads(protos, embeddings, ae, terms)
        if not np.isfinite(lt.total):
            raise FloatingPointError(f"hash training diverged at step {step}")
        history.append(lt)
        adam_step(ae.arrays(), grads, state, hyper, lr=lr_schedule(step, steps, hyper.lr))
    history.append(_losses_and_grads(protos, embeddings, ae, terms, need_grads=False)[0])
    return ae, history


def encode_binary(ae: HashAutoencoder, x) -> np.ndarray:
    """Bits (bool) of one vector or a batch: bit b is set iff E(x)_b > 0."""
    return ae.encode(x) > 0


def _bits(code) -> np.ndarray:
    if isinstance(code, str):
        return np.array([ch == "1" for ch in code], dtype=bool)
    return np.asarray(code, dtype=bool).reshape(-1)


def hamming_distance(a, b) -> int:
    a, b = _bits(a), _bits(b)
    if a.shape != b.shape:
        raise ValueError(f"code widths differ: {a.shape[0]} vs {b.shape[0]}")
    return int(np.count_nonzero(a ^ b))


def hamming_matrix(q, g) -> np.ndarray:
    """Pairwise Hamming distances between rows of two bit matrices."""
    q = np.asarray(q, dtype=bool)
    g = np.asarray(g, dtype=bool)
    if q.shape[1] != g.shape[1]:
        raise ValueError("code widths differ")
    qf = q.astype(np.float64)
    gf = g.astype(np.float64)
    same = qf @ gf.T + (1.0 - qf) @ (1.0 - gf).T
    return (q.shape[1] - same).astype(np.int64)


def write_codes(path, codes, labels) -> None:
    codes = np.asarray(codes, dtype=bool)
    labels = np.asarray(labels, dtype=np.uint32)
    n, b = codes.shape
    packed = np.packbits(codes, axis=1, bitorder="little") if b else np.zeros((n, 0), np.uint8)
    rec = np.zeros(n, dtype=np.dtype([("bits", "u1", (packed.shape[1],)), ("label", "<u4")]))
    rec["bits"] = packed
    rec["label"] = labels
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CODE_MAGIC, n, b))
        f.write(rec.tobytes())


def read_codes(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, n, b = _HEADER.unpack_from(raw)
    if magic != CODE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {CODE_MAGIC!r}")
    nbytes = (b + 7) // 8
    dtype = np.dtype([("bits", "u1", (nbytes,)), ("label", "<u4")])
    if len(raw) != _HEADER.size + n * dtype.itemsize:
        raise ValueError(f"{path}: size does not match N={n}, B={b}")
    rec = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size)
    codes = np.unpackbits(rec["bits"].reshape(n, nbytes), axis=1, count=b, bitorder="little").astype(bool)
    return codes, rec["label"].astype(np.int64)
