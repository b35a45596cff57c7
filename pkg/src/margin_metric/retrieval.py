"""Ranking, MAP / precision@k, and intra/inter-class distance diagnostics.

Rankings sort the gallery by ascending distance with ties going to the
lower gallery index. AP is the non-interpolated average over the full
ranking (optionally truncated at ``top_k``).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from margin_metric.batch import PHOTO, SKETCH, EmbeddingBatch
from margin_metric.hashing import hamming_matrix


@dataclass
class RankedList:
    order: np.ndarray
    query_label: int | None = None


def rank_euclidean(query, gallery, query_label: int | None = None) -> RankedList:
    g = gallery.vectors if isinstance(gallery, EmbeddingBatch) else np.asarray(gallery, dtype=np.float64)
    if g.shape[0] == 0:
        raise ValueError("cannot rank an empty gallery")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != g.shape[1]:
        raise ValueError(f"query dimension {q.shape[0]} does not match gallery {g.shape[1]}")
    dist = np.sqrt(np.sum((g - q) ** 2, axis=1))
    return RankedList(np.argsort(dist, kind="stable"), query_label)


def rank_hamming(query, gallery, query_label: int | None = None) -> RankedList:
    """``query``: B bits; ``gallery``: N x B bits (bool or 0/1)."""
    g = np.asarray(gallery, dtype=bool)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ValueError("cannot rank an empty gallery")
    q = np.asarray(query, dtype=bool).reshape(-1)
    if q.shape[0] != g.shape[1]:
        raise ValueError(f"code width {q.shape[0]} does not match gallery width {g.shape[1]}")
    dist = np.count_nonzero(g != q, axis=1)
    return RankedList(np.argsort(dist, kind="stable"), query_label)


def average_precision(relevance, n_relevant: int | None = None) -> float:
    rel = np.asarray(relevance, dtype=bool)
    count = int(rel.sum())
    if n_relevant is None:
        n_relevant = count
    if n_relevant < 1:
        raise ValueError("average precision needs at least one relevant item")
    if n_relevant != count:
        raise ValueError(f"n_relevant={n_relevant} but {count} relevance flags are set")
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.shape[0] + 1)
    return float(np.sum((hits / ranks)[rel]) / n_relevant)


def precision_at_k(relevance, k: int) -> float:
    rel = np.asarray(relevance, dtype=bool)
    if not 1 <= k <= rel.shape[0]:
        raise ValueError(f"k={k} outside 1..{rel.shape[0]}")
    return float(rel[:k].sum() / k)


def _distance_matrix(q, g, metric):
    if metric == "euclidean":
        sq = (q**2).sum(1)[:, None] + (g**2).sum(1)[None, :] - 2.0 * q @ g.T
        return np.sqrt(np.maximum(sq, 0.0))
    if metric == "hamming":
        return hamming_matrix(q, g)
    raise ValueError(f"unknown distance mode {metric!r}")


def ranked_relevance(q_vecs, q_labels, g_vecs, g_labels, metric="euclidean", chunk=512):
    """Yield the boolean relevance matrix of each query chunk, gallery in ranked order."""
    g_labels = np.asarray(g_labels)
    for start in range(0, len(q_labels), chunk):
        q = q_vecs[start:start + chunk]
        order = np.argsort(_distance_matrix(q, g_vecs, metric), axis=1, kind="stable")
        yield g_labels[order] == np.asarray(q_labels[start:start + chunk])[:, None]


def retrieval_metrics(q_vecs, q_labels, g_vecs, g_labels, metric="euclidean",
                      precision_ks=(), top_k: int | None = None) -> dict:
    """MAP (and precision@k) of queries against a gallery, relevance = same label.

    With ``top_k`` the AP sum stops at rank ``top_k`` but is still divided
    by the total number of relevant gallery items.
    """
    q_labels = np.asarray(q_labels)
    g_labels = np.asarray(g_labels)
    if len(q_labels) == 0:
        raise ValueError("no queries")
    absent = sorted(set(q_labels.tolist()) - set(g_labels.tolist()))
    if absent:
        raise ValueError(f"query classes {absent} have no gallery items")
    n_gallery = len(g_labels)
    for k in precision_ks:
        if not 1 <= k <= n_gallery:
            raise ValueError(f"precision@{k} needs a gallery of at least {k} items")
    aps = []
    precisions = {k: [] for k in precision_ks}
    ranks = np.arange(1, n_gallery + 1)
    for rel in ranked_relevance(q_vecs, q_labels, g_vecs, g_labels, metric):
        n_rel = rel.sum(axis=1)
        prec = np.cumsum(rel, axis=1) / ranks
        contrib = np.where(rel, prec, 0.0)
        if top_k is not None:
            contrib = contrib[:, :top_k]
        aps.append(contrib.sum(axis=1) / n_rel)
        for k in precision_ks:
            precisions[k].append(rel[:, :k].sum(axis=1) / k)
    aps = np.concatenate(aps)
    out = {"map": float(aps.mean()), "n_queries": int(len(aps)), "n_gallery": int(n_gallery)}
    for k in precision_ks:
        out[f"precision@{k}"] = float(np.concatenate(precisions[k]).mean())
    return out


def mean_average_precision(queries, gallery, metric: str = "euclidean", top_k: int | None = None) -> float:
    """MAP of labelled query vectors (or codes) against a labelled gallery.

    ``queries`` and ``gallery`` are EmbeddingBatch objects or
    ``(vectors_or_codes, labels)`` pairs.
    """
    qv, ql = _unpack(queries)
    gv, gl = _unpack(gallery)
    return retrieval_metrics(qv, ql, gv, gl, metric, top_k=top_k)["map"]


def _unpack(obj):
    if isinstance(obj, EmbeddingBatch):
        return obj.vectors, obj.labels
    vecs, labels = obj
    return np.asarray(vecs), np.asarray(labels)


def cross_domain_metrics(embeddings: EmbeddingBatch, precision_ks=(), top_k=None, codes=None) -> dict:
    """Sketch queries against the photo gallery (Euclidean, or Hamming when codes are given)."""
    sk = embeddings.domains == SKETCH
    ph = embeddings.domains == PHOTO
    if codes is None:
        vecs, metric = embeddings.vectors, "euclidean"
    else:
        vecs, metric = np.asarray(codes, dtype=bool), "hamming"
    return retrieval_metrics(
        vecs[sk], embeddings.labels[sk], vecs[ph], embeddings.labels[ph], metric, precision_ks, top_k
    )


def random_ranking_map(n_relevant, n_gallery) -> float:
    """Expected AP of a uniformly random ranking with R relevant among N items.

    E[AP] = (R-1)/(N-1) + H_N (N-R) / (N (N-1)), H_N the N-th harmonic number.
    """
    r, n = int(n_relevant), int(n_gallery)
    if n == 1:
        return 1.0
    harmonic = float(np.sum(1.0 / np.arange(1, n + 1)))
    return (r - 1) / (n - 1) + harmonic * (n - r) / (n * (n - 1))


def random_baseline_map(q_labels, g_labels) -> float:
    """Mean over queries of the random-ranking expected AP, from class proportions."""
    g_labels = np.asarray(g_labels)
    classes, counts = np.unique(g_labels, return_counts=True)
    per_class = dict(zip(classes.tolist(), counts.tolist()))
    return float(np.mean([random_ranking_map(per_class[int(c)], len(g_labels)) for c in q_labels]))


@dataclass
class DistanceReport:
    """Per-class max intra-class distance, per-sample min inter-class distance.

    ``max_intra[c]`` is None for a class with a single sample. ``p1`` holds
    when for every class its max intra distance is below the min inter
    distance of its own samples (classes with one sample only need a
    positive gap).
    """

    classes: list
    max_intra: dict
    min_inter_class: dict
    min_inter: np.ndarray
    p1: bool
    histogram: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "max_intra": {str(k): v for k, v in self.max_intra.items()},
            "min_inter": {str(k): v for k, v in self.min_inter_class.items()},
            "p1": self.p1,
        }

    def write_histogram(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_left", "bin_right", "count"])
            w.writerows(self.histogram)

    def write_rows(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["class", "max_intra", "min_inter"])
            for c in self.classes:
                mi = self.max_intra[c]
                w.writerow([c, "" if mi is None else repr(mi), repr(self.min_inter_class[c])])


def distance_report(embeddings: EmbeddingBatch, bins: int = 50, chunk: int = 1024) -> DistanceReport:
    x = embeddings.vectors
    y = embeddings.labels
    classes = sorted(set(y.tolist()))
    if len(classes) < 2:
        raise ValueError("distance report needs at least two classes")
    sqn = (x**2).sum(axis=1)
    max_intra = {}
    for c in classes:
        pts = x[y == c]
        if len(pts) < 2:
            max_intra[c] = None
            continue
        best = 0.0
        pn = sqn[y == c]
        for start in range(0, len(pts), chunk):
            blk = pts[start:start + chunk]
            sq = pn[start:start + chunk, None] + pn[None, :] - 2.0 * blk @ pts.T
            best = max(best, float(sq.max()))
        max_intra[c] = float(np.sqrt(max(best, 0.0)))
    min_inter = np.empty(len(y))
    for start in range(0, len(y), chunk):
        blk = slice(start, start + chunk)
        sq = sqn[blk, None] + sqn[None, :] - 2.0 * x[blk] @ x.T
        sq[y[blk, None] == y[None, :]] = np.inf
        min_inter[blk] = np.sqrt(np.maximum(sq.min(axis=1), 0.0))
    min_inter_class = {c: float(min_inter[y == c].min()) for c in classes}
    p1 = all(
        (max_intra[c] if max_intra[c] is not None else 0.0) < min_inter_class[c] for c in classes
    )
    top = float(min_inter.max())
    counts, edges = np.histogram(min_inter, bins=bins, range=(0.0, top if top > 0 else 1.0))
    histogram = [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]
    return DistanceReport(classes, max_intra, min_inter_class, min_inter, p1, histogram)


def report_json(metrics: dict, report: DistanceReport | None = None) -> str:
    doc = dict(metrics)
    if report is not None:
        doc["distances"] = report.to_dict()
    return json.dumps(doc, indent=2)
