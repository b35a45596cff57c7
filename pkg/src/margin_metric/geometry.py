"""Decision-region geometry of the Euclidean margin.

For margin ``m > 1`` the region where ``m * d(x, c_y) <= d(x, c_y')`` is a
ball around (and slightly beyond) ``c_y``. This module gives that ball in
closed form, the binary-case bounds on intra- and inter-class distances
over the regions, and Monte-Carlo checks of both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from margin_metric.losses import PrototypeSet

BOUNDARY_BAND = 1e-9
CONTAINMENT_TOL = 1e-12


@dataclass(frozen=True)
class BallRegion:
    center: np.ndarray
    radius: float

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return np.linalg.norm(np.atleast_2d(points) - self.center, axis=1) <= self.radius + tol


@dataclass
class RegionReport:
    """Monte-Carlo estimates over the per-class decision regions.

    ``max_intra[y]`` is None when no sample landed in region y.
    ``min_inter`` maps "y,y2" (y < y2) to the smallest sampled distance.
    A violation is an ordered pair (y, y2) whose class-y diameter exceeds
    the class-y to class-y2 gap.
    """

    m: float
    max_intra: list
    min_inter: dict
    violations: int
    violating_pairs: list
    samples: int
    accepted: list
    empty_regions: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "max_intra": self.max_intra,
            "min_inter": self.min_inter,
            "violations": self.violations,
            "violating_pairs": self.violating_pairs,
            "samples": self.samples,
            "accepted": self.accepted,
            "empty_regions": self.empty_regions,
        }


def _check_margin(m: float) -> None:
    if not m > 1:
        raise ValueError(f"decision regions are balls only for m > 1, got m={m}")


def decision_ball(c_y, c_yp, m: float) -> BallRegion:
    """Closed-form ball of points at least m times closer to c_y than to c_yp."""
    _check_margin(m)
    c_y = np.asarray(c_y, dtype=np.float64)
    c_yp = np.asarray(c_yp, dtype=np.float64)
    gap = c_y - c_yp
    dist = float(np.linalg.norm(gap))
    if dist == 0:
        raise ValueError("decision region is empty for coincident prototypes")
    k = m * m - 1.0
    return BallRegion(center=c_y + gap / k, radius=m / k * dist)


def binary_margin_bounds(m: float, dist: float) -> tuple[float, float]:
    """(max intra-class, min inter-class) distance over the two binary regions."""
    _check_margin(m)
    if not dist > 0:
        raise ValueError(f"prototype distance must be positive, got {dist}")
    k = m * m - 1.0
    return 2.0 * m / k * dist, (m * m - 2.0 * m + 1.0) / k * dist


def minimum_margin() -> float:
    """Smallest margin for which region diameters never exceed region gaps: 2 + sqrt(3)."""
    return 2.0 + math.sqrt(3.0)


def _uniform_in_ball(rng, center, radius, n):
    d = center.shape[0]
    direction = rng.normal(size=(n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / d)
    return center + direction * r[:, None]


def verify_region_membership(c_y, c_yp, m: float, n_samples: int, seed: int) -> int:
    """Count points where the closed-form ball and the defining inequality disagree.

    Points are uniform in an axis-aligned box of half-width twice the
    radius around the ball; points within ``BOUNDARY_BAND`` of either
    boundary are not counted.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    ball = decision_ball(c_y, c_yp, m)
    c_y = np.asarray(c_y, dtype=np.float64)
    c_yp = np.asarray(c_yp, dtype=np.float64)
    rng = np.random.default_rng(seed)
    half = 2.0 * ball.radius
    x = ball.center + rng.uniform(-half, half, size=(n_samples, c_y.shape[0]))
    margin = np.linalg.norm(x - c_yp, axis=1) - m * np.linalg.norm(x - c_y, axis=1)
    slack = ball.radius - np.linalg.norm(x - ball.center, axis=1)
    decided = (np.abs(margin) > BOUNDARY_BAND) & (np.abs(slack) > BOUNDARY_BAND)
    return int(np.count_nonzero(decided & ((margin >= 0) != (slack >= 0))))


def verify_monotonicity(c_y, c_yp, m: float, eps: float) -> bool:
    """True iff the region at margin m + eps lies inside the region at margin m."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    big = decision_ball(c_y, c_yp, m)
    small = decision_ball(c_y, c_yp, m + eps)
    return float(np.linalg.norm(big.center - small.center)) + small.radius <= big.radius + CONTAINMENT_TOL


def far_prototype_condition(c_a, c_b, c_other, m: float) -> bool:
    """Whether c_other is far enough from c_a that region (a, b) lies inside region (a, other)."""
    _check_margin(m)
    c_a = np.asarray(c_a, dtype=np.float64)
    far = np.linalg.norm(c_a - np.asarray(c_other, dtype=np.float64))
    near = np.linalg.norm(c_a - np.asarray(c_b, dtype=np.float64))
    return bool(far >= (m + 1.0) / (m - 1.0) * near)


lemma4_condition = far_prototype_condition


def ball_contains(outer: BallRegion, inner: BallRegion) -> bool:
    return float(np.linalg.norm(outer.center - inner.center)) + inner.radius <= outer.radius + CONTAINMENT_TOL


def _enclosing_balls(c: np.ndarray, m: float) -> list[BallRegion]:
    k = c.shape[0]
    return [
        min((decision_ball(c[y], c[j], m) for j in range(k) if j != y), key=lambda b: b.radius)
        for y in range(k)
    ]


def sample_regions(protos: PrototypeSet, m: float, n_samples: int, seed: int) -> list[np.ndarray]:
    """Rejection samples from every per-class region.

    Class y gets ``n_samples // K`` proposals, uniform in the smallest of
    its pairwise balls; a proposal is kept if it lies in all of them.
    """
    _check_margin(m)
    c = protos.centers
    k = c.shape[0]
    if k < 2:
        raise ValueError("decision regions need at least two prototypes")
    rng = np.random.default_rng(seed)
    per_class = max(1, n_samples // k)
    out = []
    for y in range(k):
        balls = [decision_ball(c[y], c[j], m) for j in range(k) if j != y]
        smallest = min(balls, key=lambda b: b.radius)
        x = _uniform_in_ball(rng, smallest.center, smallest.radius, per_class)
        keep = np.ones(per_class, dtype=bool)
        for b in balls:
            keep &= b.contains(x)
        out.append(x[keep])
    return out


def _sample_diameter(points: np.ndarray, rng, n_directions: int = 128) -> float:
    """Largest distance between two sampled points.

    Only hull vertices (or, above three dimensions, points extreme along
    some random direction) can realise the diameter, so the exact pairwise
    search runs over those candidates. The result is always a distance
    between two actual samples.
    """
    if len(points) < 2:
        return 0.0
    d = points.shape[1]
    cand = None
    if 2 <= d <= 3 and len(points) > d + 1:
        try:
            cand = points[ConvexHull(points).vertices]
        except QhullError:
            cand = None
    if cand is None:
        dirs = np.vstack([rng.normal(size=(n_directions, d)), np.eye(d)])
        idx = []
        for start in range(0, len(points), 65536):
            proj = points[start:start + 65536] @ dirs.T
            idx.append(start + proj.argmax(axis=0))
            idx.append(start + proj.argmin(axis=0))
        cand = points[np.unique(np.concatenate(idx))]
    diff = cand[:, None, :] - cand[None, :, :]
    return float(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff).max()))


def _min_cross_distance(pa, pb, ball_a, ball_b, rng) -> float:
    """Exact smallest distance between two point sets.

    A subsample gives an upper bound ``u``; only points within ``u`` of the
    other set's enclosing ball can do better, so the KD-tree search runs
    over those.
    """
    probe = pa[rng.choice(len(pa), size=min(len(pa), 2048), replace=False)]
    u = float(cKDTree(pb).query(probe, k=1)[0].min())
    near_a = pa[np.linalg.norm(pa - ball_b.center, axis=1) - ball_b.radius <= u]
    near_b = pb[np.linalg.norm(pb - ball_a.center, axis=1) - ball_a.radius <= u]
    if not len(near_a) or not len(near_b):
        return u
    return min(u, float(cKDTree(near_b).query(near_a, k=1)[0].min()))


def verify_p2(protos: PrototypeSet, m: float, n_samples: int, seed: int,
              return_samples: bool = False):
    """Check that every region's diameter is below its gap to every other region.

    Sampled diameters can only under-estimate and sampled gaps can only
    over-estimate the true values, so a reported violation is real.
    """
    regions = sample_regions(protos, m, n_samples, seed)
    rng = np.random.default_rng([seed, 1])
    k = len(regions)
    empty = [y for y, pts in enumerate(regions) if len(pts) == 0]
    max_intra = [None if len(pts) == 0 else _sample_diameter(pts, rng) for pts in regions]
    enclosing = _enclosing_balls(protos.centers, m)
    min_inter = {}
    for a in range(k):
        for b in range(a + 1, k):
            if not len(regions[a]) or not len(regions[b]):
                continue
            min_inter[f"{a},{b}"] = _min_cross_distance(
                regions[a], regions[b], enclosing[a], enclosing[b], rng
            )
    pairs = []
    for a in range(k):
        for b in range(k):
            key = f"{min(a, b)},{max(a, b)}"
            if a != b and key in min_inter and max_intra[a] > min_inter[key]:
                pairs.append([a, b])
    report = RegionReport(
        m=float(m),
        max_intra=max_intra,
        min_inter=min_inter,
        violations=len(pairs),
        violating_pairs=pairs,
        samples=k * max(1, n_samples // k),
        accepted=[int(len(p)) for p in regions],
        empty_regions=empty,
    )
    if return_samples:
        return report, regions
    return report
