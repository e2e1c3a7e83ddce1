"""K-means grouping of key vectors.

Distances come from ``|v|^2 + |c|^2 - 2 v.c`` so the dominant cost is a single
matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import make_rng


class InvalidGroupingError(ValueError):
    pass


@dataclass
class Grouping:
    belong: np.ndarray          # (n,) int, values in [0, N)
    count: np.ndarray           # (N,) int, all >= 1
    centroids: np.ndarray       # (N, d_k)
    max_dist: float
    radius: float
    objective: list[float] = field(default_factory=list)

    @property
    def n_groups(self) -> int:
        return int(self.count.shape[0])

    @property
    def n(self) -> int:
        return int(self.belong.shape[0])

    def one_hot(self) -> np.ndarray:
        """(n, N) membership matrix."""
        m = np.zeros((self.n, self.n_groups))
        m[np.arange(self.n), self.belong] = 1.0
        return m

    def validate(self, n: int | None = None) -> None:
        if n is not None and self.n != n:
            raise InvalidGroupingError(f"grouping covers {self.n} windows, expected {n}")
        if self.n_groups < 1:
            raise InvalidGroupingError("grouping has no groups")
        if np.any(self.belong < 0) or np.any(self.belong >= self.n_groups):
            raise InvalidGroupingError("assignment outside [0, N)")
        counts = np.bincount(self.belong, minlength=self.n_groups)
        if np.any(self.count <= 0) or np.any(counts != self.count):
            raise InvalidGroupingError(f"group sizes {self.count.tolist()} inconsistent or empty")

    @classmethod
    def from_assignment(cls, keys: np.ndarray, belong, n_groups: int | None = None) -> "Grouping":
        keys = np.asarray(keys, dtype=np.float64)
        belong = np.asarray(belong, dtype=np.int64)
        n_groups = int(belong.max()) + 1 if n_groups is None else n_groups
        count = np.bincount(belong, minlength=n_groups)
        if np.any(count == 0):
            raise InvalidGroupingError(f"empty group in assignment (sizes {count.tolist()})")
        centroids = _centroids(keys, belong, count)
        max_dist, radius = _stats(keys, belong, centroids)
        return cls(belong, count, centroids, max_dist, radius)


def squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, N) squared Euclidean distances via one matrix product."""
    pn = np.einsum("ij,ij->i", points, points)[:, None]
    cn = np.einsum("ij,ij->i", centers, centers)[None, :]
    return np.maximum(pn + cn - 2.0 * (points @ centers.T), 0.0)


def _centroids(keys, belong, count):
    sums = np.zeros((count.shape[0], keys.shape[1]))
    np.add.at(sums, belong, keys)
    return sums / count[:, None]


def _stats(keys, belong, centroids) -> tuple[float, float]:
    if keys.shape[0] == 0:
        return 0.0, 0.0
    max_dist = float(np.max(np.linalg.norm(keys - centroids[belong], axis=1)))
    radius = float(np.max(np.linalg.norm(keys, axis=1)))
    return max_dist, radius


def grouping_stats(g: Grouping, keys: np.ndarray) -> tuple[float, float]:
    """Exact ``(max member-to-centroid distance, max key norm)``."""
    return _stats(np.asarray(keys, dtype=np.float64), g.belong, g.centroids)


def _plus_plus_init(keys: np.ndarray, n_groups: int, rng: np.random.Generator) -> np.ndarray:
    n = keys.shape[0]
    chosen = [int(rng.integers(n))]
    closest = squared_distances(keys, keys[chosen])[:, 0]
    for _ in range(1, n_groups):
        total = closest.sum()
        if total <= 0:
            # every point already coincides with a center; take unused indices in order
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(unused[0])
        else:
            nxt = int(rng.choice(n, p=closest / total))
        chosen.append(nxt)
        closest = np.minimum(closest, squared_distances(keys, keys[nxt:nxt + 1])[:, 0])
    return keys[chosen].copy()


def _repair_empty(keys, belong, count, centroids) -> None:
    """Give every empty group the point farthest from its centroid in the largest group."""
    for k in np.flatnonzero(count == 0):
        big = int(np.argmax(count))
        members = np.flatnonzero(belong == big)
        d = np.sum((keys[members] - centroids[big]) ** 2, axis=1)
        victim = int(members[np.argmax(d)])
        belong[victim] = k
        count[big] -= 1
        count[k] = 1
        centroids[k] = keys[victim]
        centroids[big] = keys[belong == big].mean(axis=0)


def kmeans_group(keys, n_groups: int, iters: int = 2, seed: int = 0) -> Grouping:
    """Group ``n`` keys into ``n_groups`` clusters with capped Lloyd iterations."""
    keys = np.asarray(keys, dtype=np.float64)
    n = keys.shape[0]
    if n_groups < 1 or n_groups > n:
        raise ValueError(f"group count must be in [1, {n}], got {n_groups}")
    if iters < 1:
        raise ValueError("iters must be >= 1")

    if n_groups == n:
        belong = np.arange(n)
        count = np.ones(n, dtype=np.int64)
        return Grouping(belong, count, keys.copy(), 0.0, _stats(keys, belong, keys)[1], [0.0])

    rng = make_rng(seed)
    centroids = _plus_plus_init(keys, n_groups, rng)
    objective: list[float] = []
    belong = np.zeros(n, dtype=np.int64)
    count = np.zeros(n_groups, dtype=np.int64)
    for _ in range(iters):
        dist = squared_distances(keys, centroids)
        belong = np.argmin(dist, axis=1)  # argmin returns the lowest index on ties
        count = np.bincount(belong, minlength=n_groups)
        centroids = _centroids(keys, belong, np.maximum(count, 1))
        _repair_empty(keys, belong, count, centroids)
        objective.append(float(np.sum((keys - centroids[belong]) ** 2)))
    max_dist, radius = _stats(keys, belong, centroids)
    return Grouping(belong, count, centroids, max_dist, radius, objective)
