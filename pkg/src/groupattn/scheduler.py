"""Adaptive group-count control for one attention layer.

The user bound eps becomes a key-distance threshold ``ln(eps) / (2 R)``;
clusters that can be merged without breaking that threshold are counted and
the group count shrinks by a momentum-smoothed amount.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grouping import Grouping


class ContractError(ValueError):
    pass


@dataclass
class Cluster:
    center: np.ndarray
    members: np.ndarray     # (size, d)

    @property
    def size(self) -> int:
        return int(self.members.shape[0])

    @property
    def spread(self) -> float:
        """Largest member-to-center distance."""
        if self.size == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.members - self.center, axis=1)))


def clusters_from_grouping(g: Grouping, keys: np.ndarray) -> list[Cluster]:
    keys = np.asarray(keys, dtype=np.float64)
    return [Cluster(g.centroids[k], keys[g.belong == k]) for k in range(g.n_groups)]


def merge_cost(ci: Cluster, cj: Cluster) -> float:
    """``max_{x in ci} |c_i - c_j| + |x - c_i|``."""
    return float(np.linalg.norm(ci.center - cj.center)) + ci.spread


def mergeable(ci: Cluster, cj: Cluster, d: float) -> bool:
    if ci.size == 0 or cj.size == 0:
        raise ContractError("clusters must be nonempty")
    return merge_cost(ci, cj) <= d


def merged_center(clusters: list[Cluster]) -> np.ndarray:
    sizes = np.array([c.size for c in clusters], dtype=np.float64)
    centers = np.stack([c.center for c in clusters])
    return (sizes[:, None] * centers).sum(axis=0) / sizes.sum()


def halve(clusters: list[Cluster]) -> tuple[list[int], list[int]]:
    """Split cluster indices by ascending center norm; the first half gets the extra one."""
    norms = [float(np.linalg.norm(c.center)) for c in clusters]
    order = sorted(range(len(clusters)), key=lambda i: (norms[i], i))
    cut = len(order) - len(order) // 2
    return order[:cut], order[cut:]


@dataclass
class MergeScan:
    marked: list[int]
    partner: dict[int, int]
    first: list[int]
    second: list[int]

    @property
    def merged(self) -> int:
        return len(self.marked)


def halved_merge_scan(clusters: list[Cluster], d: float) -> MergeScan:
    """Mark second-half clusters that can join some first-half cluster.

    ``j`` in S2 is marked when some ``i`` in S1 has merge cost (i -> j) <= d and
    merge cost (j -> i) <= d / 2.
    """
    if len(clusters) < 2:
        return MergeScan([], {}, list(range(len(clusters))), [])
    first, second = halve(clusters)
    marked, partner = [], {}
    for j in second:
        for i in first:
            if merge_cost(clusters[i], clusters[j]) <= d and merge_cost(clusters[j], clusters[i]) <= d / 2:
                marked.append(j)
                partner[j] = i
                break
    return MergeScan(marked, partner, first, second)


def momentum_update(n: float, merged: float, alpha: float) -> float:
    """``alpha (N - D) + (1 - alpha) N``, i.e. ``N - alpha D``, floored at 1."""
    if not 0 < alpha <= 1:
        raise ContractError(f"alpha must be in (0, 1], got {alpha}")
    if merged < 0 or merged > n:
        raise ContractError(f"merged count {merged} outside [0, {n}]")
    return max(1.0, n - alpha * merged)


def distance_threshold(eps: float, radius: float) -> float:
    if radius <= 0:
        return math.inf
    return math.log(eps) / (2.0 * radius)


@dataclass
class SchedulerState:
    epsilon: float = 2.0
    alpha: float = 0.9
    n_current: float | None = None
    d_threshold: float = math.inf
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.epsilon <= 1:
            raise ContractError(f"epsilon must exceed 1, got {self.epsilon}")
        if not 0 < self.alpha <= 1:
            raise ContractError(f"alpha must be in (0, 1], got {self.alpha}")

    @staticmethod
    def initial_groups(n: int, cap: int = 1024) -> int:
        return max(1, min(n // 4, cap))

    def groups_for(self, n: int) -> int:
        """Integer group count for a sequence of ``n`` windows."""
        if self.n_current is None:
            self.n_current = float(self.initial_groups(n))
        return int(min(max(1, round(self.n_current)), n))

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "alpha": self.alpha, "n_current": self.n_current,
                "d_threshold": None if math.isinf(self.d_threshold) else self.d_threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "SchedulerState":
        thr = d.get("d_threshold")
        return cls(epsilon=d["epsilon"], alpha=d["alpha"], n_current=d.get("n_current"),
                   d_threshold=math.inf if thr is None else thr)


def step(state: SchedulerState, groupings, keys) -> int:
    """One scheduler update from a batch of groupings and their keys.

    ``groupings``/``keys`` may be a single pair or parallel lists (one entry per
    sample and head). The merged count D is averaged over them. Returns the
    integer group count for the next grouping call.
    """
    if isinstance(groupings, Grouping):
        groupings, keys = [groupings], [keys]
    if not groupings:
        raise ContractError("no groupings supplied")
    radius = max(float(np.max(np.linalg.norm(np.asarray(k), axis=-1))) for k in keys)
    d = distance_threshold(state.epsilon, radius)
    merged = []
    for g, k in zip(groupings, keys):
        merged.append(halved_merge_scan(clusters_from_grouping(g, k), d).merged)
    current = float(groupings[0].n_groups) if state.n_current is None else state.n_current
    mean_d = float(np.mean(merged))
    # D is measured on groupings of size round(N); keep it within the real-valued N
    mean_d = min(mean_d, current)
    new_n = momentum_update(current, mean_d, state.alpha)
    before = current
    state.n_current = min(new_n, before)
    state.d_threshold = d
    state.history.append({"n_before": before, "n_after": state.n_current,
                          "d_threshold": d, "merged": mean_d})
    return int(max(1, round(state.n_current)))
