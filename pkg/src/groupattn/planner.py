"""Offline batch-size planning: B = f(L, N) learned from probed ground truth.

Ground truth comes from a binary search against a memory probe (an analytic
:class:`MemoryModel` by default). The (L, N) triangle is split by a two-level
dynamic program into guillotine sub-planes, each fitted with
``1/B = a L N + b L + c``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

USAGE_LIMIT = 0.9
RIDGE = 1e-8
TIE = 1e-12     # DP candidates must improve by more than this to replace an earlier one


@dataclass(frozen=True)
class MemoryModel:
    """``cost(L, N, B) = B (c1 L N + c2 L d + c3 L + c4)`` against ``budget``."""

    budget: float
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    c4: float = 1.0
    dim: int = 64

    def per_sample(self, L: int, N: int) -> float:
        return self.c1 * L * N + self.c2 * L * self.dim + self.c3 * L + self.c4

    def cost(self, L: int, N: int, B: int) -> float:
        return B * self.per_sample(L, N)

    def usage(self, L: int, N: int, B: int) -> float:
        return self.cost(L, N, B) / self.budget


# probe(L, N, B) -> fraction of memory used
Probe = Callable[[int, int, int], float]


def binary_search_B(L: int, N: int, mm: MemoryModel | None = None, *, probe: Probe | None = None,
                    max_batch: int | None = None) -> int:
    """Largest B whose peak usage stays below 90% of the budget; 0 if none does."""
    if L < 1 or not 1 <= N <= L:
        raise ValueError(f"need L >= 1 and 1 <= N <= L, got L={L}, N={N}")
    if probe is None:
        if mm is None:
            raise ValueError("need a memory model or a probe")
        probe = mm.usage
    if max_batch is None:
        if mm is None:
            raise ValueError("max_batch is required with a custom probe")
        max_batch = max(1, int(mm.budget // max(mm.per_sample(L, N), 1e-300)) + 1)
    lo, hi, best = 1, max_batch, 0
    trial = (lo + hi) // 2
    while lo <= hi:
        if probe(L, N, trial) <= USAGE_LIMIT:
            best = trial
            lo = trial + 1
        else:
            hi = trial - 1
        trial = (lo + hi) // 2
    return best


def design_matrix(L, N) -> np.ndarray:
    L = np.asarray(L, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64)
    return np.stack([L * N, L, np.ones_like(L)], axis=-1)


def predict_reciprocal(coef: np.ndarray, L, N) -> np.ndarray:
    return design_matrix(L, N) @ coef


def _batch_from_reciprocal(r: np.ndarray) -> np.ndarray:
    # a nonpositive reciprocal means the fit predicts an unbounded batch
    with np.errstate(divide="ignore"):
        return np.where(r > 0, 1.0 / np.where(r > 0, r, 1.0), np.inf)


@dataclass
class Fit:
    coef: np.ndarray
    error: float


def fit_subplane(points: np.ndarray, min_points: int = 4) -> Fit:
    """Least-squares fit of 1/B on {L N, L, 1}; error is the squared error in B.

    ``points`` is an (k, 3) array of (L, N, B) rows.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < min_points:
        return Fit(np.full(3, np.nan), math.inf)
    X = design_matrix(pts[:, 0], pts[:, 1])
    y = 1.0 / pts[:, 2]
    gram = X.T @ X
    rhs = X.T @ y
    try:
        if np.linalg.cond(gram) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        coef = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        coef = np.linalg.solve(gram + RIDGE * np.eye(3), rhs)
    pred = _batch_from_reciprocal(X @ coef)
    err = float(np.sum((pred - pts[:, 2]) ** 2))
    return Fit(coef, err)


@dataclass
class SubPlane:
    l_lo: int
    l_hi: int
    n_lo: int
    n_hi: int
    coef: np.ndarray
    error: float

    def contains(self, L: int, N: int) -> bool:
        return self.l_lo <= L <= self.l_hi and self.n_lo <= N <= self.n_hi

    def to_dict(self) -> dict:
        return {"l_lo": self.l_lo, "l_hi": self.l_hi, "n_lo": self.n_lo, "n_hi": self.n_hi,
                "coef": [float(c) for c in self.coef], "error": self.error}


@dataclass
class BatchPlan:
    samples: np.ndarray                 # (k, 3) rows of (L, N, B)
    partition: list[SubPlane]
    l_max: int
    min_points: int
    total_error: float = field(default=0.0)

    def locate(self, L: int, N: int) -> SubPlane:
        for sp in self.partition:
            if sp.contains(L, N):
                return sp
        raise ValueError(f"(L={L}, N={N}) is outside the planned plane")

    def to_dict(self) -> dict:
        return {"version": 1, "l_max": self.l_max, "min_points": self.min_points,
                "total_error": self.total_error,
                "samples": [[int(L), int(N), float(B)] for L, N, B in self.samples],
                "partition": [sp.to_dict() for sp in self.partition]}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "BatchPlan":
        parts = [SubPlane(p["l_lo"], p["l_hi"], p["n_lo"], p["n_hi"],
                          np.asarray(p["coef"], dtype=np.float64), p["error"]) for p in d["partition"]]
        return cls(np.asarray(d["samples"], dtype=np.float64).reshape(-1, 3), parts,
                   d["l_max"], d["min_points"], d["total_error"])

    @classmethod
    def load(cls, path) -> "BatchPlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _better(candidate: float, incumbent: float) -> bool:
    # the first candidate tried (fewest pieces) wins ties up to roundoff
    if math.isinf(incumbent):
        return candidate < incumbent
    return candidate < incumbent - TIE * (1.0 + abs(incumbent))


def dp_partition(samples, l_max: int, min_points: int = 4) -> BatchPlan:
    """Minimum-error guillotine partition: vertical L strips, each cut horizontally in N.

    Cuts are only tried right after sampled coordinates; any other cut yields the
    same point sets and therefore the same error. Strips are ``(prev_cut, cut]``
    so neighbouring sub-planes never share a boundary row.
    """
    pts = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("no samples to partition")
    if np.any(pts[:, 2] <= 0):
        raise ValueError("samples must have a positive batch size")
    if np.any(pts[:, 0] > l_max) or np.any(pts[:, 1] > pts[:, 0]) or np.any(pts[:, 1] < 1):
        raise ValueError("samples must lie in {1 <= N <= L <= l_max}")

    l_cuts = sorted(set(int(v) for v in pts[:, 0]))
    l_cuts[-1] = l_max            # the last strip always reaches l_max
    l_bounds = [0] + l_cuts

    cache: dict[tuple, Fit] = {}

    def cost(l_lo, l_hi, n_lo, n_hi) -> Fit:
        key = (l_lo, l_hi, n_lo, n_hi)
        if key not in cache:
            sel = ((pts[:, 0] >= l_lo) & (pts[:, 0] <= l_hi) & (pts[:, 1] >= n_lo) & (pts[:, 1] <= n_hi))
            cache[key] = fit_subplane(pts[sel], min_points)
        return cache[key]

    # inner DP per strip: g over horizontal cuts
    strips: dict[tuple[int, int], tuple[float, list[tuple[int, int]]]] = {}
    for a in range(len(l_bounds) - 1):
        for b in range(a + 1, len(l_bounds)):
            l_lo, l_hi = l_bounds[a] + 1, l_bounds[b]
            in_strip = pts[(pts[:, 0] >= l_lo) & (pts[:, 0] <= l_hi)]
            n_vals = sorted(set(int(v) for v in in_strip[:, 1]))
            if not n_vals:
                strips[(a, b)] = (math.inf, [])
                continue
            n_vals[-1] = l_hi
            n_bounds = [0] + n_vals
            g = [0.0] + [math.inf] * (len(n_bounds) - 1)
            back = [-1] * len(n_bounds)
            for j in range(1, len(n_bounds)):
                for i in range(j):
                    c = g[i] + cost(l_lo, l_hi, n_bounds[i] + 1, n_bounds[j]).error
                    if _better(c, g[j]):
                        g[j], back[j] = c, i
            cuts, j = [], len(n_bounds) - 1
            while j > 0 and back[j] >= 0:
                cuts.append((n_bounds[back[j]] + 1, n_bounds[j]))
                j = back[j]
            strips[(a, b)] = (g[-1], cuts[::-1])

    # outer DP over vertical cuts
    m = len(l_bounds)
    dp = [0.0] + [math.inf] * (m - 1)
    back = [-1] * m
    for b in range(1, m):
        for a in range(b):
            c = dp[a] + strips[(a, b)][0]
            if _better(c, dp[b]):
                dp[b], back[b] = c, a
    if math.isinf(dp[-1]):
        raise ValueError(f"no partition gives every sub-plane {min_points} points")

    partition: list[SubPlane] = []
    b = m - 1
    while b > 0:
        a = back[b]
        l_lo, l_hi = l_bounds[a] + 1, l_bounds[b]
        for n_lo, n_hi in strips[(a, b)][1]:
            fit = cost(l_lo, l_hi, n_lo, n_hi)
            partition.append(SubPlane(l_lo, l_hi, n_lo, n_hi, fit.coef, fit.error))
        b = a
    partition.sort(key=lambda sp: (sp.l_lo, sp.n_lo))
    return BatchPlan(pts, partition, l_max, min_points, float(dp[-1]))


def predict_B(plan: BatchPlan, L: int, N: int) -> int:
    if not 1 <= N <= L <= plan.l_max:
        raise ValueError(f"(L={L}, N={N}) outside 1 <= N <= L <= {plan.l_max}")
    sp = plan.locate(L, N)
    r = float(predict_reciprocal(sp.coef, L, N))
    if r <= 0:
        raise ValueError(f"fitted function is not positive at (L={L}, N={N})")
    return max(1, int(math.floor(1.0 / r)))


def sample_grid(l_max: int) -> list[tuple[int, int]]:
    """Structured (L, N) grid: L on a 1-1.5-2 geometric ladder, N in {1, L/8, L/4, L/2, L}."""
    ls: set[int] = set()
    v = 1
    while v <= l_max:
        ls.add(v)
        if v * 3 // 2 <= l_max:
            ls.add(v * 3 // 2)
        v *= 2
    ls.add(l_max)
    out = []
    for L in sorted(ls):
        ns = sorted({max(1, L // 8), max(1, L // 4), max(1, L // 2), L, 1})
        out.extend((L, N) for N in ns)
    return out


def build_plan(mm: MemoryModel, l_max: int, min_points: int = 4,
               grid: Sequence[tuple[int, int]] | None = None) -> BatchPlan:
    grid = sample_grid(l_max) if grid is None else grid
    rows = []
    for L, N in grid:
        B = binary_search_B(L, N, mm)
        if B >= 1:
            rows.append((L, N, B))
    if not rows:
        raise ValueError("budget admits no batch at any sampled point")
    return dp_partition(np.asarray(rows, dtype=np.float64), l_max, min_points)
