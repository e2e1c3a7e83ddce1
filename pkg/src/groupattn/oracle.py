"""Slow, independently written references used by the test suite.

Nothing here imports the main-path modules; every routine is a direct loop
or an exhaustive search.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import mpmath
import numpy as np


@dataclass
class OracleReport:
    case: str
    value: float
    oracle: float
    tolerance: float

    @property
    def abs_dev(self) -> float:
        return abs(self.value - self.oracle)

    @property
    def rel_dev(self) -> float:
        return self.abs_dev / max(abs(self.oracle), 1e-300)

    @property
    def passed(self) -> bool:
        return self.abs_dev <= self.tolerance

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.case}: value={self.value:.6g} oracle={self.oracle:.6g} dev={self.abs_dev:.3g}"


def naive_matmul(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = math.fsum(a[i, p] * b[p, j] for p in range(k))
    return out


def exact_softmax_row(row, dps: int = 40) -> list[float]:
    with mpmath.workdps(dps):
        e = [mpmath.exp(mpmath.mpf(float(x))) for x in row]
        s = mpmath.fsum(e)
        return [float(x / s) for x in e]


def oracle_attention(h, w_q, w_k, w_v, heads: int = 1, dps: int = 30) -> tuple[np.ndarray, np.ndarray]:
    """Triple-loop attention at ``dps`` decimal digits. Returns (O, A[head])."""
    h = np.asarray(h, dtype=np.float64)
    w_q, w_k, w_v = (np.asarray(w, dtype=np.float64) for w in (w_q, w_k, w_v))
    n, d_h = h.shape
    dk = w_q.shape[1] // heads
    dv = w_v.shape[1] // heads
    out = np.zeros((n, w_v.shape[1]))
    attn = np.zeros((heads, n, n))
    with mpmath.workdps(dps):
        H = [[mpmath.mpf(float(x)) for x in row] for row in h]

        def proj(w, cols):
            return [[mpmath.fsum(H[i][p] * mpmath.mpf(float(w[p, c])) for p in range(d_h)) for c in cols]
                    for i in range(n)]

        for hd in range(heads):
            qc = range(hd * dk, (hd + 1) * dk)
            vc = range(hd * dv, (hd + 1) * dv)
            Q, K, V = proj(w_q, qc), proj(w_k, qc), proj(w_v, vc)
            scale = 1 / mpmath.sqrt(dk)
            for i in range(n):
                logits = [mpmath.fsum(Q[i][c] * K[j][c] for c in range(dk)) * scale for j in range(n)]
                top = max(logits)
                e = [mpmath.exp(x - top) for x in logits]
                s = mpmath.fsum(e)
                a = [x / s for x in e]
                for j in range(n):
                    attn[hd, i, j] = float(a[j])
                for c in range(dv):
                    out[i, hd * dv + c] = float(mpmath.fsum(a[j] * V[j][c] for j in range(n)))
    return out, (attn[0] if heads == 1 else attn)


def oracle_restore_softmax(group_logits, belong) -> np.ndarray:
    """Expand (n, N) group logits to (n, n) by assignment, then ordinary softmax per row."""
    p = np.asarray(group_logits, dtype=np.float64)
    belong = [int(b) for b in belong]
    out = np.zeros((p.shape[0], len(belong)))
    for i in range(p.shape[0]):
        full = [p[i, b] for b in belong]
        out[i] = exact_softmax_row(full, dps=30)
    return out


def brute_force_kmeans(points, k: int) -> tuple[float, list[int]]:
    """Optimal k-clustering by trying every labelling (tiny inputs only)."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n > 12:
        raise ValueError("brute force limited to 12 points")
    best, best_lab = math.inf, []
    for labels in itertools.product(range(k), repeat=n):
        if labels[0] != 0 or len(set(labels)) != k:
            continue
        cost = 0.0
        for c in range(k):
            members = pts[[i for i in range(n) if labels[i] == c]]
            cost += float(((members - members.mean(axis=0)) ** 2).sum())
        if cost < best:
            best, best_lab = cost, list(labels)
    return best, best_lab


def naive_distances(points, centers) -> np.ndarray:
    points, centers = np.asarray(points, dtype=np.float64), np.asarray(centers, dtype=np.float64)
    out = np.zeros((len(points), len(centers)))
    for i, p in enumerate(points):
        for j, c in enumerate(centers):
            out[i, j] = math.sqrt(math.fsum((x - y) ** 2 for x, y in zip(p, c)))
    return out


def linear_scan_batch(per_sample: float, budget: float, limit: float = 0.9, max_batch: int | None = None) -> int:
    """Largest B with B * per_sample <= limit * budget, found by counting up."""
    cap = max_batch if max_batch is not None else int(budget // per_sample) + 2
    best = 0
    for b in range(1, cap + 1):
        if b * per_sample / budget <= limit:
            best = b
    return best


def _reciprocal_fit_error(points: list[tuple[float, float, float]], min_points: int) -> float:
    if len(points) < min_points:
        return math.inf
    X = np.array([[L * N, L, 1.0] for L, N, _ in points])
    y = np.array([1.0 / B for _, _, B in points])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    err = 0.0
    for (L, N, B), row in zip(points, X):
        r = float(row @ coef)
        pred = 1.0 / r if r > 0 else math.inf
        err += (pred - B) ** 2
    return err


def _compositions(lo: int, hi: int):
    """All ways to cut the integer range [lo, hi] into consecutive pieces."""
    inner = list(range(lo, hi))
    for r in range(len(inner) + 1):
        for cuts in itertools.combinations(inner, r):
            bounds = [lo - 1, *cuts, hi]
            yield [(bounds[i] + 1, bounds[i + 1]) for i in range(len(bounds) - 1)]


def oracle_partition_search(samples, l_max: int, min_points: int) -> float:
    """Minimum total fit error over every vertical-then-horizontal guillotine partition."""
    if l_max > 6:
        raise ValueError("exhaustive partition search refuses l_max > 6")
    pts = [tuple(map(float, row)) for row in np.asarray(samples).reshape(-1, 3)]
    memo: dict[tuple, float] = {}

    def piece(l_lo, l_hi, n_lo, n_hi) -> float:
        key = (l_lo, l_hi, n_lo, n_hi)
        if key not in memo:
            sel = [p for p in pts if l_lo <= p[0] <= l_hi and n_lo <= p[1] <= n_hi]
            memo[key] = _reciprocal_fit_error(sel, min_points)
        return memo[key]

    best = math.inf
    for strips in _compositions(1, l_max):
        options = []
        for l_lo, l_hi in strips:
            options.append([sum(piece(l_lo, l_hi, a, b) for a, b in cut)
                            for cut in _compositions(1, l_hi)])
        for combo in itertools.product(*options):
            total = sum(combo)
            if total < best:
                best = total
    return best


def oracle_partition_error(samples, rectangles, min_points: int) -> float:
    """Total fit error of a given list of (l_lo, l_hi, n_lo, n_hi) rectangles."""
    pts = [tuple(map(float, row)) for row in np.asarray(samples).reshape(-1, 3)]
    total = 0.0
    for l_lo, l_hi, n_lo, n_hi in rectangles:
        sel = [p for p in pts if l_lo <= p[0] <= l_hi and n_lo <= p[1] <= n_hi]
        total += _reciprocal_fit_error(sel, min_points)
    return total
