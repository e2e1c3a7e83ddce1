"""Exact scaled dot-product attention and its grouped approximation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import core
from .core import Tensor
from .grouping import Grouping, InvalidGroupingError, kmeans_group


class DegenerateAttentionError(ValueError):
    pass


@dataclass
class AttentionLayer:
    w_q: Tensor     # (d_h, d_k)
    w_k: Tensor     # (d_h, d_k)
    w_v: Tensor     # (d_h, d_v)
    heads: int = 1

    def __post_init__(self):
        d_k, d_v = self.w_q.shape[1], self.w_v.shape[1]
        if self.w_k.shape != self.w_q.shape:
            raise core.ShapeError(f"W_Q {self.w_q.shape} and W_K {self.w_k.shape} differ")
        if d_k % self.heads or d_v % self.heads:
            raise ValueError(f"d_k={d_k} and d_v={d_v} must divide across {self.heads} heads")

    @classmethod
    def init(cls, d_h: int, d_k: int, d_v: int, heads: int = 1,
             rng: np.random.Generator | None = None) -> "AttentionLayer":
        rng = rng if rng is not None else core.make_rng(0)
        dt = core.get_default_dtype()

        def param(shape):
            return Tensor(rng.normal(0, 1 / math.sqrt(d_h), shape).astype(dt), requires_grad=True)

        return cls(param((d_h, d_k)), param((d_h, d_k)), param((d_h, d_v)), heads)

    @classmethod
    def identity(cls, d: int) -> "AttentionLayer":
        eye = np.eye(d)
        return cls(Tensor(eye), Tensor(eye.copy()), Tensor(eye.copy()), 1)

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1] // self.heads

    @property
    def value_dim(self) -> int:
        return self.w_v.shape[1] // self.heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)

    def parameters(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v}

    def project(self, h) -> tuple[list[Tensor], list[Tensor], list[Tensor]]:
        """Per-head Q, K, V slices of shape (..., n, head_dim)."""
        h = core.as_tensor(h)
        q, k, v = h @ self.w_q, h @ self.w_k, h @ self.w_v
        dk, dv = self.head_dim, self.value_dim
        qs = [q[..., i * dk:(i + 1) * dk] for i in range(self.heads)]
        ks = [k[..., i * dk:(i + 1) * dk] for i in range(self.heads)]
        vs = [v[..., i * dv:(i + 1) * dv] for i in range(self.heads)]
        return qs, ks, vs


@dataclass
class GroupAttentionOutput:
    output: Tensor              # (n, d_v)
    scores: Tensor              # (n, N) group attention matrix
    grouping: Grouping | list


def vanilla_attention(h, layer: AttentionLayer) -> tuple[Tensor, Tensor]:
    """Exact attention. Returns (O, A); A is per head stacked on a leading axis when heads > 1."""
    qs, ks, vs = layer.project(h)
    outs, attns = [], []
    for q, k, v in zip(qs, ks, vs):
        a = core.softmax_rows(core.scale(q @ core.transpose(k), layer.scale))
        outs.append(a @ v)
        attns.append(a)
    out = outs[0] if layer.heads == 1 else core.concat(outs, axis=-1)
    attn = attns[0] if layer.heads == 1 else Tensor(np.stack([a.data for a in attns]))
    return out, attn


def group_softmax(scores, counts) -> Tensor:
    """Softmax over groups where group k stands for ``counts[k]`` identical columns."""
    scores = core.as_tensor(scores)
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise InvalidGroupingError(f"group counts must be positive, got {counts.tolist()}")
    shift = scores.data.max(axis=-1, keepdims=True)
    e = core.exp(scores - shift)
    s = core.reduce_sum(e * counts, axis=-1, keepdims=True)
    return e / s


def restore_full(group_scores, g: Grouping) -> np.ndarray:
    """Expand an (n, N) group attention matrix to (n, n) by duplicating columns."""
    a = group_scores.data if isinstance(group_scores, Tensor) else np.asarray(group_scores)
    return a[..., g.belong]


def _group_head(q: Tensor, k: Tensor, v: Tensor, belong: np.ndarray, n_groups: int,
                scale: float) -> tuple[Tensor, Tensor]:
    """Grouped attention for one head over a (B, n, .) batch with (B, n) assignments."""
    batch, n = belong.shape
    onehot = np.zeros((batch, n, n_groups), dtype=q.data.dtype)
    onehot[np.arange(batch)[:, None], np.arange(n)[None, :], belong] = 1.0
    counts = onehot.sum(axis=1)                               # (B, N)
    if np.any(counts <= 0):
        raise InvalidGroupingError("empty group in assignment")
    member_t = np.swapaxes(onehot, 1, 2)                      # (B, N, n)
    reps = (member_t @ k) / counts[:, :, None]                # centroids, differentiable in K
    v_agg = member_t @ v                                      # embedding aggregation
    scores = core.scale(q @ core.transpose(reps), scale)      # (B, n, N)
    a_tilde = group_softmax(scores, counts[:, None, :])
    return a_tilde @ v_agg, a_tilde


def group_attention(h, layer: AttentionLayer, g: Grouping | list | None = None, *,
                    n_groups: int | None = None, iters: int = 2, seed: int = 0,
                    return_keys: bool = False):
    """Grouped attention in O(n N d).

    ``g`` is either one :class:`Grouping` (single head, unbatched input), a nested
    list ``g[head][sample]``, or ``None`` in which case keys are grouped here with
    ``kmeans_group(n_groups, iters, seed)``. Assignments are constants for the
    backward pass; centroids are recomputed from the keys so gradients reach W_K.
    """
    h = core.as_tensor(h)
    squeeze = h.ndim == 2
    if squeeze:
        h = core.reshape(h, (1,) + h.shape)
    batch, n, _ = h.shape
    qs, ks, vs = layer.project(h)

    if g is None:
        if n_groups is None:
            raise ValueError("either a grouping or n_groups is required")
        n_eff = min(max(int(n_groups), 1), n)
        groups = [[kmeans_group(k.data[b], n_eff, iters, seed + b) for b in range(batch)] for k in ks]
    elif isinstance(g, Grouping):
        if layer.heads != 1 or batch != 1:
            raise ValueError("a single Grouping only applies to one head and one sample")
        groups = [[g]]
    else:
        groups = g

    outs, scores = [], []
    for head, (q, k, v) in enumerate(zip(qs, ks, vs)):
        hg = groups[head]
        n_g = hg[0].n_groups
        if any(x.n_groups != n_g for x in hg):
            raise InvalidGroupingError("all samples of a head must share the group count")
        for x in hg:
            x.validate(n)
        belong = np.stack([x.belong for x in hg])
        o, a = _group_head(q, k, v, belong, n_g, layer.scale)
        outs.append(o)
        scores.append(a)
    out = outs[0] if layer.heads == 1 else core.concat(outs, axis=-1)
    score = scores[0]
    if squeeze:
        out = core.reshape(out, out.shape[1:])
        score = core.reshape(score, score.shape[1:])
    grouping = groups[0][0] if (squeeze and layer.heads == 1) else groups
    result = GroupAttentionOutput(out, score, grouping)
    if return_keys:
        return result, [k.data for k in ks]
    return result


def check_error_bound(exact, restored, eps: float) -> tuple[float, bool]:
    """Worst multiplicative deviation ``max(restored/exact, exact/restored)`` and ``<= eps``."""
    if eps <= 1:
        raise ValueError("error bound must exceed 1")
    a = np.asarray(exact.data if isinstance(exact, Tensor) else exact, dtype=np.float64)
    b = np.asarray(restored.data if isinstance(restored, Tensor) else restored, dtype=np.float64)
    if a.shape != b.shape:
        raise core.ShapeError(f"attention shapes differ: {a.shape} vs {b.shape}")
    if np.any(a <= 0) or np.any(b <= 0):
        raise DegenerateAttentionError("attention entries must be strictly positive")
    ratio = float(np.max(np.maximum(b / a, a / b)))
    return ratio, ratio <= eps
