"""Time-aware convolution: raw series -> window embeddings, and its transpose."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import ShapeError, Tensor

SENTINEL = -1.0


class InputTooShortError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass
class Timeseries:
    """``values`` is t x m; ``mask`` is a boolean t x m array of missing positions."""

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.values.shape:
                raise ShapeError(f"mask shape {self.mask.shape} != values shape {self.values.shape}")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def masked_positions(self) -> np.ndarray:
        if self.mask is None:
            return np.zeros_like(self.values, dtype=bool)
        return self.mask


def window_count(t: int, width: int, stride: int) -> int:
    if t < width:
        raise InputTooShortError(f"series length {t} is shorter than kernel width {width}")
    return (t - width) // stride + 1


def window_index(t: int, width: int, stride: int) -> np.ndarray:
    """(n, w) matrix of timestamp indices covered by each window."""
    n = window_count(t, width, stride)
    return np.arange(n)[:, None] * stride + np.arange(width)[None, :]


@dataclass
class ConvEmbedder:
    """d kernels over m channels and w timestamps, plus position and CLS embeddings.

    The decoder (transpose convolution) has its own weights; they are not tied
    to the encoder kernels.
    """

    kernel: Tensor          # (w * m, d); row index = offset * m + channel
    bias: Tensor            # (d,)
    position: Tensor        # (n_max, d)
    cls: Tensor             # (d,)
    dec_kernel: Tensor      # (d, w * m)
    dec_bias: Tensor        # (m,)
    width: int
    channels: int
    stride: int

    @classmethod
    def init(cls, channels: int, dim: int, width: int = 5, stride: int | None = None,
             n_max: int = 512, rng: np.random.Generator | None = None) -> "ConvEmbedder":
        if width < 1 or dim < 1 or channels < 1:
            raise ValueError("width, dim and channels must be >= 1")
        stride = width if stride is None else stride
        if stride < 1:
            raise ValueError("stride must be >= 1")
        rng = rng if rng is not None else core.make_rng(0)
        fan_in = width * channels
        dt = core.get_default_dtype()

        def param(arr):
            return Tensor(np.asarray(arr, dtype=dt), requires_grad=True)

        return cls(
            kernel=param(rng.normal(0, 1 / np.sqrt(fan_in), (fan_in, dim))),
            bias=param(np.zeros(dim)),
            position=param(rng.normal(0, 0.02, (n_max, dim))),
            cls=param(rng.normal(0, 0.02, dim)),
            dec_kernel=param(rng.normal(0, 1 / np.sqrt(dim), (dim, fan_in))),
            dec_bias=param(np.zeros(channels)),
            width=width,
            channels=channels,
            stride=stride,
        )

    @property
    def dim(self) -> int:
        return self.kernel.shape[1]

    @property
    def n_max(self) -> int:
        return self.position.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias, "position": self.position,
                "cls": self.cls, "dec_kernel": self.dec_kernel, "dec_bias": self.dec_bias}

    def windows(self, t: int) -> int:
        return window_count(t, self.width, self.stride)

    # ------------------------------------------------------------------
    def embed(self, x, with_cls: bool = False) -> Tensor:
        """Embed a (t, m) or (B, t, m) series into (..., n[+1], d)."""
        x = core.as_tensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = core.reshape(x, (1,) + x.shape)
        batch, t, m = x.shape
        if m != self.channels:
            raise ShapeError(f"series has {m} channels, embedder expects {self.channels}")
        idx = window_index(t, self.width, self.stride)
        n = idx.shape[0]
        if n > self.n_max:
            raise ValueError(f"{n} windows exceed position table size n_max={self.n_max}")
        patches = core.take(x, idx, axis=1)                       # (B, n, w, m)
        patches = core.reshape(patches, (batch, n, self.width * m))
        z = patches @ self.kernel + self.bias
        z = z + core.slice_rows(self.position, 0, n)
        if with_cls:
            cls_row = core.reshape(self.cls, (1, 1, self.dim)) * np.ones((batch, 1, 1))
            z = core.concat([cls_row, z], axis=1)
        if squeeze:
            z = core.reshape(z, z.shape[1:])
        return z

    def decode(self, z, t: int) -> Tensor:
        """Transpose convolution of (..., n, d) embeddings back to (..., t, m)."""
        z = core.as_tensor(z)
        squeeze = z.ndim == 2
        if squeeze:
            z = core.reshape(z, (1,) + z.shape)
        batch, n, d = z.shape
        idx = window_index(t, self.width, self.stride)
        if idx.shape[0] != n or d != self.dim:
            raise ShapeError(f"embeddings {z.shape[1:]} do not match geometry "
                             f"(n={idx.shape[0]}, d={self.dim}) for t={t}")
        patches = core.reshape(z @ self.dec_kernel, (batch, n, self.width, self.channels))
        out = core.scatter_add(patches, idx, t, axis=1) + self.dec_bias
        if squeeze:
            out = core.reshape(out, out.shape[1:])
        return out


def mask_timestamps(ts: Timeseries, p: float, seed: int) -> Timeseries:
    """Mask each timestamp with probability ``p`` across all channels."""
    if not 0 <= p < 1:
        raise ValueError(f"mask rate must be in [0, 1), got {p}")
    values = ts.values
    observed = ~ts.masked_positions()
    if np.any(values[observed] < 0):
        raise ContractError("series must be scaled to nonnegative values before masking")
    rng = core.make_rng(seed)
    hit = rng.random(ts.length) < p
    mask = ts.masked_positions() | hit[:, None]
    out = values.copy()
    out[mask] = SENTINEL
    return Timeseries(out, mask)


@dataclass
class MinMaxScaler:
    """Per-channel min-max scaling to [0, 1], fitted on observed training values."""

    lo: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hi: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def fit(cls, series: list[np.ndarray]) -> "MinMaxScaler":
        stacked = np.concatenate([np.asarray(s, dtype=np.float64) for s in series], axis=0)
        lo = np.nanmin(stacked, axis=0)
        hi = np.nanmax(stacked, axis=0)
        return cls(lo=lo, hi=hi)

    def _span(self) -> np.ndarray:
        span = self.hi - self.lo
        return np.where(span > 0, span, 1.0)

    def transform(self, values: np.ndarray) -> np.ndarray:
        # values outside the training range are clipped at zero to keep the sentinel unambiguous
        return np.maximum((np.asarray(values, dtype=np.float64) - self.lo) / self._span(), 0.0)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values) * self._span() + self.lo

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxScaler":
        return cls(lo=np.asarray(d["lo"], dtype=np.float64), hi=np.asarray(d["hi"], dtype=np.float64))


def apply_missing(values: np.ndarray, scaler: MinMaxScaler) -> Timeseries:
    """Scale a raw series whose missing cells are NaN and replace them by the sentinel."""
    values = np.asarray(values, dtype=np.float64)
    missing = np.isnan(values)
    scaled = scaler.transform(np.where(missing, np.nanmean(values, axis=0), values))
    scaled[missing] = SENTINEL
    return Timeseries(scaled, missing if missing.any() else None)
