"""Wall-time scaling of vanilla vs group attention encoders."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import core
from .model import EncoderStack, ModelConfig


@dataclass
class BenchRow:
    length: int
    t_vanilla: float    # seconds, NaN when the run failed
    t_group: float

    @property
    def speedup(self) -> float:
        if math.isnan(self.t_vanilla) or math.isnan(self.t_group) or self.t_group == 0:
            return math.nan
        return self.t_vanilla / self.t_group


@dataclass
class BenchResult:
    rows: list[BenchRow]
    exp_vanilla: float | None
    exp_group: float | None

    def csv_lines(self) -> list[str]:
        lines = ["length,t_vanilla,t_group,speedup"]
        for r in self.rows:
            lines.append(",".join([str(r.length)] + [_fmt(v) for v in (r.t_vanilla, r.t_group, r.speedup)]))
        return lines


def _fmt(v: float) -> str:
    return "N/A" if math.isnan(v) else f"{v:.6g}"


def loglog_exponent(lengths, times) -> float | None:
    """Slope of log(time) against log(length) over the finite entries."""
    pts = [(math.log(l), math.log(t)) for l, t in zip(lengths, times) if not math.isnan(t) and t > 0]
    if len(pts) < 2:
        return None
    x, y = np.array(pts).T
    return float(np.polyfit(x, y, 1)[0])


def _time_step(model: EncoderStack, x: np.ndarray, mode: str) -> float:
    start = time.perf_counter()
    out = model.encode(x, mode=mode)
    loss = core.reduce_sum(out * out)
    loss.backward()
    elapsed = time.perf_counter() - start
    for p in model.parameters().values():
        p.grad = None
    return elapsed


def bench_scaling(lengths, n_groups: int = 32, trials: int = 5, dim: int = 16, layers: int = 2,
                  heads: int = 2, width: int = 5, seed: int = 0, dtype=np.float32) -> BenchResult:
    """Median forward+backward time per window count in ``lengths``.

    Each length is a number of windows; the raw series has ``length * width``
    timestamps. Failures such as running out of memory are recorded as NaN.
    """
    lengths = [int(l) for l in lengths]
    if lengths != sorted(lengths):
        raise ValueError("lengths must be ascending")
    trials = max(trials, 1)
    previous = core.get_default_dtype()
    core.set_default_dtype(dtype)
    try:
        cfg = ModelConfig(channels=1, dim=dim, layers=layers, heads=heads, width=width,
                          n_max=max(lengths), mode="group", fixed_groups=n_groups, seed=seed)
        model = EncoderStack(cfg)
        rng = core.make_rng(seed)
        rows = []
        for length in lengths:
            x = rng.random((1, length * width, 1)).astype(dtype)
            timings = {}
            for mode in ("vanilla", "group"):
                try:
                    _time_step(model, x, mode)  # warm-up
                    timings[mode] = statistics.median(_time_step(model, x, mode) for _ in range(trials))
                except MemoryError:
                    timings[mode] = math.nan
            rows.append(BenchRow(length, timings["vanilla"], timings["group"]))
    finally:
        core.set_default_dtype(previous)
    ls = [r.length for r in rows]
    return BenchResult(rows, loglog_exponent(ls, [r.t_vanilla for r in rows]),
                       loglog_exponent(ls, [r.t_group for r in rows]))
