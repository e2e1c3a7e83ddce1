"""Synthetic sinusoid datasets and CSV timeseries files."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import make_rng


@dataclass
class Dataset:
    series: np.ndarray              # (count, t, m) raw values
    labels: np.ndarray | None = None
    truth: np.ndarray | None = None  # clean series for imputation


def _class_generators(classes: int, channels: int, rng: np.random.Generator):
    gens = []
    for _ in range(classes):
        k = int(rng.integers(2, 4))  # 2-3 components
        freqs = rng.uniform(1.0, 8.0, size=(k, channels))
        phases = rng.uniform(0, 2 * np.pi, size=(k, channels))
        amps = rng.uniform(0.5, 1.5, size=(k, channels))
        gens.append((freqs, phases, amps))
    return gens


def _mixture(t: int, gen, shift: float = 0.0) -> np.ndarray:
    freqs, phases, amps = gen
    time = np.arange(t)[:, None] / t
    out = np.zeros((t, freqs.shape[1]))
    for f, p, a in zip(freqs, phases, amps):
        out += a * np.sin(2 * np.pi * f * time + p + shift)
    return out


def gen_classification(t: int, channels: int, classes: int, samples: int, seed: int,
                       noise: float = 0.1, phase_jitter: float = 0.3, kernel: int = 5) -> Dataset:
    """Each class is its own 2-3 sinusoid mixture; samples add phase jitter and noise."""
    _check_sizes(t, channels, samples, kernel)
    if classes < 1:
        raise ValueError("classes must be >= 1")
    rng = make_rng(seed)
    gens = _class_generators(classes, channels, rng)
    labels = np.arange(samples) % classes
    rng.shuffle(labels)
    series = np.stack([
        _mixture(t, gens[c], rng.uniform(-phase_jitter, phase_jitter)) + noise * rng.normal(size=(t, channels))
        for c in labels
    ])
    return Dataset(series, labels)


def gen_imputation(t: int, channels: int, samples: int, seed: int, noise: float = 0.0,
                   kernel: int = 5) -> Dataset:
    """Random sinusoid mixtures; ``truth`` keeps the noiseless signal."""
    _check_sizes(t, channels, samples, kernel)
    rng = make_rng(seed)
    clean = []
    for _ in range(samples):
        k = int(rng.integers(2, 4))
        freqs = rng.uniform(1.0, 6.0, size=(k, channels))
        phases = rng.uniform(0, 2 * np.pi, size=(k, channels))
        amps = rng.uniform(0.5, 1.5, size=(k, channels))
        clean.append(_mixture(t, (freqs, phases, amps)))
    truth = np.stack(clean)
    return Dataset(truth + noise * rng.normal(size=truth.shape), None, truth)


def _check_sizes(t, channels, samples, kernel):
    if t < 2 * kernel or channels < 1 or samples < 1:
        raise ValueError(f"invalid sizes t={t}, channels={channels}, samples={samples}")


def write_csv(path, values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"c{j}" for j in range(values.shape[1])])
        for row in values:
            w.writerow(["" if np.isnan(v) else repr(float(v)) for v in row])


def read_csv(path) -> np.ndarray:
    """One row per timestamp; header optional; empty cells become NaN."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not _numeric_row(rows[0]):
        rows = rows[1:]
    return np.array([[float(c) if c.strip() else np.nan for c in r] for r in rows], dtype=np.float64)


def _numeric_row(row) -> bool:
    try:
        [float(c) for c in row if c.strip()]
        return True
    except ValueError:
        return False


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "label"])
        for i, s in enumerate(ds.series):
            name = f"sample_{i:05d}.csv"
            write_csv(out / name, s)
            w.writerow([name, "" if ds.labels is None else int(ds.labels[i])])
    if ds.truth is not None:
        tdir = out / "truth"
        tdir.mkdir(exist_ok=True)
        for i, s in enumerate(ds.truth):
            write_csv(tdir / f"sample_{i:05d}.csv", s)


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not root.exists():
        raise FileNotFoundError(f"data path not found: {root}")
    index = root / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"missing index file: {index}")
    with open(index, newline="") as fh:
        rows = list(csv.DictReader(fh))
    series = np.stack([read_csv(root / r["file"]) for r in rows])
    labels = None
    if rows and all(r.get("label", "") != "" for r in rows):
        labels = np.array([int(r["label"]) for r in rows])
    truth = None
    if (root / "truth").is_dir():
        truth = np.stack([read_csv(root / "truth" / r["file"]) for r in rows])
    return Dataset(series, labels, truth)


def nearest_centroid_accuracy(series: np.ndarray, labels: np.ndarray) -> float:
    """Training-set accuracy of a nearest-class-mean classifier on raw series."""
    flat = series.reshape(series.shape[0], -1)
    classes = np.unique(labels)
    cents = np.stack([flat[labels == c].mean(axis=0) for c in classes])
    d = ((flat[:, None, :] - cents[None]) ** 2).sum(-1)
    return float(np.mean(classes[np.argmin(d, axis=1)] == labels))


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
