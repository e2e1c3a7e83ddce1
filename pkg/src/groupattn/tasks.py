"""Pretraining and downstream heads on top of :class:`EncoderStack`."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import Tensor
from .embedder import SENTINEL, Timeseries, mask_timestamps
from .model import AdamW, EncoderStack

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-4
    mask_rate: float = 0.2
    alpha: float = 0.9
    epsilon: float = 2.0
    seed: int = 0
    batch_size: int = 16
    batch_policy: str = "fixed"     # "fixed" | "planned"
    plan: object | None = None      # BatchPlan when batch_policy == "planned"
    freeze_encoder: bool = False
    schedule: bool = True
    pretrain_cls: bool = True       # keep the CLS slot in the sequence while pretraining

    def __post_init__(self):
        if not 0 <= self.mask_rate < 1:
            raise ValueError(f"mask_rate must be in [0, 1), got {self.mask_rate}")
        if self.epsilon <= 1:
            raise ValueError(f"epsilon must exceed 1, got {self.epsilon}")
        if self.batch_policy not in ("fixed", "planned"):
            raise ValueError(f"batch_policy must be 'fixed' or 'planned', got {self.batch_policy!r}")


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over the masked positions only."""
    weights = mask.astype(pred.data.dtype)
    count = weights.sum()
    if count == 0:
        raise ValueError("no masked positions")
    diff = pred - target
    return core.scale(core.reduce_sum(diff * diff * weights), 1.0 / count)


def _as_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        arr = data
    else:
        arr = np.stack([d.values if isinstance(d, Timeseries) else np.asarray(d) for d in data])
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _batch_size(cfg: TrainConfig, model: EncoderStack, t: int, total: int) -> int:
    if cfg.batch_policy == "planned" and cfg.plan is not None:
        from .planner import predict_B

        n = model.embedder.windows(t)
        groups = [model.group_count(i, n) for i in range(len(model.blocks))]
        return max(1, min(total, predict_B(cfg.plan, n, max(1, round(float(np.mean(groups)))))))
    return max(1, min(total, cfg.batch_size))


@dataclass
class PretrainResult:
    losses: list[float]
    schedule: list[dict] = field(default_factory=list)
    skipped: int = 0


def pretrain(model: EncoderStack, data, cfg: TrainConfig) -> PretrainResult:
    """Mask-and-predict training; returns the per-epoch mean masked MSE."""
    series = _as_array(data)
    if series.shape[0] == 0:
        raise ValueError("empty dataset")
    if np.any(series < 0):
        raise ValueError("pretraining data must be scaled to nonnegative values")
    for s in model.schedulers:
        s.epsilon, s.alpha = cfg.epsilon, cfg.alpha
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = core.make_rng(cfg.seed)
    count, t, _ = series.shape
    losses, trace, skipped = [], [], 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(count)
        bsz = _batch_size(cfg, model, t, count)
        epoch_losses = []
        for start in range(0, count, bsz):
            idx = order[start:start + bsz]
            batch = series[idx]
            masked = [mask_timestamps(Timeseries(x), cfg.mask_rate, int(rng.integers(2**63)))
                      for x in batch]
            mask = np.stack([m.mask for m in masked])
            if not mask.any():
                skipped += 1
                log.warning("epoch %d: batch without masked positions skipped", epoch)
                continue
            inputs = np.stack([m.values for m in masked])
            opt.zero_grad()
            loss = masked_mse(model.reconstruct(inputs, with_cls=cfg.pretrain_cls), batch, mask)
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.data))
        losses.append(float(np.mean(epoch_losses)) if epoch_losses else math.nan)
        if cfg.schedule and model.config.mode == "group":
            # scheduler statistics come from an unmasked forward on a fixed probe batch
            model.encode(series[: min(count, bsz)], with_cls=cfg.pretrain_cls)
            for row in model.schedule():
                trace.append({"epoch": epoch, **row})
    return PretrainResult(losses, trace, skipped)


@dataclass
class ClassifierHead:
    weight: Tensor      # (C, d)
    bias: Tensor        # (C,)

    @classmethod
    def init(cls, classes: int, dim: int, rng: np.random.Generator | None = None) -> "ClassifierHead":
        rng = rng if rng is not None else core.make_rng(0)
        dt = core.get_default_dtype()
        return cls(Tensor(rng.normal(0, 1 / math.sqrt(dim), (classes, dim)).astype(dt), requires_grad=True),
                   Tensor(np.zeros(classes, dtype=dt), requires_grad=True))

    @property
    def classes(self) -> int:
        return self.weight.shape[0]

    def logits(self, z_cls) -> Tensor:
        z = core.as_tensor(z_cls)
        if z.ndim == 1:
            return core.reshape(self.logits(core.reshape(z, (1, -1))), (-1,))
        return z @ core.transpose(self.weight) + self.bias

    def parameters(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}


def classify_head(z_cls, weight, bias) -> np.ndarray:
    """``softmax(W z + b)`` for one vector or a batch of CLS embeddings."""
    z = core.as_tensor(z_cls)
    if z.ndim == 1:
        z = core.reshape(z, (1, -1))
    logits = z @ core.transpose(core.as_tensor(weight)) + core.as_tensor(bias)
    return core.softmax_rows(logits).data


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """``(1/C) sum_i -y_hat(i) log y(i)`` averaged over the batch."""
    logits = core.as_tensor(logits)
    if logits.ndim == 1:
        logits = core.reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    classes = logits.shape[-1]
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    logp = core.log_softmax_rows(logits)
    return core.scale(core.reduce_sum(logp * onehot), -1.0 / (classes * len(labels)))


@dataclass
class FinetuneResult:
    head: ClassifierHead
    accuracy: float
    losses: list[float]


def cls_embeddings(model: EncoderStack, series: np.ndarray) -> Tensor:
    z = model.encode(series, with_cls=True)
    return z[:, 0, :]


def predict_classes(model: EncoderStack, head: ClassifierHead, data, batch_size: int = 64) -> np.ndarray:
    series = _as_array(data)
    out = []
    for start in range(0, series.shape[0], batch_size):
        out.append(np.argmax(head.logits(cls_embeddings(model, series[start:start + batch_size])).data, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def finetune(model: EncoderStack, train_x, train_y, cfg: TrainConfig, classes: int | None = None,
             test_x=None, test_y=None) -> FinetuneResult:
    """Train a CLS classifier (encoder unfrozen unless ``cfg.freeze_encoder``)."""
    x = _as_array(train_x)
    y = np.asarray(train_y, dtype=np.int64)
    classes = int(y.max()) + 1 if classes is None else classes
    absent = sorted(set(range(classes)) - set(y.tolist()))
    if absent:
        log.warning("classes %s have no training labels", absent)
    rng = core.make_rng(cfg.seed + 1)
    head = ClassifierHead.init(classes, model.config.dim, rng)
    params = dict(head.parameters())
    if not cfg.freeze_encoder:
        params.update(model.parameters())
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses = []
    bsz = max(1, min(cfg.batch_size, x.shape[0]))
    for _ in range(cfg.epochs):
        order = rng.permutation(x.shape[0])
        epoch = []
        for start in range(0, x.shape[0], bsz):
            idx = order[start:start + bsz]
            opt.zero_grad()
            z = cls_embeddings(model, x[idx])
            if cfg.freeze_encoder:
                z = z.detach()
            loss = cross_entropy(head.logits(z), y[idx])
            loss.backward()
            opt.step()
            epoch.append(float(loss.data))
        losses.append(float(np.mean(epoch)))
    if test_x is None:
        test_x, test_y = x, y
    pred = predict_classes(model, head, test_x)
    acc = float(np.mean(pred == np.asarray(test_y))) if len(pred) else 1.0
    return FinetuneResult(head, acc, losses)


@dataclass
class Imputation:
    values: np.ndarray
    score: float | None


def impute(model: EncoderStack, ts: Timeseries, truth: np.ndarray | None = None) -> Imputation:
    """Fill sentinel positions from the decoder; observed values pass through unchanged."""
    mask = ts.masked_positions()
    if not mask.any():
        return Imputation(ts.values.copy(), 0.0)
    recon = model.reconstruct(ts.values[None]).data[0]
    out = np.where(mask, recon, ts.values)
    score = None
    if truth is not None:
        truth = np.asarray(truth, dtype=np.float64).reshape(out.shape)
        score = float(np.mean((out[mask] - truth[mask]) ** 2))
    return Imputation(out, score)


def forecast(model: EncoderStack, ts: Timeseries | np.ndarray, horizon: int) -> np.ndarray:
    """Predict the last ``horizon`` timestamps by imputing a trailing mask."""
    if not isinstance(ts, Timeseries):
        ts = Timeseries(ts)
    if horizon >= ts.length or horizon < 0:
        raise ValueError(f"horizon {horizon} must be in [0, {ts.length})")
    if horizon == 0:
        return np.zeros((0, ts.channels))
    return impute(model, trailing_mask(ts, horizon)).values[-horizon:]


def trailing_mask(ts: Timeseries, horizon: int) -> Timeseries:
    values = ts.values.copy()
    mask = np.zeros_like(values, dtype=bool)
    mask[ts.length - horizon:] = True
    values[mask] = SENTINEL
    return Timeseries(values, mask)
