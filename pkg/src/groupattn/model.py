"""Encoder stack: convolutional embedder + attention blocks, plus AdamW and checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import core
from .attention import AttentionLayer, group_attention, vanilla_attention
from .core import Tensor
from .embedder import ConvEmbedder, MinMaxScaler
from .scheduler import SchedulerState

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    channels: int = 1
    dim: int = 64
    layers: int = 8
    heads: int = 2
    width: int = 5
    stride: int | None = None
    n_max: int = 512
    mode: str = "group"             # "vanilla" | "group"
    epsilon: float = 2.0
    alpha: float = 0.9
    kmeans_iters: int = 2
    ff_mult: int = 4
    seed: int = 0
    fixed_groups: int | None = None  # pin N instead of using the scheduler

    def __post_init__(self):
        if self.mode not in ("vanilla", "group"):
            raise ValueError(f"mode must be 'vanilla' or 'group', got {self.mode!r}")
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if self.epsilon <= 1:
            raise ValueError(f"epsilon must exceed 1, got {self.epsilon}")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small profile used by tests and the CLI defaults: 2 layers, d = 16."""
        base = dict(dim=16, layers=2, heads=2)
        base.update(overrides)
        return cls(**base)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = core.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = core.mean(centered * centered, axis=-1, keepdims=True)
    return centered * core.power(var + eps, -0.5) * gamma + beta


@dataclass
class EncoderBlock:
    attn: AttentionLayer
    ln1_g: Tensor
    ln1_b: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @classmethod
    def init(cls, dim: int, heads: int, ff_mult: int, rng: np.random.Generator) -> "EncoderBlock":
        dt = core.get_default_dtype()

        def p(arr):
            return Tensor(np.asarray(arr, dtype=dt), requires_grad=True)

        hidden = ff_mult * dim
        return cls(
            attn=AttentionLayer.init(dim, dim, dim, heads, rng),
            ln1_g=p(np.ones(dim)), ln1_b=p(np.zeros(dim)),
            ff_w1=p(rng.normal(0, 1 / math.sqrt(dim), (dim, hidden))), ff_b1=p(np.zeros(hidden)),
            ff_w2=p(rng.normal(0, 1 / math.sqrt(hidden), (hidden, dim))), ff_b2=p(np.zeros(dim)),
            ln2_g=p(np.ones(dim)), ln2_b=p(np.zeros(dim)),
        )

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.attn.parameters())
        for name in ("ln1_g", "ln1_b", "ff_w1", "ff_b1", "ff_w2", "ff_b2", "ln2_g", "ln2_b"):
            out[name] = getattr(self, name)
        return out

    def __call__(self, x: Tensor, attended: Tensor) -> Tensor:
        x = layer_norm(x + attended, self.ln1_g, self.ln1_b)
        ff = core.gelu(x @ self.ff_w1 + self.ff_b1) @ self.ff_w2 + self.ff_b2
        return layer_norm(x + ff, self.ln2_g, self.ln2_b)


@dataclass
class ForwardTrace:
    """Keys and groupings seen by each layer in the last group-mode forward pass."""

    keys: list = field(default_factory=list)        # per layer: list over heads of (B, n, dk)
    groupings: list = field(default_factory=list)   # per layer: [head][sample]


class EncoderStack:
    def __init__(self, config: ModelConfig, scaler: MinMaxScaler | None = None):
        self.config = config
        rng = core.make_rng(config.seed)
        self.embedder = ConvEmbedder.init(config.channels, config.dim, config.width, config.stride,
                                          config.n_max, rng)
        self.blocks = [EncoderBlock.init(config.dim, config.heads, config.ff_mult, rng)
                       for _ in range(config.layers)]
        self.schedulers = [SchedulerState(config.epsilon, config.alpha) for _ in range(config.layers)]
        self.scaler = scaler
        self.last_trace = ForwardTrace()

    # ------------------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        out = {f"embedder.{k}": v for k, v in self.embedder.parameters().items()}
        for i, block in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v for k, v in block.parameters().items()})
        return out

    def group_count(self, layer: int, n: int) -> int:
        if self.config.fixed_groups is not None:
            return min(max(1, self.config.fixed_groups), n)
        return self.schedulers[layer].groups_for(n)

    def encode(self, x, with_cls: bool = False, mode: str | None = None) -> Tensor:
        """(B, t, m) series -> (B, n[+1], d) contextual embeddings."""
        mode = mode or self.config.mode
        h = self.embedder.embed(x, with_cls=with_cls)
        squeeze = h.ndim == 2
        if squeeze:
            h = core.reshape(h, (1,) + h.shape)
        trace = ForwardTrace()
        n = h.shape[1]
        for i, block in enumerate(self.blocks):
            if mode == "vanilla":
                attended, _ = vanilla_attention(h, block.attn)
            else:
                res, keys = group_attention(h, block.attn, n_groups=self.group_count(i, n),
                                            iters=self.config.kmeans_iters,
                                            seed=self.config.seed + 7919 * i, return_keys=True)
                attended = res.output
                trace.keys.append(keys)
                trace.groupings.append(res.grouping)
            h = block(h, attended)
        self.last_trace = trace
        if squeeze:
            h = core.reshape(h, h.shape[1:])
        return h

    def reconstruct(self, x, mode: str | None = None, with_cls: bool = False) -> Tensor:
        """Decode the window embeddings back to a series; a CLS row, if used, is dropped first."""
        x = core.as_tensor(x)
        t = x.shape[-2]
        z = self.encode(x, with_cls=with_cls, mode=mode)
        if with_cls:
            z = z[..., 1:, :]
        return self.embedder.decode(z, t)

    def schedule(self) -> list[dict]:
        """Run one scheduler step per layer from the last group-mode forward pass."""
        from .scheduler import step

        rows = []
        if self.config.fixed_groups is not None or not self.last_trace.groupings:
            return rows
        for i, (keys, groups) in enumerate(zip(self.last_trace.keys, self.last_trace.groupings)):
            state = self.schedulers[i]
            flat_g, flat_k = [], []
            for head, head_groups in enumerate(groups):
                for b, g in enumerate(head_groups):
                    flat_g.append(g)
                    flat_k.append(keys[head][b])
            before = state.n_current if state.n_current is not None else float(flat_g[0].n_groups)
            step(state, flat_g, flat_k)
            last = state.history[-1]
            rows.append({"layer": i, "n_before": before, "n_after": state.n_current,
                         "d_threshold": last["d_threshold"], "merged": last["merged"]})
        return rows

    # -- checkpoints -----------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "weights": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()}
                        for k, v in self.parameters().items()},
            "scaler": None if self.scaler is None else self.scaler.to_dict(),
            "schedulers": [s.to_dict() for s in self.schedulers],
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.state_dict(), fh)

    @classmethod
    def from_state_dict(cls, state: dict) -> "EncoderStack":
        if state.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {state.get('version')}")
        model = cls(ModelConfig(**state["config"]))
        params = model.parameters()
        for name, blob in state["weights"].items():
            params[name].data = np.asarray(blob["data"], dtype=params[name].data.dtype).reshape(blob["shape"])
        if state.get("scaler") is not None:
            model.scaler = MinMaxScaler.from_dict(state["scaler"])
        model.schedulers = [SchedulerState.from_dict(s) for s in state["schedulers"]]
        return model

    @classmethod
    def load(cls, path) -> "EncoderStack":
        with open(path) as fh:
            return cls.from_state_dict(json.load(fh))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data * (1 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
