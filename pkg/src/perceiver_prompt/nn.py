"""Layers built on the autograd core: parameter containers, attention, residual blocks."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

NEG_INF = -1e9


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Parameters are the Tensor attributes; children are Module attributes or lists of Modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def num_parameters(self, trainable_only: bool = False) -> int:
        ps = self.trainable_parameters() if trainable_only else self.parameters()
        return int(sum(p.size for p in ps))

    def freeze(self) -> Module:
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> Module:
        for p in self.parameters():
            p.requires_grad = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if tuple(arr.shape) != p.shape:
                raise ag.ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_out, d_in)))
        self.bias = param(np.zeros(d_out)) if bias else None

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1):
        self.weight = param(rng.normal(0.0, 1.0 / math.sqrt(c_in * kernel), (c_out, c_in, kernel)))
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.padding = kernel // 2

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


def sinusoids(length: int, channels: int, max_timescale: float = 10000.0) -> np.ndarray:
    half = channels // 2
    inc = math.log(max_timescale) / max(half - 1, 1)
    inv = np.exp(-inc * np.arange(half))
    t = np.arange(length)[:, None] * inv[None, :]
    out = np.concatenate([np.sin(t), np.cos(t)], axis=1)
    if channels % 2:
        out = np.concatenate([out, np.zeros((length, 1))], axis=1)
    return out


def key_padding_mask(lengths, t_max: int, dtype=np.float32) -> np.ndarray:
    """Additive mask [B x 1 x 1 x T]: 0 on valid keys, large negative on padding."""
    lengths = np.asarray(lengths)
    valid = np.arange(t_max)[None, :] < lengths[:, None]
    return np.where(valid, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


def causal_mask(t: int, dtype=np.float32) -> np.ndarray:
    return np.triu(np.full((t, t), NEG_INF), k=1).astype(dtype)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, d_kv: int | None = None):
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        d_kv = d_kv or d_model
        self.n_heads = n_heads
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_kv, d_model, rng, bias=False)
        self.value = Linear(d_kv, d_model, rng)
        self.out = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        return ag.transpose(ag.reshape(x, (B, T, self.n_heads, D // self.n_heads)), (0, 2, 1, 3))

    def forward(self, x: Tensor, kv: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        kv = x if kv is None else kv
        B, Tq, D = x.shape
        q = self._split(self.query(x))
        k = self._split(self.key(kv))
        v = self._split(self.value(kv))
        scores = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(D // self.n_heads))
        if mask is not None:
            scores = ag.add(scores, mask.astype(scores.dtype, copy=False))
        att = ag.softmax(scores, axis=-1)
        y = ag.matmul(att, v)
        y = ag.reshape(ag.transpose(y, (0, 2, 1, 3)), (B, Tq, D))
        return self.out(y)


class ResidualAttentionBlock(Module):
    """Pre-norm block: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, rng: np.random.Generator,
                 cross: bool = False, d_kv: int | None = None):
        self.attn_ln = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.cross_ln = LayerNorm(d_model) if cross else None
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng, d_kv=d_kv) if cross else None
        self.mlp_ln = LayerNorm(d_model)
        self.mlp = MLP(d_model, ffn_dim, d_model, rng)

    def forward(self, x: Tensor, mask=None, xa: Tensor | None = None, xa_mask=None) -> Tensor:
        x = x + self.attn(self.attn_ln(x), mask=mask)
        if self.cross_attn is not None:
            x = x + self.cross_attn(self.cross_ln(x), xa, mask=xa_mask)
        return x + self.mlp(self.mlp_ln(x))


class CrossAttentionBlock(Module):
    """Latent queries attend to a separate input array (Perceiver read-in)."""

    def __init__(self, d_latent: int, d_input: int, n_heads: int, ffn_dim: int, rng: np.random.Generator):
        self.q_ln = LayerNorm(d_latent)
        self.kv_ln = LayerNorm(d_input)
        self.attn = MultiHeadAttention(d_latent, n_heads, rng, d_kv=d_input)
        self.mlp_ln = LayerNorm(d_latent)
        self.mlp = MLP(d_latent, ffn_dim, d_latent, rng)

    def forward(self, latents: Tensor, x: Tensor, mask=None) -> Tensor:
        h = latents + self.attn(self.q_ln(latents), self.kv_ln(x), mask=mask)
        return h + self.mlp(self.mlp_ln(h))
