"""Low-rank adapters for attention projections: W = W0 + (alpha / r) * B @ A."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Linear, Module, MultiHeadAttention

LORA_TARGETS = ("query", "key", "value", "out")


class LoraRankError(ValueError):
    pass


class LoraLinear(Module):
    """Frozen base projection plus a trainable rank-r update.

    ``B`` starts at zero so a freshly wrapped layer computes exactly the base
    function. The base weight and bias are frozen on wrap.
    """

    def __init__(self, base: Linear, r: int = 8, alpha: float = 8.0, rng: np.random.Generator | None = None):
        d, k = base.weight.shape
        if r < 1 or r > min(d, k) // 2:
            raise LoraRankError(f"rank {r} invalid for a {d}x{k} layer (need 1 <= r <= {min(d, k) // 2})")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.base = base.freeze()
        self.r = r
        self.alpha = float(alpha)
        self.lora_A = Tensor(rng.normal(0.0, 0.02, (r, k)), requires_grad=True)
        self.lora_B = Tensor(np.zeros((d, r)), requires_grad=True)

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    @property
    def weight(self) -> Tensor:
        return self.base.weight

    @property
    def bias(self) -> Tensor | None:
        return self.base.bias

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ag.ShapeError(f"LoRA layer expects width {self.in_features}, got {x.shape[-1]}")
        h = self.base(x)
        down = ag.linear(x, self.lora_A)
        up = ag.linear(down, self.lora_B)
        return h + ag.scale(up, self.scaling)

    def delta_weight(self) -> np.ndarray:
        return self.scaling * (self.lora_B.data @ self.lora_A.data)

    def merge(self) -> Linear:
        """Dense layer with weight W0 + (alpha/r) B A; the wrapped layer is left untouched."""
        merged = Linear.__new__(Linear)
        merged.weight = Tensor(self.base.weight.data + self.delta_weight(), requires_grad=False)
        merged.bias = None if self.base.bias is None else Tensor(self.base.bias.data.copy())
        return merged


def wrap_linear(layer: Linear, r: int = 8, alpha: float = 8.0, rng: np.random.Generator | None = None) -> LoraLinear:
    return LoraLinear(layer, r=r, alpha=alpha, rng=rng)


def lora_forward(layer: LoraLinear, x: Tensor) -> Tensor:
    return layer(x)


def merge(layer: LoraLinear) -> Linear:
    return layer.merge()


def iter_attention(module: Module, prefix: str = "") -> Iterator[tuple[str, MultiHeadAttention]]:
    for key, val in vars(module).items():
        name = f"{prefix}{key}"
        if isinstance(val, MultiHeadAttention):
            yield name, val
        elif isinstance(val, Module):
            yield from iter_attention(val, name + ".")
        elif isinstance(val, (list, tuple)):
            for i, item in enumerate(val):
                if isinstance(item, Module):
                    yield from iter_attention(item, f"{name}.{i}.")


def apply_lora(model: Module, r: int = 8, alpha: float = 8.0, seed: int = 0,
               targets=LORA_TARGETS) -> dict[str, LoraLinear]:
    """Freeze ``model`` and wrap every q/k/v/out projection of every attention module."""
    rng = np.random.default_rng(seed)
    model.freeze()
    wrapped = {}
    for name, attn in iter_attention(model):
        for t in targets:
            layer = getattr(attn, t)
            if isinstance(layer, LoraLinear):  # already wrapped: keep the adapter trainable
                layer.lora_A.requires_grad = layer.lora_B.requires_grad = True
                continue
            lora = wrap_linear(layer, r=r, alpha=alpha, rng=rng)
            setattr(attn, t, lora)
            wrapped[f"{name}.{t}"] = lora
    return wrapped


def merge_lora(model: Module) -> None:
    """Replace every LoRA wrapper in ``model`` by its merged dense layer, in place."""
    for _, attn in iter_attention(model):
        for t in LORA_TARGETS:
            layer = getattr(attn, t)
            if isinstance(layer, LoraLinear):
                setattr(attn, t, layer.merge())


def lora_state_dict(model: Module) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.named_parameters() if n.endswith(("lora_A", "lora_B"))}
