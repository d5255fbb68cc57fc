"""Perceiver prompt encoder: variable-length speaker input -> fixed-length prompt -> concatenated model input."""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import ASRModel, EncoderState, stem_length
from .nn import CrossAttentionBlock, LayerNorm, Linear, Module, ResidualAttentionBlock, key_padding_mask

PAPER_PROMPT_LENGTHS = (16, 32, 64)


class Layer(str, enum.Enum):
    LOG_MEL = "log_mel"
    BEFORE_ENCODER_BLOCKS = "before_encoder_blocks"


class Concat(str, enum.Enum):
    BEGINNING = "beginning"
    END = "end"
    BOTH_SIDES = "both_sides"


@dataclass(frozen=True)
class PromptPlacement:
    layer: Layer = Layer.BEFORE_ENCODER_BLOCKS
    concat: Concat = Concat.END

    def __post_init__(self):
        object.__setattr__(self, "layer", Layer(self.layer))
        object.__setattr__(self, "concat", Concat(self.concat))


@dataclass(frozen=True)
class HistoryPolicy:
    n_history: int = 0
    stochastic: bool = False

    def __post_init__(self):
        if self.n_history < 0:
            raise ValueError("n_history must be >= 0")


@dataclass
class PerceiverConfig:
    latent_len: int = 32
    latent_dim: int = 64
    cross_attn_heads: int = 8
    self_attn_heads: int = 8
    n_cross_layers: int = 1
    n_self_layers: int = 2
    ffn_mult: int = 2

    def __post_init__(self):
        if self.latent_len < 1:
            raise ValueError("latent_len must be >= 1")
        for h in (self.cross_attn_heads, self.self_attn_heads):
            if self.latent_dim % h:
                raise ValueError(f"latent_dim {self.latent_dim} not divisible by {h} heads")


class UnknownSpeakerError(KeyError):
    pass


class Perceiver(Module):
    """Learned latents cross-attend to the input rows, then self-attend. Output is [B x M x latent_dim]."""

    def __init__(self, cfg: PerceiverConfig, d_input: int, rng: np.random.Generator):
        self.cfg = cfg
        L = cfg.latent_dim
        self.latents = Tensor(rng.normal(0.0, 0.02, (cfg.latent_len, L)), requires_grad=True)
        self.cross = [CrossAttentionBlock(L, d_input, cfg.cross_attn_heads, cfg.ffn_mult * L, rng)
                      for _ in range(cfg.n_cross_layers)]
        self.self_blocks = [ResidualAttentionBlock(L, cfg.self_attn_heads, cfg.ffn_mult * L, rng)
                            for _ in range(cfg.n_self_layers)]
        self.ln_out = LayerNorm(L)
        self.d_input = d_input

    def forward(self, xp: Tensor, lengths=None) -> Tensor:
        squeeze = xp.ndim == 2
        if squeeze:
            xp = ag.reshape(xp, (1,) + xp.shape)
        B, T, D = xp.shape
        if T < 1:
            raise ag.ShapeError("perceiver input is empty")
        if D != self.d_input:
            raise ag.ShapeError(f"perceiver expects width {self.d_input}, got {D}")
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        if np.any(lengths < 1):
            raise ag.ShapeError("perceiver input is empty")
        mask = key_padding_mask(lengths, T, xp.data.dtype)
        h = ag.add(self.latents, np.zeros((B, 1, 1), dtype=xp.data.dtype))
        for blk in self.cross:
            h = blk(h, xp, mask=mask)
        for blk in self.self_blocks:
            h = blk(h)
        h = self.ln_out(h)
        return ag.reshape(h, h.shape[1:]) if squeeze else h


def perceiver_forward(xp: Tensor, perceiver: Perceiver) -> Tensor:
    return perceiver(ag.as_tensor(xp))


def build_prompt_input(current: Tensor, history: Sequence[Tensor]) -> Tensor:
    """[X; S_1; ...; S_n] along the sequence axis; history rows are gradient-detached."""
    current = ag.as_tensor(current)
    parts = [current]
    for h in history:
        h = ag.as_tensor(h)
        if h.shape[-1] != current.shape[-1]:
            raise ag.ShapeError(f"history width {h.shape[-1]} != current width {current.shape[-1]}")
        parts.append(h.detach())
    return parts[0] if len(parts) == 1 else ag.concat(parts, axis=0)


def split_prompt(prompt: Tensor, concat: Concat) -> tuple[Tensor | None, Tensor | None]:
    """(front, back) rows of a [M x D] prompt for the given concat position."""
    concat = Concat(concat)
    if concat is Concat.END:
        return None, prompt
    if concat is Concat.BEGINNING:
        return prompt, None
    M = prompt.shape[0]
    front = (M + 1) // 2
    back = prompt[front:] if front < M else None
    return prompt[:front], back


def concat_prompt(x: Tensor, projected: Tensor, concat: Concat) -> Tensor:
    if x.shape[-1] != projected.shape[-1]:
        raise ag.ShapeError(f"prompt width {projected.shape[-1]} != input width {x.shape[-1]}")
    front, back = split_prompt(projected, concat)
    return ag.concat([p for p in (front, x, back) if p is not None], axis=0)


def project_and_concat(x: Tensor, prompt: Tensor, placement: PromptPlacement, proj: Linear) -> Tensor:
    """X_new = concat of X and W(prompt) + b at the placement's position; length N + M."""
    x, prompt = ag.as_tensor(x), ag.as_tensor(prompt)
    if proj.in_features != prompt.shape[-1]:
        raise ag.ShapeError(f"projection expects {proj.in_features}-dim prompts, got {prompt.shape[-1]}")
    return concat_prompt(x, proj(prompt), placement.concat)


def select_history(speaker, current_utt, policy: HistoryPolicy, index: dict,
                   rng: np.random.Generator | None = None) -> list:
    """Same-speaker history utterances for ``current_utt``.

    Non-stochastic: the ``n`` utterances immediately preceding ``current_utt`` in
    index order. Stochastic: ``n`` uniform draws without replacement from the
    speaker's other utterances. Fewer available means all of them are returned.
    """
    if speaker not in index:
        raise UnknownSpeakerError(f"unknown speaker {speaker!r}")
    n = policy.n_history
    if n == 0:
        return []
    utts = list(index[speaker])
    if policy.stochastic:
        others = [u for u in utts if u != current_utt]
        rng = rng if rng is not None else np.random.default_rng(0)
        k = min(n, len(others))
        picks = rng.choice(len(others), size=k, replace=False) if k else []
        return [others[i] for i in picks]
    pos = utts.index(current_utt) if current_utt in utts else len(utts)
    return utts[max(0, pos - n):pos]


class PerceiverPrompt(Module):
    """Perceiver plus the linear map W, b from latent space to the insertion layer's width."""

    def __init__(self, cfg: PerceiverConfig, d_input: int, d_target: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.perceiver = Perceiver(cfg, d_input, rng)
        self.proj = Linear(cfg.latent_dim, d_target, rng)

    def speaker_prompts(self, xps: Sequence[Tensor]) -> Tensor:
        """Raw prompts [B x M x latent_dim] for a list of [T_i x d_input] Perceiver inputs."""
        lengths = [x.shape[0] for x in xps]
        return self.perceiver(ag.pad_stack(list(xps)), lengths)

    def project(self, prompts: Tensor) -> Tensor:
        return self.proj(prompts)


def layer_width(model: ASRModel, layer: Layer) -> int:
    return model.cfg.n_mels if Layer(layer) is Layer.LOG_MEL else model.cfg.d_model


def layer_embedding(model: ASRModel, mel: np.ndarray, layer: Layer) -> np.ndarray:
    """The utterance's sequence at the insertion layer: the mel itself, or the frozen stem output."""
    if Layer(layer) is Layer.LOG_MEL:
        return np.asarray(mel)
    with ag.no_grad():
        return model.conv_stem(mel).data


def encode_with_prompts(model: ASRModel, xs: Sequence, placement: PromptPlacement,
                        projected: Tensor | None = None) -> EncoderState:
    """Encode a batch whose items are sequences at ``placement.layer``, optionally inserting projected prompts.

    ``xs[i]`` is a mel [T_i x n_mels] for log-mel placement or a stem output
    [N_i x D] otherwise; ``projected`` is [B x M x width].
    """
    xs = [ag.as_tensor(x) for x in xs]
    if projected is not None:
        xs = [concat_prompt(x, projected[i], placement.concat) for i, x in enumerate(xs)]
    if placement.layer is Layer.LOG_MEL:
        h, lengths = model.stem_batch(xs)
    else:
        lengths = np.array([x.shape[0] for x in xs])
        h = ag.pad_stack(xs)
    return model.encode(h, lengths)


def generate_prompt_online(model: ASRModel, prompter: PerceiverPrompt, placement: PromptPlacement,
                           current_mel: np.ndarray, history_mels: Sequence[np.ndarray] = ()) -> np.ndarray:
    """Speaker prompt [M x latent_dim] from the current utterance plus same-speaker history audio."""
    cur = layer_embedding(model, current_mel, placement.layer)
    hist = [layer_embedding(model, m, placement.layer) for m in history_mels]
    with ag.no_grad():
        xp = build_prompt_input(ag.Tensor(cur), [ag.Tensor(h) for h in hist])
        return prompter.perceiver(xp).data


class PromptCache:
    """Per-key prompt store: one writer populates, concurrent readers afterwards."""

    def __init__(self):
        self._store: dict = {}
        self._lock = threading.Lock()

    def get_or_compute(self, key, fn: Callable[[], np.ndarray]) -> np.ndarray:
        val = self._store.get(key)
        if val is not None:
            return val
        with self._lock:
            if key not in self._store:
                arr = np.asarray(fn())
                arr.setflags(write=False)
                self._store[key] = arr
            return self._store[key]

    def __len__(self):
        return len(self._store)

    def __contains__(self, key):
        return key in self._store


def prompt_output_length(n_frames_or_rows: int, m: int, layer: Layer) -> int:
    """Encoder sequence length after inserting an M-row prompt."""
    if Layer(layer) is Layer.LOG_MEL:
        return stem_length(n_frames_or_rows + m)
    return n_frames_or_rows + m
