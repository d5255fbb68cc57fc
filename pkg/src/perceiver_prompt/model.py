"""Small Whisper-style encoder-decoder with a character tokenizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import (Conv1d, LayerNorm, Module, ResidualAttentionBlock, causal_mask, key_padding_mask,
                 param, sinusoids)

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)
# 20 corpus symbols
DEFAULT_SYMBOLS = tuple("abdefghiklmnoprstuwz")


class UnknownSymbolError(KeyError):
    pass


class Tokenizer:
    def __init__(self, vocab):
        vocab = tuple(vocab)
        for s in SPECIALS:
            if vocab.count(s) != 1:
                raise ValueError(f"vocab must contain {s} exactly once")
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocab has duplicate symbols")
        self.vocab = vocab
        self.index = {s: i for i, s in enumerate(vocab)}
        self.pad_id, self.bos_id, self.eos_id = (self.index[s] for s in SPECIALS)

    def __len__(self):
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        ids = [self.bos_id]
        for ch in text:
            if ch not in self.index or ch in SPECIALS:
                raise UnknownSymbolError(f"character {ch!r} not in vocabulary")
            ids.append(self.index[ch])
        ids.append(self.eos_id)
        return ids

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.vocab):
                raise IndexError(f"token id {i} out of range")
            sym = self.vocab[i]
            if sym == EOS:
                break
            if sym not in SPECIALS:
                out.append(sym)
        return "".join(out)


def tokenize(text: str, vocab) -> list[int]:
    return Tokenizer(vocab).encode(text)


def detokenize(ids, vocab) -> str:
    return Tokenizer(vocab).decode(ids)


@dataclass
class ModelConfig:
    n_mels: int = 80
    d_model: int = 64
    n_heads: int = 4
    n_encoder_blocks: int = 2
    n_decoder_blocks: int = 2
    ffn_dim: int = 256
    vocab: tuple = SPECIALS + DEFAULT_SYMBOLS
    max_target_len: int = 16

    def __post_init__(self):
        self.vocab = tuple(self.vocab)
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        Tokenizer(self.vocab)


@dataclass
class EncoderState:
    """Encoder output [B x N' x D] with the valid length of each row."""

    embeddings: Tensor
    lengths: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.embeddings.ndim == 2:
            self.embeddings = ag.reshape(self.embeddings, (1,) + self.embeddings.shape)
        if self.lengths is None:
            B, N, _ = self.embeddings.shape
            self.lengths = np.full(B, N)
        self.lengths = np.asarray(self.lengths)

    @property
    def batch_size(self) -> int:
        return self.embeddings.shape[0]

    def mask(self) -> np.ndarray:
        return key_padding_mask(self.lengths, self.embeddings.shape[1], self.embeddings.data.dtype)


class ConvStem(Module):
    """Two kernel-3 convolutions (second with stride 2), GELU, plus sinusoidal positions."""

    def __init__(self, n_mels: int, d_model: int, rng):
        self.conv1 = Conv1d(n_mels, d_model, 3, rng)
        self.conv2 = Conv1d(d_model, d_model, 3, rng, stride=2)

    def forward(self, mel: Tensor, frames=None) -> Tensor:
        """``frames`` gives each item's valid length in a zero-padded batch."""
        squeeze = mel.ndim == 2
        if squeeze:
            mel = ag.reshape(mel, (1,) + mel.shape)
        if mel.shape[1] < 2:
            raise ag.ShapeError(f"conv stem needs >= 2 frames, got {mel.shape[1]}")
        h = ag.gelu(self.conv1(mel))
        if frames is not None:
            # zero the first conv's output past each item's end, as if the item were alone
            valid = np.arange(h.shape[1])[None, :] < np.asarray(frames)[:, None]
            h = h * valid[:, :, None].astype(h.data.dtype)
        h = ag.gelu(self.conv2(h))
        pos = sinusoids(h.shape[1], h.shape[2]).astype(h.data.dtype)
        h = h + pos
        return ag.reshape(h, h.shape[1:]) if squeeze else h


def stem_length(frames: int) -> int:
    return (frames + 1) // 2


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.blocks = [ResidualAttentionBlock(cfg.d_model, cfg.n_heads, cfg.ffn_dim, rng)
                       for _ in range(cfg.n_encoder_blocks)]
        self.ln_post = LayerNorm(cfg.d_model)
        self.d_model = cfg.d_model

    def forward(self, x: Tensor, lengths=None) -> EncoderState:
        if x.shape[-1] != self.d_model:
            raise ag.ShapeError(f"encoder expects width {self.d_model}, got {x.shape[-1]}")
        squeeze = x.ndim == 2
        if squeeze:
            x = ag.reshape(x, (1,) + x.shape)
        state = EncoderState(x, lengths)
        mask = state.mask()
        for blk in self.blocks:
            x = blk(x, mask=mask)
        return EncoderState(self.ln_post(x), state.lengths)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        V, D = len(cfg.vocab), cfg.d_model
        self.token_embedding = param(rng.normal(0.0, 1.0 / np.sqrt(D), (V, D)))
        self.positional_embedding = param(rng.normal(0.0, 0.01, (cfg.max_target_len + 1, D)))
        self.blocks = [ResidualAttentionBlock(D, cfg.n_heads, cfg.ffn_dim, rng, cross=True)
                       for _ in range(cfg.n_decoder_blocks)]
        self.ln = LayerNorm(D)
        self.max_len = cfg.max_target_len

    def forward(self, tokens: np.ndarray, state: EncoderState) -> Tensor:
        """Teacher-forced logits [B x L x V] for token ids [B x L]."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        L = tokens.shape[1]
        if L > self.max_len + 1:
            raise ValueError(f"prefix of length {L} exceeds max_target_len {self.max_len}")
        x = ag.embedding(self.token_embedding, tokens) + self.positional_embedding[:L]
        mask = causal_mask(L, x.data.dtype)
        xa_mask = state.mask()
        for blk in self.blocks:
            x = blk(x, mask=mask, xa=state.embeddings, xa_mask=xa_mask)
        x = self.ln(x)
        return ag.matmul(x, ag.transpose(self.token_embedding, (1, 0)))


class ASRModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.tokenizer = Tokenizer(cfg.vocab)
        self.stem = ConvStem(cfg.n_mels, cfg.d_model, rng)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    def conv_stem(self, mel) -> Tensor:
        return self.stem(ag.as_tensor(mel))

    def stem_batch(self, mels: list) -> tuple[Tensor, np.ndarray]:
        """Zero-pad a list of [T_i x n_mels] mels and run the stem; returns [B x N x D] and lengths."""
        mels = [ag.as_tensor(m) for m in mels]
        x = ag.pad_stack(mels)
        frames = np.array([m.shape[0] for m in mels])
        return self.stem(x, frames), np.array([stem_length(f) for f in frames])

    def encode(self, x: Tensor, lengths=None) -> EncoderState:
        return self.encoder(x, lengths)

    def logits(self, state: EncoderState, tokens) -> Tensor:
        return self.decoder(tokens, state)

    def decode_step(self, state: EncoderState, prefix) -> np.ndarray:
        """Next-token logits [V] (or [B x V]) after ``prefix``."""
        prefix = np.asarray(prefix)
        first = prefix[..., 0]
        if np.any(first != self.tokenizer.bos_id):
            raise ValueError("prefix must start with BOS")
        if prefix.shape[-1] > self.cfg.max_target_len:
            raise ValueError(f"prefix length {prefix.shape[-1]} exceeds max_target_len {self.cfg.max_target_len}")
        with ag.no_grad():
            out = self.decoder(prefix if prefix.ndim == 2 else prefix[None], state).data[:, -1]
        return out if prefix.ndim == 2 else out[0]

    def greedy_decode_ids(self, state: EncoderState) -> list[list[int]]:
        B = state.batch_size
        tok = self.tokenizer
        seqs = np.full((B, 1), tok.bos_id, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        with ag.no_grad():
            for _ in range(self.cfg.max_target_len):
                nxt = self.decoder(seqs, state).data[:, -1].argmax(axis=-1)
                nxt = np.where(done, tok.pad_id, nxt)
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
                done |= nxt == tok.eos_id
                if done.all():
                    break
        return [list(s[1:]) for s in seqs]

    def greedy_decode(self, state: EncoderState) -> list[str]:
        return [self.tokenizer.decode(ids) for ids in self.greedy_decode_ids(state)]

    def transcribe(self, mels: list) -> list[str]:
        with ag.no_grad():
            x, lengths = self.stem_batch(mels)
            return self.greedy_decode(self.encode(x, lengths))

    def loss(self, state: EncoderState, texts: list[str]) -> Tensor:
        """Teacher-forced cross-entropy over target tokens (PAD ignored)."""
        tok = self.tokenizer
        ids = [tok.encode(t) for t in texts]
        L = max(len(s) for s in ids)
        if L - 1 > self.cfg.max_target_len:
            raise ValueError(f"transcript too long for max_target_len {self.cfg.max_target_len}")
        arr = np.full((len(ids), L), tok.pad_id, dtype=np.int64)
        for i, s in enumerate(ids):
            arr[i, : len(s)] = s
        logits = self.decoder(arr[:, :-1], state)
        return ag.cross_entropy(logits, arr[:, 1:], ignore_index=tok.pad_id)
