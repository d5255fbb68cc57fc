"""Three-phase training: backbone sim-pretraining, LoRA fine-tuning, P-tuning of the prompt path."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .audio import load_wav, log_mel
from .autograd import Tensor
from .corpus import FDA_MAX, HEALTHY, SEVERITIES, Corpus, UtteranceRecord
from .lora import apply_lora
from .model import ASRModel
from .nn import MLP, Module
from .optim import Adam, clip_grad_norm
from .perceiver import (HistoryPolicy, Layer, PerceiverPrompt, PromptPlacement, build_prompt_input,
                        encode_with_prompts, layer_embedding, select_history)

log = logging.getLogger(__name__)

SEVERITY_CLASSES = SEVERITIES + (HEALTHY,)


class Stage(str, enum.Enum):
    PRETRAIN = "pretrain"
    LORA_FINETUNE = "lora_finetune"
    P_TUNING = "p_tuning"


class AuxMode(str, enum.Enum):
    NONE = "none"
    SPEAKER_CLASSIFY = "speaker_classify"
    FDA_REGRESS = "fda_regress"
    FDA_CLASSIFY = "fda_classify"


class TrainingDivergedError(FloatingPointError):
    pass


class LabelModeError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: Stage = Stage.LORA_FINETUNE
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    placement: PromptPlacement = field(default_factory=PromptPlacement)
    history: HistoryPolicy = field(default_factory=HistoryPolicy)
    prompt_len: int = 32
    aux: AuxMode = AuxMode.NONE
    aux_weight: float = 0.1
    grad_clip: float = 1.0

    def __post_init__(self):
        self.stage = Stage(self.stage)
        self.aux = AuxMode(self.aux)
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")


class FeatureStore:
    """Log-mel cache keyed by utterance id."""

    def __init__(self, corpus: Corpus):
        self.corpus = corpus
        self._mels: dict[str, np.ndarray] = {}
        self.records = {r.utt_id: r for r in corpus.records}

    def mel(self, utt_id: str) -> np.ndarray:
        m = self._mels.get(utt_id)
        if m is None:
            rec = self.records[utt_id]
            m = log_mel(load_wav(self.corpus.wav_path(rec)))
            self._mels[utt_id] = m
        return m

    def preload(self, utt_ids: Sequence[str]) -> None:
        for u in utt_ids:
            self.mel(u)


class AuxHead(Module):
    """One-hidden-layer MLP on the mean-pooled speaker prompt."""

    def __init__(self, d_in: int, n_out: int, mode: AuxMode, seed: int = 0, hidden: int = 64):
        self.mode = AuxMode(mode)
        self.mlp = MLP(d_in, hidden, n_out, np.random.default_rng(seed))

    def forward(self, prompts: Tensor) -> Tensor:
        pooled = ag.mean(prompts, axis=-2)
        return self.mlp(pooled)


def aux_output_size(mode: AuxMode, n_speakers: int) -> int:
    mode = AuxMode(mode)
    if mode is AuxMode.SPEAKER_CLASSIFY:
        return n_speakers
    if mode is AuxMode.FDA_CLASSIFY:
        return len(SEVERITY_CLASSES)
    return 1


def joint_loss(asr_loss: Tensor, prompt: Tensor | None, label, aux: AuxMode, weight: float,
               head: AuxHead | None = None) -> Tensor:
    """asr_loss + weight * aux_loss (cross-entropy for classify modes, MSE on score/145 for regression)."""
    aux = AuxMode(aux)
    if aux is AuxMode.NONE:
        return asr_loss
    if head is None or head.mode is not aux:
        raise LabelModeError(f"aux mode {aux.value} needs a matching head")
    out = head(prompt)
    label = np.asarray(label)
    if aux is AuxMode.FDA_REGRESS:
        if label.dtype.kind not in "fi":
            raise LabelModeError("fda_regress needs numeric FDA scores")
        aux_loss = ag.mse(ag.reshape(out, (-1,)), label.reshape(-1) / FDA_MAX)
    else:
        if label.dtype.kind not in "iu":
            raise LabelModeError(f"{aux.value} needs integer class labels")
        aux_loss = ag.cross_entropy(out, label.reshape(-1))
    if weight == 0:
        return asr_loss + ag.scale(aux_loss, 0.0)
    return asr_loss + ag.scale(aux_loss, weight)


def make_batches(items: Sequence, lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list]:
    """Shuffle, length-sort inside windows of 4 batches, then shuffle batch order."""
    order = rng.permutation(len(items))
    window = batch_size * 4
    batches = []
    for s in range(0, len(order), window):
        chunk = sorted(order[s:s + window], key=lambda i: lengths[i])
        batches.extend([[items[i] for i in chunk[j:j + batch_size]] for j in range(0, len(chunk), batch_size)])
    return [batches[i] for i in rng.permutation(len(batches))]


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    steps: int = 0


def _optimise(params: list[Tensor], batches_per_epoch: Callable[[int], list], loss_fn: Callable[[list], Tensor],
              cfg: TrainConfig, on_epoch: Callable[[int, float], None] | None = None,
              max_steps: int | None = None) -> TrainLog:
    opt = Adam(params, lr=cfg.lr)
    out = TrainLog()
    for epoch in range(cfg.epochs):
        total, n = 0.0, 0
        for batch in batches_per_epoch(epoch):
            opt.zero_grad()
            loss = loss_fn(batch)
            val = float(loss.data)
            if not math.isfinite(val):
                raise TrainingDivergedError(f"loss became {val} at step {out.steps} (epoch {epoch}, seed {cfg.seed})")
            ag.backward(loss, params)
            clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            out.steps += 1
            out.step_loss.append(val)
            total += val * len(batch)
            n += len(batch)
            if max_steps is not None and out.steps >= max_steps:
                break
        out.epoch_loss.append(total / max(n, 1))
        if on_epoch:
            on_epoch(epoch, out.epoch_loss[-1])
        log.info("stage=%s epoch=%d loss=%.4f", cfg.stage.value, epoch, out.epoch_loss[-1])
        if max_steps is not None and out.steps >= max_steps:
            break
    return out


def train_asr(model: ASRModel, records: Sequence[UtteranceRecord], features: FeatureStore, cfg: TrainConfig,
              params: list[Tensor] | None = None, on_epoch=None, max_steps: int | None = None) -> TrainLog:
    """Teacher-forced training of whatever parameters of ``model`` are trainable."""
    params = params if params is not None else model.trainable_parameters()
    recs = list(records)
    mels = {r.utt_id: features.mel(r.utt_id) for r in recs}
    lengths = [mels[r.utt_id].shape[0] for r in recs]

    def batches(epoch):
        return make_batches(recs, lengths, cfg.batch_size, np.random.default_rng([cfg.seed, epoch]))

    def loss_fn(batch):
        x, lens = model.stem_batch([mels[r.utt_id] for r in batch])
        state = model.encode(x, lens)
        return model.loss(state, [r.transcript for r in batch])

    return _optimise(params, batches, loss_fn, cfg, on_epoch, max_steps)


def pretrain_backbone(model: ASRModel, records, features, cfg: TrainConfig, **kw) -> TrainLog:
    """Full-parameter training on healthy speech; stands in for large-scale pretraining."""
    model.unfreeze()
    return train_asr(model, records, features, cfg, **kw)


def finetune_lora(model: ASRModel, records, features, cfg: TrainConfig, rank: int = 8, alpha: float = 8.0,
                  **kw) -> TrainLog:
    if cfg.stage is not Stage.LORA_FINETUNE:
        raise ValueError(f"finetune_lora needs stage=lora_finetune, got {cfg.stage.value}")
    apply_lora(model, r=rank, alpha=alpha, seed=cfg.seed)
    return train_asr(model, records, features, cfg, **kw)


@dataclass
class PromptTrainer:
    """Stage-2 state: frozen backbone+LoRA, trainable Perceiver, latents, projection and optional aux head."""

    model: ASRModel
    prompter: PerceiverPrompt
    features: FeatureStore
    placement: PromptPlacement
    aux_head: AuxHead | None = None
    _emb: dict = field(default_factory=dict)

    def embedding(self, utt_id: str) -> np.ndarray:
        e = self._emb.get(utt_id)
        if e is None:
            e = layer_embedding(self.model, self.features.mel(utt_id), self.placement.layer)
            self._emb[utt_id] = e
        return e

    def trainable(self) -> list[Tensor]:
        ps = self.prompter.parameters()
        if self.aux_head is not None:
            ps += self.aux_head.parameters()
        return ps

    def forward(self, utt_ids: Sequence[str], histories: Sequence[Sequence[str]]):
        """Returns (encoder state, raw prompts [B x M x L])."""
        xs = [self.embedding(u) for u in utt_ids]
        xps = [build_prompt_input(Tensor(x), [Tensor(self.embedding(h)) for h in hs])
               for x, hs in zip(xs, histories)]
        prompts = self.prompter.speaker_prompts(xps)
        state = encode_with_prompts(self.model, xs, self.placement, self.prompter.project(prompts))
        return state, prompts

    def prompts(self, utt_ids, histories) -> np.ndarray:
        with ag.no_grad():
            xs = [self.embedding(u) for u in utt_ids]
            xps = [build_prompt_input(Tensor(x), [Tensor(self.embedding(h)) for h in hs])
                   for x, hs in zip(xs, histories)]
            return self.prompter.speaker_prompts(xps).data


def aux_labels(mode: AuxMode, records: Sequence[UtteranceRecord], speaker_ids: Sequence[str]):
    mode = AuxMode(mode)
    if mode is AuxMode.SPEAKER_CLASSIFY:
        idx = {s: i for i, s in enumerate(speaker_ids)}
        return np.array([idx[r.speaker_id] for r in records], dtype=np.int64)
    if mode is AuxMode.FDA_CLASSIFY:
        return np.array([SEVERITY_CLASSES.index(r.severity) for r in records], dtype=np.int64)
    if mode is AuxMode.FDA_REGRESS:
        return np.array([r.fda_score for r in records], dtype=np.float64)
    return None


def ptune_perceiver(trainer: PromptTrainer, records: Sequence[UtteranceRecord], cfg: TrainConfig,
                    speaker_ids: Sequence[str] | None = None, on_epoch=None, max_steps: int | None = None) -> TrainLog:
    """Train only the prompt path; every backbone and LoRA tensor stays bitwise fixed."""
    if cfg.stage is not Stage.P_TUNING:
        raise ValueError(f"ptune_perceiver needs stage=p_tuning, got {cfg.stage.value}")
    model = trainer.model
    model.freeze()
    trainer.prompter.unfreeze()
    if trainer.aux_head is not None:
        trainer.aux_head.unfreeze()
    params = trainer.trainable()
    recs = list(records)
    speaker_ids = list(speaker_ids or sorted({r.speaker_id for r in recs}))
    index: dict[str, list[str]] = {}
    for r in recs:
        index.setdefault(r.speaker_id, []).append(r.utt_id)
    lengths = [trainer.embedding(r.utt_id).shape[0] for r in recs]

    def batches(epoch):
        return make_batches(recs, lengths, cfg.batch_size, np.random.default_rng([cfg.seed, epoch]))

    hist_rng = np.random.default_rng([cfg.seed, 7])

    def loss_fn(batch):
        hists = [select_history(r.speaker_id, r.utt_id, cfg.history, index, hist_rng) for r in batch]
        state, prompts = trainer.forward([r.utt_id for r in batch], hists)
        asr = model.loss(state, [r.transcript for r in batch])
        labels = aux_labels(cfg.aux, batch, speaker_ids)
        return joint_loss(asr, prompts, labels, cfg.aux, cfg.aux_weight, trainer.aux_head)

    return _optimise(params, batches, loss_fn, cfg, on_epoch, max_steps)


def count_trainable(modules: Sequence[Module | None]) -> int:
    return int(sum(m.num_parameters(trainable_only=True) for m in modules if m is not None))


def prompt_path_size(prompter: PerceiverPrompt, aux_head: AuxHead | None) -> dict[str, int]:
    """Audited stage-2 parameter groups."""
    p = prompter.perceiver
    groups = {
        "latents": p.latents.size,
        "perceiver": p.num_parameters() - p.latents.size,
        "projection": prompter.proj.num_parameters(),
        "aux_head": aux_head.num_parameters() if aux_head is not None else 0,
    }
    groups["total"] = sum(groups.values())
    return groups


def default_prompter(model: ASRModel, cfg, placement: PromptPlacement, seed: int) -> PerceiverPrompt:
    width = model.cfg.n_mels if placement.layer is Layer.LOG_MEL else model.cfg.d_model
    return PerceiverPrompt(cfg, d_input=width, d_target=width, seed=seed)
