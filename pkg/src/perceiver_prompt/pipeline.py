"""Run orchestration shared by the CLI, the experiment scripts and the acceptance tests.

Run directory layout::

    config.yaml              effective configuration, defaults expanded
    metrics.jsonl            one JSON record per training epoch
    checkpoints/backbone.ppck   stage 0: sim-pretrained backbone (full)
    checkpoints/lora.ppck       stage 1: LoRA adapters only
    checkpoints/prompt.ppck     stage 2: Perceiver, latents, projection, aux head
    reports/                 baseline.json, adapted.json, comparison.{txt,json}
    prompts/                 prompts_h{n}.tsv, projection_h{n}.tsv, probe_h{n}.json
    sweep/confNN/            per-configuration config, checkpoint and reports

Every training stage stores a key describing its inputs in the checkpoint
header and is skipped when a checkpoint with the same key already exists, so
rerunning a command on the same run directory and seed is a no-op.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from .config import RunConfig, save_config, sweep_configs
from .corpus import HEALTHY, Corpus, UtteranceRecord, generate_corpus, load_corpus
from .evaluation import (SEVERITIES, EvalReport, binomial_sigma, build_report, linear_probe, pca_2d,
                         relative_reduction, render_table, shuffled_probe, write_projection, write_prompt_export,
                         write_report)
from .lora import apply_lora
from .model import ASRModel
from .perceiver import HistoryPolicy, select_history
from .training import (AuxHead, FeatureStore, PromptTrainer, Stage, TrainConfig, aux_output_size,
                       default_prompter, finetune_lora, prompt_path_size, pretrain_backbone, ptune_perceiver)

log = logging.getLogger(__name__)


class CorpusMismatchError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.yaml"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.jsonl"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def backbone(self) -> Path:
        return self.checkpoints / "backbone.ppck"

    @property
    def lora(self) -> Path:
        return self.checkpoints / "lora.ppck"

    @property
    def prompt(self) -> Path:
        return self.checkpoints / "prompt.ppck"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def prompts(self) -> Path:
        return self.root / "prompts"


def corpus_root(cfg: RunConfig, run_dir) -> Path:
    p = Path(cfg.corpus.root)
    return p if p.is_absolute() else Path(run_dir) / p


def corpus_fingerprint(corpus: Corpus) -> str:
    return hashlib.sha256((Path(corpus.root) / "manifest.jsonl").read_bytes()).hexdigest()[:16]


def snapshot_config(cfg: RunConfig, run_dir) -> None:
    save_config(RunPaths(Path(run_dir)).config, cfg)


# -- generate ------------------------------------------------------------------------
def cmd_generate(cfg: RunConfig, run_dir) -> Corpus:
    """Write the corpus unless an identical one is already on disk."""
    root = corpus_root(cfg, run_dir)
    want = dataclasses.asdict(cfg.corpus.corpus_config())
    meta = root / "speakers.json"
    if meta.exists():
        have = json.loads(meta.read_text())["config"]
        if have == want:
            log.info("corpus at %s already matches the config; skipping generation", root)
            snapshot_config(cfg, run_dir)
            return load_corpus(root)
        raise CorpusMismatchError(
            f"{root} holds a corpus generated with {have}, but the config asks for {want}; "
            "point corpus.root at an empty directory or delete the old corpus")
    log.info("generating corpus at %s", root)
    corpus = generate_corpus(root, cfg.corpus.corpus_config())
    snapshot_config(cfg, run_dir)
    return corpus


def open_corpus(cfg: RunConfig, run_dir) -> Corpus:
    root = corpus_root(cfg, run_dir)
    if not (root / "manifest.jsonl").exists():
        raise MissingArtifactError(f"no corpus at {root}; run `generate` with this config first")
    corpus = load_corpus(root)
    have = json.loads((root / "speakers.json").read_text())["config"]
    if have != dataclasses.asdict(cfg.corpus.corpus_config()):
        raise CorpusMismatchError(f"corpus at {root} was generated with different settings ({have}); "
                                  "regenerate it or fix the corpus section of the config")
    return corpus


# -- metrics -------------------------------------------------------------------------
class MetricsLog:
    """Append-only JSONL; rerunning a stage replaces that stage's earlier records."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def reset_stage(self, stage: str, tag: str | None = None) -> None:
        if not self.path.exists():
            return
        keep = [line for line in self.path.read_text().splitlines()
                if line.strip() and not self._matches(json.loads(line), stage, tag)]
        self.path.write_text("".join(line + "\n" for line in keep))

    @staticmethod
    def _matches(rec, stage, tag):
        return rec.get("stage") == stage and rec.get("tag") == tag

    def write(self, record: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]


def _epoch_logger(metrics: MetricsLog, stage: str, seed: int, tag: str | None = None):
    metrics.reset_stage(stage, tag)

    def on_epoch(epoch: int, loss: float):
        rec = {"stage": stage, "epoch": epoch, "loss": loss, "seed": seed}
        if tag is not None:
            rec["tag"] = tag
        metrics.write(rec)
    return on_epoch


# -- training ------------------------------------------------------------------------
def _stage_keys(cfg: RunConfig, fingerprint: str) -> tuple[dict, dict]:
    t = cfg.training
    backbone = {"seed": cfg.seed, "corpus": fingerprint, "model": dataclasses.asdict(cfg.model),
                "epochs": t.pretrain_epochs, "lr": t.pretrain_lr, "batch_size": t.batch_size,
                "grad_clip": t.grad_clip}
    lora = {"backbone": backbone, "epochs": t.lora_epochs, "lr": t.lora_lr, "rank": t.lora_rank,
            "alpha": t.lora_alpha}
    return backbone, lora


def _prompt_key(cfg: RunConfig, lora_key: dict, epochs: int) -> dict:
    return {"lora": lora_key, "adaptation": dataclasses.asdict(cfg.adaptation), "epochs": epochs,
            "lr": cfg.training.ptune_lr}


def _cached(path: Path, key: dict) -> bool:
    if not path.exists():
        return False
    try:
        header, _ = ckpt.load_tensors(path)
    except ckpt.CheckpointError:
        return False
    return header["config"].get("key") == key


def build_model(cfg: RunConfig) -> ASRModel:
    return ASRModel(cfg.model.model_config(), seed=cfg.seed)


def train_backbone_and_lora(cfg: RunConfig, run_dir, corpus: Corpus, features: FeatureStore) -> ASRModel:
    """Stages 0 and 1: sim-pretraining on healthy speakers, then LoRA fine-tuning on training patients."""
    paths = RunPaths(Path(run_dir))
    metrics = MetricsLog(paths.metrics)
    t = cfg.training
    bkey, lkey = _stage_keys(cfg, corpus_fingerprint(corpus))
    model = build_model(cfg)
    if _cached(paths.backbone, bkey):
        ckpt.load_module(paths.backbone, model)
        log.info("stage pretrain: reusing %s", paths.backbone)
    else:
        tc = TrainConfig(stage=Stage.PRETRAIN, epochs=t.pretrain_epochs, batch_size=t.batch_size, lr=t.pretrain_lr,
                         seed=cfg.seed, grad_clip=t.grad_clip)
        pretrain_backbone(model, corpus.subset(corpus.healthy_speakers), features, tc,
                          on_epoch=_epoch_logger(metrics, "pretrain", cfg.seed))
        ckpt.save_module(paths.backbone, model, {"key": bkey, "lora": None})
    if _cached(paths.lora, lkey):
        ckpt.load_lora(paths.lora, model)
        log.info("stage lora_finetune: reusing %s", paths.lora)
    else:
        tc = TrainConfig(stage=Stage.LORA_FINETUNE, epochs=t.lora_epochs, batch_size=t.batch_size, lr=t.lora_lr,
                         seed=cfg.seed, grad_clip=t.grad_clip)
        finetune_lora(model, corpus.subset(corpus.train_patients), features, tc, rank=t.lora_rank,
                      alpha=t.lora_alpha, on_epoch=_epoch_logger(metrics, "lora_finetune", cfg.seed))
        ckpt.save_lora(paths.lora, model, {"key": lkey, "rank": t.lora_rank, "alpha": t.lora_alpha})
    model.freeze()
    return model


def make_prompt_trainer(cfg: RunConfig, model: ASRModel, features: FeatureStore,
                        speaker_ids: Sequence[str]) -> PromptTrainer:
    a = cfg.adaptation
    prompter = default_prompter(model, a.perceiver_config(), a.placement, seed=cfg.seed)
    head = None
    if a.aux != "none":
        head = AuxHead(a.latent_dim, aux_output_size(a.aux, len(speaker_ids)), a.aux, seed=cfg.seed)
    return PromptTrainer(model, prompter, features, a.placement, head)


def _prompt_state(trainer: PromptTrainer) -> dict[str, np.ndarray]:
    state = {f"prompter.{k}": v for k, v in trainer.prompter.state_dict().items()}
    if trainer.aux_head is not None:
        state.update({f"aux_head.{k}": v for k, v in trainer.aux_head.state_dict().items()})
    return state


def _load_prompt_state(trainer: PromptTrainer, tensors: dict[str, np.ndarray]) -> None:
    trainer.prompter.load_state_dict({k[9:]: v for k, v in tensors.items() if k.startswith("prompter.")})
    if trainer.aux_head is not None:
        trainer.aux_head.load_state_dict({k[9:]: v for k, v in tensors.items() if k.startswith("aux_head.")})


def train_prompt(cfg: RunConfig, run_dir, model: ASRModel, corpus: Corpus, features: FeatureStore,
                 epochs: int | None = None, tag: str | None = None) -> PromptTrainer:
    """Stage 2: P-tuning of the prompt path on training patients; backbone and LoRA stay frozen."""
    paths = RunPaths(Path(run_dir))
    epochs = cfg.training.ptune_epochs if epochs is None else epochs
    speakers = sorted(corpus.train_patients)
    trainer = make_prompt_trainer(cfg, model, features, speakers)
    _, lkey = _stage_keys(cfg, corpus_fingerprint(corpus))
    key = _prompt_key(cfg, lkey, epochs)
    header_cfg = {"key": key, "adaptation": dataclasses.asdict(cfg.adaptation), "seed": cfg.seed,
                  "aux_speakers": speakers, "sizes": prompt_path_size(trainer.prompter, trainer.aux_head)}
    if _cached(paths.prompt, key):
        _, tensors = ckpt.load_tensors(paths.prompt)
        _load_prompt_state(trainer, tensors)
        log.info("stage p_tuning: reusing %s", paths.prompt)
        return trainer
    a = cfg.adaptation
    tc = TrainConfig(stage=Stage.P_TUNING, epochs=epochs, batch_size=cfg.training.batch_size, lr=cfg.training.ptune_lr,
                     seed=cfg.seed, placement=a.placement, history=a.history, prompt_len=a.prompt_len, aux=a.aux,
                     aux_weight=a.aux_weight, grad_clip=cfg.training.grad_clip)
    ptune_perceiver(trainer, corpus.subset(corpus.train_patients), tc, speaker_ids=speakers,
                    on_epoch=_epoch_logger(MetricsLog(paths.metrics), "p_tuning", cfg.seed, tag))
    ckpt.save_tensors(paths.prompt, _prompt_state(trainer), header_cfg, kind="prompt")
    return trainer


def cmd_train(cfg: RunConfig, run_dir) -> PromptTrainer:
    corpus = open_corpus(cfg, run_dir)
    snapshot_config(cfg, run_dir)
    features = FeatureStore(corpus)
    model = train_backbone_and_lora(cfg, run_dir, corpus, features)
    return train_prompt(cfg, run_dir, model, corpus, features)


# -- evaluation ----------------------------------------------------------------------
def _test_policy(cfg: RunConfig) -> HistoryPolicy:
    n = cfg.eval.n_history if cfg.eval.n_history is not None else cfg.adaptation.n_history
    return HistoryPolicy(n, cfg.adaptation.stochastic_history)


def decode(model: ASRModel, features: FeatureStore, records: Sequence[UtteranceRecord], batch_size: int = 32,
           trainer: PromptTrainer | None = None, policy: HistoryPolicy = HistoryPolicy(),
           index: dict | None = None, seed: int = 0) -> dict[str, str]:
    """Greedy transcripts keyed by utterance id, with or without speaker prompts."""
    rng = np.random.default_rng([seed, 11])
    hyps = {}
    for i in range(0, len(records), batch_size):
        batch = records[i:i + batch_size]
        with ag.no_grad():
            if trainer is None:
                out = model.transcribe([features.mel(r.utt_id) for r in batch])
            else:
                hists = [select_history(r.speaker_id, r.utt_id, policy, index, rng) for r in batch]
                state, _ = trainer.forward([r.utt_id for r in batch], hists)
                out = model.greedy_decode(state)
        hyps.update({r.utt_id: h for r, h in zip(batch, out)})
    return hyps


def _load_full_model(path, model: ASRModel) -> None:
    header, _ = ckpt.load_tensors(path)
    lora = header["config"].get("lora")
    if lora:
        apply_lora(model, r=lora["rank"], alpha=lora["alpha"])
    ckpt.load_module(path, model)


def _baseline_model(cfg: RunConfig, run_dir) -> ASRModel:
    paths = RunPaths(Path(run_dir))
    model = build_model(cfg)
    if cfg.eval.baseline_checkpoint:
        _load_full_model(cfg.eval.baseline_checkpoint, model)
    else:
        for p in (paths.backbone, paths.lora):
            if not p.exists():
                raise MissingArtifactError(f"missing checkpoint {p}; run `train` on {run_dir} first")
        ckpt.load_module(paths.backbone, model)
        ckpt.load_lora(paths.lora, model)
    return model.freeze()


def save_model(path, model: ASRModel, lora: dict | None = None) -> None:
    """Full model checkpoint usable as ``eval.baseline_checkpoint``."""
    ckpt.save_module(path, model, {"lora": lora})


def load_prompt_trainer(cfg: RunConfig, path, model: ASRModel, features: FeatureStore) -> PromptTrainer:
    header, tensors = ckpt.load_tensors(path)
    if header["kind"] != "prompt":
        raise ckpt.CheckpointError(f"{path} is a {header['kind']!r} checkpoint, not a prompt checkpoint")
    stored = header["config"]
    pcfg = cfg.with_adaptation(**stored["adaptation"])
    trainer = make_prompt_trainer(pcfg, model, features, stored["aux_speakers"])
    try:
        _load_prompt_state(trainer, tensors)
    except (KeyError, ValueError) as e:
        raise ckpt.CheckpointError(f"{path} does not fit this model: {e}") from e
    return trainer


@dataclass
class Comparison:
    baseline: EvalReport
    adapted: EvalReport

    @property
    def relative_reduction(self) -> float:
        return relative_reduction(self.baseline.overall, self.adapted.overall)

    def severity_gains(self) -> dict[str, float | None]:
        out = {}
        for s in SEVERITIES:
            b, a = self.baseline.by_severity[s], self.adapted.by_severity[s]
            out[s] = None if b is None or a is None else b - a
        return out

    def summary(self) -> dict:
        return {"baseline_cer": self.baseline.overall, "adapted_cer": self.adapted.overall,
                "relative_reduction": self.relative_reduction, "severity_gain": self.severity_gains(),
                "baseline_by_severity": self.baseline.by_severity, "adapted_by_severity": self.adapted.by_severity,
                "baseline_by_task": self.baseline.by_task, "adapted_by_task": self.adapted.by_task}

    def table(self) -> str:
        return (render_table({"baseline": self.baseline, "adapted": self.adapted})
                + f"\nrelative CER reduction: {self.relative_reduction:.2f}%")


def evaluate_run(cfg: RunConfig, run_dir, corpus: Corpus, features: FeatureStore, model: ASRModel,
                 trainer: PromptTrainer | None, baseline: EvalReport | None = None) -> Comparison:
    paths = RunPaths(Path(run_dir))
    test = corpus.subset(corpus.test_speakers)
    if baseline is None:
        baseline = build_report(test, decode(model, features, test, cfg.eval.batch_size))
    if trainer is None:
        adapted = baseline
    else:
        hyps = decode(model, features, test, cfg.eval.batch_size, trainer, _test_policy(cfg),
                      corpus.by_speaker(test), cfg.seed)
        adapted = build_report(test, hyps)
    return write_comparison(paths, Comparison(baseline, adapted))


def write_comparison(paths: RunPaths, comp: Comparison) -> Comparison:
    write_report(paths.reports, "baseline", comp.baseline)
    write_report(paths.reports, "adapted", comp.adapted)
    (paths.reports / "comparison.json").write_text(json.dumps(comp.summary(), indent=1, sort_keys=True))
    (paths.reports / "comparison.txt").write_text(comp.table() + "\n")
    return comp


def cmd_eval(cfg: RunConfig, run_dir) -> Comparison:
    """Decode the held-out speakers without and with prompts and write both reports plus the comparison."""
    paths = RunPaths(Path(run_dir))
    corpus = open_corpus(cfg, run_dir)
    snapshot_config(cfg, run_dir)
    features = FeatureStore(corpus)
    model = _baseline_model(cfg, run_dir)
    adapted_path = Path(cfg.eval.adapted_checkpoint) if cfg.eval.adapted_checkpoint else paths.prompt
    if not adapted_path.exists():
        raise MissingArtifactError(f"missing checkpoint {adapted_path}; run `train` on {run_dir} first")
    header, _ = ckpt.load_tensors(adapted_path)
    if header["kind"] == "prompt":
        trainer = load_prompt_trainer(cfg, adapted_path, model, features)
        comp = evaluate_run(cfg, run_dir, corpus, features, model, trainer)
    else:
        # a plain model checkpoint: compare two prompt-free systems
        other = build_model(cfg)
        _load_full_model(adapted_path, other)
        test = corpus.subset(corpus.test_speakers)
        base = build_report(test, decode(model, features, test, cfg.eval.batch_size))
        adapted = build_report(test, decode(other, features, test, cfg.eval.batch_size))
        comp = write_comparison(paths, Comparison(base, adapted))
    log.info("baseline CER %.1f, adapted CER %.1f, relative reduction %.2f%%",
             comp.baseline.overall, comp.adapted.overall, comp.relative_reduction)
    return comp


# -- sweep ---------------------------------------------------------------------------
def cmd_sweep(cfg: RunConfig, run_dir) -> dict[int, Comparison]:
    """Shared backbone and LoRA, then one P-tuning run and report per configuration."""
    corpus = open_corpus(cfg, run_dir)
    snapshot_config(cfg, run_dir)
    features = FeatureStore(corpus)
    model = train_backbone_and_lora(cfg, run_dir, corpus, features)
    test = corpus.subset(corpus.test_speakers)
    baseline = build_report(test, decode(model, features, test, cfg.eval.batch_size))
    epochs = cfg.sweep.ptune_epochs
    results = {}
    for conf, ccfg in sweep_configs(cfg):
        sub = Path(run_dir) / "sweep" / f"conf{conf:02d}"
        snapshot_config(ccfg, sub)
        for name in ("backbone", "lora"):
            dst = getattr(RunPaths(sub), name)
            dst.parent.mkdir(parents=True, exist_ok=True)
            dst.write_bytes(getattr(RunPaths(Path(run_dir)), name).read_bytes())
        trainer = train_prompt(ccfg, sub, model, corpus, features, epochs=epochs, tag=f"conf{conf:02d}")
        results[conf] = evaluate_run(ccfg, sub, corpus, features, model, trainer, baseline)
        log.info("Conf.%d: CER %.1f (baseline %.1f)", conf, results[conf].adapted.overall, baseline.overall)
    rows = {"baseline": baseline, **{f"Conf.{c}": r.adapted for c, r in results.items()}}
    paths = RunPaths(Path(run_dir))
    paths.reports.mkdir(parents=True, exist_ok=True)
    (paths.reports / "sweep.txt").write_text(render_table(rows) + "\n")
    (paths.reports / "sweep.json").write_text(json.dumps(
        {f"conf{c:02d}": {"adaptation": dataclasses.asdict(ccfg.adaptation), **results[c].summary()}
         for c, ccfg in sweep_configs(cfg)}, indent=1, sort_keys=True))
    return results


# -- prompt export -------------------------------------------------------------------
@dataclass
class ProbeResult:
    n_history: int
    speaker_accuracy: float
    shuffled_mean: float
    shuffled_std: float
    severity_accuracy: float
    n_samples: int
    n_speakers: int

    @property
    def sigma(self) -> float:
        """Spread of the null: the larger of the empirical shuffle std and the binomial std at chance."""
        return max(self.shuffled_std, binomial_sigma(1.0 / self.n_speakers, self.n_samples))

    @property
    def margin_sigmas(self) -> float:
        return (self.speaker_accuracy - self.shuffled_mean) / self.sigma


def speaker_prompts(trainer: PromptTrainer, corpus: Corpus, records: Sequence[UtteranceRecord],
                    policy: HistoryPolicy, seed: int = 0, batch_size: int = 32) -> np.ndarray:
    index = corpus.by_speaker(records)
    rng = np.random.default_rng([seed, 13])
    out = []
    for i in range(0, len(records), batch_size):
        batch = records[i:i + batch_size]
        hists = [select_history(r.speaker_id, r.utt_id, policy, index, rng) for r in batch]
        out.append(trainer.prompts([r.utt_id for r in batch], hists))
    return np.concatenate(out)


def cmd_export_prompts(cfg: RunConfig, run_dir) -> ProbeResult:
    """Prompts for every patient utterance, their 2-D projection and speaker / severity linear probes."""
    paths = RunPaths(Path(run_dir))
    corpus = open_corpus(cfg, run_dir)
    snapshot_config(cfg, run_dir)
    features = FeatureStore(corpus)
    if not paths.prompt.exists():
        raise MissingArtifactError(f"missing checkpoint {paths.prompt}; run `train` on {run_dir} first")
    model = _baseline_model(cfg, run_dir)
    trainer = load_prompt_trainer(cfg, paths.prompt, model, features)
    policy = _test_policy(cfg)
    recs = [r for r in corpus.records if r.severity != HEALTHY]
    prompts = speaker_prompts(trainer, corpus, recs, policy, cfg.seed, cfg.eval.batch_size)
    n = policy.n_history
    paths.prompts.mkdir(parents=True, exist_ok=True)
    speakers = [r.speaker_id for r in recs]
    sev = [r.severity for r in recs]
    write_prompt_export(paths.prompts / f"prompts_h{n}.tsv", [r.utt_id for r in recs], speakers, sev, prompts)
    proj = pca_2d(prompts.reshape(len(recs), -1))
    write_projection(paths.prompts / f"projection_h{n}.tsv",
                     [(float(x), float(y), s, v) for (x, y), s, v in zip(proj.coords, speakers, sev)])
    flat = prompts.reshape(len(recs), -1)
    acc = linear_probe(flat, speakers, seed=cfg.seed)
    null_mean, null_std = shuffled_probe(flat, speakers, seed=cfg.seed)
    res = ProbeResult(n, acc, null_mean, null_std, linear_probe(flat, sev, seed=cfg.seed), len(recs),
                      len(set(speakers)))
    (paths.prompts / f"probe_h{n}.json").write_text(json.dumps(
        {**dataclasses.asdict(res), "sigma": res.sigma, "margin_sigmas": res.margin_sigmas}, indent=1))
    log.info("speaker probe %.3f vs shuffled %.3f +- %.3f (history %d)", acc, null_mean, null_std, n)
    return res


def run_all(cfg: RunConfig, run_dir) -> Comparison:
    """generate -> train -> eval."""
    cmd_generate(cfg, run_dir)
    cmd_train(cfg, run_dir)
    return cmd_eval(cfg, run_dir)
