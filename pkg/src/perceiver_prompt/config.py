"""Run configuration: nested dataclasses read from and written to YAML.

Every section and key is optional in the file; omitted values take the
defaults below. Unknown keys and ill-typed values are rejected before any work
starts. The defaults describe the canonical adaptation setting: prompt of 32
rows concatenated at the end of the encoder-block input, self-only history.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .corpus import CorpusConfig
from .model import ModelConfig
from .perceiver import Concat, HistoryPolicy, Layer, PerceiverConfig, PromptPlacement
from .training import AuxMode


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection:
    root: str = "corpus"  # relative paths resolve against the run directory
    n_patients: int = 16
    n_healthy: int = 6
    utts_per_task: int = 20
    healthy_utts_per_task: int = 80
    n_test_patients: int = 4
    seed: int = 0

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(self.n_patients, self.n_healthy, self.utts_per_task, self.healthy_utts_per_task,
                            self.n_test_patients, self.seed)


@dataclass
class ModelSection:
    n_mels: int = 80
    d_model: int = 64
    n_heads: int = 4
    n_encoder_blocks: int = 2
    n_decoder_blocks: int = 2
    ffn_dim: int = 256
    max_target_len: int = 16

    def model_config(self) -> ModelConfig:
        return ModelConfig(**dataclasses.asdict(self))


@dataclass
class AdaptationSection:
    layer: str = Layer.BEFORE_ENCODER_BLOCKS.value
    concat: str = Concat.END.value
    prompt_len: int = 32
    n_history: int = 0
    stochastic_history: bool = False
    latent_dim: int = 64
    cross_attn_heads: int = 8
    self_attn_heads: int = 8
    n_self_layers: int = 2
    aux: str = AuxMode.NONE.value
    aux_weight: float = 0.1

    def __post_init__(self):
        try:
            Layer(self.layer), Concat(self.concat), AuxMode(self.aux)
        except ValueError as e:
            raise ConfigError(f"adaptation: {e}") from None
        if self.prompt_len < 1 or self.n_history < 0 or self.aux_weight < 0:
            raise ConfigError("adaptation: prompt_len >= 1, n_history >= 0 and aux_weight >= 0 are required")

    @property
    def placement(self) -> PromptPlacement:
        return PromptPlacement(self.layer, self.concat)

    @property
    def history(self) -> HistoryPolicy:
        return HistoryPolicy(self.n_history, self.stochastic_history)

    def perceiver_config(self) -> PerceiverConfig:
        return PerceiverConfig(latent_len=self.prompt_len, latent_dim=self.latent_dim,
                               cross_attn_heads=self.cross_attn_heads, self_attn_heads=self.self_attn_heads,
                               n_self_layers=self.n_self_layers)


@dataclass
class TrainingSection:
    pretrain_epochs: int = 16
    lora_epochs: int = 60
    ptune_epochs: int = 30
    pretrain_lr: float = 3e-4
    lora_lr: float = 1e-4
    ptune_lr: float = 1e-4
    batch_size: int = 8
    grad_clip: float = 1.0
    lora_rank: int = 8
    lora_alpha: float = 8.0

    def __post_init__(self):
        if min(self.pretrain_epochs, self.lora_epochs, self.ptune_epochs) < 0 or self.batch_size < 1:
            raise ConfigError("training: epochs must be >= 0 and batch_size >= 1")


@dataclass
class EvalSection:
    batch_size: int = 32
    # history rows fed to the Perceiver at test time; null means "same as adaptation.n_history"
    n_history: int | None = None
    baseline_checkpoint: str | None = None
    adapted_checkpoint: str | None = None


@dataclass
class SweepSection:
    confs: list[int] = field(default_factory=lambda: list(range(1, 16)))
    ptune_epochs: int | None = None


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    adaptation: AdaptationSection = field(default_factory=AdaptationSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def with_adaptation(self, **kw) -> RunConfig:
        return dataclasses.replace(self, adaptation=dataclasses.replace(self.adaptation, **kw))


def _check_value(path: str, tp, value):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        return _check_value(path, next(a for a in args if a is not type(None)), value)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        (inner,) = typing.get_args(tp)
        return [_check_value(f"{path}[{i}]", inner, v) for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):  # YAML 1.1 reads exponents without a dot (3e-4) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, data, path: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = path or "top level"
        raise ConfigError(f"unknown key(s) at {where}: {', '.join(unknown)} (allowed: {', '.join(sorted(names))})")
    kwargs = {k: _check_value(f"{path}.{k}" if path else k, hints[k], v) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


def config_from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data)


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from None
    return config_from_dict(data)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text())


def save_config(path, cfg: RunConfig) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(cfg.to_yaml())


# -- sweep grid ----------------------------------------------------------------------
_BASE = dict(layer="before_encoder_blocks", concat="end", prompt_len=32, n_history=0, stochastic_history=False,
             aux="none")

SWEEP_GRID: dict[int, dict] = {
    1: {**_BASE, "prompt_len": 64},
    2: dict(_BASE),
    3: {**_BASE, "prompt_len": 16},
    4: {**_BASE, "concat": "beginning"},
    5: {**_BASE, "concat": "both_sides"},
    6: {**_BASE, "n_history": 1},
    7: {**_BASE, "n_history": 3},
    8: {**_BASE, "n_history": 5},
    9: {**_BASE, "n_history": 1, "stochastic_history": True},
    10: {**_BASE, "n_history": 3, "stochastic_history": True},
    11: {**_BASE, "n_history": 5, "stochastic_history": True},
    12: {**_BASE, "layer": "log_mel"},
    13: {**_BASE, "aux": "speaker_classify"},
    14: {**_BASE, "aux": "fda_regress"},
    15: {**_BASE, "aux": "fda_classify"},
}


def sweep_configs(cfg: RunConfig) -> list[tuple[int, RunConfig]]:
    out = []
    for conf in cfg.sweep.confs:
        if conf not in SWEEP_GRID:
            raise ConfigError(f"sweep.confs: no configuration numbered {conf} (valid: 1-{len(SWEEP_GRID)})")
        out.append((conf, cfg.with_adaptation(**SWEEP_GRID[conf])))
    return out
