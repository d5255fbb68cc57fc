"""Speaker-prompt (P-tuning) adaptation of a small Whisper-style ASR model, on a numpy autograd core."""
from .autograd import Tensor, backward, default_dtype, gradcheck, no_grad
from .config import RunConfig, load_config, parse_config
from .corpus import CorpusConfig, generate_corpus, load_corpus
from .evaluation import build_report, cer, relative_reduction, render_table
from .lora import LoraLinear, apply_lora, merge_lora
from .model import ASRModel, ModelConfig, Tokenizer
from .perceiver import HistoryPolicy, Perceiver, PerceiverConfig, PerceiverPrompt, PromptPlacement

__version__ = "0.1.0"

__all__ = [
    "ASRModel", "CorpusConfig", "HistoryPolicy", "LoraLinear", "ModelConfig", "Perceiver", "PerceiverConfig",
    "PerceiverPrompt", "PromptPlacement", "RunConfig", "Tensor", "Tokenizer", "apply_lora", "backward",
    "build_report", "cer", "default_dtype", "generate_corpus", "gradcheck", "load_config", "load_corpus",
    "merge_lora", "no_grad", "parse_config", "relative_reduction", "render_table",
]
