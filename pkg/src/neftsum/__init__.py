"""Dialogue summarization by LoRA instruction tuning with noisy embeddings."""

__version__ = "0.1.0"

from .adapters import LoraConfig, attach, merge
from .config import ConfigError, RunConfig
from .corpus import DialogueRecord, InstructionSample, build_instruction_samples, load_records, tokenize_batches
from .decode import DecodeConfig, generate
from .estimator import InstructionSummarizer
from .metrics import MetricReport, bleu, compare_reports, rouge_l, rouge_n, score_predictions
from .model import CausalLM, ModelConfig, init_params
from .neftune import NeftuneConfig, inject_noise
from .tokenizer import BPETokenizer, TokenizerModel, train_bpe
from .trainer import TrainConfig, train

__all__ = [
    "BPETokenizer",
    "CausalLM",
    "ConfigError",
    "DecodeConfig",
    "DialogueRecord",
    "InstructionSample",
    "InstructionSummarizer",
    "LoraConfig",
    "MetricReport",
    "ModelConfig",
    "NeftuneConfig",
    "RunConfig",
    "TokenizerModel",
    "TrainConfig",
    "attach",
    "bleu",
    "build_instruction_samples",
    "compare_reports",
    "generate",
    "init_params",
    "inject_noise",
    "load_records",
    "merge",
    "rouge_l",
    "rouge_n",
    "score_predictions",
    "tokenize_batches",
    "train",
    "train_bpe",
]
