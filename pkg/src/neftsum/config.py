"""Run configuration: nested sections, JSON file, dotted-path overrides.

Precedence is flag > config file > default. Unknown keys are rejected with
their full key path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence, get_args, get_type_hints

from .adapters import LoraConfig
from .decode import DecodeConfig
from .model import PRESETS, ModelConfig
from .neftune import NeftuneConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; message starts with the offending key path."""


@dataclass
class TokenizerSection:
    vocab_size: int = 1024


@dataclass
class DataSection:
    schema: str = "csds"
    max_len: int = 512
    boundary: str = "distinct"
    loss_on_prompt: bool = False


@dataclass
class ModelSection:
    preset: str = "desk"
    d_model: int | None = None
    n_heads: int | None = None
    n_layers: int | None = None
    ffn_dim: int | None = None
    max_seq: int | None = None
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    dtype: str = "float32"
    init_seed: int = 0
    base_checkpoint: str = ""
    pretrain_iterations: int = 0
    pretrain_learning_rate: float = 3e-3
    pretrain_corpus: str = ""


@dataclass
class LoraSection:
    enabled: bool = True
    rank: int = 9
    alpha: float = 18.0
    dropout: float = 0.1
    target: str = "fused_qkv"


@dataclass
class NeftuneSection:
    alpha: float = 5.0
    enabled: bool = True


@dataclass
class TrainSection:
    learning_rate: float = 5e-5
    iterations: int = 9000
    batch_size: int = 2
    accumulation_steps: int = 4
    clip_theta: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1000


@dataclass
class DecodeSection:
    strategy: str = "greedy"
    beam_size: int = 1
    temperature: float = 1.0
    top_p: float = 1.0
    max_new_tokens: int = 128
    seed: int = 0


@dataclass
class EvalSection:
    last_k: int = 3
    bleu_smoothing: str = "exp"


@dataclass
class RunConfig:
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    lora: LoraSection = field(default_factory=LoraSection)
    neftune: NeftuneSection = field(default_factory=NeftuneSection)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # construction

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        cfg = cls()
        if not isinstance(data, Mapping):
            raise ConfigError("<root>: expected a JSON object")
        section_names = {f.name for f in fields(cls)}
        for sec, values in data.items():
            if sec not in section_names:
                raise ConfigError(f"{sec}: unknown section")
            if not isinstance(values, Mapping):
                raise ConfigError(f"{sec}: expected an object")
            for key, value in values.items():
                cfg.set(f"{sec}.{key}", value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<file {path}>: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    def set(self, dotted: str, value: Any) -> None:
        sec_name, _, key = dotted.partition(".")
        if not key or "." in key:
            raise ConfigError(f"{dotted}: expected <section>.<key>")
        section = getattr(self, sec_name, None)
        if section is None or sec_name not in {f.name for f in fields(self)}:
            raise ConfigError(f"{dotted}: unknown section {sec_name!r}")
        hints = get_type_hints(type(section))
        if key not in hints:
            raise ConfigError(f"{dotted}: unknown key")
        setattr(section, key, _coerce(dotted, value, hints[key]))

    def apply_overrides(self, overrides: Sequence[tuple[str, Any]]) -> "RunConfig":
        for dotted, value in overrides:
            self.set(dotted, value)
        self.validate()
        return self

    # conversion into component configs

    def validate(self) -> None:
        checks = [
            ("model.preset", lambda: self.model.preset in PRESETS, f"must be one of {sorted(PRESETS)}"),
            ("model.dtype", lambda: self.model.dtype in ("float32", "float64"), "must be float32 or float64"),
            ("data.schema", lambda: self.data.schema in ("csds", "samsum"), "must be csds or samsum"),
            ("data.boundary", lambda: self.data.boundary in ("distinct", "shared"), "must be distinct or shared"),
            ("data.max_len", lambda: self.data.max_len >= 8, "must be >= 8"),
            ("tokenizer.vocab_size", lambda: self.tokenizer.vocab_size >= 259, "must be >= 259"),
            ("eval.last_k", lambda: self.eval.last_k >= 1, "must be >= 1"),
            ("eval.bleu_smoothing", lambda: self.eval.bleu_smoothing in ("exp", "none"), "must be exp or none"),
            ("model.pretrain_iterations", lambda: self.model.pretrain_iterations >= 0, "must be >= 0"),
        ]
        for path, ok, msg in checks:
            if not ok():
                raise ConfigError(f"{path}: {msg}")
        for path, build in (
            ("lora", self.lora_config),
            ("neftune", self.neftune_config),
            ("train", self.train_config),
            ("decode", lambda: self.decode_config()),
            ("model", lambda: self.model_config(vocab_size=self.tokenizer.vocab_size)),
        ):
            try:
                build()
            except ValueError as exc:
                raise ConfigError(f"{path}: {exc}") from exc

    def model_config(self, vocab_size: int) -> ModelConfig:
        m = self.model
        overrides = {k: getattr(m, k) for k in ("d_model", "n_heads", "n_layers", "ffn_dim", "max_seq") if getattr(m, k) is not None}
        return ModelConfig.preset(m.preset, vocab_size=vocab_size, rope_base=m.rope_base, norm_eps=m.norm_eps, **overrides)

    def lora_config(self) -> LoraConfig:
        s = self.lora
        return LoraConfig(rank=s.rank, alpha=s.alpha, dropout_p=s.dropout, target=s.target, seed=self.train.seed)

    def neftune_config(self) -> NeftuneConfig:
        s = self.neftune
        return NeftuneConfig(alpha=s.alpha, enabled=s.enabled, seed=self.train.seed)

    def train_config(self) -> TrainConfig:
        s = self.train
        return TrainConfig(**asdict(s), keep_last=self.eval.last_k)

    def decode_config(self, stop_token: int | None = None) -> DecodeConfig:
        return DecodeConfig(**asdict(self.decode), stop_token=stop_token)


def _coerce(path: str, value: Any, hint) -> Any:
    args = [a for a in get_args(hint) if a is not type(None)]
    optional = type(None) in get_args(hint)
    base = args[0] if args else hint
    if value is None or (isinstance(value, str) and optional and value.lower() in ("null", "none")):
        if optional:
            return None
        raise ConfigError(f"{path}: may not be null")
    try:
        if base is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes", "false", "0", "no"):
                return value.lower() in ("true", "1", "yes")
            raise ValueError(value)
        if base is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if base is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if base is str:
            if not isinstance(value, str):
                raise ValueError(value)
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected {base.__name__}, got {value!r}") from None
    return value


def parse_override_args(args: Sequence[str]) -> list[tuple[str, str]]:
    """``["--train.learning_rate", "1e-3", "--lora.rank=4"]`` -> pairs."""
    out = []
    i = 0
    while i < len(args):
        a = args[i]
        if not a.startswith("--") or "." not in a:
            raise ConfigError(f"{a}: unrecognized argument (overrides look like --section.key value)")
        key = a[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"{key}: missing value")
            i += 1
            value = args[i]
        out.append((key, value))
        i += 1
    return out


__all__ = ["RunConfig", "ConfigError", "parse_override_args"]
