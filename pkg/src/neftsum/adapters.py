"""Low-rank adapters on the fused QKV projection.

For each layer the adapted projection computes
``x @ W + (alpha / r) * (drop(x) @ A.T) @ B.T`` with ``A: [r, d_in]`` and
``B: [d_out, r]``. ``B`` starts at zero, so a fresh adapter is a no-op.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import torch

from .checkpoint import load_checkpoint, save_checkpoint, tensor_fingerprint
from .model import CausalLM

TARGETS = ("fused_qkv",)


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 9
    alpha: float = 18.0
    dropout_p: float = 0.1
    target: str = "fused_qkv"
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ValueError("LoRA alpha must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"LoRA dropout must lie in [0, 1), got {self.dropout_p}")
        if self.target not in TARGETS:
            raise ValueError(f"unsupported LoRA target {self.target!r}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        return asdict(self)


class LoraAdapter:
    def __init__(self, config: LoraConfig, factors: dict[str, torch.Tensor], base_fingerprint: str, generator: torch.Generator | None = None):
        self.config = config
        self.factors = factors
        self.base_fingerprint = base_fingerprint
        self.generator = generator if generator is not None else torch.Generator().manual_seed(config.seed + 1)
        self.consumed = False

    @property
    def n_layers(self) -> int:
        return len(self.factors) // 2

    def qkv_delta(self, layer: int, x: torch.Tensor, train: bool = False) -> torch.Tensor:
        A = self.factors[f"lora.{layer}.A"]
        B = self.factors[f"lora.{layer}.B"]
        p = self.config.dropout_p
        if train and p > 0:
            keep = torch.rand(x.shape, generator=self.generator, dtype=x.dtype) >= p
            x = x * keep / (1.0 - p)
        return self.config.scale * ((x @ A.T) @ B.T)

    def with_factors(self, replacements: dict[str, torch.Tensor]) -> "LoraAdapter":
        # shares the dropout generator so draws keep advancing
        twin = copy.copy(self)
        twin.factors = {**self.factors, **replacements}
        return twin

    def delta_weight(self, layer: int) -> torch.Tensor:
        """Dense update in ``[d_in, d_out]`` layout, i.e. ``(scale * B @ A).T``."""
        A = self.factors[f"lora.{layer}.A"]
        B = self.factors[f"lora.{layer}.B"]
        return self.config.scale * (B @ A).T


def attach(model: CausalLM, config: LoraConfig, dtype: torch.dtype | None = None) -> CausalLM:
    """Freeze ``model``'s weights and return a handle with fresh factors on every QKV.

    ``A ~ N(0, (1/r)^2)`` elementwise, ``B = 0``.
    """
    if model.lora is not None:
        raise ValueError("model already carries an adapter")
    mc = model.config
    d_in, d_out = mc.d_model, 3 * mc.d_model
    if config.rank > min(d_in, d_out):
        raise ValueError(f"LoRA rank {config.rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}")
    dtype = dtype or model.params["embed"].dtype
    gen = torch.Generator().manual_seed(config.seed)
    factors = {}
    for i in range(mc.n_layers):
        factors[f"lora.{i}.A"] = torch.randn(config.rank, d_in, generator=gen, dtype=dtype) / config.rank
        factors[f"lora.{i}.B"] = torch.zeros(d_out, config.rank, dtype=dtype)
    adapter = LoraAdapter(config, factors, tensor_fingerprint(model.params))
    return CausalLM(model.params, mc, lora=adapter)


def merge(model: CausalLM) -> dict[str, torch.Tensor]:
    """Fold the adapter into dense QKV weights; the adapter is consumed."""
    lora = model.lora
    if lora is None:
        raise ValueError("model has no adapter to merge")
    if lora.consumed:
        raise ValueError("adapter was already merged")
    merged = dict(model.params)
    for i in range(model.config.n_layers):
        name = f"layers.{i}.qkv"
        merged[name] = model.params[name] + lora.delta_weight(i).to(model.params[name].dtype)
    lora.consumed = True
    return merged


def trainable_parameters(model: CausalLM) -> list[tuple[str, torch.Tensor]]:
    """The A/B factors under LoRA, otherwise every model tensor."""
    return sorted(model.trainable().items())


def count_trainable(model: CausalLM) -> int:
    return sum(t.numel() for _, t in trainable_parameters(model))


def save_adapter(path, model: CausalLM, meta: dict | None = None):
    lora = model.lora
    if lora is None:
        raise ValueError("model has no adapter")
    return save_checkpoint(
        path,
        "lora",
        lora.factors,
        {**(meta or {}), "model_config": model.config.to_dict(), "lora": lora.config.to_dict(), "base_fingerprint": lora.base_fingerprint},
        rng_state=lora.generator.get_state(),
    )


def load_adapter(path, base: CausalLM) -> CausalLM:
    """Attach saved factors to ``base``; refuses a base with different weights."""
    manifest, factors, rng = load_checkpoint(path, kind="lora")
    fp = tensor_fingerprint(base.params)
    if manifest["base_fingerprint"] != fp:
        raise ValueError(f"{path}: adapter was trained on base {manifest['base_fingerprint'][:12]}, got base {fp[:12]}")
    if base.lora is not None:
        raise ValueError("base model already carries an adapter")
    config = LoraConfig(**manifest["lora"])
    gen = torch.Generator()
    if rng is not None:
        gen.set_state(rng)
    return CausalLM(base.params, base.config, lora=LoraAdapter(config, factors, fp, gen))
