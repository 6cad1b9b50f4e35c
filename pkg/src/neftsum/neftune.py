"""Noisy embeddings for instruction fine-tuning.

Each real position of sequence ``i`` receives ``alpha / sqrt(L_i * d) * eps``
with ``eps ~ Uniform(-1, 1)`` elementwise, where ``L_i`` is that sequence's
unpadded length. The expected squared noise norm per sequence is
``alpha**2 / 3`` whatever ``L_i`` and ``d`` are.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch


@dataclass(frozen=True)
class NeftuneConfig:
    alpha: float = 5.0
    enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"noise scale alpha must be non-negative, got {self.alpha}")

    @property
    def active(self) -> bool:
        return self.enabled and self.alpha > 0

    def to_dict(self) -> dict:
        return asdict(self)


def scale_factor(alpha: float, L: int, d: int) -> float:
    if L < 1 or d < 1:
        raise ValueError("sequence length and embedding dim must be positive")
    return alpha / math.sqrt(L * d)


def inject_noise(
    embedded: torch.Tensor,
    lengths: torch.Tensor,
    config: NeftuneConfig,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Return a noised copy of ``embedded`` ``[B, L_max, d]``; padding is left untouched."""
    if not config.active:
        return embedded
    B, L_max, d = embedded.shape
    lengths = torch.as_tensor(lengths).long()
    if int(lengths.max()) > L_max or int(lengths.min()) < 1:
        raise ValueError("lengths must lie in [1, L_max]")
    eps = torch.rand(embedded.shape, generator=generator, dtype=embedded.dtype) * 2 - 1
    scale = config.alpha / torch.sqrt(lengths.to(embedded.dtype) * d)
    real = torch.arange(L_max)[None, :] < lengths[:, None]
    noise = eps * scale[:, None, None] * real[..., None]
    # where() keeps padded rows bit-identical instead of adding +0.0
    return torch.where(real[..., None], embedded + noise, embedded)


class NoiseInjector:
    """Stateful embedding hook; owns its generator so draws are reproducible."""

    def __init__(self, config: NeftuneConfig, generator: torch.Generator | None = None):
        self.config = config
        self.generator = generator if generator is not None else torch.Generator().manual_seed(config.seed)

    def __call__(self, embedded: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return inject_noise(embedded, lengths, self.config, self.generator)


def as_embedding_hook(config: NeftuneConfig, mode: str, generator: torch.Generator | None = None):
    """Noise in ``train`` mode only; ``eval`` returns ``None`` (identity)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or not config.active:
        return None
    return NoiseInjector(config, generator)
