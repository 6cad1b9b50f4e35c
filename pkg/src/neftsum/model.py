"""Decoder-only transformer: RMSNorm, rotary attention, SwiGLU feed-forward.

Parameters live in a flat ``{name: tensor}`` dict so that adapters, the
optimizer and checkpoints can address them by name. Weight matrices use the
``x @ W`` convention, i.e. shape ``[d_in, d_out]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import torch

EmbeddingHook = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    ffn_dim: int = 344
    max_seq: int = 512
    vocab_size: int = 1024
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_layers", "ffn_dim", "max_seq", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ValueError(f"head dimension {self.head_dim} must be even for rotary embeddings")
        if self.rope_base <= 0 or self.norm_eps < 0:
            raise ValueError("rope_base must be positive and norm_eps non-negative")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        return cls(**{**PRESETS[name], **overrides})


PRESETS = {
    # full-size reference dimensions; constructible, not trained here
    "paper": dict(d_model=4096, ffn_dim=11008, n_heads=32, n_layers=32, max_seq=4096, vocab_size=125696),
    "desk": dict(d_model=128, n_heads=4, n_layers=4, ffn_dim=344, max_seq=512),
    "mini": dict(d_model=8, n_heads=2, n_layers=1, ffn_dim=16, max_seq=6, vocab_size=11),
}


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = config.d_model, config.ffn_dim, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "qkv"] = (d, 3 * d)
        shapes[p + "out"] = (d, d)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "gate"] = (d, f)
        shapes[p + "up"] = (d, f)
        shapes[p + "down"] = (f, d)
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, v)
    return shapes


def init_params(
    config: ModelConfig,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
    embed_std: float = 1.0,
    head_std: float | None = None,
) -> dict[str, torch.Tensor]:
    """Projections ~ N(0, 0.02/sqrt(2 n_layers)); norm gains are ones.

    Embeddings use ``embed_std`` and the vocabulary head ``head_std``
    (default ``1/sqrt(d_model)``), so that logits start at unit scale.
    """
    gen = torch.Generator().manual_seed(seed)
    proj_std = 0.02 / math.sqrt(2 * config.n_layers)
    if head_std is None:
        head_std = 1.0 / math.sqrt(config.d_model)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("norm"):
            params[name] = torch.ones(shape, dtype=dtype)
            continue
        std = embed_std if name == "embed" else head_std if name == "lm_head" else proj_std
        params[name] = torch.randn(shape, generator=gen, dtype=dtype) * std
    return params


def check_params(params: Mapping[str, torch.Tensor], config: ModelConfig) -> None:
    shapes = parameter_shapes(config)
    missing = set(shapes) - set(params)
    if missing:
        raise ValueError(f"missing parameters: {sorted(missing)[:5]}")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"parameter {name} has shape {tuple(params[name].shape)}, expected {shape}")


def count_parameters(params: Mapping[str, torch.Tensor]) -> int:
    return sum(t.numel() for t in params.values())


# building blocks


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """``gain * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    if x.shape[-1] != gain.shape[-1]:
        raise ValueError(f"rms_norm: input dim {x.shape[-1]} != gain dim {gain.shape[-1]}")
    return gain * x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


def rope_angles(positions: torch.Tensor, head_dim: int, base: float, dtype=torch.float64) -> torch.Tensor:
    if head_dim % 2:
        raise ValueError(f"rotary embeddings need an even head dimension, got {head_dim}")
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    return (positions.to(torch.float64).unsqueeze(-1) * inv_freq).to(dtype)


def rope_apply(x: torch.Tensor, positions: torch.Tensor, rope_base: float = 10000.0) -> torch.Tensor:
    """Rotate dimension pairs ``(2i, 2i+1)`` at position ``p`` by ``p * base**(-2i/head_dim)``.

    ``x`` is ``[..., L, head_dim]``; ``positions`` broadcasts against ``[..., L]``.
    """
    hd = x.shape[-1]
    ang = rope_angles(positions, hd, rope_base, dtype=x.dtype)
    cos, sin = ang.cos(), ang.sin()
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


def swish(z: torch.Tensor) -> torch.Tensor:
    return z * torch.sigmoid(z)


def swiglu_ffn(x: torch.Tensor, gate_w: torch.Tensor, up_w: torch.Tensor, down_w: torch.Tensor) -> torch.Tensor:
    return (swish(x @ gate_w) * (x @ up_w)) @ down_w


def causal_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    attention_mask: torch.Tensor | None = None,
    return_weights: bool = False,
):
    """Softmax attention over ``[B, H, L, hd]`` with causal and key-padding masks.

    Every query may attend to itself, which keeps padded query rows finite
    without letting padding leak into real positions.
    """
    L = q.shape[-2]
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    allowed = torch.ones(L, L, dtype=torch.bool).tril()
    if attention_mask is not None:
        allowed = allowed & attention_mask[:, None, None, :].bool()
        allowed = allowed | torch.eye(L, dtype=torch.bool)
    scores = scores.masked_fill(~allowed, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def positions_from_mask(attention_mask: torch.Tensor) -> torch.Tensor:
    return (attention_mask.long().cumsum(-1) - 1).clamp(min=0)


def _unpack_batch(batch):
    # accepts a TokenBatch or a bare [B, L] id tensor
    if isinstance(batch, torch.Tensor):
        ids = batch
        mask = torch.ones_like(ids, dtype=torch.bool)
        return ids, mask, mask.sum(-1)
    return batch.token_ids, batch.attention_mask, batch.lengths


def forward(
    params: Mapping[str, torch.Tensor],
    config: ModelConfig,
    batch,
    embedding_hook: EmbeddingHook | None = None,
    lora=None,
    train: bool = False,
) -> torch.Tensor:
    """Logits ``[B, L, vocab]``.

    ``embedding_hook(embedded, lengths)`` runs on the embedded batch before
    the first block and nowhere else. ``lora`` adds a low-rank delta to each
    layer's fused QKV projection (see :mod:`neftsum.adapters`).
    """
    token_ids, attention_mask, lengths = _unpack_batch(batch)
    if token_ids.dim() != 2:
        raise ValueError(f"token ids must be [B, L], got shape {tuple(token_ids.shape)}")
    B, L = token_ids.shape
    if L > config.max_seq:
        raise ValueError(f"sequence length {L} exceeds max_seq={config.max_seq}")
    if token_ids.numel() and (int(token_ids.max()) >= config.vocab_size or int(token_ids.min()) < 0):
        raise ValueError("token id outside the vocabulary")
    if attention_mask.shape != token_ids.shape:
        raise ValueError("attention_mask shape does not match token ids")
    d, H, hd = config.d_model, config.n_heads, config.head_dim

    h = params["embed"][token_ids]
    if embedding_hook is not None:
        h = embedding_hook(h, lengths)
    pos = positions_from_mask(attention_mask)[:, None, :]
    for i in range(config.n_layers):
        p = f"layers.{i}."
        x = rms_norm(h, params[p + "attn_norm"], config.norm_eps)
        qkv = x @ params[p + "qkv"]
        if lora is not None:
            qkv = qkv + lora.qkv_delta(i, x, train=train)
        q, k, v = (t.reshape(B, L, H, hd).transpose(1, 2) for t in qkv.split(d, dim=-1))
        q = rope_apply(q, pos, config.rope_base)
        k = rope_apply(k, pos, config.rope_base)
        att = causal_attention(q, k, v, attention_mask)
        h = h + att.transpose(1, 2).reshape(B, L, d) @ params[p + "out"]
        x = rms_norm(h, params[p + "ffn_norm"], config.norm_eps)
        h = h + swiglu_ffn(x, params[p + "gate"], params[p + "up"], params[p + "down"])
    h = rms_norm(h, params["final_norm"], config.norm_eps)
    return h @ params["lm_head"]


def masked_cross_entropy(logits: torch.Tensor, token_ids: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token NLL over positions where ``loss_mask`` is true.

    Logits at position ``t`` predict token ``t + 1``. An all-false mask
    yields a zero that is still connected to the graph (zero gradients).
    """
    pred = logits[:, :-1]
    tgt = token_ids[:, 1:]
    mask = loss_mask[:, 1:].bool()
    n = int(mask.sum())
    if n == 0:
        return logits.sum() * 0.0
    logp = torch.log_softmax(pred, dim=-1)
    nll = -logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
    return (nll * mask).sum() / n


def grad(
    params: Mapping[str, torch.Tensor],
    config: ModelConfig,
    batch,
    loss_fn=masked_cross_entropy,
    embedding_hook: EmbeddingHook | None = None,
    lora=None,
    wrt: Mapping[str, torch.Tensor] | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Loss and reverse-mode gradients.

    ``wrt`` names the tensors to differentiate (default: every entry of
    ``params``); entries not in ``params`` must be LoRA factors of ``lora``.
    """
    targets = dict(params if wrt is None else wrt)
    leaves = {n: t.detach().clone().requires_grad_(True) for n, t in targets.items()}
    p = {n: leaves.get(n, t) for n, t in params.items()}
    lo = lora.with_factors({n: leaves[n] for n in leaves if n in lora.factors}) if lora is not None else None
    with torch.enable_grad():
        logits = forward(p, config, batch, embedding_hook=embedding_hook, lora=lo, train=True)
        loss = loss_fn(logits, batch.token_ids, batch.loss_mask)
        gs = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    out = {n: (g if g is not None else torch.zeros_like(leaves[n])) for n, g in zip(leaves, gs)}
    return loss.detach(), out


class CausalLM:
    """Handle bundling parameters, config and an optional LoRA adapter."""

    def __init__(self, params: Mapping[str, torch.Tensor], config: ModelConfig, lora=None):
        check_params(params, config)
        self.params = dict(params)
        self.config = config
        self.lora = lora

    @property
    def max_seq(self) -> int:
        return self.config.max_seq

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def forward(self, batch, embedding_hook: EmbeddingHook | None = None, train: bool = False) -> torch.Tensor:
        return forward(self.params, self.config, batch, embedding_hook=embedding_hook, lora=self.lora, train=train)

    @torch.no_grad()
    def logits(self, token_ids: torch.Tensor) -> torch.Tensor:
        """Inference logits; never noised, adapter dropout off."""
        return forward(self.params, self.config, token_ids, lora=self.lora, train=False)

    def trainable(self) -> dict[str, torch.Tensor]:
        if self.lora is not None:
            return dict(self.lora.factors)
        return dict(self.params)

    def assign(self, tensors: Mapping[str, torch.Tensor]) -> None:
        for name, t in tensors.items():
            if name in self.params:
                self.params[name] = t
            elif self.lora is not None and name in self.lora.factors:
                self.lora.factors[name] = t
            else:
                raise KeyError(name)

    def embedding_table(self) -> torch.Tensor:
        return self.params["embed"]
