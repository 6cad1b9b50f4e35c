"""Training loop: masked cross-entropy, Adam, cosine decay, accumulation, clipping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import torch

from .adapters import save_adapter
from .checkpoint import save_checkpoint
from .model import CausalLM, grad, masked_cross_entropy
from .neftune import NeftuneConfig, as_embedding_hook

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "NumericError",
    "masked_cross_entropy",
    "clip_gradients",
    "global_norm",
    "cosine_lr",
    "AdamState",
    "adam_step",
    "train",
    "TrainResult",
    "evaluate_loss",
    "write_loss_log",
]


class NumericError(RuntimeError):
    """Raised on non-finite losses or gradients."""


@dataclass(frozen=True)
class TrainConfig:
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
    keep_last: int = 3

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        for name in ("batch_size", "accumulation_steps", "checkpoint_every", "keep_last"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.clip_theta <= 0:
            raise ValueError("clip_theta must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def global_norm(grads: Mapping[str, torch.Tensor]) -> float:
    return math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads.values()))


def clip_gradients(grads: Mapping[str, torch.Tensor], theta: float) -> tuple[dict[str, torch.Tensor], float]:
    """``g / max(1, ||g|| / theta)`` with the norm taken over all tensors jointly."""
    if theta <= 0:
        raise ValueError("clip threshold must be positive")
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
    norm = global_norm(grads)
    denom = max(1.0, norm / theta)
    if denom == 1.0:
        return dict(grads), norm
    return {n: g / denom for n, g in grads.items()}, norm


def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    """Cosine decay from ``lr_max`` at step 0 to 0 at ``total_steps``; no warm-up."""
    if total_steps <= 0:
        return lr_max
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 0.0
    return lr_max * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> dict[str, torch.Tensor]:
    """Bias-corrected Adam, no weight decay. ``state`` is updated in place."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / c1) / ((v / c2).sqrt() + eps)
    return out


@dataclass
class TrainResult:
    model: CausalLM
    log: list[tuple[int, float, float]]
    checkpoints: list[Path]
    val_log: list[tuple[int, float]] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.log[-1][2] if self.log else float("nan")


def _batches(data) -> Iterator:
    # wraps epochs; a BatchStream reshuffles each epoch
    epoch = 0
    while True:
        it = data.epoch(epoch) if hasattr(data, "epoch") else iter(data)
        empty = True
        for b in it:
            empty = False
            yield b
        if empty:
            raise ValueError("training data is empty")
        epoch += 1


@torch.no_grad()
def evaluate_loss(model: CausalLM, batches: Iterable) -> float:
    total, count = 0.0, 0
    for b in batches:
        n = int(b.loss_mask[:, 1:].sum())
        if n:
            total += float(masked_cross_entropy(model.forward(b), b.token_ids, b.loss_mask)) * n
            count += n
    return total / count if count else float("nan")


def train(
    model: CausalLM,
    data,
    config: TrainConfig,
    neftune: NeftuneConfig | None = None,
    out_dir: str | Path | None = None,
    val_data=None,
    meta: Mapping | None = None,
) -> TrainResult:
    """Run ``config.iterations`` optimizer steps in place on ``model``.

    One optimizer step accumulates ``accumulation_steps`` minibatches, each
    gradient divided by ``accumulation_steps``, then clips and applies Adam.
    Noise is redrawn for every minibatch. Only the adapter factors move when
    ``model`` carries an adapter.
    """
    neftune = neftune or NeftuneConfig(alpha=0.0, enabled=False)
    hook = as_embedding_hook(neftune, "train")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    state = AdamState()
    log: list[tuple[int, float, float]] = []
    val_log: list[tuple[int, float]] = []
    ckpts: list[Path] = []
    stream = _batches(data) if config.iterations else iter(())
    k = config.accumulation_steps

    def checkpoint(step: int) -> Path | None:
        if out is None:
            return None
        path = out / "checkpoints" / f"step{step:06d}.npz"
        _save_trainable(path, model, step, neftune, config, meta)
        ckpts.append(path)
        return path

    for step in range(config.iterations):
        lr = cosine_lr(step, config.iterations, config.learning_rate)
        trainable = model.trainable()
        acc = {n: torch.zeros_like(t) for n, t in trainable.items()}
        losses = []
        for _ in range(k):
            batch = next(stream)
            loss, g = grad(model.params, model.config, batch, embedding_hook=hook, lora=model.lora, wrt=trainable)
            if not math.isfinite(float(loss)):
                checkpoint(step)
                raise NumericError(f"non-finite loss at step {step}")
            losses.append(float(loss))
            for n in acc:
                acc[n] += g[n] / k
        try:
            clipped, _ = clip_gradients(acc, config.clip_theta)
        except NumericError:
            checkpoint(step)
            raise
        model.assign(adam_step(trainable, clipped, state, lr, (config.beta1, config.beta2), config.adam_eps))
        log.append((step + 1, lr, sum(losses) / k))
        if (step + 1) % config.checkpoint_every == 0 or step + 1 == config.iterations:
            checkpoint(step + 1)
            if val_data is not None:
                val_log.append((step + 1, evaluate_loss(model, val_data)))
        if (step + 1) % 100 == 0:
            logger.info("step %d lr %.3g loss %.4f", step + 1, lr, log[-1][2])

    if out is not None:
        write_loss_log(out / "loss.csv", log)
        if val_log:
            with open(out / "val_loss.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["step", "val_loss"])
                w.writerows(val_log)
    return TrainResult(model=model, log=log, checkpoints=ckpts, val_log=val_log)


def write_loss_log(path: Path, log: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in log:
            w.writerow([step, repr(lr), repr(loss)])


def _save_trainable(path: Path, model: CausalLM, step: int, neftune: NeftuneConfig, config: TrainConfig, meta) -> None:
    common = {
        "step": step,
        "model_config": model.config.to_dict(),
        "neftune": neftune.to_dict(),
        "train": config.to_dict(),
        **(dict(meta) if meta else {}),
    }
    if model.lora is not None:
        save_adapter(path, model, common)
    else:
        save_checkpoint(path, "model", model.params, common)

