"""Autoregressive decoding: greedy, beam search, temperature / nucleus sampling.

Any object exposing ``logits(ids: LongTensor[B, L]) -> Tensor[B, L, V]`` and
``max_seq`` can be decoded. Every step recomputes from the full prefix; there
is no KV cache. Returned ids never include the stop token.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import torch

TEMPERATURE_FLOOR = 1e-4
STRATEGIES = ("greedy", "beam", "sample")


class LanguageModel(Protocol):
    max_seq: int

    def logits(self, token_ids: torch.Tensor) -> torch.Tensor: ...


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"
    beam_size: int = 1
    temperature: float = 1.0
    top_p: float = 1.0
    max_new_tokens: int = 64
    stop_token: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown decoding strategy {self.strategy!r}")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # includes the stop token when finished
    logprob: float
    finished: bool

    @property
    def score(self) -> float:
        return self.logprob / max(1, len(self.tokens))

    def output(self, stop_token: int | None) -> list[int]:
        if self.finished and self.tokens and self.tokens[-1] == stop_token:
            return list(self.tokens[:-1])
        return list(self.tokens)


def _budget(model: LanguageModel, prompt: Sequence[int], config: DecodeConfig) -> int:
    if len(prompt) == 0:
        raise ValueError("prompt must contain at least one token")
    if len(prompt) >= model.max_seq:
        raise ValueError(f"prompt length {len(prompt)} leaves no room under max_seq={model.max_seq}")
    return min(config.max_new_tokens, model.max_seq - len(prompt))


def _last_logprobs(model: LanguageModel, seqs: list[list[int]]) -> torch.Tensor:
    ids = torch.tensor(seqs, dtype=torch.long)
    with torch.no_grad():
        logits = model.logits(ids)[:, -1, :]
    return torch.log_softmax(logits.double(), dim=-1)


def greedy(model: LanguageModel, prompt_ids: Sequence[int], config: DecodeConfig) -> list[int]:
    budget = _budget(model, prompt_ids, config)
    seq = list(prompt_ids)
    out: list[int] = []
    for _ in range(budget):
        tok = int(torch.argmax(_last_logprobs(model, [seq])[0]))
        if tok == config.stop_token:
            break
        out.append(tok)
        seq.append(tok)
    return out


def beam_search_hypotheses(model: LanguageModel, prompt_ids: Sequence[int], config: DecodeConfig) -> list[Hypothesis]:
    """All retained hypotheses, best first.

    Each step keeps the top ``beam_size - retired`` extensions by cumulative
    log-probability; an extension ending in the stop token retires and keeps
    its slot. The final ranking divides by token count. Ties go to the
    lexicographically smaller id sequence.
    """
    budget = _budget(model, prompt_ids, config)
    k = config.beam_size
    prompt = list(prompt_ids)
    live: list[Hypothesis] = [Hypothesis((), 0.0, False)]
    finished: list[Hypothesis] = []
    for _ in range(budget):
        lp = _last_logprobs(model, [prompt + list(h.tokens) for h in live])
        cands = []
        for h, row in zip(live, lp):
            for tok, val in enumerate(row.tolist()):
                cands.append((h.logprob + val, val, h.tokens + (tok,)))
        cands.sort(key=lambda c: (-c[0], -c[1], c[2]))
        live = []
        for total, _, toks in cands[: k - len(finished)]:
            if toks[-1] == config.stop_token:
                finished.append(Hypothesis(toks, total, True))
            else:
                live.append(Hypothesis(toks, total, False))
        if not live:
            break
    pool = finished + live
    pool.sort(key=lambda h: (-h.score, h.tokens))
    return pool


def beam_search(model: LanguageModel, prompt_ids: Sequence[int], config: DecodeConfig) -> tuple[list[int], float]:
    best = beam_search_hypotheses(model, prompt_ids, config)[0]
    return best.output(config.stop_token), best.score


def nucleus_probs(logits: torch.Tensor, temperature: float, top_p: float) -> torch.Tensor:
    """Tempered softmax restricted to the smallest top-mass prefix reaching ``top_p``."""
    t = max(temperature, TEMPERATURE_FLOOR)
    probs = torch.softmax(logits.double() / t, dim=-1)
    if top_p >= 1.0:
        return probs
    order = torch.argsort(-probs, stable=True)
    cum = torch.cumsum(probs[order], dim=0)
    cut = int(torch.searchsorted(cum, torch.tensor(top_p, dtype=cum.dtype)))
    keep = order[: min(cut, len(order) - 1) + 1]
    out = torch.zeros_like(probs)
    out[keep] = probs[keep]
    return out / out.sum()


def sample(model: LanguageModel, prompt_ids: Sequence[int], config: DecodeConfig, rng: torch.Generator | None = None) -> list[int]:
    rng = rng if rng is not None else torch.Generator().manual_seed(config.seed)
    budget = _budget(model, prompt_ids, config)
    seq = list(prompt_ids)
    out: list[int] = []
    for _ in range(budget):
        ids = torch.tensor([seq], dtype=torch.long)
        with torch.no_grad():
            logits = model.logits(ids)[0, -1]
        probs = nucleus_probs(logits, config.temperature, config.top_p)
        tok = int(torch.multinomial(probs, 1, generator=rng))
        if tok == config.stop_token:
            break
        out.append(tok)
        seq.append(tok)
    return out


def generate(model: LanguageModel, prompt_ids: Sequence[int], config: DecodeConfig, rng: torch.Generator | None = None) -> list[int]:
    if config.strategy == "greedy":
        return greedy(model, prompt_ids, config)
    if config.strategy == "beam":
        return beam_search(model, prompt_ids, config)[0]
    return sample(model, prompt_ids, config, rng)
