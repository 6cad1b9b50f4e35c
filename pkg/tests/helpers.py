"""Small shared builders for tests."""

import torch

from neftsum.corpus import TokenBatch, collate
from neftsum.model import ModelConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=16, n_heads=2, n_layers=2, ffn_dim=24, max_seq=32, vocab_size=23)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(vocab: int, lengths, seed: int = 0, pad_id: int = 0, n_prompt: int = 1) -> TokenBatch:
    g = torch.Generator().manual_seed(seed)
    rows = []
    for n in lengths:
        ids = torch.randint(0, vocab, (n,), generator=g).tolist()
        rows.append((ids, min(n_prompt, n)))
    return collate(rows, pad_id)
