import hashlib
import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import exhaustive_best
from scipy.stats import chisquare

from neftsum.decode import (
    DecodeConfig,
    beam_search,
    beam_search_hypotheses,
    generate,
    greedy,
    nucleus_probs,
    sample,
)
from neftsum.model import CausalLM, init_params
from helpers import tiny_config


class TableModel:
    """Next-token logits are a fixed pseudo-random function of the whole prefix."""

    def __init__(self, vocab: int, seed: int = 0, max_seq: int = 64, spread: float = 2.0):
        self.vocab_size, self.seed, self.max_seq, self.spread = vocab, seed, max_seq, spread

    def row(self, prefix) -> np.ndarray:
        h = hashlib.sha256(repr((self.seed, tuple(prefix))).encode()).digest()
        return np.random.default_rng(int.from_bytes(h[:8], "little")).standard_normal(self.vocab_size) * self.spread

    def logits(self, token_ids: torch.Tensor) -> torch.Tensor:
        B, L = token_ids.shape
        out = torch.zeros(B, L, self.vocab_size, dtype=torch.float64)
        for b in range(B):
            out[b, -1] = torch.from_numpy(self.row(token_ids[b].tolist()))
        return out


class FixedModel:
    """Same logits at every step."""

    def __init__(self, logits, max_seq=64):
        self.row = torch.tensor(logits, dtype=torch.float64)
        self.vocab_size, self.max_seq = len(logits), max_seq

    def logits(self, token_ids):
        B, L = token_ids.shape
        return self.row.expand(B, L, -1).clone()


def logprob_fn(model, prompt):
    def f(seq):
        return torch.log_softmax(torch.from_numpy(model.row(list(prompt) + list(seq))), -1).tolist()

    return f


def test_config_errors():
    for kw in ({"beam_size": 0}, {"temperature": 0}, {"top_p": 0}, {"top_p": 1.5}, {"max_new_tokens": 0}, {"strategy": "x"}):
        with pytest.raises(ValueError):
            DecodeConfig(**kw)


def test_prompt_too_long_rejected():
    m = FixedModel([0.0, 1.0], max_seq=4)
    with pytest.raises(ValueError, match="max_seq"):
        greedy(m, [0, 0, 0, 0], DecodeConfig())
    with pytest.raises(ValueError):
        greedy(m, [], DecodeConfig())


def test_immediate_stop_and_cap():
    assert greedy(FixedModel([5.0, 0.0, 0.0]), [1], DecodeConfig(stop_token=0)) == []
    out = greedy(FixedModel([0.0, 5.0, 0.0]), [1], DecodeConfig(max_new_tokens=5, stop_token=0))
    assert out == [1] * 5
    # the context window also caps generation
    assert len(greedy(FixedModel([0.0, 5.0], max_seq=4), [1], DecodeConfig(max_new_tokens=10))) == 3


def test_beam_one_equals_greedy_on_twenty_prompts():
    cfg = tiny_config(vocab_size=13, max_seq=24)
    lm = CausalLM(init_params(cfg, seed=5, dtype=torch.float64, embed_std=1.0), cfg)
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        prompt = torch.randint(0, 13, (int(torch.randint(1, 6, (1,), generator=g)),), generator=g).tolist()
        c = DecodeConfig(max_new_tokens=8, stop_token=1)
        assert beam_search(lm, prompt, DecodeConfig(strategy="beam", beam_size=1, max_new_tokens=8, stop_token=1))[0] == greedy(lm, prompt, c)


@pytest.mark.parametrize("seed", range(8))
def test_exhaustive_beam_matches_enumeration(seed):
    m = TableModel(3, seed=seed)
    cfg = DecodeConfig(strategy="beam", beam_size=27, max_new_tokens=3, stop_token=2)
    hyps = beam_search_hypotheses(m, [0], cfg)
    want_seq, want_score = exhaustive_best(logprob_fn(m, [0]), 3, 3, 2)
    assert list(hyps[0].tokens) == want_seq
    assert hyps[0].score == pytest.approx(want_score, abs=1e-12)


def test_enumeration_sees_all_27_candidates_without_stop():
    m = TableModel(3, seed=1)
    f = logprob_fn(m, [0])
    scores = {}
    for seq in itertools.product(range(3), repeat=3):
        scores[seq] = sum(f(seq[:i])[seq[i]] for i in range(3)) / 3
    assert len(scores) == 27
    best = min(scores, key=lambda s: (-scores[s], s))
    got = beam_search_hypotheses(m, [0], DecodeConfig(strategy="beam", beam_size=27, max_new_tokens=3))[0]
    assert got.tokens == best


def test_tie_break_prefers_smaller_ids():
    m = FixedModel([1.0, 1.0, -5.0])
    out, _ = beam_search(m, [2], DecodeConfig(strategy="beam", beam_size=3, max_new_tokens=2))
    assert out == [0, 0]
    assert greedy(m, [2], DecodeConfig(max_new_tokens=2)) == [0, 0]


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.integers(1, 9))
def test_full_width_beam_is_never_beaten(seed, b):
    m = TableModel(3, seed=seed)
    full = beam_search(m, [0], DecodeConfig(strategy="beam", beam_size=27, max_new_tokens=3, stop_token=2))[1]
    narrow = beam_search(m, [0], DecodeConfig(strategy="beam", beam_size=b, max_new_tokens=3, stop_token=2))[1]
    assert narrow <= full + 1e-12


def test_temperature_floor_reproduces_greedy():
    m = TableModel(7, seed=3)
    c = DecodeConfig(strategy="sample", temperature=1e-9, max_new_tokens=6)
    assert sample(m, [1, 2], c, torch.Generator().manual_seed(0)) == greedy(m, [1, 2], DecodeConfig(max_new_tokens=6))


def test_unbiased_sampling_chi_square():
    logits = [0.5, -1.0, 2.0, 0.0, 1.0]
    m = FixedModel(logits)
    c = DecodeConfig(strategy="sample", max_new_tokens=1)
    rng = torch.Generator().manual_seed(42)
    draws = [sample(m, [0], c, rng)[0] for _ in range(10_000)]
    observed = np.bincount(draws, minlength=5)
    expected = torch.softmax(torch.tensor(logits, dtype=torch.float64), -1).numpy() * 10_000
    assert chisquare(observed, expected).pvalue > 0.001


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=12), st.floats(0.01, 1.0), st.floats(0.05, 5.0))
def test_nucleus_contains_argmax_and_normalizes(logits, top_p, temp):
    x = torch.tensor(logits, dtype=torch.float64)
    p = nucleus_probs(x, temp, top_p)
    assert p[int(torch.argmax(x))] > 0
    assert abs(float(p.sum()) - 1) < 1e-9
    full = torch.softmax(x / temp, -1)
    kept = p > 0
    assert float(full[kept].sum()) >= top_p - 1e-9 or bool(kept.all())


def test_nucleus_keeps_smallest_prefix():
    p = nucleus_probs(torch.log(torch.tensor([0.5, 0.3, 0.2], dtype=torch.float64)), 1.0, 0.7)
    assert (p > 0).tolist() == [True, True, False]
    torch.testing.assert_close(p, torch.tensor([0.625, 0.375, 0.0], dtype=torch.float64))


def test_fixed_seed_reproducible_and_stop_is_final():
    m = TableModel(6, seed=9, spread=0.5)
    c = DecodeConfig(strategy="sample", max_new_tokens=20, stop_token=5, seed=3)
    a, b = generate(m, [0], c), generate(m, [0], c)
    assert a == b and 5 not in a and len(a) <= 20


def test_generate_dispatch():
    m = TableModel(4, seed=2)
    assert generate(m, [0], DecodeConfig(max_new_tokens=4)) == greedy(m, [0], DecodeConfig(max_new_tokens=4))
    beam = DecodeConfig(strategy="beam", beam_size=2, max_new_tokens=4)
    assert generate(m, [0], beam) == beam_search(m, [0], beam)[0]


@settings(max_examples=40)
@given(st.integers(0, 10**6))
def test_beam_score_grows_with_width(seed):
    m = TableModel(3, seed=seed)
    scores = [beam_search(m, [0], DecodeConfig(strategy="beam", beam_size=b, max_new_tokens=4, stop_token=2))[1] for b in range(1, 7)]
    assert all(b >= a - 1e-12 for a, b in zip(scores, scores[1:]))
