"""Byte-level BPE tokenizer with single-digit pre-tokenization.

Text is never normalized and no dummy prefix is added. Every maximal run of
decimal digits is broken into one pre-token per digit, so no merged token can
span two digits. Whitespace stays attached to the pre-token that follows it.
The base alphabet is the 256 byte values, which makes every string encodable.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

FORMAT_TAG = "neftsum-bpe/1"
DEFAULT_SPECIALS = ("<s>", "</s>", "<pad>")
SPECIAL_ROLES = ("bos", "eos", "pad")

# one digit per pre-token; everything else splits on whitespace boundaries
_PRETOKEN = re.compile(r"\s*\d|\s*[^\s\d]+|\s+")


def _bytes_to_unicode() -> dict[int, str]:
    # printable stand-in for every byte, so tokens are valid JSON strings
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


BYTE_ENCODER = _bytes_to_unicode()
BYTE_DECODER = {v: k for k, v in BYTE_ENCODER.items()}


def _token_str(raw: bytes) -> str:
    return "".join(BYTE_ENCODER[b] for b in raw)


def _token_bytes(s: str) -> bytes:
    return bytes(BYTE_DECODER[c] for c in s)


def pretokenize(text: str) -> list[str]:
    """Split ``text`` into pre-tokens; concatenating them gives ``text`` back."""
    return _PRETOKEN.findall(text)


@dataclass(frozen=True)
class TokenizerModel:
    """Trained vocabulary, ranked merges and special-token ids."""

    vocab: dict[str, int]
    merges: list[tuple[str, str]]
    special_tokens: dict[str, int]
    byte_fallback: bool = True
    _id_to_bytes: list[bytes] = field(init=False, repr=False, compare=False)
    _ranks: dict[tuple[bytes, bytes], int] = field(init=False, repr=False, compare=False)
    _cache: dict[str, tuple[int, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.vocab)
        if sorted(self.vocab.values()) != list(range(n)):
            raise ValueError("vocab ids must be dense in [0, len(vocab))")
        special_ids = set(self.special_tokens.values())
        id_to_bytes: list[bytes] = [b""] * n
        for tok, idx in self.vocab.items():
            id_to_bytes[idx] = b"" if idx in special_ids else _token_bytes(tok)
        special_strs = {s for s, i in self.vocab.items() if i in special_ids}
        ranks = {}
        for rank, (left, right) in enumerate(self.merges):
            if left not in self.vocab or right not in self.vocab:
                raise ValueError(f"merge component missing from vocab: {(left, right)}")
            if left in special_strs or right in special_strs:
                raise ValueError(f"special token used as merge component: {(left, right)}")
            ranks[(_token_bytes(left), _token_bytes(right))] = rank
        object.__setattr__(self, "_id_to_bytes", id_to_bytes)
        object.__setattr__(self, "_ranks", ranks)
        object.__setattr__(self, "_cache", {})
        object.__setattr__(self, "_bytes_to_id", {_token_bytes(t): i for t, i in self.vocab.items() if i not in special_ids})

    @property
    def bos_id(self) -> int:
        return self.special_tokens["bos"]

    @property
    def eos_id(self) -> int:
        return self.special_tokens["eos"]

    @property
    def pad_id(self) -> int:
        return self.special_tokens["pad"]

    def __len__(self) -> int:
        return len(self.vocab)

    def id_to_token(self, idx: int) -> str:
        for tok, i in self.vocab.items():
            if i == idx:
                return tok
        raise IndexError(idx)

    def token_bytes(self, idx: int) -> bytes:
        return self._id_to_bytes[idx]

    def is_special(self, idx: int) -> bool:
        return idx in self.special_tokens.values()

    def _encode_piece(self, piece: str) -> tuple[int, ...]:
        cached = self._cache.get(piece)
        if cached is not None:
            return cached
        parts = [bytes([b]) for b in piece.encode("utf-8")]
        ranks = self._ranks
        while len(parts) > 1:
            best = None
            best_rank = None
            for i in range(len(parts) - 1):
                r = ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = (parts[i], parts[i + 1]), r
            if best is None:
                break
            merged = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and (parts[i], parts[i + 1]) == best:
                    merged.append(parts[i] + parts[i + 1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        ids = tuple(self._bytes_to_id[p] for p in parts)
        self._cache[piece] = ids
        return ids

    def encode(self, text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
        ids = [self.bos_id] if add_bos else []
        for piece in pretokenize(text):
            ids.extend(self._encode_piece(piece))
        if add_eos:
            ids.append(self.eos_id)
        return ids

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        n = len(self.vocab)
        specials = {i: s for s, i in self.vocab.items() if i in self.special_tokens.values()}
        out: list[str] = []
        buf = bytearray()
        for idx in ids:
            idx = int(idx)
            if not 0 <= idx < n:
                raise ValueError(f"token id {idx} out of range for vocab of size {n}")
            if idx in specials:
                if not skip_special:
                    out.append(buf.decode("utf-8", errors="replace"))
                    buf.clear()
                    out.append(specials[idx])
                continue
            buf.extend(self._id_to_bytes[idx])
        out.append(buf.decode("utf-8", errors="replace"))
        return "".join(out)

    # persistence

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "vocab": self.vocab,
            "merges": [list(m) for m in self.merges],
            "special_tokens": self.special_tokens,
            "byte_fallback": self.byte_fallback,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TokenizerModel":
        if data.get("format", FORMAT_TAG) != FORMAT_TAG:
            raise ValueError(f"unsupported tokenizer format {data.get('format')!r}")
        return cls(
            vocab=dict(data["vocab"]),
            merges=[tuple(m) for m in data["merges"]],
            special_tokens=dict(data["special_tokens"]),
            byte_fallback=bool(data.get("byte_fallback", True)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TokenizerModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def train_bpe(
    corpus: Sequence[str],
    target_vocab_size: int,
    special_tokens: Sequence[str] = DEFAULT_SPECIALS,
) -> TokenizerModel:
    """Learn BPE merges on ``corpus`` until ``target_vocab_size`` is reached.

    The most frequent adjacent pair is merged first; ties go to the
    lexicographically smallest ``(left, right)`` byte pair. Training stops
    early when no pre-token has an adjacent pair left to merge.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot train a tokenizer on an empty corpus")
    if len(special_tokens) != len(SPECIAL_ROLES):
        raise ValueError(f"special_tokens must name {SPECIAL_ROLES}, got {special_tokens!r}")
    base = len(special_tokens) + 256
    if target_vocab_size < base:
        raise ValueError(f"target_vocab_size {target_vocab_size} is below the base alphabet size {base}")

    vocab: dict[str, int] = {}
    for s in special_tokens:
        vocab[s] = len(vocab)
    for b in range(256):
        tok = _token_str(bytes([b]))
        if tok in vocab:
            raise ValueError(f"special token {tok!r} collides with a byte token")
        vocab[tok] = len(vocab)
    blocked = set(special_tokens)

    counts: dict[str, int] = {}
    for text in corpus:
        for piece in pretokenize(text):
            counts[piece] = counts.get(piece, 0) + 1
    words = [[bytes([b]) for b in piece.encode("utf-8")] for piece in counts]
    freqs = list(counts.values())

    pair_counts: dict[tuple[bytes, bytes], int] = {}
    where: dict[tuple[bytes, bytes], set[int]] = {}
    for wi, w in enumerate(words):
        for pair in zip(w, w[1:]):
            pair_counts[pair] = pair_counts.get(pair, 0) + freqs[wi]
            where.setdefault(pair, set()).add(wi)
    heap = [(-c, p[0], p[1]) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[str, str]] = []
    blocked_pairs: set[tuple[bytes, bytes]] = set()
    while len(vocab) < target_vocab_size and heap:
        neg, left, right = heapq.heappop(heap)
        pair = (left, right)
        if pair in blocked_pairs or pair_counts.get(pair, 0) != -neg or -neg <= 0:
            continue  # stale heap entry
        new_tok = left + right
        new_str = _token_str(new_tok)
        if new_str in blocked:
            blocked_pairs.add(pair)
            continue
        merges.append((_token_str(left), _token_str(right)))
        vocab.setdefault(new_str, len(vocab))

        touched: dict[tuple[bytes, bytes], int] = {}
        for wi in sorted(where.pop(pair, ())):
            w = words[wi]
            f = freqs[wi]
            for p in zip(w, w[1:]):
                touched[p] = touched.get(p, 0) - f
            merged = []
            i = 0
            while i < len(w):
                if i < len(w) - 1 and w[i] == left and w[i + 1] == right:
                    merged.append(new_tok)
                    i += 2
                else:
                    merged.append(w[i])
                    i += 1
            words[wi] = merged
            for p in zip(merged, merged[1:]):
                touched[p] = touched.get(p, 0) + f
                where.setdefault(p, set()).add(wi)
        for p, delta in touched.items():
            if delta == 0:
                continue
            c = pair_counts.get(p, 0) + delta
            pair_counts[p] = c
            if c > 0:
                heapq.heappush(heap, (-c, p[0], p[1]))
        pair_counts.pop(pair, None)

    specials = {role: vocab[s] for role, s in zip(SPECIAL_ROLES, special_tokens)}
    return TokenizerModel(vocab=vocab, merges=merges, special_tokens=specials)


def encode(model: TokenizerModel, text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
    return model.encode(text, add_bos=add_bos, add_eos=add_eos)


def decode(model: TokenizerModel, ids: Iterable[int], skip_special: bool = True) -> str:
    return model.decode(ids, skip_special=skip_special)


def compression_rate(model: TokenizerModel, corpus: Sequence[str]) -> float:
    """Tokens emitted per source character over ``corpus`` (lower packs more)."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("compression rate is undefined for an empty corpus")
    chars = sum(len(t) for t in corpus)
    if chars == 0:
        raise ValueError("compression rate is undefined for a corpus with no characters")
    tokens = sum(len(model.encode(t)) for t in corpus)
    return tokens / chars


# published reference points, shown next to measured rates in reports
REFERENCE_COMPRESSION = {"LLaMA 2": 1.037, "Bloom": 0.501, "ChatGLM 2": 0.527, "Baichuan 1": 0.570, "Baichuan 2": 0.498}


class BPETokenizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` trains merges, ``transform`` maps texts to ids.

    Parameters
    ----------
    vocab_size : int
        Target vocabulary size including bytes and special tokens.
    special_tokens : tuple of str
        Strings for the (bos, eos, pad) tokens.
    add_bos, add_eos : bool
        Whether ``transform`` wraps every sequence with boundary tokens.
    """

    def __init__(self, vocab_size: int = 1024, special_tokens=DEFAULT_SPECIALS, add_bos: bool = False, add_eos: bool = False):
        self.vocab_size = vocab_size
        self.special_tokens = special_tokens
        self.add_bos = add_bos
        self.add_eos = add_eos

    def fit(self, X, y=None):
        self.model_ = train_bpe(list(X), self.vocab_size, tuple(self.special_tokens))
        self.n_merges_ = len(self.model_.merges)
        return self

    @classmethod
    def from_model(cls, model: TokenizerModel) -> "BPETokenizer":
        inv = {i: s for s, i in model.vocab.items()}
        est = cls(vocab_size=len(model), special_tokens=tuple(inv[model.special_tokens[r]] for r in SPECIAL_ROLES))
        est.model_ = model
        est.n_merges_ = len(model.merges)
        return est

    def transform(self, X) -> list[list[int]]:
        check_is_fitted(self, "model_")
        return [self.model_.encode(t, add_bos=self.add_bos, add_eos=self.add_eos) for t in X]

    def inverse_transform(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        return [self.model_.decode(ids) for ids in X]

    def score(self, X, y=None) -> float:
        """Negative compression rate, so that higher is better as sklearn expects."""
        check_is_fitted(self, "model_")
        return -compression_rate(self.model_, list(X))
