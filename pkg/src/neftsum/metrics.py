"""Summary metrics: ROUGE-1/2/L, corpus BLEU, greedy embedding similarity.

Per-pair functions return fractions in ``[0, 1]``; reports are in percent.
Chinese text is scored per character, everything else per lowercased
whitespace token.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import InstructionSample

_CJK = "㐀-䶿一-鿿豈-﫿"
_METRIC_TOKEN = re.compile(rf"[{_CJK}]|[^\s{_CJK}]+")

TYPE_ORDER = ("all", "user", "agent")  # "final/user/agent" display order
METRIC_KEYS = ("rouge1", "rouge2", "rougeL", "bleu", "embed")
METRIC_LABELS = {"rouge1": "ROUGE-1", "rouge2": "ROUGE-2", "rougeL": "ROUGE-L", "bleu": "BLEU", "embed": "EmbedScore"}

# published F1 reference points, shown in report tables only
PUBLISHED_REFERENCE = {
    "csds": {
        "rouge1": (60.72, 63.01, 56.21),
        "rouge2": (45.50, 47.53, 41.36),
        "rougeL": (58.66, 60.92, 53.83),
        "bleu": (33.92, 36.84, 30.96),
        "embed": (80.67, 82.48, 78.68),
    },
    "samsum": {"rouge1": (74.51,), "rouge2": (60.87,), "rougeL": (58.26,), "bleu": (46.51,), "embed": (84.19,)},
}


def metric_tokens(text: str) -> list[str]:
    return _METRIC_TOKEN.findall(text.lower())


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, p: float, r: float) -> "PRF":
        return cls(p, r, 2 * p * r / (p + r) if p + r > 0 else 0.0)

    def scaled(self, k: float) -> "PRF":
        return PRF(self.precision * k, self.recall * k, self.f1 * k)

    def to_json(self) -> dict:
        return {"p": self.precision, "r": self.recall, "f": self.f1}

    @classmethod
    def from_json(cls, d: Mapping) -> "PRF":
        return cls(d["p"], d["r"], d["f"])


ZERO = PRF(0.0, 0.0, 0.0)


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> PRF:
    if n < 1:
        raise ValueError("n must be >= 1")
    c, r = ngram_counts(candidate, n), ngram_counts(reference, n)
    nc, nr = sum(c.values()), sum(r.values())
    if nc == 0 or nr == 0:
        return ZERO
    overlap = sum(min(v, r[g]) for g, v in c.items())
    return PRF.from_pr(overlap / nc, overlap / nr)


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> PRF:
    if not candidate or not reference:
        return ZERO
    ell = lcs_length(candidate, reference)
    return PRF.from_pr(ell / len(candidate), ell / len(reference))


@dataclass(frozen=True)
class BleuScore:
    score: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    sys_len: int
    ref_len: int


def brevity_penalty(sys_len: int, ref_len: int) -> float:
    if sys_len == 0:
        return 0.0
    if sys_len >= ref_len:
        return 1.0
    return math.exp(1.0 - ref_len / sys_len)


def bleu(
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    max_n: int = 4,
    smoothing: str = "exp",
) -> BleuScore:
    """Corpus BLEU over token lists, in percent.

    ``smoothing="exp"`` replaces the k-th zero match count by ``1 / 2**k``;
    an order with no candidate n-grams at all counts as one zero-match
    n-gram. ``smoothing="none"`` scores 0 as soon as any order has no match.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if smoothing not in ("exp", "none"):
        raise ValueError(f"unknown smoothing {smoothing!r}")
    correct = [0] * max_n
    total = [0] * max_n
    sys_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        sys_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            c, r = ngram_counts(cand, n), ngram_counts(ref, n)
            correct[n - 1] += sum(min(v, r[g]) for g, v in c.items())
            total[n - 1] += sum(c.values())
    bp = brevity_penalty(sys_len, ref_len)
    precisions = []
    zeros = 0
    for c, t in zip(correct, total):
        if c > 0:
            precisions.append(c / t)
        elif smoothing == "exp":
            zeros += 1
            precisions.append(1.0 / (2**zeros * max(t, 1)))
        else:
            precisions.append(0.0)
    if bp == 0.0 or min(precisions) == 0.0:
        return BleuScore(0.0, tuple(100 * p for p in precisions), bp, sys_len, ref_len)
    score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuScore(score, tuple(100 * p for p in precisions), bp, sys_len, ref_len)


EmbeddingSource = Callable[[Sequence], np.ndarray]


def _lookup(source, tokens: Sequence) -> np.ndarray:
    if callable(source):
        return np.asarray(source(tokens), dtype=np.float64)
    table = np.asarray(source, dtype=np.float64)
    return table[np.asarray(tokens, dtype=np.int64)]


def embed_score(candidate: Sequence, reference: Sequence, embeddings) -> PRF:
    """Greedy cosine matching between candidate and reference token embeddings.

    ``embeddings`` is a ``[vocab, d]`` table indexed by token id or a callable
    mapping a token list to a ``[n, d]`` array. Each token's best cosine is
    floored at 0 so scores stay in ``[0, 1]``.
    """
    if len(candidate) == 0 or len(reference) == 0:
        return ZERO
    c, r = _lookup(embeddings, candidate), _lookup(embeddings, reference)
    cn = np.linalg.norm(c, axis=1, keepdims=True)
    rn = np.linalg.norm(r, axis=1, keepdims=True)
    c = np.divide(c, cn, out=np.zeros_like(c), where=cn > 0)
    r = np.divide(r, rn, out=np.zeros_like(r), where=rn > 0)
    sim = c @ r.T
    p = float(np.clip(sim.max(axis=1), 0.0, 1.0).mean())
    rr = float(np.clip(sim.max(axis=0), 0.0, 1.0).mean())
    return PRF.from_pr(p, rr)


# reports


@dataclass
class TypeScores:
    rouge1: PRF
    rouge2: PRF
    rougeL: PRF
    bleu: float
    embed: PRF
    n: int

    def value(self, key: str) -> float:
        v = getattr(self, key)
        return v if isinstance(v, float) else v.f1

    def to_json(self) -> dict:
        return {
            "rouge1": self.rouge1.to_json(),
            "rouge2": self.rouge2.to_json(),
            "rougeL": self.rougeL.to_json(),
            "bleu": self.bleu,
            "embed": self.embed.to_json(),
            "n": self.n,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "TypeScores":
        return cls(
            rouge1=PRF.from_json(d["rouge1"]),
            rouge2=PRF.from_json(d["rouge2"]),
            rougeL=PRF.from_json(d["rougeL"]),
            bleu=float(d["bleu"]),
            embed=PRF.from_json(d["embed"]),
            n=int(d["n"]),
        )


@dataclass
class MetricReport:
    dataset_tag: str
    scores: dict[str, TypeScores]
    skipped: int = 0
    embed_label: str = "EmbedScore (greedy cosine, model input embeddings)"
    n_checkpoints: int = 1

    @property
    def types(self) -> tuple[str, ...]:
        return tuple(t for t in TYPE_ORDER if t in self.scores)

    def triple(self, key: str) -> str:
        return "/".join(f"{self.scores[t].value(key):.2f}" for t in self.types)

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset_tag,
            "types": list(self.types),
            "scores": {t: self.scores[t].to_json() for t in self.types},
            "skipped": self.skipped,
            "embed_label": self.embed_label,
            "n_checkpoints": self.n_checkpoints,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "MetricReport":
        return cls(
            dataset_tag=d["dataset"],
            scores={t: TypeScores.from_json(v) for t, v in d["scores"].items()},
            skipped=int(d.get("skipped", 0)),
            embed_label=d.get("embed_label", "EmbedScore"),
            n_checkpoints=int(d.get("n_checkpoints", 1)),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, ensure_ascii=False, indent=2)

    @classmethod
    def load(cls, path) -> "MetricReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def text_table(self, name: str = "this run", with_reference: bool = True) -> str:
        layout = "/".join("final" if t == "all" else t for t in self.types)
        header = [self.dataset_tag.upper() + f" ({layout})"] + [METRIC_LABELS[k] for k in METRIC_KEYS]
        rows = [[name] + [self.triple(k) for k in METRIC_KEYS]]
        ref = PUBLISHED_REFERENCE.get(self.dataset_tag)
        if with_reference and ref and len(ref["rouge1"]) == len(self.types):
            rows.append(["published reference"] + ["/".join(f"{x:.2f}" for x in ref[k]) for k in METRIC_KEYS])
        return _format_table(header, rows) + f"\nEmbedScore: {self.embed_label}; samples per type: " + ", ".join(
            f"{t}={self.scores[t].n}" for t in self.types
        )


def _format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    line = lambda r: " | ".join(str(c).ljust(w) for c, w in zip(r, widths))
    return "\n".join([line(header), "-+-".join("-" * w for w in widths), *map(line, rows)])


def _mean_prf(xs: Sequence[PRF]) -> PRF:
    if not xs:
        return ZERO
    k = len(xs)
    return PRF(sum(x.precision for x in xs) / k, sum(x.recall for x in xs) / k, sum(x.f1 for x in xs) / k)


def score_predictions(
    predictions: Sequence[str],
    samples: Sequence[InstructionSample],
    embeddings=None,
    tokenize_ids: Callable[[str], list[int]] | None = None,
) -> MetricReport:
    """Score generated summaries against each sample's reference, per summary type.

    ``embeddings`` plus ``tokenize_ids`` (text -> model token ids) enable the
    embedding score; without them it falls back to a fixed random table over
    metric tokens.
    """
    if len(predictions) != len(samples):
        raise ValueError(f"{len(predictions)} predictions for {len(samples)} samples")
    if not samples:
        raise ValueError("cannot evaluate an empty test set")
    tags = {s.dataset_tag for s in samples}
    if len(tags) != 1:
        raise ValueError(f"mixed datasets in one report: {sorted(tags)}")
    label = "EmbedScore (greedy cosine, model input embeddings)"
    if embeddings is None or tokenize_ids is None:
        embeddings, tokenize_ids = _hashed_embeddings(), metric_tokens
        label = "EmbedScore (greedy cosine, hashed random embeddings)"
    groups: dict[str, list[tuple[str, str]]] = {}
    skipped = 0
    for pred, s in zip(predictions, samples):
        if not s.summary.strip():
            skipped += 1
            continue
        groups.setdefault(s.summary_type, []).append((pred, s.summary))
    scores = {}
    for stype, pairs in groups.items():
        cands = [metric_tokens(p) for p, _ in pairs]
        refs = [metric_tokens(r) for _, r in pairs]
        embeds = [embed_score(tokenize_ids(p), tokenize_ids(r), embeddings) for p, r in pairs]
        scores[stype] = TypeScores(
            rouge1=_mean_prf([rouge_n(c, r, 1) for c, r in zip(cands, refs)]).scaled(100),
            rouge2=_mean_prf([rouge_n(c, r, 2) for c, r in zip(cands, refs)]).scaled(100),
            rougeL=_mean_prf([rouge_l(c, r) for c, r in zip(cands, refs)]).scaled(100),
            bleu=bleu(cands, refs).score,
            embed=_mean_prf(embeds).scaled(100),
            n=len(pairs),
        )
    if not scores:
        raise ValueError("no sample carries a reference summary")
    return MetricReport(dataset_tag=tags.pop(), scores=scores, skipped=skipped, embed_label=label)


class _hashed_embeddings:
    """Deterministic pseudo-random vector per metric token (fallback source)."""

    def __init__(self, dim: int = 64):
        self.dim = dim

    def __call__(self, tokens: Sequence[str]) -> np.ndarray:
        import hashlib

        out = np.empty((len(tokens), self.dim))
        for i, t in enumerate(tokens):
            seed = int.from_bytes(hashlib.sha256(str(t).encode("utf-8")).digest()[:8], "little")
            out[i] = np.random.default_rng(seed).standard_normal(self.dim)
        return out


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Mean over several checkpoints' reports (same dataset and types)."""
    if not reports:
        raise ValueError("no reports to average")
    first = reports[0]
    for r in reports[1:]:
        if r.dataset_tag != first.dataset_tag or set(r.scores) != set(first.scores):
            raise ValueError("reports disagree on dataset or summary types")
    scores = {}
    for t in first.scores:
        items = [r.scores[t] for r in reports]
        scores[t] = TypeScores(
            rouge1=_mean_prf([i.rouge1 for i in items]),
            rouge2=_mean_prf([i.rouge2 for i in items]),
            rougeL=_mean_prf([i.rougeL for i in items]),
            bleu=sum(i.bleu for i in items) / len(items),
            embed=_mean_prf([i.embed for i in items]),
            n=first.scores[t].n,
        )
    return MetricReport(first.dataset_tag, scores, first.skipped, first.embed_label, n_checkpoints=len(reports))


@dataclass
class DeltaTable:
    types: tuple[str, ...]
    rows: dict[str, dict[str, tuple[float, float, float, str]]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "types": list(self.types),
            "rows": {k: {t: {"a": a, "b": b, "delta": d, "larger": w} for t, (a, b, d, w) in v.items()} for k, v in self.rows.items()},
        }

    def text(self, name_a: str = "A", name_b: str = "B") -> str:
        header = ["metric (B - A)"] + ["final" if t == "all" else t for t in self.types]
        body = []
        for key, per in self.rows.items():
            cells = []
            for t in self.types:
                a, b, d, w = per[t]
                cells.append(f"{a:.2f} -> {b:.2f} ({d:+.2f}, {w})")
            body.append([METRIC_LABELS[key]] + cells)
        return f"A = {name_a}\nB = {name_b}\n" + _format_table(header, body)


def compare_reports(a: MetricReport, b: MetricReport) -> DeltaTable:
    """Signed per-metric deltas ``b - a``; ``larger`` names the bigger side."""
    if a.dataset_tag != b.dataset_tag or set(a.scores) != set(b.scores):
        raise ValueError(f"reports do not share summary types: {a.types} vs {b.types}")
    table = DeltaTable(types=a.types)
    for key in METRIC_KEYS:
        table.rows[key] = {}
        for t in a.types:
            va, vb = a.scores[t].value(key), b.scores[t].value(key)
            d = vb - va
            table.rows[key][t] = (va, vb, d, "=" if d == 0 else ("B" if d > 0 else "A"))
    return table
