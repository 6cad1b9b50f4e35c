"""Dialogue records, instruction templating, batching and dataset statistics."""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import torch

from .tokenizer import TokenizerModel

logger = logging.getLogger(__name__)

ROLES = ("agent", "user", "named")
SUMMARY_TYPES = ("agent", "user", "all")
DATASETS = ("csds", "samsum")

# instruction strings, byte-for-byte
TEMPLATES = {
    ("csds", "agent"): "下面是一段电商公司的客服和用户之间的对话，请你给出客服的摘要。",
    ("csds", "user"): "下面是一段电商公司的客服和用户之间的对话，请你给出用户的摘要。",
    ("csds", "all"): "下面是一段电商公司的客服和用户之间的对话，请你给出全部的摘要。",
    ("samsum", "all"): "Please make the summarization of following dialogue.",
}
REQUIRED_SUMMARIES = {"csds": ("agent", "user", "all"), "samsum": ("all",)}
ROLE_NAMES = {"csds": {"agent": "客服", "user": "用户"}, "samsum": {"agent": "Agent", "user": "User"}}

BOS = "<s>"
EOS = "</s>"


class DataError(ValueError):
    """Invalid dataset content; carries the offending line or record id."""


@dataclass(frozen=True)
class Turn:
    role: str
    text: str
    name: str | None = None


@dataclass(frozen=True)
class DialogueRecord:
    id: str
    turns: tuple[Turn, ...]
    summaries: dict[str, str]

    def validate(self, schema: str | None = None) -> None:
        if not self.turns:
            raise DataError(f"record {self.id!r}: no turns")
        for t in self.turns:
            if t.role not in ROLES:
                raise DataError(f"record {self.id!r}: unknown role {t.role!r}")
            if not t.text.strip():
                raise DataError(f"record {self.id!r}: empty utterance")
            if t.role == "named" and not t.name:
                raise DataError(f"record {self.id!r}: named turn without a name")
        if "all" not in self.summaries:
            raise DataError(f"record {self.id!r}: missing summary 'all'")
        if schema is not None:
            need = REQUIRED_SUMMARIES[schema]
            missing = [s for s in need if s not in self.summaries]
            if missing:
                raise DataError(f"record {self.id!r}: missing summary {missing[0]!r}")
            if schema == "samsum" and set(self.summaries) != {"all"}:
                raise DataError(f"record {self.id!r}: samsum records carry only an 'all' summary")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "turns": [{"role": t.role, "name": t.name, "text": t.text} for t in self.turns],
            "summaries": dict(self.summaries),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DialogueRecord":
        turns = tuple(Turn(role=t["role"], text=t["text"], name=t.get("name")) for t in obj["turns"])
        return cls(id=str(obj["id"]), turns=turns, summaries=dict(obj["summaries"]))


@dataclass(frozen=True)
class InstructionSample:
    """One templated (prompt, target) pair.

    ``prompt_text`` is ``bos + instruction + "\\n" + dialogue + "\\n"`` and
    ``target_text`` is ``summary + eos``.
    """

    instruction: str
    dialogue: str
    summary: str
    summary_type: str
    dataset_tag: str
    record_id: str
    bos: str = BOS
    eos: str = EOS

    @property
    def prompt_text(self) -> str:
        return f"{self.bos}{self.instruction}\n{self.dialogue}\n"

    @property
    def target_text(self) -> str:
        return f"{self.summary}{self.eos}"


@dataclass
class TokenBatch:
    token_ids: torch.Tensor  # [B, L] long
    lengths: torch.Tensor  # [B] long
    attention_mask: torch.Tensor  # [B, L] bool
    loss_mask: torch.Tensor  # [B, L] bool
    record_ids: list[str] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def max_len(self) -> int:
        return self.token_ids.shape[1]


def load_records(path: str | Path, schema: str) -> list[DialogueRecord]:
    if schema not in DATASETS:
        raise ValueError(f"unknown schema {schema!r}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = DialogueRecord.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
            rec.validate(schema)
            records.append(rec)
    return records


def save_records(records: Iterable[DialogueRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")


def detect_schema(records: Sequence[DialogueRecord]) -> str:
    if records and all({"agent", "user"} <= set(r.summaries) for r in records):
        return "csds"
    return "samsum"


def serialize_dialogue(record: DialogueRecord, dataset_tag: str) -> str:
    names = ROLE_NAMES[dataset_tag]
    lines = []
    for t in record.turns:
        speaker = t.name if t.role == "named" else names[t.role]
        lines.append(f"{speaker}: {t.text}")
    return "\n".join(lines)


def build_instruction_samples(
    records: Iterable[DialogueRecord], dataset_tag: str, boundary: str = "distinct"
) -> list[InstructionSample]:
    """Apply the per-dataset instruction templates.

    ``boundary="distinct"`` ends targets with ``</s>``; ``boundary="shared"``
    reuses ``<s>`` as the terminator, matching the published templates.
    """
    if dataset_tag not in DATASETS:
        raise ValueError(f"unknown dataset tag {dataset_tag!r}")
    if boundary not in ("distinct", "shared"):
        raise ValueError(f"unknown boundary mode {boundary!r}")
    eos = EOS if boundary == "distinct" else BOS
    samples = []
    for rec in records:
        rec.validate(dataset_tag)
        dialogue = serialize_dialogue(rec, dataset_tag)
        for stype in REQUIRED_SUMMARIES[dataset_tag]:
            samples.append(
                InstructionSample(
                    instruction=TEMPLATES[(dataset_tag, stype)],
                    dialogue=dialogue,
                    summary=rec.summaries[stype],
                    summary_type=stype,
                    dataset_tag=dataset_tag,
                    record_id=rec.id,
                    bos=BOS,
                    eos=eos,
                )
            )
    return samples


def _special_id(tokenizer: TokenizerModel, token: str) -> int:
    try:
        idx = tokenizer.vocab[token]
    except KeyError:
        raise ValueError(f"boundary token {token!r} is not in the tokenizer vocabulary") from None
    if not tokenizer.is_special(idx):
        raise ValueError(f"boundary token {token!r} is not a special token")
    return idx


def encode_prompt(sample: InstructionSample, tokenizer: TokenizerModel, dialogue_budget: int | None = None) -> list[int]:
    """Prompt ids; the dialogue is cut from its middle to fit ``dialogue_budget``."""
    head = [_special_id(tokenizer, sample.bos)] + tokenizer.encode(sample.instruction + "\n")
    dia = tokenizer.encode(sample.dialogue)
    if dialogue_budget is not None and len(dia) > dialogue_budget:
        keep_head = (dialogue_budget + 1) // 2
        keep_tail = dialogue_budget - keep_head
        dia = dia[:keep_head] + (dia[len(dia) - keep_tail :] if keep_tail else [])
    return head + dia + tokenizer.encode("\n")


def encode_target(sample: InstructionSample, tokenizer: TokenizerModel) -> list[int]:
    return tokenizer.encode(sample.summary) + [_special_id(tokenizer, sample.eos)]


def encode_sample(sample: InstructionSample, tokenizer: TokenizerModel, max_len: int) -> tuple[list[int], int] | None:
    """Return (ids, n_prompt) or ``None`` when instruction and target alone overflow."""
    target = encode_target(sample, tokenizer)
    fixed = len(encode_prompt(sample, tokenizer, dialogue_budget=0)) + len(target)
    if fixed > max_len:
        return None
    prompt = encode_prompt(sample, tokenizer, dialogue_budget=max_len - fixed)
    return prompt + target, len(prompt)


def collate(rows: Sequence[tuple[list[int], int]], pad_id: int, loss_on_prompt: bool = False, record_ids=None) -> TokenBatch:
    lengths = [len(ids) for ids, _ in rows]
    L = max(lengths)
    B = len(rows)
    token_ids = torch.full((B, L), pad_id, dtype=torch.long)
    attn = torch.zeros((B, L), dtype=torch.bool)
    loss = torch.zeros((B, L), dtype=torch.bool)
    for i, (ids, n_prompt) in enumerate(rows):
        n = len(ids)
        token_ids[i, :n] = torch.tensor(ids, dtype=torch.long)
        attn[i, :n] = True
        # position 0 is never predicted
        loss[i, 1 if loss_on_prompt else n_prompt : n] = True
    return TokenBatch(token_ids, torch.tensor(lengths, dtype=torch.long), attn, loss, list(record_ids or []))


class BatchStream:
    """Re-iterable stream of padded batches; each epoch reshuffles from the seed."""

    def __init__(self, rows, record_ids, pad_id: int, batch_size: int, seed: int, loss_on_prompt: bool, shuffle: bool, skipped: int):
        self.rows = rows
        self.record_ids = record_ids
        self.pad_id = pad_id
        self.batch_size = batch_size
        self.seed = seed
        self.loss_on_prompt = loss_on_prompt
        self.shuffle = shuffle
        self.skipped = skipped

    def __len__(self) -> int:
        return (len(self.rows) + self.batch_size - 1) // self.batch_size

    def epoch(self, index: int) -> Iterator[TokenBatch]:
        order = list(range(len(self.rows)))
        if self.shuffle:
            random.Random(f"{self.seed}:{index}").shuffle(order)
        for start in range(0, len(order), self.batch_size):
            chunk = order[start : start + self.batch_size]
            yield collate(
                [self.rows[i] for i in chunk],
                self.pad_id,
                self.loss_on_prompt,
                [self.record_ids[i] for i in chunk],
            )

    def __iter__(self) -> Iterator[TokenBatch]:
        return self.epoch(0)


def tokenize_batches(
    samples: Sequence[InstructionSample],
    tokenizer: TokenizerModel,
    max_len: int,
    batch_size: int,
    seed: int = 0,
    loss_on_prompt: bool = False,
    shuffle: bool = True,
) -> BatchStream:
    if max_len < 8:
        raise ValueError("max_len must be at least 8")
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    rows, ids = [], []
    skipped = 0
    for s in samples:
        enc = encode_sample(s, tokenizer, max_len)
        if enc is None:
            skipped += 1
            logger.warning("skipping %s/%s: instruction and target exceed max_len=%d", s.record_id, s.summary_type, max_len)
            continue
        rows.append(enc)
        ids.append(s.record_id)
    return BatchStream(rows, ids, tokenizer.pad_id, batch_size, seed, loss_on_prompt, shuffle, skipped)


def plain_documents(samples: Sequence[InstructionSample]) -> list[str]:
    """Unique dialogues and summaries, in first-seen order, without templates."""
    return list(dict.fromkeys([s.dialogue for s in samples] + [s.summary for s in samples]))


def lm_batches(
    texts: Sequence[str],
    tokenizer: TokenizerModel,
    max_len: int,
    batch_size: int,
    seed: int = 0,
    shuffle: bool = True,
) -> BatchStream:
    """Causal-LM batches over plain documents: ``<s> text </s>``, loss on every token.

    Documents longer than ``max_len`` are truncated at the end.
    """
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    rows = []
    for t in texts:
        ids = [tokenizer.bos_id] + tokenizer.encode(t) + [tokenizer.eos_id]
        rows.append((ids[:max_len], 1))
    if not rows:
        raise ValueError("no documents to batch")
    return BatchStream(rows, [f"doc{i}" for i in range(len(rows))], tokenizer.pad_id, batch_size, seed, False, shuffle, 0)


@dataclass
class StatsReport:
    n_samples: int
    counts: dict[str, int]
    dialogue_lengths: list[int]
    summary_lengths: list[int]
    bucket_width: int
    dialogue_histogram: list[int]
    summary_histogram: list[int]
    threshold: int
    split_counts: dict[str, int] = field(default_factory=dict)

    @staticmethod
    def _mean(xs: Sequence[int]) -> float:
        return sum(xs) / len(xs) if xs else 0.0

    @property
    def dialogue_mean(self) -> float:
        return self._mean(self.dialogue_lengths)

    @property
    def summary_mean(self) -> float:
        return self._mean(self.summary_lengths)

    @property
    def fraction_dialogue_under_threshold(self) -> float:
        if not self.dialogue_lengths:
            return 0.0
        return sum(n < self.threshold for n in self.dialogue_lengths) / len(self.dialogue_lengths)

    def to_json(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "counts": self.counts,
            "split_counts": self.split_counts,
            "bucket_width": self.bucket_width,
            "dialogue_histogram": self.dialogue_histogram,
            "summary_histogram": self.summary_histogram,
            "dialogue_mean": self.dialogue_mean,
            "summary_mean": self.summary_mean,
            "threshold": self.threshold,
            "fraction_dialogue_under_threshold": self.fraction_dialogue_under_threshold,
        }


def histogram(lengths: Sequence[int], bucket_width: int, n_buckets: int) -> list[int]:
    """Counts in ``[k*w, (k+1)*w)``; the last bucket is open-ended."""
    out = [0] * n_buckets
    for n in lengths:
        out[min(n // bucket_width, n_buckets - 1)] += 1
    return out


def dataset_stats(
    samples: Sequence[InstructionSample],
    tokenizer: TokenizerModel,
    bucket_width: int = 100,
    n_buckets: int = 20,
    threshold: int = 1200,
    split_counts: dict[str, int] | None = None,
) -> StatsReport:
    """Token-length distributions for the dialogue and summary parts.

    Each dialogue is counted once per record, not once per summary type.
    """
    if bucket_width < 1 or n_buckets < 1:
        raise ValueError("bucket_width and n_buckets must be positive")
    seen = set()
    dia_lens = []
    for s in samples:
        key = (s.dataset_tag, s.record_id)
        if key not in seen:
            seen.add(key)
            dia_lens.append(len(tokenizer.encode(s.dialogue)))
    sum_lens = [len(tokenizer.encode(s.summary)) for s in samples]
    counts = Counter(f"{s.dataset_tag}/{s.summary_type}" for s in samples)
    return StatsReport(
        n_samples=len(samples),
        counts=dict(sorted(counts.items())),
        dialogue_lengths=dia_lens,
        summary_lengths=sum_lens,
        bucket_width=bucket_width,
        dialogue_histogram=histogram(dia_lens, bucket_width, n_buckets),
        summary_histogram=histogram(sum_lens, bucket_width, n_buckets),
        threshold=threshold,
        split_counts=dict(split_counts or {}),
    )


# native dataset layouts -> normalized records

def _join(value) -> str:
    if isinstance(value, list):
        return "".join(str(v) for v in value)
    return str(value)


def convert_csds(raw: Iterable[dict]) -> list[DialogueRecord]:
    """CSDS native JSON: ``Dialogue`` turns with speaker ``Q`` (user) / ``A`` (agent)."""
    out = []
    for i, obj in enumerate(raw):
        rid = str(obj.get("DialogueID", i))
        turns = []
        for t in obj["Dialogue"]:
            text = _join(t["utterance"]).strip()
            if not text:
                continue
            turns.append(Turn(role="user" if t["speaker"] == "Q" else "agent", text=text))
        rec = DialogueRecord(
            id=rid,
            turns=tuple(turns),
            summaries={
                "agent": _join(obj["AgentSumm"]),
                "user": _join(obj["UserSumm"]),
                "all": _join(obj["FinalSumm"]),
            },
        )
        rec.validate("csds")
        out.append(rec)
    return out


def convert_samsum(raw: Iterable[dict]) -> list[DialogueRecord]:
    """SAMSUM native JSON: ``dialogue`` is ``"Name: text"`` lines."""
    out = []
    for i, obj in enumerate(raw):
        turns = []
        for line in obj["dialogue"].replace("\r\n", "\n").split("\n"):
            if not line.strip():
                continue
            name, sep, text = line.partition(":")
            if not sep or not text.strip():
                raise DataError(f"record {obj.get('id', i)!r}: cannot split speaker from {line!r}")
            turns.append(Turn(role="named", name=name.strip(), text=text.strip()))
        rec = DialogueRecord(id=str(obj.get("id", i)), turns=tuple(turns), summaries={"all": obj["summary"]})
        rec.validate("samsum")
        out.append(rec)
    return out


def read_raw(path: str | Path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        return json.loads(text)
    return [json.loads(line) for line in text.splitlines() if line.strip()]


# synthetic toy dialogues for drills and smoke runs

_PRODUCTS = ["耳机", "手机壳", "电饭煲", "台灯", "背包", "水杯", "键盘", "鼠标", "风扇", "围巾", "雨伞", "枕头"]
_ISSUES = [
    ("什么时候发货", "发货时间", "承诺明天发货"),
    ("可以退货吗", "退货", "同意七天无理由退货"),
    ("有没有优惠券", "优惠", "提供了满减优惠券"),
    ("颜色发错了", "发错颜色", "安排补发正确颜色"),
    ("快递一直没到", "物流", "催促快递尽快派送"),
    ("发票怎么开", "发票", "说明在订单页申请发票"),
]
_NAMES = ["Amanda", "Jerry", "Olivia", "Tom", "Hannah", "Leo", "Mia", "Noah", "Ella", "Sam"]
_PLANS = [
    ("go to the cinema", "the cinema"),
    ("grab some pizza", "pizza"),
    ("play tennis", "tennis"),
    ("visit grandma", "grandma"),
    ("study for the exam", "the exam"),
    ("walk the dog", "the dog"),
]
_DAYS = ["Monday", "Tuesday", "Friday", "Saturday", "Sunday"]


def synthetic_records(n: int, schema: str, seed: int = 0) -> list[DialogueRecord]:
    """Small rule-generated dialogues whose summaries follow from their content."""
    rng = random.Random(seed)
    out = []
    for i in range(n):
        if schema == "csds":
            product = rng.choice(_PRODUCTS)
            ask, topic, answer = rng.choice(_ISSUES)
            order = rng.randint(10, 99)
            turns = (
                Turn("user", "你好，我买的" + product + ask + "？"),
                Turn("agent", "您好，请提供订单号" + "。"),
                Turn("user", f"订单号是{order}。"),
                Turn("agent", "好的，已经为您" + answer + "。"),
            )
            summaries = {
                "user": f"用户询问{product}的{topic}问题。",
                "agent": f"客服{answer}。",
                "all": f"用户询问{product}的{topic}问题，客服{answer}。",
            }
        elif schema == "samsum":
            a, b = rng.sample(_NAMES, 2)
            plan, _ = rng.choice(_PLANS)
            day = rng.choice(_DAYS)
            turns = (
                Turn("named", f"Do you want to {plan} on {day}?", a),
                Turn("named", "Sure, what time?", b),
                Turn("named", f"{rng.randint(1, 9)} pm works for me.", a),
                Turn("named", "Great, see you then!", b),
            )
            summaries = {"all": f"{a} and {b} will {plan} on {day}."}
        else:
            raise ValueError(f"unknown schema {schema!r}")
        out.append(DialogueRecord(id=f"{schema}-{seed}-{i}", turns=turns, summaries=summaries))
    return out
