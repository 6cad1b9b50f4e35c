"""Command-line entry point.

Subcommands: build-tokenizer, prepare-data, stats, train, generate, evaluate,
compare-runs. Config leaves can be overridden with ``--section.key value``
after the subcommand's own options; precedence is flag > file > default.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import platform
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from . import __version__
from .adapters import load_adapter
from .checkpoint import load_checkpoint, load_model
from .config import ConfigError, RunConfig, parse_override_args
from .corpus import (
    DataError,
    InstructionSample,
    build_instruction_samples,
    convert_csds,
    convert_samsum,
    dataset_stats,
    load_records,
    plain_documents,
    read_raw,
    save_records,
    synthetic_records,
)
from .decode import generate as decode
from .estimator import InstructionSummarizer
from .metrics import MetricReport, average_reports, compare_reports, score_predictions
from .model import CausalLM
from .tokenizer import TokenizerModel, compression_rate, train_bpe
from .trainer import NumericError

logger = logging.getLogger("neftsum")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("build-tokenizer", "prepare-data", "stats", "train", "generate", "evaluate", "compare-runs")


# provenance


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def provenance(command: str, argv: Sequence[str], config: RunConfig, inputs: Sequence[str | Path], outputs: Sequence[str | Path]) -> dict:
    return {
        "command": command,
        "argv": list(argv),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "config": config.to_dict(),
        "seeds": {
            "train": config.train.seed,
            "init": config.model.init_seed,
            "decode": config.decode.seed,
        },
        "inputs": {str(p): file_sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": [str(p) for p in outputs],
        "versions": {
            "neftsum": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
    }


def write_manifest(path: Path, manifest: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, ensure_ascii=False), encoding="utf-8")


def manifest_path_for(output: Path) -> Path:
    return output.with_name(output.name + ".manifest.json")


def config_from_manifest(path: str | Path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8"))["config"])


@contextmanager
def run_lock(run_dir: Path) -> Iterator[None]:
    """Single-writer guard: an exclusive lock file for the lifetime of the run."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{run_dir}: run directory is locked by another writer ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# input helpers


def _require(path: str | Path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p}: no such file")
    return p


def _records(path: str | Path, config: RunConfig):
    return load_records(_require(path), config.data.schema)


def _samples(path: str | Path, config: RunConfig) -> list[InstructionSample]:
    return build_instruction_samples(_records(path, config), config.data.schema, boundary=config.data.boundary)


def _texts(path: Path, config: RunConfig) -> list[str]:
    """Plain texts from a ``.txt`` (one per line) or a normalized ``.jsonl``."""
    if path.suffix == ".jsonl":
        samples = build_instruction_samples(load_records(path, config.data.schema), config.data.schema, boundary=config.data.boundary)
        return list(dict.fromkeys([s.instruction for s in samples])) + plain_documents(samples)
    return [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _load_lm(model_path: str | None, adapter_path: str | None, run_dir: str | None, tokenizer: TokenizerModel | None = None) -> CausalLM:
    if run_dir is not None:
        d = _require(run_dir)
        model_path = model_path or str(d / "base.npz")
        if adapter_path is None and (d / "adapter.npz").exists():
            adapter_path = str(d / "adapter.npz")
    if model_path is None:
        raise ConfigError("--model: a base checkpoint (or --run) is required")
    base, manifest = load_model(_require(model_path))
    recorded = manifest.get("tokenizer_fingerprint")
    if tokenizer is not None and recorded is not None and recorded != tokenizer.fingerprint():
        raise DataError(f"{model_path}: checkpoint was built with a different tokenizer")
    if adapter_path is not None:
        return load_adapter(_require(adapter_path), base)
    return base


def _generation_config(config: RunConfig, tokenizer: TokenizerModel):
    return config.decode_config(stop_token=tokenizer.eos_id)


def _predict(model: CausalLM, tokenizer: TokenizerModel, samples: Sequence[InstructionSample], config: RunConfig) -> list[str]:
    est = InstructionSummarizer.from_run_config(config)
    est.model_, est.tokenizer_ = model, tokenizer
    return est.predict(samples)


# subcommands


def cmd_build_tokenizer(args, config: RunConfig, argv) -> int:
    paths = [_require(p) for p in args.corpus]
    texts = [t for p in paths for t in _texts(p, config)]
    tok = train_bpe(texts, config.tokenizer.vocab_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tok.save(out)
    rate = compression_rate(tok, texts)
    print(f"vocab {len(tok)} merges {len(tok.merges)} compression {rate:.4f} tokens/char -> {out}")
    write_manifest(manifest_path_for(out), provenance("build-tokenizer", argv, config, paths, [out]))
    return EXIT_OK


def cmd_prepare_data(args, config: RunConfig, argv) -> int:
    schema = args.schema or config.data.schema
    config.data.schema = schema
    out = Path(args.out)
    if args.synthetic:
        records = synthetic_records(args.synthetic, schema, seed=args.seed)
        inputs = []
    else:
        if not args.input:
            raise ConfigError("--in: raw input file required (or --synthetic N)")
        raw = read_raw(_require(args.input))
        records = convert_csds(raw) if schema == "csds" else convert_samsum(raw)
        inputs = [args.input]
    for r in records:
        r.validate(schema)
    save_records(records, out)
    print(f"{len(records)} {schema} records -> {out}")
    write_manifest(manifest_path_for(out), provenance("prepare-data", argv, config, inputs, [out]))
    return EXIT_OK


def cmd_stats(args, config: RunConfig, argv) -> int:
    tok = TokenizerModel.load(_require(args.tokenizer))
    samples, counts = [], {}
    for p in args.data:
        s = _samples(p, config)
        counts[Path(p).stem] = len({x.record_id for x in s})
        samples.extend(s)
    report = dataset_stats(samples, tok, bucket_width=args.bucket_width, n_buckets=args.buckets, threshold=args.threshold, split_counts=counts)
    js = report.to_json()
    text = json.dumps(js, indent=2, ensure_ascii=False)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        write_manifest(manifest_path_for(out), provenance("stats", argv, config, [*args.data, args.tokenizer], [out]))
    print(text)
    return EXIT_OK


def cmd_train(args, config: RunConfig, argv) -> int:
    run_dir = Path(args.out)
    tok_path = _require(args.tokenizer)
    tok = TokenizerModel.load(tok_path)
    samples = _samples(args.data, config)
    inputs = [args.data, tok_path]
    base = None
    if config.model.base_checkpoint:
        base, _ = load_model(_require(config.model.base_checkpoint))
        inputs.append(config.model.base_checkpoint)
    pretrain = None
    if config.model.pretrain_corpus:
        pretrain = _texts(_require(config.model.pretrain_corpus), config)
        inputs.append(config.model.pretrain_corpus)
    with run_lock(run_dir):
        config.save(run_dir / "config.json")
        manifest = provenance("train", argv, config, inputs, [])
        manifest["status"] = "running"
        write_manifest(run_dir / "manifest.json", manifest)
        est = InstructionSummarizer.from_run_config(config, tokenizer=tok, base_model=base)
        try:
            est.fit(samples, pretrain_corpus=pretrain, out_dir=run_dir)
        except NumericError:
            manifest["status"] = "failed: non-finite loss or gradient"
            write_manifest(run_dir / "manifest.json", manifest)
            raise
        est.save(run_dir)
        outputs = ["config.json", "loss.csv", "tokenizer.json", "base.npz", "adapter.npz" if config.lora.enabled else "model.npz"]
        outputs += [str(p.relative_to(run_dir)) for p in est.checkpoints_]
        manifest.update(status="complete", outputs=outputs, final_loss=est.train_log_[-1][2] if est.train_log_ else None)
        write_manifest(run_dir / "manifest.json", manifest)
    print(f"trained {config.train.iterations} steps, final loss {manifest['final_loss']} -> {run_dir}")
    return EXIT_OK


def _prompt_items(path: Path, config: RunConfig, tok: TokenizerModel) -> list[tuple[str, list[int], InstructionSample | None, str]]:
    """(id, prompt ids, sample or None, prompt text) per prompt."""
    items = []
    if path.suffix == ".jsonl":
        lines = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        if lines and all("prompt" in obj for obj in lines):
            for i, obj in enumerate(lines):
                text = obj["prompt"]
                items.append((str(obj.get("id", i)), tok.encode(text, add_bos=True), None, text))
            return items
        for s in _samples(path, config):
            items.append((f"{s.record_id}/{s.summary_type}", [], s, s.prompt_text))
        return items
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if line.strip():
            text = line.replace("\\n", "\n")
            items.append((str(i), tok.encode(text, add_bos=True), None, text))
    return items


def cmd_generate(args, config: RunConfig, argv) -> int:
    tok = TokenizerModel.load(_require(args.tokenizer))
    model = _load_lm(args.model, args.adapter, args.run, tok)
    items = _prompt_items(_require(args.prompts), config, tok)
    est = InstructionSummarizer.from_run_config(config)
    est.model_, est.tokenizer_ = model, tok
    dcfg = _generation_config(config, tok)
    rng = torch.Generator().manual_seed(config.decode.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for ident, ids, sample, text in items:
            ids = est.prompt_ids(sample) if sample is not None else ids
            if len(ids) >= model.max_seq:
                ids = ids[: model.max_seq - 1]
            gen = tok.decode(decode(model, ids, dcfg, rng))
            fh.write(json.dumps({"id": ident, "prompt": text, "generation": gen}, ensure_ascii=False) + "\n")
    print(f"{len(items)} generations -> {out}")
    inputs = [args.tokenizer, args.prompts] + [p for p in (args.model, args.adapter) if p]
    write_manifest(manifest_path_for(out), provenance("generate", argv, config, inputs, [out]))
    return EXIT_OK


def _read_predictions(path: Path, samples: Sequence[InstructionSample]) -> list[str]:
    by_id = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                obj = json.loads(line)
                by_id[str(obj["id"])] = obj["generation"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{n}: expected {{id, generation}} ({exc})") from None
    out = []
    for s in samples:
        key = f"{s.record_id}/{s.summary_type}"
        if key not in by_id:
            raise DataError(f"{path}: no prediction for {key}")
        out.append(by_id[key])
    return out


def _embed_source(model: CausalLM | None, tok: TokenizerModel | None):
    if model is None or tok is None:
        return {}
    return {"embeddings": model.embedding_table().detach().double().numpy(), "tokenize_ids": tok.encode}


def cmd_evaluate(args, config: RunConfig, argv) -> int:
    samples = _samples(args.data, config)
    inputs = [args.data]
    tok = TokenizerModel.load(_require(args.tokenizer)) if args.tokenizer else None
    if args.predictions:
        inputs.append(args.predictions)
        model = _load_lm(args.model, None, None, tok) if args.model else None
        report = score_predictions(_read_predictions(_require(args.predictions), samples), samples, **_embed_source(model, tok))
    else:
        if tok is None:
            raise ConfigError("--tokenizer: required when generating predictions")
        adapters = list(args.adapter or [])
        if args.run and not adapters:
            ckpts = sorted((_require(args.run) / "checkpoints").glob("step*.npz"))
            kinds = [load_checkpoint(p)[0]["kind"] for p in ckpts]
            adapters = [str(p) for p, k in zip(ckpts, kinds) if k == "lora"][-config.eval.last_k :]
        reports = []
        if adapters:
            model_path = args.model or str(Path(args.run) / "base.npz")
            for a in adapters:
                lm = _load_lm(model_path, a, None, tok)
                reports.append(score_predictions(_predict(lm, tok, samples, config), samples, **_embed_source(lm, tok)))
                inputs.append(a)
        else:
            lm = _load_lm(args.model, None, args.run, tok)
            reports.append(score_predictions(_predict(lm, tok, samples, config), samples, **_embed_source(lm, tok)))
        report = reports[0] if len(reports) == 1 else average_reports(reports)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    print(report.text_table(name=args.name or out.stem))
    write_manifest(manifest_path_for(out), provenance("evaluate", argv, config, inputs, [out]))
    return EXIT_OK


def _report(path: str) -> MetricReport:
    p = _require(path)
    if p.is_dir():
        p = _require(p / "report.json")
    return MetricReport.load(p)


def cmd_compare_runs(args, config: RunConfig, argv) -> int:
    a, b = _report(args.a), _report(args.b)
    table = compare_reports(a, b)
    print(table.text(args.a, args.b))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(table.to_json(), indent=2), encoding="utf-8")
        write_manifest(manifest_path_for(out), provenance("compare-runs", argv, config, [args.a, args.b], [out]))
    return EXIT_OK


# parser


# shorthand flag -> config leaf; applied after --section.key overrides
SHORTHANDS = {
    "vocab_size": "tokenizer.vocab_size",
    "strategy": "decode.strategy",
    "beam_size": "decode.beam_size",
    "temperature": "decode.temperature",
    "top_p": "decode.top_p",
    "max_new_tokens": "decode.max_new_tokens",
}


def _decode_shorthands(sp) -> None:
    sp.add_argument("--strategy", choices=("greedy", "beam", "sample"))
    sp.add_argument("--beam-size", type=int)
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--top-p", type=float)
    sp.add_argument("--max-new-tokens", type=int)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neftsum", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run config JSON file")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("build-tokenizer", cmd_build_tokenizer, "train a byte-level BPE tokenizer")
    sp.add_argument("--corpus", nargs="+", required=True, help=".txt (one text per line) or normalized .jsonl")
    sp.add_argument("--vocab-size", type=int, help="shorthand for --tokenizer.vocab_size")
    sp.add_argument("--out", required=True)

    sp = add("prepare-data", cmd_prepare_data, "convert raw data to normalized JSONL records")
    sp.add_argument("--schema", choices=("csds", "samsum"))
    sp.add_argument("--in", dest="input")
    sp.add_argument("--synthetic", type=int, default=0, help="write N rule-generated toy records instead")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("stats", cmd_stats, "token-length statistics per dataset")
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--bucket-width", type=int, default=100)
    sp.add_argument("--buckets", type=int, default=20)
    sp.add_argument("--threshold", type=int, default=1200)
    sp.add_argument("--out")

    sp = add("train", cmd_train, "instruction-tune a model into a run directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--out", required=True, help="run directory")

    sp = add("generate", cmd_generate, "decode completions for prompts")
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--model", help="base model checkpoint")
    sp.add_argument("--adapter", help="adapter checkpoint")
    sp.add_argument("--run", help="run directory (base.npz and adapter.npz)")
    sp.add_argument("--prompt-file", "--prompts", dest="prompts", required=True, help=".txt (one prompt per line) or .jsonl")
    sp.add_argument("--out", required=True)
    _decode_shorthands(sp)

    sp = add("evaluate", cmd_evaluate, "score predictions or checkpoints on a test set")
    sp.add_argument("--data", required=True)
    sp.add_argument("--predictions", help="JSONL of {id, generation}")
    sp.add_argument("--tokenizer")
    sp.add_argument("--model")
    sp.add_argument("--adapter", action="append")
    sp.add_argument("--run")
    sp.add_argument("--name")
    sp.add_argument("--out", required=True)
    _decode_shorthands(sp)

    sp = add("compare-runs", cmd_compare_runs, "per-metric deltas between two reports")
    sp.add_argument("a", help="report JSON or directory holding report.json")
    sp.add_argument("b")
    sp.add_argument("--out")
    return p


def resolve_config(config_path: str | None, overrides: Sequence[str], shorthands: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then ``--section.key value`` flags."""
    if config_path is not None:
        _require(config_path)
    pairs = parse_override_args(overrides)
    pairs += [(SHORTHANDS[k], v) for k, v in (shorthands or {}).items() if k in SHORTHANDS and v is not None]
    return RunConfig.load(config_path).apply_overrides(pairs)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args.config, rest, vars(args))
        return args.fn(args, config, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, DataError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
