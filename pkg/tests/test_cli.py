import json
import os

import pytest

from neftsum.cli import config_from_manifest, main, manifest_path_for, run_lock
from neftsum.config import RunConfig
from neftsum.corpus import DataError

SMALL = {
    "tokenizer": {"vocab_size": 300},
    "data": {"max_len": 192},
    "model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "ffn_dim": 24, "max_seq": 192, "pretrain_iterations": 2},
    "train": {"iterations": 4, "checkpoint_every": 2, "learning_rate": 1e-2},
    "decode": {"max_new_tokens": 4},
    "eval": {"last_k": 2},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["prepare-data", "--schema", "csds", "--synthetic", "2", "--seed", "1", "--out", str(d / "train.jsonl")]) == 0
    assert main(["prepare-data", "--schema", "samsum", "--synthetic", "2", "--out", str(d / "sam.jsonl"), "--config", str(cfg)]) == 0
    assert main(["build-tokenizer", "--corpus", str(d / "train.jsonl"), "--out", str(d / "tok.json"), "--config", str(cfg)]) == 0
    rc = main(["train", "--data", str(d / "train.jsonl"), "--tokenizer", str(d / "tok.json"), "--out", str(d / "run"), "--config", str(cfg)])
    assert rc == 0
    return d


def test_train_run_directory_layout(workspace):
    run = workspace / "run"
    for name in ("manifest.json", "config.json", "loss.csv", "base.npz", "adapter.npz", "tokenizer.json", "estimator.json"):
        assert (run / name).exists(), name
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["step000002.npz", "step000004.npz"]
    assert not (run / ".lock").exists()
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "complete" and manifest["final_loss"] is not None
    assert {"config", "seeds", "inputs", "versions"} <= set(manifest)
    assert all(len(h) == 64 for h in manifest["inputs"].values())


def test_manifest_reconstructs_config(workspace):
    want = RunConfig.from_dict(SMALL).to_dict()
    assert config_from_manifest(workspace / "run" / "manifest.json").to_dict() == want
    assert config_from_manifest(manifest_path_for(workspace / "tok.json")).tokenizer.vocab_size == 300
    assert RunConfig.load(workspace / "run" / "config.json").to_dict() == want


def test_stats_and_generate(workspace):
    assert main(["stats", "--data", str(workspace / "train.jsonl"), "--tokenizer", str(workspace / "tok.json"), "--out", str(workspace / "stats.json")]) == 0
    stats = json.loads((workspace / "stats.json").read_text())
    assert "summary_histogram" in stats
    out = workspace / "gen.jsonl"
    assert main(["generate", "--tokenizer", str(workspace / "tok.json"), "--run", str(workspace / "run"), "--prompt-file", str(workspace / "train.jsonl"), "--out", str(out), "--max-new-tokens", "3", "--config", str(workspace / "small.json")]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 6 and {"id", "prompt", "generation"} <= set(rows[0])
    assert rows[0]["id"].endswith(("/all", "/user", "/agent"))
    txt = workspace / "prompts.txt"
    txt.write_text("hello\n你好\n")
    assert main(["generate", "--tokenizer", str(workspace / "tok.json"), "--run", str(workspace / "run"), "--prompts", str(txt), "--out", str(workspace / "g2.jsonl"), "--strategy", "beam", "--beam-size", "2"]) == 0
    assert manifest_path_for(workspace / "g2.jsonl").exists()


def reference_predictions(workspace, data="train.jsonl", schema="csds"):
    from neftsum.corpus import build_instruction_samples, load_records

    samples = build_instruction_samples(load_records(workspace / data, schema), schema)
    path = workspace / f"refs-{schema}.jsonl"
    path.write_text("".join(json.dumps({"id": f"{s.record_id}/{s.summary_type}", "generation": s.summary}, ensure_ascii=False) + "\n" for s in samples))
    return path


@pytest.fixture(scope="module")
def report_a(workspace):
    out = workspace / "A" / "report.json"
    assert main(["evaluate", "--data", str(workspace / "train.jsonl"), "--predictions", str(reference_predictions(workspace)), "--out", str(out)]) == 0
    return out


def test_evaluate_references_as_candidates(report_a):
    rep = json.loads(report_a.read_text())
    assert rep["types"] == ["all", "user", "agent"]
    for scores in rep["scores"].values():
        for key in ("rouge1", "rouge2", "rougeL"):
            assert scores[key]["f"] == pytest.approx(100.0)
        assert scores["bleu"] == pytest.approx(100.0)


def test_evaluate_prints_table(workspace, capsys):
    out = workspace / "A2" / "report.json"
    assert main(["evaluate", "--data", str(workspace / "train.jsonl"), "--predictions", str(reference_predictions(workspace)), "--out", str(out), "--name", "refs"]) == 0
    text = capsys.readouterr().out
    assert "ROUGE-1" in text and "refs" in text and "published reference" in text


def test_evaluate_checkpoints_and_compare(workspace, report_a, capsys):
    out = workspace / "B" / "report.json"
    rc = main(["evaluate", "--data", str(workspace / "train.jsonl"), "--tokenizer", str(workspace / "tok.json"), "--run", str(workspace / "run"), "--out", str(out), "--config", str(workspace / "small.json")])
    assert rc == 0
    assert json.loads(out.read_text())["n_checkpoints"] == 2
    assert main(["compare-runs", str(report_a.parent), str(report_a.parent), "--out", str(workspace / "delta.json")]) == 0
    delta = json.loads((workspace / "delta.json").read_text())
    assert all(cell["delta"] == 0 for row in delta["rows"].values() for cell in row.values())
    capsys.readouterr()
    assert main(["compare-runs", str(report_a), str(out)]) == 0
    text = capsys.readouterr().out
    assert all(label in text for label in ("ROUGE-1", "ROUGE-2", "ROUGE-L", "BLEU", "EmbedScore"))


def test_compare_csds_against_samsum_fails(workspace, report_a):
    preds = reference_predictions(workspace, "sam.jsonl", "samsum")
    sam = workspace / "S" / "report.json"
    assert main(["evaluate", "--data", str(workspace / "sam.jsonl"), "--predictions", str(preds), "--out", str(sam), "--data.schema", "samsum"]) == 0
    assert main(["compare-runs", str(report_a), str(sam)]) == 3


def test_exit_codes(workspace, tmp_path):
    assert main(["train", "--data", "nope.jsonl", "--tokenizer", "nope.json", "--out", str(tmp_path / "r")]) == 3
    assert main(["build-tokenizer", "--corpus", str(workspace / "train.jsonl"), "--out", str(tmp_path / "t.json"), "--tokenizer.vocab_sise", "300"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lora": {"rank": -1}}))
    assert main(["build-tokenizer", "--corpus", str(workspace / "train.jsonl"), "--out", str(tmp_path / "t.json"), "--config", str(bad)]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["generate", "--tokenizer", str(workspace / "tok.json"), "--prompts", str(workspace / "train.jsonl"), "--out", str(tmp_path / "g.jsonl")]) == 2


def test_numeric_failure_exit(workspace, tmp_path):
    cfg = dict(SMALL, train={"iterations": 2, "learning_rate": 1e30, "checkpoint_every": 1}, lora={"enabled": False})
    cfg["model"] = dict(SMALL["model"], pretrain_iterations=0)
    path = tmp_path / "hot.json"
    path.write_text(json.dumps(cfg))
    rc = main(["train", "--data", str(workspace / "train.jsonl"), "--tokenizer", str(workspace / "tok.json"), "--out", str(tmp_path / "r"), "--config", str(path), "--train.iterations", "6"])
    assert rc == 4
    assert json.loads((tmp_path / "r" / "manifest.json").read_text())["status"].startswith("failed")


def test_adapter_against_wrong_base_is_refused(workspace, tmp_path):
    other = tmp_path / "other"
    rc = main(["train", "--data", str(workspace / "train.jsonl"), "--tokenizer", str(workspace / "tok.json"), "--out", str(other), "--config", str(workspace / "small.json"), "--model.init_seed", "5", "--train.iterations", "1"])
    assert rc == 0
    rc = main(["generate", "--tokenizer", str(workspace / "tok.json"), "--model", str(other / "base.npz"), "--adapter", str(workspace / "run" / "adapter.npz"), "--prompts", str(workspace / "train.jsonl"), "--out", str(tmp_path / "g.jsonl")])
    assert rc == 3


def test_tokenizer_mismatch_is_refused(workspace, tmp_path):
    assert main(["build-tokenizer", "--corpus", str(workspace / "sam.jsonl"), "--out", str(tmp_path / "t.json"), "--vocab-size", "300", "--data.schema", "samsum"]) == 0
    rc = main(["generate", "--tokenizer", str(tmp_path / "t.json"), "--run", str(workspace / "run"), "--prompts", str(workspace / "train.jsonl"), "--out", str(tmp_path / "g.jsonl")])
    assert rc == 3


def test_run_directory_is_single_writer(workspace, tmp_path):
    with run_lock(tmp_path):
        assert (tmp_path / ".lock").exists()
        with pytest.raises(DataError, match="locked"):
            with run_lock(tmp_path):
                pass
    assert not (tmp_path / ".lock").exists()
    (tmp_path / ".lock").write_text(str(os.getpid()))
    rc = main(["train", "--data", str(workspace / "train.jsonl"), "--tokenizer", str(workspace / "tok.json"), "--out", str(tmp_path), "--config", str(workspace / "small.json")])
    assert rc == 3 and not (tmp_path / "manifest.json").exists()
