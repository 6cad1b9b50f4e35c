import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from neftsum.cli import resolve_config
from neftsum.config import ConfigError, RunConfig, parse_override_args


def test_defaults_follow_published_training_setup():
    cfg = RunConfig()
    assert cfg.train.learning_rate == 5e-5 and cfg.train.iterations == 9000
    assert (cfg.train.batch_size, cfg.train.accumulation_steps, cfg.train.clip_theta) == (2, 4, 1.0)
    assert (cfg.lora.rank, cfg.lora.dropout, cfg.lora.target) == (9, 0.1, "fused_qkv")
    assert cfg.neftune.alpha == 5.0 and cfg.model.preset == "desk"
    m = cfg.model_config(vocab_size=1024)
    assert (m.d_model, m.n_heads, m.n_layers, m.ffn_dim, m.max_seq) == (128, 4, 4, 344, 512)


def test_unknown_keys_report_their_path():
    with pytest.raises(ConfigError, match=r"^train\.learnig_rate: unknown key"):
        RunConfig.from_dict({"train": {"learnig_rate": 1}})
    with pytest.raises(ConfigError, match=r"^optim: unknown section"):
        RunConfig.from_dict({"optim": {}})
    with pytest.raises(ConfigError, match=r"^lora\.rank: expected int"):
        RunConfig.from_dict({"lora": {"rank": 2.5}})
    with pytest.raises(ConfigError, match=r"^lora: "):
        RunConfig.from_dict({"lora": {"rank": 0}})
    with pytest.raises(ConfigError, match=r"^model\.preset"):
        RunConfig.from_dict({"model": {"preset": "huge"}})


def test_coercion_rules():
    cfg = RunConfig()
    cfg.apply_overrides([("lora.enabled", "no"), ("model.d_model", "64"), ("model.n_heads", "null"), ("train.learning_rate", "1e-3")])
    assert cfg.lora.enabled is False and cfg.model.d_model == 64 and cfg.model.n_heads is None
    assert cfg.train.learning_rate == 1e-3
    with pytest.raises(ConfigError, match="may not be null"):
        cfg.set("train.seed", None)
    with pytest.raises(ConfigError, match="expected bool"):
        cfg.set("lora.enabled", "maybe")


def test_parse_override_args():
    assert parse_override_args(["--a.b", "1", "--c.d=x=y"]) == [("a.b", "1"), ("c.d", "x=y")]
    with pytest.raises(ConfigError):
        parse_override_args(["--a.b"])
    with pytest.raises(ConfigError):
        parse_override_args(["stray"])


def test_roundtrip(tmp_path):
    cfg = RunConfig().apply_overrides([("decode.strategy", "beam"), ("decode.beam_size", "4")])
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json").to_dict() == cfg.to_dict()
    (tmp_path / "bad.json").write_text("{oops")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(tmp_path / "bad.json")


# leaf -> strategy of valid values
LEAVES = {
    "train.learning_rate": st.floats(1e-6, 1.0),
    "train.iterations": st.integers(1, 10_000),
    "train.seed": st.integers(0, 2**31),
    "lora.rank": st.integers(1, 32),
    "lora.dropout": st.floats(0.0, 0.9),
    "neftune.alpha": st.floats(0.0, 20.0),
    "decode.max_new_tokens": st.integers(1, 512),
    "decode.top_p": st.floats(0.05, 1.0),
    "data.max_len": st.integers(8, 2048),
    "eval.last_k": st.integers(1, 9),
    "tokenizer.vocab_size": st.integers(259, 4096),
}


def get(cfg, dotted):
    sec, key = dotted.split(".")
    return getattr(getattr(cfg, sec), key)


@given(st.data())
def test_flag_beats_file_beats_default(tmp_path_factory, data):
    leaf = data.draw(st.sampled_from(sorted(LEAVES)))
    file_value = data.draw(LEAVES[leaf])
    flag_value = data.draw(LEAVES[leaf])
    sec, key = leaf.split(".")
    path = tmp_path_factory.mktemp("cfg") / "c.json"
    path.write_text(json.dumps({sec: {key: file_value}}))
    default = get(RunConfig(), leaf)
    assert get(resolve_config(None, []), leaf) == default
    assert get(resolve_config(str(path), []), leaf) == file_value
    assert get(resolve_config(str(path), [f"--{leaf}", repr(flag_value)]), leaf) == flag_value
    assert get(resolve_config(None, [f"--{leaf}={flag_value!r}"]), leaf) == flag_value


def test_shorthand_flags_override_dotted():
    cfg = resolve_config(None, ["--decode.top_p", "0.5"], {"top_p": 0.9, "strategy": None})
    assert cfg.decode.top_p == 0.9 and cfg.decode.strategy == "greedy"
