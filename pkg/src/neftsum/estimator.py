"""Estimator wrapper around the full instruction-tuning pipeline.

``fit`` trains (or reuses) a tokenizer, builds or reuses a base model with an
optional causal-LM pretraining stage on plain documents, attaches a LoRA
adapter and instruction-tunes it with noisy embeddings. ``predict`` decodes
summaries for new samples.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .adapters import LoraConfig, attach, load_adapter, merge, save_adapter
from .checkpoint import load_model, save_model
from .corpus import InstructionSample, encode_prompt, lm_batches, plain_documents, tokenize_batches
from .decode import DecodeConfig, generate
from .metrics import MetricReport, score_predictions
from .model import CausalLM, ModelConfig, init_params
from .neftune import NeftuneConfig
from .tokenizer import TokenizerModel, train_bpe
from .trainer import TrainConfig, train

logger = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def check_samples(X) -> list[InstructionSample]:
    """Validate an estimator input: a non-empty sequence of instruction samples."""
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError("expected a sequence of InstructionSample")
    X = list(X)
    if not X:
        raise ValueError("empty input")
    for i, s in enumerate(X):
        if not isinstance(s, InstructionSample):
            raise TypeError(f"element {i} is {type(s).__name__}, not InstructionSample")
    return X


class InstructionSummarizer(BaseEstimator):
    """Dialogue summarizer trained by LoRA + noisy-embedding instruction tuning.

    Parameters mirror the run-config leaves. ``tokenizer`` and ``base_model``
    may be supplied pre-built; otherwise ``fit`` creates them.

    Fitted attributes: ``tokenizer_``, ``base_model_``, ``model_``,
    ``train_log_``, ``pretrain_log_``, ``checkpoints_``.
    """

    def __init__(
        self,
        preset: str = "desk",
        model_overrides: dict | None = None,
        vocab_size: int = 1024,
        max_len: int = 512,
        dtype: str = "float32",
        init_seed: int = 0,
        pretrain_iterations: int = 0,
        pretrain_learning_rate: float = 3e-3,
        pretrain_batch_size: int = 8,
        use_lora: bool = True,
        lora_rank: int = 9,
        lora_alpha: float = 18.0,
        lora_dropout: float = 0.1,
        neftune_alpha: float = 5.0,
        learning_rate: float = 5e-5,
        iterations: int = 9000,
        batch_size: int = 2,
        accumulation_steps: int = 4,
        clip_theta: float = 1.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        adam_eps: float = 1e-8,
        checkpoint_every: int = 1000,
        keep_last: int = 3,
        loss_on_prompt: bool = False,
        strategy: str = "greedy",
        beam_size: int = 1,
        temperature: float = 1.0,
        top_p: float = 1.0,
        max_new_tokens: int = 128,
        decode_seed: int = 0,
        seed: int = 0,
        tokenizer: TokenizerModel | None = None,
        base_model: CausalLM | None = None,
    ):
        self.preset = preset
        self.model_overrides = model_overrides
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.dtype = dtype
        self.init_seed = init_seed
        self.pretrain_iterations = pretrain_iterations
        self.pretrain_learning_rate = pretrain_learning_rate
        self.pretrain_batch_size = pretrain_batch_size
        self.use_lora = use_lora
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.lora_dropout = lora_dropout
        self.neftune_alpha = neftune_alpha
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.batch_size = batch_size
        self.accumulation_steps = accumulation_steps
        self.clip_theta = clip_theta
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.checkpoint_every = checkpoint_every
        self.keep_last = keep_last
        self.loss_on_prompt = loss_on_prompt
        self.strategy = strategy
        self.beam_size = beam_size
        self.temperature = temperature
        self.top_p = top_p
        self.max_new_tokens = max_new_tokens
        self.decode_seed = decode_seed
        self.seed = seed
        self.tokenizer = tokenizer
        self.base_model = base_model

    @classmethod
    def from_run_config(cls, cfg, tokenizer: TokenizerModel | None = None, base_model: CausalLM | None = None) -> "InstructionSummarizer":
        """Map a :class:`~neftsum.config.RunConfig` onto estimator parameters."""
        m = cfg.model
        overrides = {k: getattr(m, k) for k in ("d_model", "n_heads", "n_layers", "ffn_dim", "max_seq") if getattr(m, k) is not None}
        overrides.update(rope_base=m.rope_base, norm_eps=m.norm_eps)
        t, d = cfg.train, cfg.decode
        return cls(
            preset=m.preset,
            model_overrides=overrides,
            vocab_size=cfg.tokenizer.vocab_size,
            max_len=cfg.data.max_len,
            dtype=m.dtype,
            init_seed=m.init_seed,
            pretrain_iterations=m.pretrain_iterations,
            pretrain_learning_rate=m.pretrain_learning_rate,
            use_lora=cfg.lora.enabled,
            lora_rank=cfg.lora.rank,
            lora_alpha=cfg.lora.alpha,
            lora_dropout=cfg.lora.dropout,
            neftune_alpha=cfg.neftune.alpha if cfg.neftune.enabled else 0.0,
            learning_rate=t.learning_rate,
            iterations=t.iterations,
            batch_size=t.batch_size,
            accumulation_steps=t.accumulation_steps,
            clip_theta=t.clip_theta,
            beta1=t.beta1,
            beta2=t.beta2,
            adam_eps=t.adam_eps,
            checkpoint_every=t.checkpoint_every,
            keep_last=cfg.eval.last_k,
            loss_on_prompt=cfg.data.loss_on_prompt,
            strategy=d.strategy,
            beam_size=d.beam_size,
            temperature=d.temperature,
            top_p=d.top_p,
            max_new_tokens=d.max_new_tokens,
            decode_seed=d.seed,
            seed=t.seed,
            tokenizer=tokenizer,
            base_model=base_model,
        )

    # component configs

    def lora_config(self) -> LoraConfig:
        return LoraConfig(rank=self.lora_rank, alpha=self.lora_alpha, dropout_p=self.lora_dropout, seed=self.seed)

    def neftune_config(self) -> NeftuneConfig:
        return NeftuneConfig(alpha=self.neftune_alpha, enabled=self.neftune_alpha > 0, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            iterations=self.iterations,
            batch_size=self.batch_size,
            accumulation_steps=self.accumulation_steps,
            clip_theta=self.clip_theta,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            seed=self.seed,
            checkpoint_every=self.checkpoint_every,
            keep_last=self.keep_last,
        )

    def decode_config(self, tokenizer: TokenizerModel) -> DecodeConfig:
        return DecodeConfig(
            strategy=self.strategy,
            beam_size=self.beam_size,
            temperature=self.temperature,
            top_p=self.top_p,
            max_new_tokens=self.max_new_tokens,
            stop_token=tokenizer.eos_id,
            seed=self.decode_seed,
        )

    # stages

    def _build_base(self, tokenizer: TokenizerModel, documents: Sequence[str], out_dir: Path | None) -> CausalLM:
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        cfg = ModelConfig.preset(self.preset, **{**(self.model_overrides or {}), "vocab_size": len(tokenizer)})
        base = CausalLM(init_params(cfg, seed=self.init_seed, dtype=_DTYPES[self.dtype]), cfg)
        self.pretrain_log_ = []
        if self.pretrain_iterations > 0:
            stream = lm_batches(documents, tokenizer, min(self.max_len, cfg.max_seq), self.pretrain_batch_size, seed=self.seed)
            pcfg = TrainConfig(
                learning_rate=self.pretrain_learning_rate,
                iterations=self.pretrain_iterations,
                batch_size=self.pretrain_batch_size,
                accumulation_steps=1,
                clip_theta=self.clip_theta,
                seed=self.seed,
                checkpoint_every=max(1, self.pretrain_iterations),
            )
            meta = {"tokenizer_fingerprint": tokenizer.fingerprint(), "stage": "pretrain"}
            result = train(base, stream, pcfg, out_dir=out_dir / "pretrain" if out_dir else None, meta=meta)
            self.pretrain_log_ = result.log
            logger.info("pretraining finished at loss %.4f", result.final_loss)
        return base

    def fit(self, X, y=None, pretrain_corpus: Sequence[str] | None = None, out_dir: str | Path | None = None):
        """Train on instruction samples ``X``; ``y`` is ignored (targets live in ``X``).

        ``pretrain_corpus`` feeds the causal-LM stage; it defaults to the
        untemplated dialogues and summaries of ``X``.
        """
        samples = check_samples(X)
        out = Path(out_dir) if out_dir is not None else None
        documents = list(pretrain_corpus) if pretrain_corpus is not None else plain_documents(samples)
        if self.tokenizer is not None:
            tok = self.tokenizer
        else:
            texts = [s.instruction for s in samples] + plain_documents(samples) + documents
            tok = train_bpe(texts, self.vocab_size)
        if self.base_model is not None:
            base = CausalLM(dict(self.base_model.params), self.base_model.config)
            if base.vocab_size != len(tok):
                raise ValueError(f"base model vocabulary {base.vocab_size} != tokenizer size {len(tok)}")
            self.pretrain_log_ = []
        else:
            base = self._build_base(tok, documents, out)
        model = attach(base, self.lora_config()) if self.use_lora else CausalLM(dict(base.params), base.config)
        stream = tokenize_batches(
            samples, tok, min(self.max_len, base.max_seq), self.batch_size, seed=self.seed, loss_on_prompt=self.loss_on_prompt
        )
        if len(stream.rows) == 0:
            raise ValueError("every sample overflows max_len")
        meta = {"tokenizer_fingerprint": tok.fingerprint()}
        result = train(model, stream, self.train_config(), self.neftune_config(), out_dir=out, meta=meta)
        self.tokenizer_ = tok
        self.base_model_ = base
        self.model_ = model
        self.train_log_ = result.log
        self.checkpoints_ = result.checkpoints
        return self

    # inference

    def prompt_ids(self, sample: InstructionSample) -> list[int]:
        check_is_fitted(self, "model_")
        limit = min(self.max_len, self.model_.max_seq)
        full = encode_prompt(sample, self.tokenizer_)
        room = limit - min(self.max_new_tokens, limit // 2)
        if len(full) <= room:
            return full
        fixed = len(encode_prompt(sample, self.tokenizer_, dialogue_budget=0))
        return encode_prompt(sample, self.tokenizer_, dialogue_budget=max(0, room - fixed))

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        samples = check_samples(X)
        cfg = self.decode_config(self.tokenizer_)
        rng = torch.Generator().manual_seed(self.decode_seed)
        return [self.tokenizer_.decode(generate(self.model_, self.prompt_ids(s), cfg, rng)) for s in samples]

    def evaluate(self, X, predictions: Sequence[str] | None = None) -> MetricReport:
        samples = check_samples(X)
        preds = self.predict(samples) if predictions is None else list(predictions)
        table = self.model_.embedding_table().detach().double().numpy()
        return score_predictions(preds, samples, embeddings=table, tokenize_ids=self.tokenizer_.encode)

    def score(self, X, y=None) -> float:
        """Mean ROUGE-1 F1 (0-100) over summary types."""
        report = self.evaluate(X)
        return sum(s.rouge1.f1 for s in report.scores.values()) / len(report.scores)

    def merged_model(self) -> CausalLM:
        """Dense model with the adapter folded in; the fitted adapter stays usable."""
        check_is_fitted(self, "model_")
        if self.model_.lora is None:
            return CausalLM(dict(self.model_.params), self.model_.config)
        twin = self.model_.lora.with_factors({})
        return CausalLM(merge(CausalLM(self.model_.params, self.model_.config, lora=twin)), self.model_.config)

    # persistence

    def save(self, directory: str | Path) -> Path:
        check_is_fitted(self, "model_")
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.tokenizer_.save(d / "tokenizer.json")
        meta = {"tokenizer_fingerprint": self.tokenizer_.fingerprint()}
        save_model(d / "base.npz", self.base_model_, meta)
        if self.model_.lora is not None:
            save_adapter(d / "adapter.npz", self.model_, meta)
        else:
            save_model(d / "model.npz", self.model_, meta)
        params = {k: v for k, v in self.get_params().items() if k not in ("tokenizer", "base_model")}
        (d / "estimator.json").write_text(json.dumps(params, indent=2), encoding="utf-8")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "InstructionSummarizer":
        d = Path(directory)
        est = cls(**json.loads((d / "estimator.json").read_text(encoding="utf-8")))
        est.tokenizer_ = TokenizerModel.load(d / "tokenizer.json")
        est.base_model_, _ = load_model(d / "base.npz")
        if (d / "adapter.npz").exists():
            est.model_ = load_adapter(d / "adapter.npz", est.base_model_)
        else:
            est.model_, _ = load_model(d / "model.npz")
        est.train_log_, est.pretrain_log_, est.checkpoints_ = [], [], []
        return est
