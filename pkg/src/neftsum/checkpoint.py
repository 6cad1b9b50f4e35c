"""Single-file checkpoints: an ``.npz`` archive with an embedded JSON manifest."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

FORMAT_TAG = "neftsum-ckpt/1"
_MANIFEST = "__manifest__"
_RNG = "__rng__"


def tensor_fingerprint(tensors: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous().cpu()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(
    path: str | Path,
    kind: str,
    tensors: Mapping[str, torch.Tensor],
    meta: Mapping[str, Any],
    rng_state: torch.Tensor | None = None,
) -> Path:
    path = Path(path)
    manifest = {
        "format": FORMAT_TAG,
        "kind": kind,
        "tensors": {n: {"dtype": str(t.dtype).replace("torch.", ""), "shape": list(t.shape)} for n, t in tensors.items()},
        "fingerprint": tensor_fingerprint(tensors),
        **meta,
    }
    arrays = {n: t.detach().cpu().numpy() for n, t in tensors.items()}
    arrays[_MANIFEST] = np.frombuffer(json.dumps(manifest, ensure_ascii=False).encode("utf-8"), dtype=np.uint8)
    if rng_state is not None:
        arrays[_RNG] = rng_state.numpy()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, torch.Tensor], torch.Tensor | None]:
    """Return ``(manifest, tensors, rng_state)``; refuses foreign or mismatched files."""
    with np.load(path, allow_pickle=False) as z:
        if _MANIFEST not in z.files:
            raise ValueError(f"{path}: not a checkpoint (no manifest)")
        manifest = json.loads(z[_MANIFEST].tobytes().decode("utf-8"))
        if manifest.get("format") != FORMAT_TAG:
            raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
        if kind is not None and manifest.get("kind") != kind:
            raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {manifest.get('kind')!r}")
        tensors = {n: torch.from_numpy(z[n].copy()) for n in manifest["tensors"]}
        rng = torch.from_numpy(z[_RNG].copy()) if _RNG in z.files else None
    if tensor_fingerprint(tensors) != manifest["fingerprint"]:
        raise ValueError(f"{path}: tensor contents do not match the recorded fingerprint")
    return manifest, tensors, rng


def save_model(path: str | Path, model, meta: Mapping[str, Any] | None = None) -> Path:
    """Dense weights plus model config. Refuses adapted models; merge first."""
    if model.lora is not None:
        raise ValueError("model carries an adapter; save the adapter separately or merge it")
    return save_checkpoint(path, "model", model.params, {"model_config": model.config.to_dict(), **(meta or {})})


def load_model(path: str | Path):
    from .model import CausalLM, ModelConfig

    manifest, tensors, _ = load_checkpoint(path, kind="model")
    return CausalLM(tensors, ModelConfig(**manifest["model_config"])), manifest
