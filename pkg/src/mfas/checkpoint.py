"""Versioned checkpoint container: named tensors + configs as YAML text."""

from __future__ import annotations

from pathlib import Path

import torch
import yaml

FORMAT_TAG = "mfas-checkpoint/1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, sections: dict[str, dict], configs: dict[str, dict], meta: dict | None = None) -> None:
    """``sections`` maps a name (encoder, quantizer, teacher, ctc_head, ...) to a state dict."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT_TAG,
        "configs": {k: yaml.safe_dump(v, sort_keys=True) for k, v in configs.items()},
        "tensors": {name: {k: v.detach().cpu() for k, v in sd.items()} for name, sd in sections.items()},
        "meta": meta or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[dict, dict, dict]:
    """Returns (sections, configs, meta)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    configs = {k: yaml.safe_load(v) for k, v in payload["configs"].items()}
    return payload["tensors"], configs, payload.get("meta", {})
