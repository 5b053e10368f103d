"""Named-tensor archive shared by generator, discriminator and training checkpoints.

Arrays are stored with safetensors; structured metadata (configs, epoch,
RNG state, ...) is a single JSON document under the ``msgdn`` metadata key.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Dict, Mapping, Tuple

import torch
from safetensors.torch import load_file, save_file, safe_open

from .errors import ConfigError

FORMAT = "msgdn-archive"
FORMAT_VERSION = 1


def save_archive(path, tensors: Mapping[str, torch.Tensor], meta: dict) -> None:
    path = Path(path)
    payload = {"format": FORMAT, "version": FORMAT_VERSION, **meta}
    tensors = {k: v.detach().contiguous().cpu() for k, v in tensors.items()}
    tmp = path.with_name(path.name + ".tmp")
    save_file(tensors, str(tmp), metadata={"msgdn": json.dumps(payload, sort_keys=True)})
    os.replace(tmp, path)


def load_archive(path) -> Tuple[Dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"archive not found: {path}")
    with safe_open(str(path), framework="pt") as f:
        raw = (f.metadata() or {}).get("msgdn")
    if raw is None:
        raise ConfigError(f"{path} is not an msgdn archive (missing metadata)")
    meta = json.loads(raw)
    if meta.get("format") != FORMAT or meta.get("version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported archive format {meta.get('format')} v{meta.get('version')}")
    return load_file(str(path)), meta


def split_prefix(tensors: Mapping[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def with_prefix(tensors: Mapping[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in tensors.items()}


def load_state_strict(module: torch.nn.Module, state: Mapping[str, torch.Tensor], what: str) -> None:
    """Copy `state` into `module`, failing on any missing, extra or mis-shaped entry."""
    expected = module.state_dict()
    missing = sorted(set(expected) - set(state))
    extra = sorted(set(state) - set(expected))
    bad = [
        f"{k}: archive {tuple(state[k].shape)} vs config {tuple(v.shape)}"
        for k, v in expected.items()
        if k in state and tuple(state[k].shape) != tuple(v.shape)
    ]
    if missing or extra or bad:
        lines = [f"{what} does not match its configuration:"]
        if missing:
            lines.append(f"  missing: {missing[:10]}{' ...' if len(missing) > 10 else ''}")
        if extra:
            lines.append(f"  unexpected: {extra[:10]}{' ...' if len(extra) > 10 else ''}")
        lines.extend("  shape " + b for b in bad[:10])
        raise ConfigError("\n".join(lines))
    module.load_state_dict(state, strict=True)
