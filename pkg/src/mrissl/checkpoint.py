"""Versioned checkpoint container.

A checkpoint is a ``torch.save`` dictionary::

    {"format": "mrissl-checkpoint", "version": 1,
     "encoder_spec": {...}, "heads": {name: spec dict},
     "state": {module name: state_dict}, "metadata": {...}}
"""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path
from typing import Any, Optional

import torch

from mrissl.encoders import ClassifierHead, ClassifierHeadSpec, Encoder, EncoderSpec

FORMAT = "mrissl-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def make_checkpoint(
    encoder: Encoder,
    modules: Optional[dict[str, torch.nn.Module]] = None,
    metadata: Optional[dict[str, Any]] = None,
) -> dict:
    modules = modules or {}
    heads = {}
    for name, m in modules.items():
        spec = getattr(m, "spec", None)
        heads[name] = dataclasses.asdict(spec) if dataclasses.is_dataclass(spec) else None
    return {
        "format": FORMAT,
        "version": VERSION,
        "encoder_spec": encoder.spec.to_dict(),
        "heads": heads,
        "state": {
            "encoder": {k: v.detach().clone() for k, v in encoder.state_dict().items()},
            **{n: {k: v.detach().clone() for k, v in m.state_dict().items()} for n, m in modules.items()},
        },
        "metadata": dict(metadata or {}),
    }


def save_checkpoint(ckpt: dict, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(ckpt, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path_or_ckpt) -> dict:
    if isinstance(path_or_ckpt, dict):
        ckpt = path_or_ckpt
    else:
        if not Path(path_or_ckpt).is_file():
            raise CheckpointError(f"checkpoint {path_or_ckpt} not found")
        ckpt = torch.load(path_or_ckpt, map_location="cpu", weights_only=True)
    if ckpt.get("format") != FORMAT:
        raise CheckpointError("not an mrissl checkpoint")
    if ckpt.get("version", 0) > VERSION:
        raise CheckpointError(f"checkpoint version {ckpt['version']} is newer than supported ({VERSION})")
    return ckpt


def encoder_from_checkpoint(ckpt: dict) -> Encoder:
    ckpt = load_checkpoint(ckpt)
    enc = Encoder(EncoderSpec.from_dict(ckpt["encoder_spec"]))
    enc.load_state_dict(ckpt["state"]["encoder"])
    return enc


def classifier_head_from_checkpoint(ckpt: dict, name: str = "classifier") -> ClassifierHead:
    spec = ClassifierHeadSpec(**ckpt["heads"][name])
    head = ClassifierHead(spec)
    head.load_state_dict(ckpt["state"][name])
    return head
