"""Checkpoints: one named-tensor file plus a key=value manifest.

A checkpoint stem `X` produces `X.bin` (model parameters under their own
names, optimizer moments under `opt.m.*` / `opt.v.*`, the optimizer step
under `opt.step`) and `X.manifest` (UTF-8 `key=value` lines). Loading and
re-saving is byte-stable, which is what makes split-and-resume bit-exact.
"""

from __future__ import annotations

import os
from typing import Optional

import numpy as np

from . import tensor as T


def save_checkpoint(stem: str, model, optimizer=None, manifest: Optional[dict] = None):
    named = dict(model.named_parameters())
    payload = {name: p.data for name, p in named.items()}
    if optimizer is not None:
        for key, arr in optimizer.state_dict().items():
            payload[f"opt.{key}"] = arr
    os.makedirs(os.path.dirname(stem) or ".", exist_ok=True)
    T.save_tensors(stem + ".bin", payload)
    lines = []
    for key, value in sorted((manifest or {}).items()):
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"manifest entry {key!r} has forbidden characters")
        lines.append(f"{key}={value}\n")
    with open(stem + ".manifest", "w", encoding="utf-8") as f:
        f.writelines(lines)


def load_checkpoint(stem: str):
    """Returns (model_state, optimizer_state_or_None, manifest dict)."""
    payload = T.load_tensors(stem + ".bin")
    model_state, opt_state = {}, {}
    for name, arr in payload.items():
        if name.startswith("opt."):
            opt_state[name[len("opt."):]] = arr
        else:
            model_state[name] = arr
    manifest = {}
    with open(stem + ".manifest", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, value = line.partition("=")
            manifest[key] = value
    return model_state, (opt_state or None), manifest


def restore_model(stem: str, model) -> dict:
    """Load just the weights into an existing model; returns the manifest."""
    state, _, manifest = load_checkpoint(stem)
    model.load_state_dict(state)
    return manifest


def checkpoint_exists(stem: str) -> bool:
    return os.path.exists(stem + ".bin") and os.path.exists(stem + ".manifest")
