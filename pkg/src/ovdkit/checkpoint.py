"""Shared checkpoint container.

A checkpoint is a single file holding named float arrays plus a
manifest describing them: name, shape, dtype, frozen flag, and the hash
of the config that produced them. Namespaces keep the stages apart:
``backbone.*`` for the dual encoder, ``region_prompt.*`` for prompts,
``localizer.*`` for the detector.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import torch
from torch import Tensor

FORMAT_VERSION = 1


def config_hash(config: dict) -> str:
    """Stable hash of a JSON-serializable config dict."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    arrays: dict[str, Tensor]
    manifest: dict = field(default_factory=dict)

    def namespace(self, prefix: str) -> dict[str, Tensor]:
        """Arrays under ``prefix.``, with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.arrays.items() if k.startswith(prefix + ".")}


def save_checkpoint(
    path: str | Path,
    arrays: dict[str, Tensor],
    config: dict,
    frozen: Iterable[str] = (),
    kind: str = "",
    extra: dict | None = None,
) -> None:
    frozen = set(frozen)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "config_hash": config_hash(config),
        "entries": {
            name: {
                "shape": list(t.shape),
                "dtype": str(t.dtype).removeprefix("torch."),
                "frozen": name in frozen,
            }
            for name, t in arrays.items()
        },
    }
    if extra:
        manifest.update(extra)
    payload = {"manifest": manifest, "arrays": {k: v.detach().cpu() for k, v in arrays.items()}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    manifest = payload["manifest"]
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format in {path}")
    arrays = payload["arrays"]
    for name, entry in manifest["entries"].items():
        if name not in arrays:
            raise ValueError(f"checkpoint {path} missing array {name!r} listed in manifest")
        if list(arrays[name].shape) != entry["shape"]:
            raise ValueError(f"checkpoint {path}: shape mismatch for {name!r}")
    return Checkpoint(arrays=arrays, manifest=manifest)
