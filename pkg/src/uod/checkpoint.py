"""Versioned checkpoint container.

One file holds any number of model segments (``stage1``, ``stage2``), each with
its config, a parameter-name -> shared/domain tag map and the state dict, plus
a snapshot of the domain registry. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import hashlib
import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from uod.domain import DomainRegistry
from uod.universal_conv import parameter_tags

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Segment:
    config: dict
    tags: dict  # parameter name -> "shared" | "domain<d>"
    state: dict  # state_dict (parameters and buffers)
    variant: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: nn.Module, config: dict, variant=None, **extra) -> "Segment":
        state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
        return cls(dict(config), parameter_tags(model), state, variant, dict(extra))

    def to_dict(self) -> dict:
        return {"config": self.config, "tags": self.tags, "state": self.state,
                "variant": self.variant, "extra": self.extra}


@dataclass
class Checkpoint:
    registry: list  # DomainRegistry.to_list()
    segments: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def domain_registry(self) -> DomainRegistry:
        return DomainRegistry.from_list(self.registry)

    def segment(self, name: str) -> Segment:
        if name not in self.segments:
            raise CheckpointError(f"checkpoint has no {name!r} segment (has {sorted(self.segments)})")
        return self.segments[name]

    def check_registry(self, registry: DomainRegistry) -> None:
        """Raise unless ``registry`` matches the snapshot (names, order, counts)."""
        mine = [(r["name"], r["num_landmarks"]) for r in self.registry]
        theirs = [(s.name, s.num_landmarks) for s in registry]
        if mine != theirs:
            raise CheckpointError(f"domain registry mismatch: checkpoint {mine} vs data {theirs}")

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        torch.save({"version": self.version, "registry": self.registry, "meta": self.meta,
                    "segments": {k: s.to_dict() for k, s in self.segments.items()}}, buf)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        raw = torch.load(io.BytesIO(data), map_location="cpu", weights_only=True)
        if raw.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {raw.get('version')}")
        segs = {k: Segment(**v) for k, v in raw["segments"].items()}
        return cls(raw["registry"], segs, raw.get("meta", {}), raw["version"])


def content_hash(data: bytes) -> str:
    """Git blob-style content hash (sha256 over a length-prefixed header)."""
    h = hashlib.sha256()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def file_hash(path) -> str:
    return content_hash(Path(path).read_bytes())


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write ``ckpt`` atomically and return its content hash."""
    data = ckpt.to_bytes()
    atomic_write_bytes(path, data)
    return content_hash(data)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return Checkpoint.from_bytes(path.read_bytes())
