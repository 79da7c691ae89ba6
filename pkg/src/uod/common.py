"""Small helpers shared by both training stages."""

from __future__ import annotations

import random
from typing import Iterator, Sequence

import numpy as np
import torch


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


def seed_everything(seed: int) -> np.random.Generator:
    random.seed(seed)
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def round_robin_batches(sizes: Sequence[int], batch_size: int, rng: np.random.Generator) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(domain, indices)`` batches: each batch comes from one domain and
    domains take turns until every domain's shuffled index list is used up."""
    queues = []
    for n in sizes:
        perm = rng.permutation(n)
        queues.append([perm[i:i + batch_size] for i in range(0, n, batch_size)])
    for k in range(max((len(q) for q in queues), default=0)):
        for d, q in enumerate(queues):
            if k < len(q):
                yield d, q[k]


def images_to_tensor(pixels: Sequence[np.ndarray], channels: int = 1, dtype=torch.float32) -> torch.Tensor:
    """Stack H x W x C arrays into B x channels x H x W, replicating grayscale."""
    arr = np.stack([np.asarray(p) for p in pixels]).transpose(0, 3, 1, 2)
    t = torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype)
    if t.shape[1] != channels:
        if t.shape[1] != 1:
            raise ValueError(f"cannot map {t.shape[1]} channels to {channels}")
        t = t.expand(-1, channels, -1, -1).contiguous()
    return t


def check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss).all():
        raise NumericError(f"non-finite loss at {where}")
