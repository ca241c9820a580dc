"""Distribution intervention: confounder pools and the invariance loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .objective import bce


@dataclass
class PoolEntry:
    s_embedding: np.ndarray
    source_property: int
    source_fragment_key: str


@dataclass
class ConfounderPool:
    target_property: int
    entries: list[PoolEntry] = field(default_factory=list)
    max_size: int = 16

    def __len__(self) -> int:
        return len(self.entries)

    def matrix(self) -> np.ndarray:
        return np.stack([e.s_embedding for e in self.entries])

    def check(self) -> None:
        keys = [e.source_fragment_key for e in self.entries]
        if len(set(keys)) != len(keys):
            raise ValueError("confounder pool has duplicate fragment keys")
        if any(e.source_property == self.target_property for e in self.entries):
            raise ValueError("confounder pool contains an entry from the target property")
        if len(self.entries) > self.max_size:
            raise ValueError("confounder pool exceeds max_size")


def build_confounder_pool(candidates: Iterable[PoolEntry], target_property: int, max_size: int = 16,
                          rng: np.random.Generator | None = None) -> ConfounderPool:
    """Keep candidates from other properties, one per fragment key, then subsample.

    Candidates are visited in order, so the first occurrence of a key wins.
    Subsampling is uniform without replacement and keeps the visiting order.
    """
    seen: dict[str, PoolEntry] = {}
    for e in candidates:
        if e.source_property == target_property or e.source_fragment_key in seen:
            continue
        seen[e.source_fragment_key] = e
    entries = list(seen.values())
    if len(entries) > max_size:
        if rng is None:
            raise ValueError("rng required to subsample the confounder pool")
        keep = np.sort(rng.choice(len(entries), size=max_size, replace=False))
        entries = [entries[i] for i in keep]
    pool = ConfounderPool(target_property, entries, max_size)
    pool.check()
    return pool


def intervene_logits(c: Tensor, S: np.ndarray, params: ParameterStore) -> Tensor:
    """Logits ``w^T (c_i + s_j) + b`` for every molecule row i and confounder j.

    Confounders are constants: no gradient reaches the encoders through them.
    """
    if c.values.ndim == 1:
        c = ad.reshape(c, (1, c.shape[0]))
    n, d = c.shape
    k = S.shape[0]
    if S.shape[1] != d:
        raise ValueError(f"intervene: confounder width {S.shape[1]} != causal width {d}")
    w = params["cls.w"]
    ones_k = ad.constant(np.ones((1, k)))
    ones_n = ad.constant(np.ones((n, 1)))
    cw = ad.matmul(ad.matmul(c, w), ones_k)
    sw = ad.matmul(ones_n, ad.reshape(ad.matmul(ad.constant(S), w), (1, k)))
    b = ad.matmul(ad.matmul(ones_n, ad.reshape(params["cls.b"], (1, 1))), ones_k)
    return ad.add(ad.add(cw, sw), b)


def intervene_predict(c: Tensor, s, params: ParameterStore) -> Tensor:
    """``sigmoid(w^T (c + s) + b)``; ``s`` is one confounder vector or a (k, d) matrix."""
    S = np.atleast_2d(np.asarray(s, dtype=np.float64))
    return ad.sigmoid(intervene_logits(c, S, params))


def loss_var(y, c: Tensor, pool: ConfounderPool, params: ParameterStore) -> Tensor:
    """Per molecule, the BCE summed over all pool confounders; averaged over molecules."""
    if len(pool) == 0:
        return ad.constant(np.asarray(0.0))
    probs = intervene_predict(c, pool.matrix(), params)
    yv = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    yy = np.broadcast_to(yv, probs.shape)
    per = bce(probs, yy)
    return ad.scale(ad.reduce_sum(per), 1.0 / probs.shape[0])
