"""Loss terms: causal BCE, KL-to-uniform on the confound readout, weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor

CLAMP = 1e-12


@dataclass
class LossWeights:
    alpha1: float = 0.1
    alpha2: float = 0.01

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be >= 0")


def init_head(store: ParameterStore, width: int, rng: np.random.Generator) -> None:
    store.add("cls.w", rng.normal(0.0, 0.1 / np.sqrt(width), size=(width, 1)))
    store.add("cls.b", np.zeros(1))


def _rows(v: Tensor) -> Tensor:
    return ad.reshape(v, (1, v.shape[0])) if v.values.ndim == 1 else v


def head_prob(v: Tensor, params: ParameterStore) -> Tensor:
    """Shared classifier ``sigmoid(w^T v + b)``; one probability per row."""
    v = _rows(v)
    if v.shape[1] != params["cls.w"].shape[0]:
        raise ValueError(f"head: input width {v.shape[1]} != classifier width {params['cls.w'].shape[0]}")
    z = ad.add(ad.matmul(v, params["cls.w"]), ad.broadcast_row(params["cls.b"], v.shape[0]))
    return ad.sigmoid(ad.reshape(z, (v.shape[0],)))


def bce(prob: Tensor, y) -> Tensor:
    """Elementwise ``-y log p - (1 - y) log(1 - p)`` with clamped logs."""
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), prob.shape)
    p = ad.clip(prob, CLAMP, 1 - CLAMP)
    q = ad.clip(ad.shift(ad.scale(prob, -1.0), 1.0), CLAMP, 1 - CLAMP)
    return ad.scale(ad.add(ad.mul(ad.constant(y), ad.log(p)), ad.mul(ad.constant(1 - y), ad.log(q))), -1.0)


def kl_to_uniform(prob: Tensor) -> Tensor:
    """Elementwise ``KL(Bern(p) || Bern(1/2)) = p log 2p + (1-p) log 2(1-p)``."""
    p = ad.clip(prob, CLAMP, 1 - CLAMP)
    q = ad.clip(ad.shift(ad.scale(prob, -1.0), 1.0), CLAMP, 1 - CLAMP)
    return ad.add(ad.mul(p, ad.log(ad.scale(p, 2.0))), ad.mul(q, ad.log(ad.scale(q, 2.0))))


def loss_kl(s_self: Tensor, params: ParameterStore) -> Tensor:
    """Mean KL between the confound-readout prediction and the uniform label prior."""
    return ad.reduce_mean(kl_to_uniform(head_prob(s_self, params)), axis=None)


def loss_causal(y, c: Tensor, params: ParameterStore) -> Tensor:
    """Mean BCE of ``sigmoid(w^T c + b)`` against ``y``."""
    return ad.reduce_mean(bce(head_prob(c, params), y), axis=None)


def loss_total(parts: tuple[Tensor, Tensor, Tensor], weights: LossWeights) -> Tensor:
    l_causal, l_kl, l_var = parts
    return ad.add(ad.add(l_causal, ad.scale(l_kl, weights.alpha1)), ad.scale(l_var, weights.alpha2))
