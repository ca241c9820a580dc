"""Causal substructure extractor: atom relevance, relaxed masks, C/S split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .encoder import linear

_VAR_FLOOR = 1e-8
# sigmoid(37) rounds to 1.0 in float64; clamping the tempered logit keeps masks inside (0, 1)
_LOGIT_BOUND = 36.0


@dataclass
class MaskConfig:
    tau: float = 1.0
    tau_decay: float = 0.97
    tau_every: int = 100
    tau_min: float = 0.1
    hard_eval: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")

    def tau_at(self, epoch: int) -> float:
        """Temperature after ``epoch`` epochs of annealing."""
        return max(self.tau_min, self.tau * self.tau_decay ** (epoch // self.tau_every))


@dataclass
class CausalSplit:
    p: Tensor
    lam: Tensor
    C_nodes: Tensor
    S_nodes: Tensor
    c: Tensor | None = None
    s_self: Tensor | None = None
    epsilon_stats: tuple[np.ndarray, np.ndarray] | None = None


def init_relevance(store: ParameterStore, width: int, hidden: int, rng: np.random.Generator) -> None:
    store.add("rel.W1", rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, hidden)))
    store.add("rel.b1", np.zeros(hidden))
    store.add("rel.W2", rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, 1)))
    store.add("rel.b2", np.zeros(1))


def relevance_logits(H: Tensor, params: ParameterStore) -> Tensor:
    hidden = ad.relu(linear(H, params["rel.W1"], params["rel.b1"]))
    return ad.reshape(linear(hidden, params["rel.W2"], params["rel.b2"]), (H.shape[0],))


def relevance(H: Tensor, params: ParameterStore) -> Tensor:
    """Per-atom relevance ``p_i = sigmoid(MLP(H_i))``."""
    return ad.sigmoid(relevance_logits(H, params))


def logistic_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    """``log(q / (1 - q))`` for ``q ~ Uniform(0, 1)``."""
    q = rng.uniform(size=n)
    q = np.clip(q, 1e-12, 1 - 1e-12)
    return np.log(q) - np.log1p(-q)


def gumbel_sigmoid(p: Tensor, tau: float, rng: np.random.Generator | None = None,
                   noise: np.ndarray | None = None) -> Tensor:
    """Binary-Concrete sample ``sigmoid((logit(p) + logit(q)) / tau)``."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    pv = p.values
    if np.any(pv <= 0) or np.any(pv >= 1):
        raise ValueError("gumbel_sigmoid: p must lie strictly inside (0, 1)")
    logit = ad.sub(ad.log(p), ad.log(ad.shift(ad.scale(p, -1.0), 1.0)))
    return gumbel_sigmoid_logits(logit, tau, rng, noise)


def gumbel_sigmoid_logits(logit: Tensor, tau: float, rng: np.random.Generator | None = None,
                          noise: np.ndarray | None = None) -> Tensor:
    """Same relaxation taking ``logit(p)`` directly (avoids saturating p to 1.0)."""
    if noise is None:
        noise = logistic_noise(rng, logit.shape[0])
    z = ad.scale(ad.add(logit, ad.constant(noise)), 1.0 / tau)
    return ad.sigmoid(ad.clip(z, -_LOGIT_BOUND, _LOGIT_BOUND))


def hard_mask(p: Tensor) -> Tensor:
    return ad.constant((p.values > 0.5).astype(np.float64))


def noise_stats(H: Tensor) -> tuple[Tensor, Tensor]:
    """Per-dimension mean and standard deviation over all atom rows."""
    mu = ad.reduce_mean(H, axis=0)
    if H.shape[0] < 2:
        return mu, ad.constant(np.ones(H.shape[1]))
    sigma = ad.sqrt(ad.shift(ad.reduce_var(H, axis=0), _VAR_FLOOR))
    return mu, sigma


def split(H: Tensor, lam: Tensor, rng: np.random.Generator | None = None,
          gauss: np.ndarray | None = None, deterministic: bool = False) -> CausalSplit:
    """Noise-injected masking.

    ``C_i = lam_i H_i + (1 - lam_i) eps_i`` with ``eps_i ~ N(mu_H, sigma_H^2)``
    per atom and dimension, and ``S_i = (1 - lam_i) H_i``.  With
    ``deterministic`` the noise is replaced by its mean ``mu_H``.
    """
    n, d = H.shape
    if lam.shape != (n,):
        raise ValueError(f"split: {lam.shape} mask for {n} atoms")
    mu, sigma = noise_stats(H)
    if deterministic:
        eps = ad.broadcast_row(mu, n)
    else:
        if gauss is None:
            gauss = rng.standard_normal((n, d))
        eps = ad.add(ad.broadcast_row(mu, n), ad.mul(ad.broadcast_row(sigma, n), ad.constant(gauss)))
    keep = ad.shift(ad.scale(lam, -1.0), 1.0)
    C = ad.add(ad.scale_rows(H, lam), ad.scale_rows(eps, keep))
    S = ad.scale_rows(H, keep)
    return CausalSplit(p=None, lam=lam, C_nodes=C, S_nodes=S, epsilon_stats=(mu.values, sigma.values))


def causal_readout(cs: CausalSplit, segments=None, num_segments: int | None = None) -> tuple[Tensor, Tensor]:
    """Sum readout of C and S; per molecule when ``segments`` maps atoms to molecules."""
    n = cs.C_nodes.shape[0]
    seg = np.zeros(n, dtype=np.int64) if segments is None else np.asarray(segments)
    k = 1 if segments is None else num_segments
    c = ad.segment_sum(cs.C_nodes, seg, k)
    s = ad.segment_sum(cs.S_nodes, seg, k)
    if segments is None:
        c, s = ad.reshape(c, (cs.C_nodes.shape[1],)), ad.reshape(s, (cs.S_nodes.shape[1],))
    cs.c, cs.s_self = c, s
    return c, s
