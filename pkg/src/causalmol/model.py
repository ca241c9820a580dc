"""Full episode forward pass: encoders, context, masking, losses."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .causal import (MaskConfig, gumbel_sigmoid_logits, hard_mask, init_relevance, logistic_noise,
                     relevance_logits, split)
from .context import ContextGraph, build_context_graph, contextual_concat, encode_context
from .encoder import EncoderConfig, GraphBatch, MessageCounter, batch_graphs, encode_batch, init_gin_params
from .intervene import ConfounderPool, PoolEntry, loss_var
from .objective import LossWeights, head_prob, init_head, loss_causal, loss_kl, loss_total
from .records import MoleculeRecord
from .smiles import FEATURE_DIM


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    encoder_layers: int = 3
    context_layers: int = 3
    use_context: bool = True
    use_causal: bool = True
    # unit-norm atom and context rows keep sum readouts on a scale the inner step can handle
    normalize_slots: bool = True
    mask: MaskConfig = field(default_factory=MaskConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def encoder_cfg(self) -> EncoderConfig:
        return EncoderConfig(self.encoder_layers, self.hidden_dim, num_edge_types=4)

    def context_cfg(self) -> EncoderConfig:
        return EncoderConfig(self.context_layers, self.hidden_dim, num_edge_types=4)

    @property
    def width(self) -> int:
        return 4 * self.hidden_dim


def init_params(cfg: ModelConfig, num_properties: int, seed: int = 0) -> ParameterStore:
    """Fresh parameters for the molecular encoder, context encoder, relevance MLP and head."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    store = ParameterStore(rng_seed=seed)
    d = cfg.hidden_dim
    init_gin_params(store, "enc", FEATURE_DIM, cfg.encoder_cfg(), rng)
    store.add("frag.W", rng.normal(0.0, 1.0 / np.sqrt(FEATURE_DIM), size=(FEATURE_DIM, d)))
    store.add("prop.emb", rng.normal(0.0, 0.02, size=(num_properties, d)))
    init_gin_params(store, "ctx", d, cfg.context_cfg(), rng)
    init_relevance(store, cfg.width, d, rng)
    init_head(store, cfg.width, rng)
    return store


@dataclass
class EpisodeData:
    """Static, parameter-independent arrays for one episode."""

    episode: object
    mol_ids: list[int]
    labels: np.ndarray
    n_support: int
    batch: GraphBatch
    graph: ContextGraph
    records: Mapping[int, MoleculeRecord]

    @property
    def task_id(self) -> int:
        return self.episode.task_id

    def subset(self, which: str) -> np.ndarray:
        n = len(self.mol_ids)
        if which == "support":
            return np.arange(self.n_support)
        if which == "query":
            return np.arange(self.n_support, n)
        if which == "all":
            return np.arange(n)
        raise ValueError(f"unknown subset {which!r}")


def prepare_episode(episode, records: Mapping[int, MoleculeRecord], auxiliary_properties: Sequence[int] = (),
                    aux_label=None, episode_id: str = "") -> EpisodeData:
    ids = [m for m, _ in episode.support] + [m for m, _ in episode.query]
    labels = np.array([y for _, y in episode.support] + [y for _, y in episode.query], dtype=np.float64)
    batch = batch_graphs([records[m].arrays() for m in ids])
    cg = build_context_graph(episode, records, auxiliary_properties, aux_label, episode_id)
    return EpisodeData(episode, ids, labels, len(episode.support), batch, cg, records)


@dataclass
class EpisodeOutput:
    mol_ids: list[int]
    labels: np.ndarray
    atom_mol: np.ndarray
    H: Tensor
    p: Tensor | None
    lam: Tensor | None
    C: Tensor
    S: Tensor
    c: Tensor
    s: Tensor
    prob: Tensor
    losses: dict[str, Tensor]
    counter: MessageCounter | None = None

    @property
    def total(self) -> Tensor:
        return self.losses["total"]

    def atom_slices(self) -> list[slice]:
        out, start = [], 0
        counts = np.bincount(self.atom_mol, minlength=len(self.mol_ids))
        for n in counts:
            out.append(slice(start, start + int(n)))
            start += int(n)
        return out


def contextual_atoms(params: ParameterStore, data: EpisodeData, cfg: ModelConfig, which: str = "all",
                     counter: MessageCounter | None = None) -> tuple[Tensor, list[int], np.ndarray]:
    """Contextual atom matrix H (width 4d) for the molecules in ``which``."""
    H_enc = encode_batch(data.batch, params, cfg.encoder_cfg(), "enc")
    sel = data.subset(which)
    ids = [data.mol_ids[i] for i in sel]
    off = data.batch.offsets
    atom_idx = np.concatenate([np.arange(off[i], off[i + 1]) for i in sel])
    atom_mol = np.concatenate([np.full(off[i + 1] - off[i], j, dtype=np.int64) for j, i in enumerate(sel)])
    H_sub = ad.gather_rows(H_enc, atom_idx) if len(sel) < len(data.mol_ids) else H_enc
    if cfg.normalize_slots:
        H_sub = ad.normalize_rows(H_sub)
    ce = None
    if cfg.use_context:
        mol_feat = ad.segment_sum(H_enc, data.batch.node_graph, data.batch.num_graphs)
        ce = encode_context(data.graph, params, mol_feat, cfg.context_cfg(), counter)
        if cfg.normalize_slots:
            ce = replace(ce, Z=ad.normalize_rows(ce.Z))
    H = contextual_concat(H_sub, ce, ids, data.records, data.task_id)
    return H, ids, atom_mol


def forward(params: ParameterStore, data: EpisodeData, cfg: ModelConfig, which: str = "support",
            pool: ConfounderPool | None = None, rng: np.random.Generator | None = None,
            train: bool = True, tau: float | None = None, counter: MessageCounter | None = None,
            atom_mask: np.ndarray | None = None, noise_stats_from: EpisodeOutput | None = None) -> EpisodeOutput:
    """Run the model on one subset of an episode and compute all loss parts.

    ``train`` draws relaxed masks and Gaussian noise from ``rng``; otherwise
    masks are hard thresholds at 0.5 (if ``cfg.mask.hard_eval``) and noise is
    replaced by its mean.  ``atom_mask`` (fidelity probes) zeroes the rows
    of H where it is 0 before masking.
    """
    H, ids, atom_mol = contextual_atoms(params, data, cfg, which, counter)
    if atom_mask is not None:
        H = ad.scale_rows(H, ad.constant(np.asarray(atom_mask, dtype=np.float64)))
    sel = data.subset(which)
    y = data.labels[sel]
    n_mol = len(ids)
    tau = cfg.mask.tau if tau is None else tau
    if cfg.use_causal:
        logits = relevance_logits(H, params)
        p = ad.sigmoid(logits)
        if train:
            lam = gumbel_sigmoid_logits(logits, tau, noise=logistic_noise(rng, H.shape[0]))
            cs = split(H, lam, gauss=rng.standard_normal(H.shape))
        else:
            lam = hard_mask(p) if cfg.mask.hard_eval else p
            cs = split(H, lam, deterministic=True)
        C, S = cs.C_nodes, cs.S_nodes
        if not train and noise_stats_from is not None:
            # fidelity probes keep the noise mean of the unmasked forward
            mu = ad.constant(np.broadcast_to(noise_stats_from.H.values.mean(axis=0), H.shape).copy())
            keep = ad.shift(ad.scale(lam, -1.0), 1.0)
            C = ad.add(ad.scale_rows(H, lam), ad.scale_rows(mu, keep))
    else:
        p = lam = None
        C = H
        S = ad.constant(np.zeros(H.shape))
    c = ad.segment_sum(C, atom_mol, n_mol)
    s = ad.segment_sum(S, atom_mol, n_mol)
    prob = head_prob(c, params)
    l_causal = loss_causal(y, c, params)
    zero = ad.constant(np.asarray(0.0))
    if cfg.use_causal:
        l_kl = loss_kl(s, params)
        l_var = loss_var(y, c, pool, params) if pool is not None else zero
        total = loss_total((l_causal, l_kl, l_var), cfg.weights)
    else:
        l_kl = l_var = zero
        total = l_causal
    losses = {"causal": l_causal, "kl": l_kl, "var": l_var, "total": total}
    return EpisodeOutput(ids, y, atom_mol, H, p, lam, C, S, c, s, prob, losses, counter)


def fragment_candidates(params: ParameterStore, data: EpisodeData, cfg: ModelConfig) -> list[PoolEntry]:
    """Confounder candidates: summed contextual rows of every fragment in the episode."""
    with ad.no_grad():
        H, ids, atom_mol = contextual_atoms(params, data, cfg, "all")
    Hv = H.values
    out = []
    start = 0
    for m in ids:
        rec = data.records[m]
        block = Hv[start : start + rec.num_atoms]
        for fg in rec.fragments:
            out.append(PoolEntry(block[fg.atom_indices].sum(axis=0), data.task_id, fg.canonical_key))
        start += rec.num_atoms
    return out
