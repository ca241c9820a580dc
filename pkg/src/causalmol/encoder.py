"""Edge-aware GIN message passing and sum readout.

One implementation serves both the molecular encoder (edge types are bond
orders) and the context-graph encoder (edge types are relation types).
Graphs are processed as a disjoint-union batch so a whole episode costs a
fixed number of array ops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .smiles import BOND_INDEX, FEATURE_DIM, MolecularGraph, atom_features


@dataclass
class EncoderConfig:
    layers: int = 3
    hidden_dim: int = 64
    num_edge_types: int = 4
    residual: bool = True

    def __post_init__(self):
        if self.layers < 1 or self.hidden_dim < 1:
            raise ValueError("layers and hidden_dim must be >= 1")


@dataclass
class MessageCounter:
    """Counts directed message computations per direction."""

    forward: int = 0
    reverse: int = 0
    per_layer: list[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.forward + self.reverse


@dataclass
class GraphBatch:
    """Disjoint union of graphs with precomputed index arrays."""

    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    etype: np.ndarray
    node_graph: np.ndarray
    num_graphs: int
    offsets: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def num_edges(self) -> int:
        return self.src.shape[0]


def molecule_arrays(graph: MolecularGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    x = atom_features(graph)
    if graph.bonds:
        src = np.array([a for a, _, _ in graph.bonds], dtype=np.int64)
        dst = np.array([b for _, b, _ in graph.bonds], dtype=np.int64)
        et = np.array([BOND_INDEX[o] for _, _, o in graph.bonds], dtype=np.int64)
    else:
        src = dst = et = np.zeros(0, dtype=np.int64)
    return x, src, dst, et


def batch_graphs(parts) -> GraphBatch:
    """Batch ``(x, src, dst, etype)`` tuples into one :class:`GraphBatch`."""
    xs, srcs, dsts, ets, owners, offsets = [], [], [], [], [], []
    off = 0
    for g, (x, src, dst, et) in enumerate(parts):
        xs.append(x)
        srcs.append(src + off)
        dsts.append(dst + off)
        ets.append(et)
        owners.append(np.full(x.shape[0], g, dtype=np.int64))
        offsets.append(off)
        off += x.shape[0]
    if off == 0:
        raise ValueError("cannot encode an empty graph batch")
    return GraphBatch(
        np.concatenate(xs),
        np.concatenate(srcs).astype(np.int64),
        np.concatenate(dsts).astype(np.int64),
        np.concatenate(ets).astype(np.int64),
        np.concatenate(owners),
        len(xs),
        np.array(offsets + [off], dtype=np.int64),
    )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))


def init_gin_params(store: ParameterStore, prefix: str, d_in: int, cfg: EncoderConfig,
                    rng: np.random.Generator, gain: float = 0.1) -> None:
    """GIN weights; ``gain`` scales the MLP output layer so residual layers start near identity."""
    d = cfg.hidden_dim
    store.add(f"{prefix}.W_in", _glorot(rng, d_in, d))
    store.add(f"{prefix}.b_in", np.zeros(d))
    for k in range(cfg.layers):
        store.add(f"{prefix}.l{k}.eps", np.zeros(1))
        store.add(f"{prefix}.l{k}.edge", rng.normal(0.0, 0.1, size=(cfg.num_edge_types, d)))
        store.add(f"{prefix}.l{k}.W1", _glorot(rng, d, d, np.sqrt(2.0)))
        store.add(f"{prefix}.l{k}.b1", np.zeros(d))
        store.add(f"{prefix}.l{k}.W2", _glorot(rng, d, d, gain))
        store.add(f"{prefix}.l{k}.b2", np.zeros(d))


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    out = ad.matmul(x, W)
    if b is not None:
        out = ad.add(out, ad.broadcast_row(b, x.shape[0]))
    return out


def gin(x: Tensor, src: np.ndarray, dst: np.ndarray, etype: np.ndarray, params: ParameterStore,
        prefix: str, cfg: EncoderConfig, counter: MessageCounter | None = None) -> Tensor:
    """Run the input projection and ``cfg.layers`` GIN layers on an edge list.

    Layer k: ``h_v <- h_v + MLP_k((1 + eps_k) h_v + sum_u relu(h_u + e_uv))``
    with the identity skip controlled by ``cfg.residual``.  Each undirected
    edge sends one message per direction.
    """
    n = x.shape[0]
    if n == 0:
        raise ValueError("gin: empty graph")
    if etype.size and (etype.min() < 0 or etype.max() >= cfg.num_edge_types):
        raise ValueError(f"gin: unknown edge type in {sorted(set(etype.tolist()))}")
    h = linear(x, params[f"{prefix}.W_in"], params[f"{prefix}.b_in"])
    both_src = np.concatenate([src, dst])
    both_dst = np.concatenate([dst, src])
    both_type = np.concatenate([etype, etype])
    zeros = np.zeros(n, dtype=np.int64)
    for k in range(cfg.layers):
        p = f"{prefix}.l{k}"
        eps = ad.gather_rows(params[f"{p}.eps"], zeros)
        pre = ad.add(h, ad.scale_rows(h, eps))
        if both_src.size:
            msg = ad.relu(ad.add(ad.gather_rows(h, both_src), ad.gather_rows(params[f"{p}.edge"], both_type)))
            pre = ad.add(pre, ad.segment_sum(msg, both_dst, n))
            if counter is not None:
                counter.forward += src.size
                counter.reverse += dst.size
                counter.per_layer.append(both_src.size)
        elif counter is not None:
            counter.per_layer.append(0)
        hidden = ad.relu(linear(pre, params[f"{p}.W1"], params[f"{p}.b1"]))
        out = linear(hidden, params[f"{p}.W2"], params[f"{p}.b2"])
        h = ad.add(h, out) if cfg.residual else out
    return h


def encode_batch(batch: GraphBatch, params: ParameterStore, cfg: EncoderConfig,
                 prefix: str = "enc", counter: MessageCounter | None = None) -> Tensor:
    return gin(ad.constant(batch.x), batch.src, batch.dst, batch.etype, params, prefix, cfg, counter)


def encode_molecule(graph: MolecularGraph, params: ParameterStore, cfg: EncoderConfig,
                    prefix: str = "enc", counter: MessageCounter | None = None) -> Tensor:
    """Atom embeddings (num_atoms x hidden_dim) for one molecule."""
    if graph.num_atoms == 0:
        raise ValueError("encode_molecule: empty graph")
    return encode_batch(batch_graphs([molecule_arrays(graph)]), params, cfg, prefix, counter)


def readout_sum(H: Tensor, weights=None, segments=None, num_segments: int | None = None) -> Tensor:
    """Weighted sum of rows; per segment if ``segments`` is given.

    Without segments the result is a (d,) vector.
    """
    x = H
    if weights is not None:
        w = weights if isinstance(weights, Tensor) else ad.constant(weights)
        if w.shape != (H.shape[0],):
            raise ValueError(f"readout_sum: {w.shape[0] if w.values.ndim else 0} weights for {H.shape[0]} rows")
        x = ad.scale_rows(H, w)
    if segments is None:
        return ad.reshape(ad.segment_sum(x, np.zeros(H.shape[0], dtype=np.int64), 1), (H.shape[1],))
    return ad.segment_sum(x, segments, num_segments)


def init_encoder(store: ParameterStore, cfg: EncoderConfig, rng: np.random.Generator,
                 prefix: str = "enc") -> None:
    init_gin_params(store, prefix, FEATURE_DIM, cfg, rng)
