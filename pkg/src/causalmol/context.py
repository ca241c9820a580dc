"""Episode-level context graph over molecule, fragment and property nodes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .encoder import EncoderConfig, MessageCounter, gin
from .records import MoleculeRecord

EDGE_TYPES = ("positive_label", "negative_label", "unknown_label", "membership")
EDGE_INDEX = {name: i for i, name in enumerate(EDGE_TYPES)}
NODE_TYPES = ("molecule", "fragment", "property")


@dataclass
class ContextGraph:
    node_types: list[str]
    node_refs: list
    edges: list[tuple[int, int, str]]
    episode_id: str = ""
    fragment_features: np.ndarray = field(default_factory=lambda: np.zeros((0, 27)))

    def __post_init__(self):
        self.molecule_index = {r: i for i, (t, r) in enumerate(zip(self.node_types, self.node_refs)) if t == "molecule"}
        self.fragment_index = {r: i for i, (t, r) in enumerate(zip(self.node_types, self.node_refs)) if t == "fragment"}
        self.property_index = {r: i for i, (t, r) in enumerate(zip(self.node_types, self.node_refs)) if t == "property"}

    @property
    def num_nodes(self) -> int:
        return len(self.node_types)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.molecule_index), len(self.fragment_index), len(self.property_index)

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.edges:
            z = np.zeros(0, dtype=np.int64)
            return z, z, z
        src = np.array([e[0] for e in self.edges], dtype=np.int64)
        dst = np.array([e[1] for e in self.edges], dtype=np.int64)
        et = np.array([EDGE_INDEX[e[2]] for e in self.edges], dtype=np.int64)
        return src, dst, et

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "nodes": [{"id": i, "type": t, "ref": r} for i, (t, r) in enumerate(zip(self.node_types, self.node_refs))],
            "edges": [{"src": s, "dst": d, "type": t} for s, d, t in self.edges],
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, ContextGraph):
            return NotImplemented
        return self.to_dict() == other.to_dict() and np.array_equal(
            self.fragment_features, other.fragment_features)


def check_context_graph(cg: ContextGraph) -> None:
    """Raise ``ValueError`` if the edge-type discipline is violated."""
    for s, d, t in cg.edges:
        if t not in EDGE_INDEX:
            raise ValueError(f"unknown edge type {t!r}")
        ts, td = cg.node_types[s], cg.node_types[d]
        if t == "membership" and (ts, td) != ("molecule", "fragment"):
            raise ValueError(f"membership edge between {ts} and {td}")
        if t != "membership" and (ts, td) != ("molecule", "property"):
            raise ValueError(f"label edge between {ts} and {td}")
    has_member = {s for s, _, t in cg.edges if t == "membership"}
    for m, node in cg.molecule_index.items():
        if node not in has_member:
            raise ValueError(f"molecule {m} has no membership edge")


def build_context_graph(
    episode,
    records: Mapping[int, MoleculeRecord],
    auxiliary_properties: Sequence[int] = (),
    aux_label: Callable[[int, int], float] | None = None,
    episode_id: str = "",
) -> ContextGraph:
    """Build the typed graph for one episode.

    Support molecules link to the target property with their label edge,
    query molecules with ``unknown_label``.  For each auxiliary property,
    molecules whose label is known (``aux_label`` not NaN) get a label edge.
    Fragment nodes are shared across molecules by canonical key.
    """
    target = episode.task_id
    mols: list[int] = []
    for mol_id, label in episode.support:
        if label is None or (isinstance(label, float) and math.isnan(label)):
            raise ValueError(f"support molecule {mol_id} has no label for property {target}")
        mols.append(mol_id)
    mols += [mol_id for mol_id, _ in episode.query]

    node_types = ["molecule"] * len(mols)
    node_refs: list = list(mols)
    frag_nodes: dict[str, int] = {}
    frag_feats = []
    for mol_id in mols:
        rec = records[mol_id]
        for fg, feat in zip(rec.fragments, rec.fragment_features):
            if fg.canonical_key not in frag_nodes:
                frag_nodes[fg.canonical_key] = len(node_types)
                node_types.append("fragment")
                node_refs.append(fg.canonical_key)
                frag_feats.append(feat)
    props = [target] + sorted(p for p in set(auxiliary_properties) if p != target)
    prop_nodes = {}
    for p in props:
        prop_nodes[p] = len(node_types)
        node_types.append("property")
        node_refs.append(p)

    edges: list[tuple[int, int, str]] = []
    for j, (mol_id, label) in enumerate(episode.support):
        edges.append((j, prop_nodes[target], "positive_label" if int(label) == 1 else "negative_label"))
    for j in range(len(episode.support), len(mols)):
        edges.append((j, prop_nodes[target], "unknown_label"))
    if aux_label is not None:
        for p in props[1:]:
            for j, mol_id in enumerate(mols):
                y = aux_label(mol_id, p)
                if y is None or math.isnan(y):
                    continue
                edges.append((j, prop_nodes[p], "positive_label" if int(y) == 1 else "negative_label"))
    for j, mol_id in enumerate(mols):
        for key in dict.fromkeys(records[mol_id].keys):
            edges.append((j, frag_nodes[key], "membership"))

    cg = ContextGraph(
        node_types, node_refs, edges, episode_id,
        np.array(frag_feats) if frag_feats else np.zeros((0, 27)),
    )
    check_context_graph(cg)
    return cg


@dataclass
class ContextEmbedding:
    Z: Tensor
    molecule_index: dict
    fragment_index: dict
    property_index: dict

    @property
    def dim(self) -> int:
        return self.Z.shape[1]


def encode_context(cg: ContextGraph, params: ParameterStore, molecule_features: Tensor,
                   cfg: EncoderConfig, counter: MessageCounter | None = None,
                   prefix: str = "ctx") -> ContextEmbedding:
    """Context embedding Z = GNN(V, A, X) with relation-typed edge vectors.

    ``molecule_features`` holds one row per molecule node, in node order.
    Fragment nodes start from their summed raw atom features projected to
    ``d``; property nodes from the learned table ``prop.emb``.
    """
    n_mol, n_frag, _ = cg.counts
    if molecule_features.shape[0] != n_mol:
        raise ValueError(f"expected {n_mol} molecule feature rows, got {molecule_features.shape[0]}")
    parts = [molecule_features]
    if n_frag:
        parts.append(ad.matmul(ad.constant(cg.fragment_features), params["frag.W"]))
    prop_ids = [cg.node_refs[i] for i in sorted(cg.property_index.values())]
    parts.append(ad.gather_rows(params["prop.emb"], np.array(prop_ids, dtype=np.int64)))
    X = ad.concat(parts, axis=0)
    src, dst, et = cg.edge_arrays()
    Z = gin(X, src, dst, et, params, prefix, cfg, counter)
    return ContextEmbedding(Z, cg.molecule_index, cg.fragment_index, cg.property_index)


def context_rows(ce: ContextEmbedding, mol_ids: Sequence[int], records: Mapping[int, MoleculeRecord],
                 target_property: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row indices into Z for the fragment, molecule and property slot of each atom."""
    frag_rows, mol_rows = [], []
    for m in mol_ids:
        rec = records[m]
        keys = rec.keys
        try:
            frag_rows.extend(ce.fragment_index[keys[j]] for j in rec.assignment)
        except KeyError as exc:
            raise ValueError(f"molecule {m}: atom fragment {exc} missing from the context graph") from None
        mol_rows.extend([ce.molecule_index[m]] * rec.num_atoms)
    n = len(mol_rows)
    prop_rows = np.full(n, ce.property_index[target_property], dtype=np.int64)
    return np.array(frag_rows, dtype=np.int64), np.array(mol_rows, dtype=np.int64), prop_rows


def contextual_concat(atom_embeddings: Tensor, ce: ContextEmbedding | None, mol_ids: Sequence[int],
                      records: Mapping[int, MoleculeRecord], target_property: int) -> Tensor:
    """Per-atom ``[atom | Z_fragment | Z_molecule | Z_property]``, width 4d.

    With ``ce=None`` the three context slots are zero (no-context ablation).
    """
    n, d = atom_embeddings.shape
    expected = sum(records[m].num_atoms for m in mol_ids)
    if n != expected:
        raise ValueError(f"contextual_concat: {n} atom rows for molecules with {expected} atoms")
    if ce is None:
        return ad.concat([atom_embeddings, ad.constant(np.zeros((n, 3 * d)))], axis=1)
    fr, mr, pr = context_rows(ce, mol_ids, records, target_property)
    return ad.concat(
        [atom_embeddings, ad.gather_rows(ce.Z, fr), ad.gather_rows(ce.Z, mr), ad.gather_rows(ce.Z, pr)], axis=1
    )
