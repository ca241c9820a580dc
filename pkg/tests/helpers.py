"""Independent oracles shared by the tests."""

from pathlib import Path

import networkx as nx
from networkx.algorithms import isomorphism as iso

DATA = Path(__file__).parent / "data"


def corpus() -> list[str]:
    return [ln.strip() for ln in (DATA / "corpus.smi").read_text().splitlines() if ln.strip()]


def to_nx(graph, atoms=None, attached=()) -> nx.Graph:
    """Labeled networkx graph of a MolecularGraph (optionally an induced atom subset)."""
    keep = range(graph.num_atoms) if atoms is None else atoms
    G = nx.Graph()
    for i in keep:
        a = graph.atoms[i]
        G.add_node(i, label=(a.element, a.aromatic, a.formal_charge, i in attached))
    for a, b, o in graph.bonds:
        if a in G and b in G:
            G.add_edge(a, b, order=str(o))
    return G


def isomorphic(G1: nx.Graph, G2: nx.Graph) -> bool:
    return nx.is_isomorphic(G1, G2, node_match=iso.categorical_node_match("label", None),
                            edge_match=iso.categorical_edge_match("order", None))


def full_label_graph(graph) -> nx.Graph:
    """Node labels include the hydrogen count, as required for a faithful round trip."""
    G = nx.Graph()
    for i, a in enumerate(graph.atoms):
        G.add_node(i, label=(a.element, a.aromatic, a.formal_charge, a.explicit_h))
    for a, b, o in graph.bonds:
        G.add_edge(a, b, order=str(o))
    return G


def bonds_on_cycles_bruteforce(graph) -> list[bool]:
    """A bond lies on a simple cycle iff its endpoints stay connected without it."""
    out = []
    for k, (a, b, _) in enumerate(graph.bonds):
        G = nx.Graph()
        G.add_nodes_from(range(graph.num_atoms))
        G.add_edges_from((x, y) for j, (x, y, _) in enumerate(graph.bonds) if j != k)
        out.append(nx.has_path(G, a, b))
    return out


def simple_cycle_bonds(graph) -> list[bool]:
    """Brute force: mark every bond that appears in some enumerated simple cycle."""
    G = nx.Graph()
    G.add_edges_from((a, b) for a, b, _ in graph.bonds)
    on = set()
    for cyc in nx.simple_cycles(G):
        if len(cyc) >= 3:
            for u, v in zip(cyc, cyc[1:] + cyc[:1]):
                on.add(frozenset((u, v)))
    return [frozenset((a, b)) in on for a, b, _ in graph.bonds]


__all__ = ["corpus", "to_nx", "isomorphic", "full_label_graph", "bonds_on_cycles_bruteforce",
           "simple_cycle_bonds"]
