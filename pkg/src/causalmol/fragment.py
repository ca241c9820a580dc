"""Rule-table bond cleavage into functional-group fragments.

A simplified BRICS-style scheme: only acyclic single bonds are cut, and a
bond is cut when one of the rules in :data:`DEFAULT_RULES` matches it in
either orientation.  Fragments partition the atoms of the molecule.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from .smiles import MolecularGraph

RULE_TABLE_VERSION = "3rule-v1"
MAX_KEY_ATOMS = 64


@dataclass(frozen=True)
class AtomEnv:
    element: str
    aromatic: bool
    in_ring: bool
    degree: int


@dataclass(frozen=True)
class Endpoint:
    """Predicate over one bond endpoint; ``None`` fields match anything."""

    element: str | None = None
    in_ring: bool | None = None
    aromatic: bool | None = None
    min_degree: int = 0

    def __call__(self, e: AtomEnv) -> bool:
        return ((self.element is None or e.element == self.element)
                and (self.in_ring is None or e.in_ring == self.in_ring)
                and (self.aromatic is None or e.aromatic == self.aromatic)
                and e.degree >= self.min_degree)


@dataclass(frozen=True)
class CleavageRule:
    id: str
    endpoint_a: Endpoint
    endpoint_b: Endpoint
    bond_order: int = 1
    description: str = ""

    def matches(self, a: AtomEnv, b: AtomEnv, order) -> bool:
        if order != self.bond_order:
            return False
        return (self.endpoint_a(a) and self.endpoint_b(b)) or (
            self.endpoint_a(b) and self.endpoint_b(a)
        )


# Terminal atoms (degree 1) stay with their neighbor under R2/R3, which keeps
# -OH, -OCH3, -NH2 and carboxyl/amide groups in one piece.
DEFAULT_RULE_TABLE = [
    {"id": "R1", "a": {"in_ring": True}, "b": {"in_ring": False},
     "description": "ring atom - acyclic heavy atom"},
    {"id": "R2", "a": {"element": "C", "in_ring": False, "min_degree": 2},
     "b": {"element": "N", "in_ring": False, "min_degree": 2},
     "description": "acyclic C - acyclic N, both non-terminal"},
    {"id": "R3", "a": {"element": "C", "in_ring": False, "min_degree": 2},
     "b": {"element": "O", "in_ring": False, "min_degree": 2},
     "description": "acyclic C - acyclic O, both non-terminal"},
]


def rules_from_table(table) -> tuple[CleavageRule, ...]:
    """Build rules from ``[{id, a, b, bond_order?, description?}]`` records (e.g. parsed JSON)."""
    rules = []
    for row in table:
        unknown = set(row) - {"id", "a", "b", "bond_order", "description"}
        if unknown:
            raise ValueError(f"rule {row.get('id')!r}: unknown fields {sorted(unknown)}")
        order = row.get("bond_order", 1)
        if order != 1:
            raise ValueError(f"rule {row['id']!r}: only single bonds can be cleaved")
        rules.append(CleavageRule(row["id"], Endpoint(**row["a"]), Endpoint(**row["b"]), order,
                                  row.get("description", "")))
    return tuple(rules)


DEFAULT_RULES: tuple[CleavageRule, ...] = rules_from_table(DEFAULT_RULE_TABLE)


@dataclass
class FunctionalGroup:
    parent_molecule: int | str
    atom_indices: list[int]
    attachment_points: list[tuple[int, int]] = field(default_factory=list)
    canonical_key: str = ""

    @property
    def size(self) -> int:
        return len(self.atom_indices)


def _envs(graph: MolecularGraph) -> list[AtomEnv]:
    ring_atoms = graph.ring_atoms()
    deg = [0] * graph.num_atoms
    for a, b, _ in graph.bonds:
        deg[a] += 1
        deg[b] += 1
    return [
        AtomEnv(at.element, at.aromatic, i in ring_atoms, deg[i]) for i, at in enumerate(graph.atoms)
    ]


def find_cleavable_bonds(graph: MolecularGraph, rules=DEFAULT_RULES) -> list[int]:
    """Indices of acyclic single bonds matched by any rule, in bond order."""
    envs = _envs(graph)
    out = []
    for k, (a, b, order) in enumerate(graph.bonds):
        if graph.ring_bond_flags[k]:
            continue
        if any(r.matches(envs[a], envs[b], order) for r in rules):
            out.append(k)
    return out


def fragment(graph: MolecularGraph, molecule_id: int | str = 0, rules=DEFAULT_RULES) -> list[FunctionalGroup]:
    """Cut all cleavable bonds and return the connected components.

    Fragments are ordered by their lowest atom index; ``attachment_points``
    list ``(atom inside, partner outside)`` for each severed bond.
    """
    cut = set(find_cleavable_bonds(graph, rules))
    parent = list(range(graph.num_atoms))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for k, (a, b, _) in enumerate(graph.bonds):
        if k not in cut:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for i in range(graph.num_atoms):
        groups.setdefault(find(i), []).append(i)
    comp_of = {i: root for root, members in groups.items() for i in members}
    frags = []
    for root in sorted(groups, key=lambda r: groups[r][0]):
        members = groups[root]
        attach = []
        for k in sorted(cut):
            a, b, _ = graph.bonds[k]
            if comp_of[a] == root:
                attach.append((a, b))
            elif comp_of[b] == root:
                attach.append((b, a))
        fg = FunctionalGroup(molecule_id, members, attach)
        fg.canonical_key = canonical_key(fg, graph)
        frags.append(fg)
    return frags


def fragment_assignment(frags: list[FunctionalGroup], num_atoms: int) -> list[int]:
    """Atom index -> position of its fragment in ``frags``."""
    out = [-1] * num_atoms
    for j, fg in enumerate(frags):
        for i in fg.atom_indices:
            out[i] = j
    if any(v < 0 for v in out):
        raise ValueError("fragments do not cover every atom")
    return out


def fragment_labels(fg: FunctionalGroup, graph: MolecularGraph):
    """Node labels and labeled edges of the fragment's induced subgraph (local indices)."""
    local = {a: i for i, a in enumerate(fg.atom_indices)}
    attached = {a for a, _ in fg.attachment_points}
    labels = []
    for a in fg.atom_indices:
        at = graph.atoms[a]
        labels.append((at.element, at.aromatic, at.formal_charge, a in attached))
    edges = []
    for a, b, order in graph.bonds:
        if a in local and b in local:
            edges.append((local[a], local[b], order))
    return labels, edges


def canonical_key(fg: FunctionalGroup, graph: MolecularGraph, rounds: int = 3) -> str:
    """Morgan-style refinement hash over (element, aromatic, charge, attachment flag).

    Three rounds of neighborhood refinement (bond orders included), then a
    hash of the sorted multiset of final atom invariants.
    """
    if fg.size > MAX_KEY_ATOMS:
        raise ValueError(f"fragment with {fg.size} atoms exceeds the {MAX_KEY_ATOMS}-atom key limit")
    labels, edges = fragment_labels(fg, graph)
    nbrs: list[list[tuple[int, str]]] = [[] for _ in labels]
    for a, b, order in edges:
        nbrs[a].append((b, str(order)))
        nbrs[b].append((a, str(order)))
    inv = [json.dumps(lab) for lab in labels]
    for _ in range(rounds):
        inv = [
            _digest(inv[i] + "|" + ",".join(sorted(f"{o}:{inv[j]}" for j, o in nbrs[i])))
            for i in range(len(inv))
        ]
    return _digest(f"n={len(labels)};e={len(edges)};" + ";".join(sorted(inv)))[:16]


def _digest(s: str) -> str:
    return hashlib.sha1(s.encode()).hexdigest()


def fragment_smiles(fg: FunctionalGroup, graph: MolecularGraph) -> str:
    """SMILES of the fragment's induced subgraph (for display)."""
    from .smiles import Atom, MolecularGraph as MG, serialize

    local = {a: i for i, a in enumerate(fg.atom_indices)}
    atoms = [Atom(graph.atoms[a].element, graph.atoms[a].aromatic, graph.atoms[a].formal_charge,
                  graph.atoms[a].explicit_h, bracket=True) for a in fg.atom_indices]
    bonds = [(local[a], local[b], o) for a, b, o in graph.bonds if a in local and b in local]
    sub = MG(atoms, bonds, [graph.ring_bond_flags[k] for k, (a, b, _) in enumerate(graph.bonds)
                            if a in local and b in local])
    return serialize(sub)
