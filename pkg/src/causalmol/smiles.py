"""SMILES subset parser, serializer and per-atom features.

Supported: organic-subset atoms (``B C N O P S F Cl Br I`` and aromatic
``b c n o p s``), bracket atoms with H count and charge, bonds ``- = # :``,
branches, ring closures ``1-9`` and ``%nn``.  Stereo, isotopes and dot
disconnections are rejected.  Valences are not checked.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

ELEMENTS = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC_ELEMENTS = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
AROMATIC = "ar"
BOND_ORDERS = (1, 2, 3, AROMATIC)
BOND_INDEX = {1: 0, 2: 1, 3: 2, AROMATIC: 3}
FEATURE_DIM = 27

# lowest allowed valence first
_DEFAULT_VALENCE = {
    "B": (3,),
    "C": (4,),
    "N": (3, 5),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}
_BOND_SYMBOL = {"-": 1, "=": 2, "#": 3, ":": AROMATIC}


class SmilesError(ValueError):
    """Parse failure; ``offset`` is the byte offset of the offending token."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class Atom:
    element: str
    aromatic: bool = False
    formal_charge: int = 0
    explicit_h: int = 0
    bracket: bool = False

    def label(self) -> tuple:
        return (self.element, self.aromatic, self.formal_charge, self.explicit_h)


@dataclass
class MolecularGraph:
    atoms: list[Atom]
    bonds: list[tuple[int, int, object]]
    ring_bond_flags: list[bool] = field(default_factory=list)
    source_smiles: str = ""

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    def neighbors(self) -> list[list[tuple[int, int]]]:
        """Per atom, a list of ``(neighbor, bond_index)``."""
        nbrs: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for k, (a, b, _) in enumerate(self.bonds):
            nbrs[a].append((b, k))
            nbrs[b].append((a, k))
        return nbrs

    def degree(self, i: int) -> int:
        return sum(1 for a, b, _ in self.bonds if a == i or b == i)

    def ring_atoms(self) -> set[int]:
        out = set()
        for (a, b, _), flag in zip(self.bonds, self.ring_bond_flags):
            if flag:
                out.update((a, b))
        return out


# --------------------------------------------------------------------------
# parsing


def _parse_bracket(text: str, start: int) -> tuple[Atom, int]:
    end = text.find("]", start)
    if end < 0:
        raise SmilesError("unclosed bracket atom '['", start)
    body = text[start + 1 : end]
    i = 0
    if body[:1].isdigit():
        raise SmilesError("isotopes are not supported", start + 1)
    if body[:2] in ("Cl", "Br"):
        sym, i = body[:2], 2
    elif body[:1] in ("B", "C", "N", "O", "P", "S", "F", "I"):
        sym, i = body[:1], 1
    elif body[:1] in AROMATIC_ELEMENTS:
        sym, i = body[:1], 1
    else:
        raise SmilesError(f"unknown element in bracket atom [{body}]", start + 1)
    aromatic = sym in AROMATIC_ELEMENTS
    element = AROMATIC_ELEMENTS.get(sym, sym)
    h = 0
    charge = 0
    if i < len(body) and body[i] == "@":
        raise SmilesError("stereochemistry is not supported", start + 1 + i)
    if i < len(body) and body[i] == "H":
        i += 1
        h = 1
        if i < len(body) and body[i].isdigit():
            h = int(body[i])
            i += 1
    if i < len(body) and body[i] in "+-":
        sign = 1 if body[i] == "+" else -1
        i += 1
        if i < len(body) and body[i].isdigit():
            charge = sign * int(body[i])
            i += 1
        else:
            charge = sign
            while i < len(body) and body[i] == ("+" if sign > 0 else "-"):
                charge += sign
                i += 1
    if i != len(body):
        raise SmilesError(f"unsupported bracket atom content [{body}]", start + 1 + i)
    if not -2 <= charge <= 2:
        raise SmilesError(f"formal charge {charge} outside [-2, 2]", start)
    return Atom(element, aromatic, charge, h, bracket=True), end + 1


def _implicit_h(atom: Atom, bonds_of_atom: list) -> int:
    if atom.bracket:
        return atom.explicit_h
    total = 0
    n_arom = 0
    for order in bonds_of_atom:
        if order == AROMATIC:
            n_arom += 1
        else:
            total += order
    if n_arom:
        # aromatic atoms only take their lowest valence; a pyrrole-type NH must be written [nH]
        total += n_arom + 1
        return max(0, _DEFAULT_VALENCE[atom.element][0] - total)
    for v in _DEFAULT_VALENCE[atom.element]:
        if v >= total:
            return v - total
    return 0


def find_bridges(num_atoms: int, bonds: list[tuple[int, int, object]]) -> set[int]:
    """Indices of bonds that lie on no cycle (iterative Tarjan lowpoint DFS)."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(num_atoms)]
    for k, (a, b, _) in enumerate(bonds):
        adj[a].append((b, k))
        adj[b].append((a, k))
    disc = [-1] * num_atoms
    low = [0] * num_atoms
    bridges: set[int] = set()
    t = 0
    for root in range(num_atoms):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = t
        t += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            v, via, it = stack[-1]
            advanced = False
            for w, k in it:
                if k == via:
                    continue
                if disc[w] < 0:
                    disc[w] = low[w] = t
                    t += 1
                    stack.append((w, k, iter(adj[w])))
                    advanced = True
                    break
                low[v] = min(low[v], disc[w])
            if advanced:
                continue
            stack.pop()
            if stack:
                parent = stack[-1][0]
                low[parent] = min(low[parent], low[v])
                if low[v] > disc[parent]:
                    bridges.add(via)
    return bridges


def parse(smiles: str) -> MolecularGraph:
    """Parse one connected molecule from the supported SMILES subset."""
    if not smiles:
        raise SmilesError("empty SMILES string", 0)
    atoms: list[Atom] = []
    bonds: list[tuple[int, int, object]] = []
    explicit_order: dict[int, bool] = {}
    pairs: set[frozenset] = set()
    branch_stack: list[tuple[int, int]] = []
    ring_open: dict[int, tuple[int, object, int]] = {}
    prev: int | None = None
    pending_bond: object = None
    pending_pos = 0
    i = 0
    n = len(smiles)

    def add_bond(a: int, b: int, order, pos: int) -> None:
        key = frozenset((a, b))
        if a == b or key in pairs:
            raise SmilesError("duplicate bond or self-loop", pos)
        pairs.add(key)
        explicit = order is not None
        if order is None:
            order = AROMATIC if atoms[a].aromatic and atoms[b].aromatic else 1
        bonds.append((a, b, order))
        explicit_order[len(bonds) - 1] = explicit

    while i < n:
        ch = smiles[i]
        if ch == "[" or ch.isalpha():
            pos = i
            if ch == "[":
                atom, i = _parse_bracket(smiles, i)
            else:
                two = smiles[i : i + 2]
                if two in ("Cl", "Br"):
                    atom, i = Atom(two), i + 2
                elif ch in ("B", "C", "N", "O", "P", "S", "F", "I"):
                    atom, i = Atom(ch), i + 1
                elif ch in AROMATIC_ELEMENTS:
                    atom, i = Atom(AROMATIC_ELEMENTS[ch], aromatic=True), i + 1
                else:
                    raise SmilesError(f"unknown token {ch!r}", pos)
            atoms.append(atom)
            idx = len(atoms) - 1
            if prev is not None:
                add_bond(prev, idx, pending_bond, pos)
            elif pending_bond is not None:
                raise SmilesError("bond symbol without a preceding atom", pending_pos)
            pending_bond = None
            prev = idx
            continue
        if ch in _BOND_SYMBOL:
            if pending_bond is not None:
                raise SmilesError("two consecutive bond symbols", i)
            pending_bond = _BOND_SYMBOL[ch]
            pending_pos = i
            i += 1
            continue
        if ch == "(":
            if prev is None:
                raise SmilesError("branch opened before any atom", i)
            branch_stack.append((prev, i))
            i += 1
            continue
        if ch == ")":
            if not branch_stack:
                raise SmilesError("unmatched ')'", i)
            if pending_bond is not None:
                raise SmilesError("dangling bond symbol before ')'", pending_pos)
            prev, _ = branch_stack.pop()
            i += 1
            continue
        if ch.isdigit() or ch == "%":
            pos = i
            if ch == "%":
                digits = smiles[i + 1 : i + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise SmilesError("'%' must be followed by two digits", i)
                num = int(digits)
                i += 3
            else:
                num = int(ch)
                if num == 0:
                    raise SmilesError("ring-closure digit 0 is not supported", i)
                i += 1
            if prev is None:
                raise SmilesError("ring closure before any atom", pos)
            if num in ring_open:
                other, order0, pos0 = ring_open.pop(num)
                order = pending_bond if pending_bond is not None else order0
                if pending_bond is not None and order0 is not None and pending_bond != order0:
                    raise SmilesError(f"conflicting bond orders for ring closure {num}", pos)
                add_bond(other, prev, order, pos)
            else:
                ring_open[num] = (prev, pending_bond, pos)
            pending_bond = None
            continue
        if ch == ".":
            raise SmilesError("multi-fragment SMILES ('.') is not supported", i)
        if ch in "/\\@":
            raise SmilesError("stereochemistry is not supported", i)
        raise SmilesError(f"unknown token {ch!r}", i)

    if pending_bond is not None:
        raise SmilesError("dangling bond symbol at end of string", pending_pos)
    if branch_stack:
        raise SmilesError("unclosed branch '('", branch_stack[-1][1])
    if ring_open:
        num, (_, _, pos) = next(iter(ring_open.items()))
        raise SmilesError(f"unclosed ring closure {num}", pos)

    graph = MolecularGraph(atoms, bonds, source_smiles=smiles)
    _finalize(graph)
    return graph


def _finalize(graph: MolecularGraph) -> None:
    bridges = find_bridges(graph.num_atoms, graph.bonds)
    graph.ring_bond_flags = [k not in bridges for k in range(len(graph.bonds))]
    ring_atoms = graph.ring_atoms()
    for i, atom in enumerate(graph.atoms):
        if atom.aromatic and i not in ring_atoms:
            raise SmilesError(f"aromatic atom {i} ({atom.element.lower()}) is not in a ring")
    orders: list[list] = [[] for _ in graph.atoms]
    for a, b, o in graph.bonds:
        orders[a].append(o)
        orders[b].append(o)
    for i, atom in enumerate(graph.atoms):
        atom.explicit_h = _implicit_h(atom, orders[i])
    # connectivity
    if graph.num_atoms > 1:
        nbrs = graph.neighbors()
        seen = {0}
        stack = [0]
        while stack:
            v = stack.pop()
            for w, _ in nbrs[v]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        if len(seen) != graph.num_atoms:
            raise SmilesError("molecule graph is not connected")


# --------------------------------------------------------------------------
# features


def atom_features(graph: MolecularGraph) -> np.ndarray:
    """Per-atom one-hot features, width 27.

    element (10) | degree 0-5 (6) | aromatic (1) | charge -2..2 (5) | H count 0-4 (5)
    """
    x = np.zeros((graph.num_atoms, FEATURE_DIM))
    deg = [0] * graph.num_atoms
    for a, b, _ in graph.bonds:
        deg[a] += 1
        deg[b] += 1
    for i, atom in enumerate(graph.atoms):
        x[i, ELEMENTS.index(atom.element)] = 1.0
        x[i, 10 + min(deg[i], 5)] = 1.0
        x[i, 16] = float(atom.aromatic)
        x[i, 17 + atom.formal_charge + 2] = 1.0
        x[i, 22 + min(atom.explicit_h, 4)] = 1.0
    return x


# --------------------------------------------------------------------------
# serialization


def _atom_token(atom: Atom, orders: list) -> str:
    sym = atom.element.lower() if atom.aromatic else atom.element
    plain = Atom(atom.element, atom.aromatic)
    if atom.formal_charge == 0 and _implicit_h(plain, orders) == atom.explicit_h:
        return sym
    out = "[" + sym
    if atom.explicit_h:
        out += "H" + (str(atom.explicit_h) if atom.explicit_h > 1 else "")
    if atom.formal_charge:
        out += ("+" if atom.formal_charge > 0 else "-")
        if abs(atom.formal_charge) > 1:
            out += str(abs(atom.formal_charge))
    return out + "]"


def _bond_token(order, a: Atom, b: Atom) -> str:
    if order == AROMATIC:
        return "" if a.aromatic and b.aromatic else ":"
    if order == 1:
        return "-" if a.aromatic and b.aromatic else ""
    return "=" if order == 2 else "#"


def _ring_label(num: int) -> str:
    return str(num) if num < 10 else f"%{num:02d}"


def serialize(graph: MolecularGraph) -> str:
    """Write a subset SMILES string that parses back to an isomorphic graph."""
    if graph.num_atoms == 0:
        raise SmilesError("cannot serialize an empty graph")
    for atom in graph.atoms:
        if atom.element not in ELEMENTS:
            raise SmilesError(f"element {atom.element!r} outside the supported subset")
        if not -2 <= atom.formal_charge <= 2 or atom.explicit_h < 0:
            raise SmilesError("atom charge or H count outside the supported subset")
        if atom.aromatic and atom.element not in AROMATIC_ELEMENTS.values():
            raise SmilesError(f"element {atom.element} cannot be aromatic")
    nbrs = graph.neighbors()
    orders: list[list] = [[] for _ in graph.atoms]
    for a, b, o in graph.bonds:
        orders[a].append(o)
        orders[b].append(o)

    # spanning tree by DFS; non-tree bonds become ring closures
    visited = [False] * graph.num_atoms
    tree_children: list[list[tuple[int, int]]] = [[] for _ in graph.atoms]
    closures: list[list[tuple[int, int]]] = [[] for _ in graph.atoms]
    tree_bonds: set[int] = set()
    stack = [(0, -1)]
    order_seen: list[int] = []
    while stack:
        v, via = stack.pop()
        if visited[v]:
            continue
        visited[v] = True
        order_seen.append(v)
        if via >= 0:
            tree_bonds.add(via)
        for w, k in reversed(nbrs[v]):
            if not visited[w]:
                stack.append((w, k))
    if not all(visited):
        raise SmilesError("graph is not connected")
    # rebuild children from the bonds actually used
    parent_bond = {}
    for k in tree_bonds:
        a, b, _ = graph.bonds[k]
        pa, pb = order_seen.index(a), order_seen.index(b)
        child = b if pb > pa else a
        parent_bond[child] = k
    for child, k in parent_bond.items():
        a, b, _ = graph.bonds[k]
        par = a if b == child else b
        tree_children[par].append((child, k))
    rank = {v: r for r, v in enumerate(order_seen)}
    for v in range(graph.num_atoms):
        tree_children[v].sort(key=lambda ck: rank[ck[0]])
    for k, (a, b, _) in enumerate(graph.bonds):
        if k not in tree_bonds:
            closures[a].append((b, k))
            closures[b].append((a, k))

    free: list[int] = []
    next_label = 1
    open_labels: dict[int, int] = {}
    out: list[str] = []

    def emit(v: int) -> None:
        nonlocal next_label
        out.append(_atom_token(graph.atoms[v], orders[v]))
        for w, k in sorted(closures[v], key=lambda wk: rank[wk[0]]):
            if k in open_labels:
                lab = open_labels.pop(k)
                out.append(_bond_token(graph.bonds[k][2], graph.atoms[v], graph.atoms[w]) + _ring_label(lab))
                free.append(lab)
                free.sort()
            else:
                if free:
                    lab = free.pop(0)
                else:
                    lab = next_label
                    next_label += 1
                if lab > 99:
                    raise SmilesError("too many simultaneous ring closures")
                open_labels[k] = lab
                out.append(_bond_token(graph.bonds[k][2], graph.atoms[v], graph.atoms[w]) + _ring_label(lab))
        kids = tree_children[v]
        for j, (w, k) in enumerate(kids):
            tok = _bond_token(graph.bonds[k][2], graph.atoms[v], graph.atoms[w])
            if j < len(kids) - 1:
                out.append("(" + tok)
                emit(w)
                out.append(")")
            else:
                out.append(tok)
                emit(w)

    emit(0)
    return "".join(out)


# --------------------------------------------------------------------------
# dataset files


@dataclass
class Dataset:
    smiles: list[str]
    task_names: list[str]
    labels: np.ndarray  # (n_molecules, n_tasks); nan = missing

    @property
    def num_tasks(self) -> int:
        return len(self.task_names)

    def labeled(self, task: int, value: int) -> np.ndarray:
        return np.flatnonzero(self.labels[:, task] == value)


def read_dataset(path) -> Dataset:
    """Read a TSV with header ``smiles<TAB>task_0...``; empty cells are missing labels."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader)
        if not header or header[0] != "smiles":
            raise ValueError(f"{path}: first header column must be 'smiles'")
        tasks = header[1:]
        smiles, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            smiles.append(row[0])
            vals = []
            for cell in row[1:]:
                if cell == "":
                    vals.append(np.nan)
                elif cell in ("0", "1"):
                    vals.append(float(cell))
                else:
                    raise ValueError(f"{path}:{lineno}: label must be 0, 1 or empty, got {cell!r}")
            rows.append(vals)
    labels = np.array(rows, dtype=float).reshape(len(smiles), len(tasks))
    return Dataset(smiles, tasks, labels)


def write_dataset(path, dataset: Dataset) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(["smiles"] + list(dataset.task_names)) + "\n")
        for s, row in zip(dataset.smiles, dataset.labels):
            cells = ["" if np.isnan(v) else str(int(v)) for v in row]
            fh.write("\t".join([s] + cells) + "\n")
