"""Per-molecule preprocessing cache: parsed graph, features, fragments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import molecule_arrays
from .fragment import FunctionalGroup, fragment, fragment_assignment
from .smiles import Dataset, MolecularGraph, parse


@dataclass
class MoleculeRecord:
    mol_id: int
    smiles: str
    graph: MolecularGraph
    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    etype: np.ndarray
    fragments: list[FunctionalGroup]
    assignment: np.ndarray
    fragment_features: np.ndarray  # (n_fragments, 27) summed raw atom features

    @property
    def num_atoms(self) -> int:
        return self.graph.num_atoms

    @property
    def keys(self) -> list[str]:
        return [f.canonical_key for f in self.fragments]

    def arrays(self):
        return self.x, self.src, self.dst, self.etype


def make_record(mol_id: int, smiles: str) -> MoleculeRecord:
    graph = parse(smiles)
    x, src, dst, et = molecule_arrays(graph)
    frags = fragment(graph, mol_id)
    assign = np.array(fragment_assignment(frags, graph.num_atoms), dtype=np.int64)
    feats = np.stack([x[f.atom_indices].sum(axis=0) for f in frags])
    return MoleculeRecord(mol_id, smiles, graph, x, src, dst, et, frags, assign, feats)


class MoleculeCache:
    """Lazily parsed records for the molecules of a :class:`Dataset`."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self._records: dict[int, MoleculeRecord] = {}

    def __getitem__(self, mol_id: int) -> MoleculeRecord:
        rec = self._records.get(mol_id)
        if rec is None:
            rec = make_record(mol_id, self.dataset.smiles[mol_id])
            self._records[mol_id] = rec
        return rec

    def label(self, mol_id: int, task: int) -> float:
        return float(self.dataset.labels[mol_id, task])
