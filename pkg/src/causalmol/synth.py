"""Synthetic few-shot tasks with planted causal functional groups.

Each task owns one causal motif.  Molecules are a ring scaffold carrying
one or two distractor motifs (other tasks' motifs; training tasks only
borrow from other training tasks) and, for actives, the task's causal
motif.  The ground truth for a molecule is the atom set of
its causal motif.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .fragment import fragment
from .smiles import Dataset, parse, write_dataset

DEFAULT_MOTIFS = ("O", "[N+](=O)[O-]", "C(=O)O", "N", "Cl", "S", "OC", "C#N")
EXTRA_MOTIFS = ("Br", "C(=O)N")
# ten tasks need ten motifs
BENCHMARK_MOTIFS = DEFAULT_MOTIFS + EXTRA_MOTIFS
# ring atom symbols; positions holding "n" cannot take substituents
DEFAULT_SCAFFOLDS = ("c1ccccc1", "C1CCCCC1", "c1ccncc1")
_SCAFFOLD_ATOMS = {
    "c1ccccc1": ["c"] * 6,
    "C1CCCCC1": ["C"] * 6,
    "c1ccncc1": ["c", "c", "c", "n", "c", "c"],
}
FORMAT_VERSION = 1


class SynthError(RuntimeError):
    pass


@dataclass
class SynthSpec:
    n_tasks_train: int = 8
    n_tasks_test: int = 2
    motif_vocab: tuple = DEFAULT_MOTIFS
    scaffold_vocab: tuple = DEFAULT_SCAFFOLDS
    molecules_per_task: int = 200
    label_noise: float = 0.0
    seed: int = 0
    max_retries: int = 20

    @property
    def n_tasks(self) -> int:
        return self.n_tasks_train + self.n_tasks_test

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motif_vocab"] = list(self.motif_vocab)
        d["scaffold_vocab"] = list(self.scaffold_vocab)
        return d

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def motif_key(motif: str) -> str:
    """Canonical fragment key of ``motif`` when attached to a ring."""
    g = parse("c1ccccc1" + motif if not motif.startswith("(") else "c1ccccc1" + motif)
    n_motif = len(parse(motif).atoms)
    frags = fragment(g)
    target = set(range(6, 6 + n_motif))
    for fg in frags:
        if set(fg.atom_indices) == target:
            return fg.canonical_key
    raise SynthError(f"motif {motif!r} is not recovered as a single fragment")


def gen_task_spec(spec: SynthSpec, rng: np.random.Generator) -> dict[int, int]:
    """Injective task -> motif-index map; train tasks come first."""
    if len(spec.motif_vocab) < spec.n_tasks:
        raise SynthError(f"{spec.n_tasks} tasks need at least as many motifs, vocabulary has {len(spec.motif_vocab)}")
    keys = [motif_key(m) for m in spec.motif_vocab]
    if len(set(keys)) != len(keys):
        raise SynthError("motif vocabulary contains fragments with identical keys")
    perm = rng.permutation(len(spec.motif_vocab))
    return {t: int(perm[t]) for t in range(spec.n_tasks)}


@dataclass
class SynthMolecule:
    smiles: str
    truth: list[int]
    label: int
    planted: bool
    flipped: bool
    distractors: list[int] = field(default_factory=list)


def _assemble(scaffold: str, subs: dict[int, str]) -> tuple[str, dict[int, list[int]]]:
    ring = _SCAFFOLD_ATOMS[scaffold]
    parts, spans = [], {}
    n_atoms = 0
    for j, sym in enumerate(ring):
        tok = sym + ("1" if j in (0, len(ring) - 1) else "")
        n_atoms += 1
        if j in subs:
            m = subs[j]
            k = len(parse(m).atoms)
            spans[j] = list(range(n_atoms, n_atoms + k))
            n_atoms += k
            tok += "(" + m + ")"
        parts.append(tok)
    return "".join(parts), spans


def gen_molecule(task: int, label: int, spec: SynthSpec, assignment: dict[int, int],
                 rng: np.random.Generator) -> SynthMolecule:
    """One molecule for ``task``; the causal motif is planted iff ``label == 1``.

    The stored label is flipped with probability ``spec.label_noise``.
    """
    causal = assignment[task]
    # training molecules never contain a test-task motif
    train_side = task < spec.n_tasks_train
    others = [m for t, m in assignment.items() if t != task and (not train_side or t < spec.n_tasks_train)]
    causal_key = motif_key(spec.motif_vocab[causal])
    for _ in range(spec.max_retries):
        scaffold = spec.scaffold_vocab[rng.integers(len(spec.scaffold_vocab))]
        ring = _SCAFFOLD_ATOMS[scaffold]
        free = [j for j, s in enumerate(ring) if s.lower() == "c"]
        n_dis = int(rng.integers(1, 3))
        dis = [int(x) for x in rng.choice(others, size=n_dis, replace=False)]
        motifs = ([causal] if label == 1 else []) + dis
        slots = rng.choice(free, size=len(motifs), replace=False)
        subs = {int(j): spec.motif_vocab[m] for j, m in zip(slots, motifs)}
        smi, spans = _assemble(scaffold, subs)
        truth = spans[int(slots[0])] if label == 1 else []
        g = parse(smi)
        frags = fragment(g)
        causal_frags = [f for f in frags if f.canonical_key == causal_key]
        if label == 1 and not any(sorted(f.atom_indices) == truth for f in causal_frags):
            continue
        if label == 0 and causal_frags:
            continue
        flipped = bool(rng.uniform() < spec.label_noise)
        return SynthMolecule(smi, truth, 1 - label if flipped else label, label == 1, flipped, dis)
    raise SynthError(f"could not generate a self-consistent molecule for task {task}")


def gen_dataset(spec: SynthSpec, out_dir=None) -> tuple[Dataset, dict, list[dict]]:
    """Generate all tasks; each row is labeled only for the task that produced it.

    With ``out_dir`` writes ``dataset.tsv``, ``splits.json`` and
    ``groundtruth.jsonl``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 101]))
    assignment = gen_task_spec(spec, rng)
    T = spec.n_tasks
    smiles, rows, truth = [], [], []
    for task in range(T):
        n_pos = spec.molecules_per_task // 2
        labels = np.array([1] * n_pos + [0] * (spec.molecules_per_task - n_pos))
        labels = rng.permutation(labels)
        for y in labels:
            mol = gen_molecule(task, int(y), spec, assignment, rng)
            row = [np.nan] * T
            row[task] = float(mol.label)
            mid = len(smiles)
            smiles.append(mol.smiles)
            rows.append(row)
            truth.append({"molecule": mid, "task": task, "smiles": mol.smiles, "atoms": mol.truth,
                          "planted": mol.planted, "flipped": mol.flipped, "distractors": mol.distractors})
    ds = Dataset(smiles, [f"task_{t}" for t in range(T)], np.array(rows, dtype=float))
    digest = spec.digest
    splits = {
        "format_version": FORMAT_VERSION,
        "config_digest": digest,
        "train": list(range(spec.n_tasks_train)),
        "test": list(range(spec.n_tasks_train, T)),
        "motifs": {str(t): spec.motif_vocab[m] for t, m in assignment.items()},
        "spec": spec.to_dict(),
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_dataset(os.path.join(out_dir, "dataset.tsv"), ds)
        with open(os.path.join(out_dir, "splits.json"), "w", encoding="utf-8") as fh:
            json.dump(splits, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out_dir, "groundtruth.jsonl"), "w", encoding="utf-8") as fh:
            for rec in truth:
                stamped = dict(rec, format_version=FORMAT_VERSION, config_digest=digest)
                fh.write(json.dumps(stamped, sort_keys=True) + "\n")
    return ds, splits, truth
