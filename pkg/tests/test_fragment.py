import itertools

import numpy as np
import pytest

from causalmol.fragment import (DEFAULT_RULE_TABLE, DEFAULT_RULES, FunctionalGroup, canonical_key,
                                find_cleavable_bonds, fragment, fragment_assignment, fragment_smiles,
                                rules_from_table)
from causalmol.smiles import parse
from causalmol.synth import BENCHMARK_MOTIFS, DEFAULT_SCAFFOLDS
from helpers import corpus, isomorphic, to_nx

NITROPHENOL = "Oc1ccc(cc1)[N+](=O)[O-]"


def frag_nx(fg, g):
    return to_nx(g, fg.atom_indices, {a for a, _ in fg.attachment_points})


def test_cleavable_bond_examples():
    assert find_cleavable_bonds(parse("CC")) == []
    g = parse(NITROPHENOL)
    cut = find_cleavable_bonds(g)
    ends = sorted(tuple(sorted(g.atoms[i].element for i in g.bonds[k][:2])) for k in cut)
    assert ends == [("C", "N"), ("C", "O")]
    assert all(not g.ring_bond_flags[k] for k in cut)
    g = parse("Cc1ccccc1")
    assert find_cleavable_bonds(g) == [0]


def test_nitrophenol_fragments():
    g = parse(NITROPHENOL)
    frags = fragment(g)
    assert len(frags) == 3
    by_size = sorted(frags, key=lambda f: f.size)
    oh, nitro, ring = by_size
    assert [g.atoms[i].element for i in oh.atom_indices] == ["O"]
    assert sorted(g.atoms[i].element for i in nitro.atom_indices) == ["N", "O", "O"]
    assert ring.size == 6 and all(g.atoms[i].aromatic for i in ring.atom_indices)
    assert len(ring.attachment_points) == 2
    assert fragment_smiles(oh, g) == "[OH]"


def test_no_cut_yields_whole_molecule():
    g = parse("CC")
    (fg,) = fragment(g)
    assert fg.atom_indices == [0, 1] and fg.attachment_points == []


def test_partition_and_ring_safety_on_corpus():
    for s in corpus():
        g = parse(s)
        frags = fragment(g)
        atoms = [i for f in frags for i in f.atom_indices]
        assert sorted(atoms) == list(range(g.num_atoms)), s
        assert len(set(atoms)) == len(atoms)
        for k in find_cleavable_bonds(g):
            assert not g.ring_bond_flags[k]
        assign = fragment_assignment(frags, g.num_atoms)
        assert len(assign) == g.num_atoms
        for f in frags:
            import networkx as nx
            assert nx.is_connected(to_nx(g, f.atom_indices))


def test_key_examples():
    k1 = next(f.canonical_key for f in fragment(parse("Oc1ccccc1")) if f.size == 1)
    k2 = next(f.canonical_key for f in fragment(parse("CCc1ccc(O)cc1")) if f.size == 1 and
              parse("CCc1ccc(O)cc1").atoms[f.atom_indices[0]].element == "O")
    assert k1 == k2
    ks = next(f.canonical_key for f in fragment(parse("Sc1ccccc1")) if f.size == 1)
    assert ks != k1
    # the same ring with substituents at different positions
    rings = []
    for s in ("Oc1ccc(N)cc1", "Oc1cc(N)ccc1", "Oc1c(N)cccc1"):
        g = parse(s)
        rings.append([f for f in fragment(g) if f.size == 6][0].canonical_key)
    assert len(set(rings)) == 3  # attachment flags sit at different relative positions
    a = [f for f in fragment(parse("Oc1ccccc1")) if f.size == 6][0].canonical_key
    b = [f for f in fragment(parse("c1ccccc1N")) if f.size == 6][0].canonical_key
    assert a == b  # single attachment: all positions symmetric


def test_oversized_fragment_rejected():
    g = parse("C" * 70)
    with pytest.raises(ValueError, match="64"):
        canonical_key(FunctionalGroup(0, list(range(70))), g)


def _pool():
    """Fragments from the motif vocabulary on every scaffold position, plus corpus fragments <= 12 atoms."""
    out = []
    for sc in DEFAULT_SCAFFOLDS:
        for m in BENCHMARK_MOTIFS:
            g = parse(sc + m) if sc != "c1ccncc1" else parse("c1cc(" + m + ")ncc1")
            out += [(f, g) for f in fragment(g)]
    for s in corpus()[:120]:
        g = parse(s)
        out += [(f, g) for f in fragment(g) if f.size <= 12]
    return out


def test_key_matches_bruteforce_isomorphism():
    pool = _pool()
    graphs = [frag_nx(f, g) for f, g in pool]
    keys = [f.canonical_key for f, _ in pool]
    # one representative per (key, isomorphism class) is enough for the exhaustive pairwise check
    reps = []
    for G, k in zip(graphs, keys):
        if not any(k == k2 and isomorphic(G, G2) for G2, k2 in reps):
            reps.append((G, k))
    for (G1, k1), (G2, k2) in itertools.combinations(reps, 2):
        assert (k1 == k2) == isomorphic(G1, G2)


def test_motif_vocabulary_keys_are_distinct():
    keys = set()
    for m in BENCHMARK_MOTIFS:
        g = parse("c1ccccc1" + m)
        n = len(parse(m).atoms)
        (fg,) = [f for f in fragment(g) if f.atom_indices == list(range(6, 6 + n))]
        keys.add(fg.canonical_key)
    assert len(keys) == len(BENCHMARK_MOTIFS)


def test_rule_table_is_data():
    assert rules_from_table(DEFAULT_RULE_TABLE) == DEFAULT_RULES
    only_ring = rules_from_table([DEFAULT_RULE_TABLE[0]])
    g = parse("c1ccccc1OCC")
    assert len(find_cleavable_bonds(g, only_ring)) == 1
    assert find_cleavable_bonds(g) == [6, 7]  # ring-O by R1, O-CH2 by R3; CH2-CH3 is never cut
    with pytest.raises(ValueError):
        rules_from_table([{"id": "X", "a": {}, "b": {}, "bond_order": 2}])
    with pytest.raises(ValueError):
        rules_from_table([{"id": "X", "a": {}, "b": {}, "colour": "red"}])


def test_chain_rules_need_non_terminal_endpoints():
    # ester O between two carbons is cut on both sides, the terminal OH of an acid is not
    g = parse("CCOCC")
    assert [f.size for f in fragment(g)] == [2, 1, 2]
    g = parse("CC(=O)O")
    assert len(fragment(g)) == 1
