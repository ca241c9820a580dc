"""Evaluate a trained model on unseen test tasks and assemble the JSON report."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore
from .config import FORMAT_VERSION
from .evaluation import (conditional_mi, consistency_jsd, explanation_quality, property_similarity, roc_auc,
                         select_explanation)
from .intervene import PoolEntry, intervene_predict
from .meta import MetaLearner, derived_rng
from .model import forward

_CONTROL = 11


@dataclass
class MoleculeResult:
    mol_id: int
    task: int
    episode: int
    label: int
    prob: float
    c: np.ndarray
    s: np.ndarray
    p: np.ndarray | None = None
    selected: list[int] = field(default_factory=list)
    truth: list[int] | None = None
    fid_plus: float = float("nan")
    fid_minus: float = float("nan")
    pool_probs: np.ndarray | None = None
    c_random: np.ndarray | None = None
    fragment_keys: list[str] = field(default_factory=list)


@dataclass
class Collected:
    molecules: list[MoleculeResult]
    episode_auc: dict[int, list[float]]


def _true_class(prob: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.where(labels == 1, prob, 1.0 - prob)


def collect(learner: MetaLearner, theta: ParameterStore, bank: list[PoolEntry], truth: dict | None = None,
            n_episodes: int = 10, ratio: float = 0.5, eval_seed: int = 0) -> Collected:
    """Adapt on every test episode, then score and explain its query molecules."""
    cfg = learner.model_cfg
    mols: list[MoleculeResult] = []
    aucs: dict[int, list[float]] = {}
    for task in learner.test_tasks:
        aucs[task] = []
        for i in range(n_episodes):
            data = learner.test_episode(task, i, eval_seed)
            theta_p, pool = learner.adapt(theta, data, bank, i)
            with ad.no_grad():
                out = forward(theta_p, data, cfg, "query", None, train=False)
            prob = out.prob.values
            labels = out.labels.astype(int)
            aucs[task].append(roc_auc(prob, labels))
            slices = out.atom_slices()
            base = _true_class(prob, labels)
            cv, sv = out.c.values, out.s.values
            rows = []
            for j, m in enumerate(out.mol_ids):
                rec = data.records[m]
                r = MoleculeResult(m, task, i, int(labels[j]), float(prob[j]), cv[j].copy(), sv[j].copy(),
                                   fragment_keys=sorted(rec.keys))
                if truth is not None and m in truth:
                    r.truth = list(truth[m])
                rows.append(r)
            if cfg.use_causal:
                p = out.p.values
                remove = np.ones(len(p))
                keep = np.zeros(len(p))
                for r, sl in zip(rows, slices):
                    r.p = p[sl].copy()
                    r.selected = select_explanation(r.p, ratio, r.mol_id).selected_atoms
                    idx = np.arange(sl.start, sl.stop)[r.selected]
                    remove[idx] = 0.0
                    keep[idx] = 1.0
                with ad.no_grad():
                    pr = forward(theta_p, data, cfg, "query", None, train=False, atom_mask=remove,
                                 noise_stats_from=out).prob.values
                    pk = forward(theta_p, data, cfg, "query", None, train=False, atom_mask=keep,
                                 noise_stats_from=out).prob.values
                fplus = base - _true_class(pr, labels)
                fminus = base - _true_class(pk, labels)
                with ad.no_grad():
                    pp = intervene_predict(out.c, pool.matrix(), theta_p).values if len(pool) else None
                # random-mask control: same number of kept atoms per molecule, positions shuffled
                H = out.H.values
                mu = H.mean(axis=0)
                rng = derived_rng(learner.seed, _CONTROL, task, i, eval_seed)
                lam = out.lam.values
                for j, (r, sl) in enumerate(zip(rows, slices)):
                    r.fid_plus, r.fid_minus = float(fplus[j]), float(fminus[j])
                    if pp is not None:
                        r.pool_probs = pp[j].copy()
                    mask = rng.permutation(lam[sl])
                    block = H[sl]
                    r.c_random = (mask[:, None] * block + (1 - mask)[:, None] * mu).sum(axis=0)
            mols.extend(rows)
    return Collected(mols, aucs)


def oracle_precision(truth: list[int], num_atoms: int, ratio: float = 0.5) -> float:
    """Best precision any top-ratio selection can reach against ``truth``."""
    k = math.ceil(ratio * num_atoms - 1e-12)
    return min(len(truth), k) / k


def summarize(col: Collected, config_digest: str = "", ratio: float = 0.5, k_clusters: int = 8,
              seed: int = 0) -> dict:
    per_task = {str(t): float(np.mean(v)) for t, v in col.episode_auc.items()}
    vals = list(per_task.values())
    rep: dict = {
        "format_version": FORMAT_VERSION,
        "config_digest": config_digest,
        "auc_per_task": per_task,
        "auc_mean": float(np.mean(vals)),
        "auc_std": float(np.std(vals)),
        "n_query_molecules": len(col.molecules),
    }
    mols = col.molecules
    if mols and mols[0].p is not None:
        scored = [m for m in mols if m.truth]
        if scored:
            q = np.array([explanation_quality(m.selected, m.truth) for m in scored])
            rep["explanation"] = {
                "ratio": ratio,
                "precision": float(q[:, 0].mean()),
                "recall": float(q[:, 1].mean()),
                "f1": float(q[:, 2].mean()),
                "n_molecules": len(scored),
                "oracle_precision": float(np.mean([oracle_precision(m.truth, len(m.p), ratio) for m in scored])),
            }
        rep["fidelity"] = {
            "fid_plus": float(np.mean([m.fid_plus for m in mols])),
            "fid_minus": float(np.mean([m.fid_minus for m in mols])),
            "n_molecules": len(mols),
        }
        model_groups, random_groups = {}, {}
        for t in col.episode_auc:
            act = [m for m in mols if m.task == t and m.label == 1]
            if len(act) >= 2:
                model_groups[str(t)] = np.stack([m.c for m in act])
                random_groups[str(t)] = np.stack([m.c_random for m in act])
        rep["jsd"] = {"model": consistency_jsd(model_groups), "random_mask": consistency_jsd(random_groups)}
        stds = [float(np.std(m.pool_probs)) for m in mols if m.pool_probs is not None]
        if stds:
            rep["backdoor"] = {"pool_std_mean": float(np.mean(stds)), "pool_size": len(mols[0].pool_probs)}
    if len(mols) >= 10 * k_clusters:
        res = conditional_mi(np.stack([m.c for m in mols]), np.stack([m.s for m in mols]),
                             [m.label for m in mols], k_clusters, np.random.default_rng(seed))
        rep["cmi"] = {"cmi": res.cmi, "chain_rule": res.chain_rule, "identity_gap": res.identity_gap,
                      "k_c": res.k_c, "k_s": res.k_s}
    return rep


def explanations(col: Collected, smiles: list[str]) -> list[dict]:
    """Per-molecule records ``{molecule_id, smiles, p, selected}``."""
    out = []
    for m in col.molecules:
        if m.p is None:
            continue
        rec = {"molecule_id": m.mol_id, "smiles": smiles[m.mol_id], "task": m.task, "episode": m.episode,
               "label": m.label, "prob": m.prob, "p": [float(x) for x in m.p], "selected": m.selected}
        if m.truth is not None:
            rec["truth"] = m.truth
            rec["precision"] = explanation_quality(m.selected, m.truth)[0] if m.truth else None
        out.append(rec)
    return out


def similarity_matrices(col: Collected):
    """Per-task Jaccard (selected-atom fragment keys of actives) and inverse-JSD matrices."""
    frag_sets, emb = {}, {}
    for t in col.episode_auc:
        act = [m for m in col.molecules if m.task == t and m.label == 1]
        frag_sets[str(t)] = sorted({k for m in act for k in m.fragment_keys})
        emb[str(t)] = np.stack([m.c for m in act])
    return property_similarity(frag_sets, emb)


def write_matrix_csv(path: str, names: list[str], M: np.ndarray, config_digest: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# format_version={FORMAT_VERSION} config_digest={config_digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["property"] + names)
        for n, row in zip(names, M):
            w.writerow([n] + [repr(float(x)) for x in row])
