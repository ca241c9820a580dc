"""Evaluation metrics: ROC-AUC, explanations, fidelity, JSD, conditional MI."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(random positive outranks random negative), ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("roc_auc needs both classes")
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2
    return float(u / (len(pos) * len(neg)))


@dataclass
class Explanation:
    molecule_id: int
    selected_atoms: list[int]
    scores: np.ndarray
    ratio: float = 0.5


def select_explanation(p, ratio: float = 0.5, molecule_id: int = 0) -> Explanation:
    """Top ``ceil(ratio * n)`` atoms by score, ties broken by lower index."""
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise ValueError("cannot explain an empty molecule")
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    k = math.ceil(ratio * p.size - 1e-12)
    order = sorted(range(p.size), key=lambda i: (-p[i], i))
    return Explanation(molecule_id, sorted(order[:k]), p, ratio)


def explanation_quality(selected, truth) -> tuple[float, float, float]:
    sel, tru = set(selected), set(truth)
    hit = len(sel & tru)
    precision = hit / len(sel) if sel else 0.0
    recall = hit / len(tru) if tru else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def fidelity(predict, num_atoms: int, selected, label: int) -> tuple[float, float]:
    """Fidelity+/- for one molecule.

    ``predict(mask)`` returns P(y=1) with atom rows where ``mask == 0``
    zeroed.  Fid+ = f(G) - f(G without explanation), Fid- = f(G) - f(explanation only),
    with f the probability of the true class.
    """
    def f(mask):
        p1 = float(predict(mask))
        return p1 if label == 1 else 1.0 - p1

    full = np.ones(num_atoms)
    expl = np.zeros(num_atoms)
    expl[list(selected)] = 1.0
    base = f(full)
    return base - f(1.0 - expl), base - f(expl)


def _check_dist(P: np.ndarray, name: str) -> None:
    if np.any(P < 0) or abs(P.sum() - 1) > 1e-9:
        raise ValueError(f"{name} is not a probability vector")


def jsd(P, Q) -> float:
    """Jensen-Shannon divergence in bits (range [0, 1])."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError("jsd: length mismatch")
    _check_dist(P, "P")
    _check_dist(Q, "Q")
    M = 0.5 * (P + Q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / b[nz])))

    return min(1.0, max(0.0, 0.5 * kl(P, M) + 0.5 * kl(Q, M)))


def softmax_rows(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Z = X - X.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def consistency_jsd(groups: dict) -> dict:
    """Mean pairwise JSD of softmax-normalized embeddings within each group."""
    out = {}
    for key, emb in groups.items():
        emb = np.atleast_2d(np.asarray(emb, dtype=np.float64))
        if emb.shape[0] < 2:
            log.warning("consistency_jsd: group %r has fewer than 2 embeddings; skipped", key)
            continue
        D = softmax_rows(emb)
        out[key] = float(np.mean([jsd(D[i], D[j]) for i, j in combinations(range(len(D)), 2)]))
    return out


def jaccard(a: set, b: set) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def property_similarity(fragment_sets: dict, causal_embeddings: dict):
    """Jaccard vs inverse-JSD property-property matrices and their correlation.

    Returns ``(jaccard_matrix, inverse_jsd_matrix, pearson, spearman, properties)``;
    correlations use the off-diagonal entries.
    """
    props = list(fragment_sets)
    if len(props) < 2:
        raise ValueError("property_similarity needs at least 2 properties")
    n = len(props)
    J = np.zeros((n, n))
    for i, a in enumerate(props):
        if not fragment_sets[a]:
            log.warning("property %r has an empty fragment set; Jaccard row zeroed", a)
            continue
        for j, b in enumerate(props):
            J[i, j] = jaccard(set(fragment_sets[a]), set(fragment_sets[b])) if fragment_sets[b] else 0.0
    means = {p: softmax_rows(np.atleast_2d(causal_embeddings[p])).mean(axis=0) for p in props}
    I = np.array([[1.0 - jsd(means[a], means[b]) for b in props] for a in props])
    off = ~np.eye(n, dtype=bool)
    x, y = J[off], I[off]
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        pearson = spearman = float("nan")
    else:
        pearson = float(stats.pearsonr(x, y)[0])
        spearman = float(stats.spearmanr(x, y)[0])
    return J, I, pearson, spearman, props


def correlation(x, y) -> tuple[float, float]:
    return float(stats.pearsonr(x, y)[0]), float(stats.spearmanr(x, y)[0])


# --------------------------------------------------------------------------
# conditional mutual information


def kmeans(X, k: int, rng: np.random.Generator, iterations: int = 20) -> np.ndarray:
    """Lloyd's k-means; empty clusters are dropped and labels re-indexed."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    uniq = np.unique(X, axis=0)
    k = min(k, len(uniq))
    # seed from distinct rows so duplicates cannot collapse two centers
    centers = uniq[rng.choice(len(uniq), size=k, replace=False)]
    for _ in range(iterations):
        d = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        lab = d.argmin(axis=1)
        used = np.unique(lab)
        centers = np.stack([X[lab == c].mean(axis=0) for c in used])
    d = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    lab = d.argmin(axis=1)
    _, lab = np.unique(lab, return_inverse=True)
    return lab


def _entropy(*cols) -> float:
    keys = np.stack(cols, axis=1)
    _, counts = np.unique(keys, axis=0, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def plugin_cmi(s, y, c) -> float:
    """Plug-in I(S;Y|C) in nats from discrete labels."""
    return _entropy(s, c) + _entropy(y, c) - _entropy(s, y, c) - _entropy(c)


def plugin_mi(a_cols, b_cols) -> float:
    return _entropy(*a_cols) + _entropy(*b_cols) - _entropy(*a_cols, *b_cols)


def cmi_direct(s, y, c) -> float:
    """I(S;Y|C) via the defining sum over empirical cells."""
    s, y, c = map(np.asarray, (s, y, c))
    n = len(s)
    total = 0.0
    for cv in np.unique(c):
        m = c == cv
        pc = m.sum() / n
        ss, yy = s[m], y[m]
        nc = m.sum()
        for sv in np.unique(ss):
            for yv in np.unique(yy):
                joint = np.sum((ss == sv) & (yy == yv)) / nc
                if joint == 0:
                    continue
                total += pc * joint * math.log(joint / ((ss == sv).mean() * (yy == yv).mean()))
    return total


@dataclass
class CMIResult:
    cmi: float
    chain_rule: float
    k_c: int
    k_s: int

    @property
    def identity_gap(self) -> float:
        return abs(self.cmi - self.chain_rule)


def conditional_mi(C_emb, S_emb, labels, k_clusters: int = 8, rng: np.random.Generator | None = None) -> CMIResult:
    """Discretize C and S by k-means and estimate I(S;Y|C) with the plug-in estimator.

    Also reports ``I(S; Y, C) - I(S; C)`` from the same counts.
    """
    C_emb = np.atleast_2d(np.asarray(C_emb, dtype=np.float64))
    S_emb = np.atleast_2d(np.asarray(S_emb, dtype=np.float64))
    y = np.asarray(labels).astype(np.int64)
    if len(y) < 10 * k_clusters:
        raise ValueError(f"conditional_mi needs at least {10 * k_clusters} samples, got {len(y)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    c = kmeans(C_emb, k_clusters, rng)
    s = kmeans(S_emb, k_clusters, rng)
    if c.max() + 1 < k_clusters or s.max() + 1 < k_clusters:
        log.info("conditional_mi: clusters reduced to C=%d S=%d", c.max() + 1, s.max() + 1)
    direct = cmi_direct(s, y, c)
    chain = plugin_mi([s], [y, c]) - plugin_mi([s], [c])
    return CMIResult(max(direct, 0.0), chain, int(c.max() + 1), int(s.max() + 1))
