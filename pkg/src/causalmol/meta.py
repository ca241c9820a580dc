"""Episodic sampling and MAML-style meta-training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AutodiffError, GradientMap, ParameterStore, backward, sgd_step
from .evaluation import roc_auc
from .intervene import ConfounderPool, PoolEntry, build_confounder_pool
from .model import EpisodeData, EpisodeOutput, ModelConfig, forward, fragment_candidates, prepare_episode
from .records import MoleculeCache
from .smiles import Dataset

log = logging.getLogger(__name__)

# stream ids for derived RNGs
_EPISODE, _POOL, _INNER, _QUERY, _TASKS, _BANK, _TEST = range(1, 8)


def derived_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``; order of use does not matter."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in keys]))


@dataclass
class Episode:
    task_id: int
    support: list[tuple[int, int]]
    query: list[tuple[int, int]]
    K: int
    rng_seed: int = 0

    def check(self) -> None:
        pos = sum(1 for _, y in self.support if y == 1)
        neg = sum(1 for _, y in self.support if y == 0)
        if pos != self.K or neg != self.K:
            raise ValueError(f"support must hold {self.K} actives and {self.K} inactives, got {pos}/{neg}")
        if {m for m, _ in self.support} & {m for m, _ in self.query}:
            raise ValueError("support and query overlap")


@dataclass
class MetaConfig:
    inner_lr: float = 0.05
    outer_lr: float = 0.001
    batch_episodes: int = 8
    inner_steps: int = 1
    test_inner_steps: int = 1
    epochs: int = 300
    first_order: bool = True
    k_shot: int = 5
    query_per_class: int = 16
    pool_size: int = 16
    bank_size: int = 64
    outer_optimizer: str = "adam"
    weight_decay: float = 1e-5
    context_aux: bool = True
    test_context_aux: bool = False

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.batch_episodes < 1:
            raise ValueError("batch_episodes must be >= 1")
        if self.outer_optimizer not in ("adam", "sgd"):
            raise ValueError("outer_optimizer must be 'adam' or 'sgd'")
        if not self.first_order and self.inner_steps != 1:
            raise ValueError("second-order meta-gradients need inner_steps = 1")


def sample_episode(dataset: Dataset, task_id: int, K: int, query_per_class: int,
                   rng: np.random.Generator, seed: int = 0) -> Episode:
    """2-way K-shot episode; query is capped at what remains per class."""
    actives = dataset.labeled(task_id, 1)
    inactives = dataset.labeled(task_id, 0)
    if len(actives) < K + 1 or len(inactives) < K + 1:
        raise ValueError(
            f"task {task_id}: need {K + 1} actives and inactives, have {len(actives)} / {len(inactives)}"
        )
    a = rng.permutation(actives)
    b = rng.permutation(inactives)
    qa = a[K : K + min(query_per_class, len(a) - K)]
    qb = b[K : K + min(query_per_class, len(b) - K)]
    support = [(int(m), 1) for m in a[:K]] + [(int(m), 0) for m in b[:K]]
    query = [(int(m), 1) for m in qa] + [(int(m), 0) for m in qb]
    order = rng.permutation(len(query))
    ep = Episode(task_id, support, [query[i] for i in order], K, seed)
    ep.check()
    return ep


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParameterStore, grads: GradientMap) -> ParameterStore:
        self.t += 1
        new = ParameterStore(rng_seed=params.rng_seed)
        b1t = 1 - self.beta1**self.t
        b2t = 1 - self.beta2**self.t
        for name, t in params.items():
            g = grads.entries.get(name)
            g = np.zeros_like(t.values) if g is None else g + self.weight_decay * t.values
            m = self.m.get(name, np.zeros_like(g)) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, np.zeros_like(g)) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            new.add(name, t.values - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps))
        return new

    def state(self) -> dict:
        return {"t": self.t, "m": {k: v.tolist() for k, v in self.m.items()},
                "v": {k: v.tolist() for k, v in self.v.items()}}

    def load(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}


class SGD:
    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr, self.weight_decay = lr, weight_decay

    def step(self, params: ParameterStore, grads: GradientMap) -> ParameterStore:
        if self.weight_decay:
            grads = GradientMap({k: grads.entries.get(k, 0) + self.weight_decay * t.values
                                 for k, t in params.items()})
        return sgd_step(params, grads, self.lr)

    def state(self) -> dict:
        return {}

    def load(self, state: dict) -> None:
        pass


def make_optimizer(cfg: MetaConfig):
    if cfg.outer_optimizer == "adam":
        return Adam(cfg.outer_lr, weight_decay=cfg.weight_decay)
    return SGD(cfg.outer_lr, cfg.weight_decay)


def _support_loss(theta, data, model_cfg, pool, seed_keys, tau, step):
    rng = derived_rng(*seed_keys, _INNER, step)
    return forward(theta, data, model_cfg, "support", pool, rng, train=True, tau=tau).total


def inner_adapt(theta: ParameterStore, data: EpisodeData, pool: ConfounderPool | None, cfg: MetaConfig,
                model_cfg: ModelConfig, seed_keys=(0,), tau: float | None = None,
                steps: int | None = None) -> ParameterStore:
    """``theta' = theta - inner_lr * grad L_S`` repeated; ``theta`` is left untouched."""
    if not data.n_support:
        raise ValueError("episode has an empty support set")
    cur = theta
    for k in range(cfg.inner_steps if steps is None else steps):
        loss = _support_loss(cur, data, model_cfg, pool, seed_keys, tau, k)
        if not math.isfinite(loss.item()):
            raise AutodiffError(f"non-finite support loss at inner step {k}")
        cur = sgd_step(cur, backward(loss, cur), cfg.inner_lr)
    return cur


def _hvp(theta, data, model_cfg, pool, seed_keys, tau, vec: GradientMap) -> GradientMap:
    """Hessian-vector product of L_S by central differences of replayed support tapes."""
    norm = math.sqrt(sum(float((v * v).sum()) for v in vec.entries.values()))
    if norm == 0:
        return GradientMap({k: np.zeros_like(v) for k, v in vec.entries.items()})
    r = 1e-4 / max(1.0, norm)
    plus = ParameterStore({k: t.values + r * vec.entries[k] for k, t in theta.items()}, theta.rng_seed)
    minus = ParameterStore({k: t.values - r * vec.entries[k] for k, t in theta.items()}, theta.rng_seed)
    gp = backward(_support_loss(plus, data, model_cfg, pool, seed_keys, tau, 0), plus)
    gm = backward(_support_loss(minus, data, model_cfg, pool, seed_keys, tau, 0), minus)
    return GradientMap({k: (gp[k] - gm[k]) / (2 * r) for k in vec.entries})


def episode_meta_gradient(theta: ParameterStore, data: EpisodeData, pool, cfg: MetaConfig,
                          model_cfg: ModelConfig, seed_keys, tau=None) -> tuple[GradientMap, EpisodeOutput]:
    """Query-loss gradient for one episode, first- or second-order."""
    theta_p = inner_adapt(theta, data, pool, cfg, model_cfg, seed_keys, tau)
    out = forward(theta_p, data, model_cfg, "query", pool, derived_rng(*seed_keys, _QUERY), train=True, tau=tau)
    if not math.isfinite(out.total.item()):
        raise AutodiffError("non-finite query loss")
    g = backward(out.total, theta_p)
    if not cfg.first_order:
        hv = _hvp(theta, data, model_cfg, pool, seed_keys, tau, g)
        g = GradientMap({k: g[k] - cfg.inner_lr * hv[k] for k in g.entries})
    return g, out


def batch_pools(episodes: list[EpisodeData], theta: ParameterStore, cfg: MetaConfig, model_cfg: ModelConfig,
                seed: int, step: int) -> tuple[list[ConfounderPool], list[PoolEntry]]:
    """Per-episode pools drawn from the fragments of sibling episodes."""
    cands = [fragment_candidates(theta, d, model_cfg) for d in episodes]
    pools = []
    for t, d in enumerate(episodes):
        others = [e for j, c in enumerate(cands) if j != t for e in c]
        pools.append(build_confounder_pool(others, d.task_id, cfg.pool_size, derived_rng(seed, _POOL, step, t)))
    return pools, [e for c in cands for e in c]


@dataclass
class StepResult:
    params: ParameterStore
    metrics: dict
    skipped: bool = False
    candidates: list[PoolEntry] = field(default_factory=list)


def outer_step(theta: ParameterStore, episodes: list[EpisodeData], cfg: MetaConfig, model_cfg: ModelConfig,
               optimizer, seed: int = 0, step: int = 0, tau: float | None = None) -> StepResult:
    """One meta-update over ``B`` episodes (gradients accumulated in episode order)."""
    pools, cands = batch_pools(episodes, theta, cfg, model_cfg, seed, step) if model_cfg.use_causal else (
        [None] * len(episodes), [])
    total: GradientMap | None = None
    parts = {"causal": [], "kl": [], "var": [], "total": []}
    aucs = []
    try:
        for t, data in enumerate(episodes):
            g, out = episode_meta_gradient(theta, data, pools[t], cfg, model_cfg, (seed, step, t), tau)
            total = g if total is None else total.plus(g)
            for k in parts:
                parts[k].append(out.losses[k].item())
            if 0 < out.labels.sum() < len(out.labels):
                aucs.append(roc_auc(out.prob.values, out.labels))
    except (AutodiffError, FloatingPointError) as exc:
        log.warning("step %d: batch skipped (%s)", step, exc)
        return StepResult(theta, {"step": step, "skipped": True, "error": str(exc)}, True)
    grad = total.scaled(1.0 / len(episodes))
    new = optimizer.step(theta, grad)
    metrics = {
        "step": step,
        "loss_causal": float(np.mean(parts["causal"])),
        "loss_kl": float(np.mean(parts["kl"])),
        "loss_var": float(np.mean(parts["var"])),
        "loss_query": float(np.mean(parts["total"])),
        "query_auc": float(np.mean(aucs)) if aucs else float("nan"),
        "query_auc_per_episode": [float(a) for a in aucs],
        "pool_sizes": [len(p) if p is not None else 0 for p in pools],
    }
    return StepResult(new, metrics, False, cands)


# --------------------------------------------------------------------------
# runs


@dataclass
class MetaLearner:
    """Ties dataset, caches and configs together for training and meta-testing."""

    dataset: Dataset
    train_tasks: list[int]
    test_tasks: list[int]
    model_cfg: ModelConfig
    meta_cfg: MetaConfig
    seed: int = 0

    def __post_init__(self):
        self.cache = MoleculeCache(self.dataset)

    def aux_label(self, mol_id: int, prop: int) -> float:
        return self.cache.label(mol_id, prop)

    def episode(self, task: int, rng: np.random.Generator, aux: bool) -> EpisodeData:
        ep = sample_episode(self.dataset, task, self.meta_cfg.k_shot, self.meta_cfg.query_per_class, rng)
        ids = [m for m, _ in ep.support] + [m for m, _ in ep.query]
        recs = {m: self.cache[m] for m in ids}
        aux_props = [p for p in self.train_tasks if p != task] if aux else []
        return prepare_episode(ep, recs, aux_props, self.aux_label if aux else None, f"task{task}")

    def batch(self, step: int) -> list[EpisodeData]:
        B = self.meta_cfg.batch_episodes
        rng = derived_rng(self.seed, _TASKS, step)
        tasks = self.train_tasks
        chosen = rng.permutation(tasks)[:B] if B <= len(tasks) else rng.choice(tasks, size=B)
        return [self.episode(int(t), derived_rng(self.seed, _EPISODE, step, i), self.meta_cfg.context_aux)
                for i, t in enumerate(chosen)]

    def build_bank(self, theta: ParameterStore, step: int = 0) -> list[PoolEntry]:
        """Frozen bank of training-property fragment embeddings for meta-test pools."""
        seen: dict[str, PoolEntry] = {}
        for data in self.batch(10**6 + step):
            for e in fragment_candidates(theta, data, self.model_cfg):
                seen.setdefault(e.source_fragment_key, e)
        entries = list(seen.values())
        if len(entries) > self.meta_cfg.bank_size:
            keep = np.sort(derived_rng(self.seed, _BANK, step).choice(len(entries), self.meta_cfg.bank_size,
                                                                        replace=False))
            entries = [entries[i] for i in keep]
        return entries

    def test_episode(self, task: int, index: int, eval_seed: int = 0) -> EpisodeData:
        return self.episode(task, derived_rng(self.seed, _TEST, task, index, eval_seed), self.meta_cfg.test_context_aux)

    def adapt(self, theta: ParameterStore, data: EpisodeData, bank: list[PoolEntry], index: int = 0,
              tau: float | None = None) -> tuple[ParameterStore, ConfounderPool | None]:
        pool = None
        if self.model_cfg.use_causal:
            pool = build_confounder_pool(bank, data.task_id, self.meta_cfg.pool_size,
                                         derived_rng(self.seed, _POOL, 10**6, data.task_id, index))
        theta_p = inner_adapt(theta, data, pool, self.meta_cfg, self.model_cfg,
                              (self.seed, 10**6, data.task_id, index), tau, steps=self.meta_cfg.test_inner_steps)
        return theta_p, pool

    def meta_test(self, theta: ParameterStore, bank: list[PoolEntry], n_episodes: int = 10,
                  tau: float | None = None, eval_seed: int = 0) -> dict:
        """Adapt on each test episode's support and score its query set (hard masks)."""
        per_task = {}
        for task in self.test_tasks:
            aucs = []
            for i in range(n_episodes):
                data = self.test_episode(task, i, eval_seed)
                theta_p, _ = self.adapt(theta, data, bank, i, tau)
                with ad.no_grad():
                    out = forward(theta_p, data, self.model_cfg, "query", None, train=False)
                aucs.append(roc_auc(out.prob.values, out.labels))
            per_task[task] = float(np.mean(aucs))
        vals = list(per_task.values())
        return {"auc_per_task": per_task, "auc_mean": float(np.mean(vals)), "auc_std": float(np.std(vals))}
