"""Meta-training runs: checkpoints, metrics logs and resume."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import ParameterStore
from .config import FORMAT_VERSION, RunConfig
from .intervene import PoolEntry
from .meta import MetaLearner, make_optimizer, outer_step
from .model import init_params
from .smiles import Dataset, read_dataset

log = logging.getLogger(__name__)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParameterStore
    step: int
    bank: list[PoolEntry]
    optimizer_state: dict
    config_digest: str
    meta: dict


def _clean(x):
    """JSON-safe copy: NaN becomes null, numpy scalars become Python numbers."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(x) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "config_digest": ckpt.config_digest,
        "step": ckpt.step,
        "meta": ckpt.meta,
        "parameters": {name: {"shape": list(t.shape), "values": t.values.ravel().tolist()}
                       for name, t in ckpt.params.items()},
        "bank": [{"s_embedding": e.s_embedding.tolist(), "source_property": e.source_property,
                  "source_fragment_key": e.source_fragment_key} for e in ckpt.bank],
        "optimizer": ckpt.optimizer_state,
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {exc}") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint {path}: unsupported format_version {doc.get('format_version')}")
    store = ParameterStore()
    for name, entry in doc["parameters"].items():
        vals = np.array(entry["values"], dtype=np.float64)
        if vals.size != int(np.prod(entry["shape"])):
            raise CheckpointError(f"checkpoint {path}: parameter {name} has wrong size")
        store.add(name, vals.reshape(entry["shape"]))
    bank = [PoolEntry(np.array(e["s_embedding"]), int(e["source_property"]), e["source_fragment_key"])
            for e in doc.get("bank", [])]
    return Checkpoint(store, int(doc["step"]), bank, doc.get("optimizer", {}), doc["config_digest"],
                      doc.get("meta", {}))


def load_splits(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            splits = json.load(fh)
    except OSError as exc:
        raise FileNotFoundError(f"cannot read splits {path}: {exc.strerror}") from None
    if set(splits.get("train", [])) & set(splits.get("test", [])):
        raise ValueError(f"{path}: train and test tasks overlap")
    return splits


def make_learner(cfg: RunConfig, dataset: Dataset | None = None, splits: dict | None = None) -> MetaLearner:
    dataset = dataset if dataset is not None else read_dataset(cfg.dataset)
    splits = splits if splits is not None else load_splits(cfg.splits)
    return MetaLearner(dataset, [int(t) for t in splits["train"]], [int(t) for t in splits["test"]],
                       cfg.model_config(), cfg.meta_config(), cfg.seed)


def run_meta(cfg: RunConfig) -> dict:
    mc = cfg.meta_config()
    return {"first_order": mc.first_order, "outer_optimizer": mc.outer_optimizer,
            "epoch_unit": "one outer step of batch_episodes episodes"}


def train(cfg: RunConfig, out_dir: str, learner: MetaLearner | None = None, resume: str | None = None,
          progress: bool = False) -> Checkpoint:
    """Meta-train for ``cfg.epochs`` outer steps.

    Writes ``checkpoint.json`` (every ``checkpoint_every`` steps and at the
    end) and ``metrics.jsonl`` under ``out_dir``.  With ``resume`` the run
    continues from that checkpoint and the metrics log is truncated to the
    steps it covers; the result is identical to an uninterrupted run.
    """
    os.makedirs(out_dir, exist_ok=True)
    learner = learner if learner is not None else make_learner(cfg)
    digest = cfg.digest
    optimizer = make_optimizer(cfg.meta_config())
    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    if resume:
        ck = load_checkpoint(resume)
        if ck.config_digest != digest:
            raise CheckpointError(f"checkpoint {resume} was written by config {ck.config_digest}, not {digest}")
        theta, start = ck.params, ck.step
        optimizer.load(ck.optimizer_state)
        kept = []
        if os.path.exists(metrics_path):
            with open(metrics_path, encoding="utf-8") as fh:
                kept = [ln for ln in fh if json.loads(ln).get("step", -1) < start]
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.writelines(kept)
    else:
        theta = init_params(cfg.model_config(), len(learner.dataset.task_names), cfg.seed)
        start = 0
        open(metrics_path, "w").close()

    def snapshot(step: int) -> Checkpoint:
        bank = learner.build_bank(theta) if cfg.use_causal else []
        ck = Checkpoint(theta, step, bank, optimizer.state(), digest, run_meta(cfg))
        save_checkpoint(ckpt_path, ck)
        return ck

    ck = None
    if start == 0 or cfg.epochs == 0:
        ck = snapshot(start)
    mcfg = learner.model_cfg
    with open(metrics_path, "a", encoding="utf-8") as fh:
        for step in range(start, cfg.epochs):
            tau = mcfg.mask.tau_at(step)
            res = outer_step(theta, learner.batch(step), learner.meta_cfg, mcfg, optimizer, cfg.seed, step, tau)
            theta = res.params
            rec = dict(res.metrics)
            rec.update({"epoch": step, "tau": tau, "skipped": res.skipped, "config_digest": digest,
                        "format_version": FORMAT_VERSION})
            fh.write(json.dumps(_clean(rec), sort_keys=True) + "\n")
            fh.flush()
            if progress and (step + 1) % 10 == 0:
                log.info("step %d loss %.4f auc %.3f", step + 1, rec.get("loss_query", float("nan")),
                         rec.get("query_auc", float("nan")))
            if (step + 1) % cfg.checkpoint_every == 0 or step + 1 == cfg.epochs:
                ck = snapshot(step + 1)
    return ck if ck is not None else snapshot(cfg.epochs)
