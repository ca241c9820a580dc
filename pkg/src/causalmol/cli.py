"""Command-line interface.

Every command writes only under ``--out``, prints a trailing JSON status
line and exits 0 on success, 1 on validation errors and 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from .autodiff import AutodiffError
from .config import FORMAT_VERSION, ConfigError, RunConfig, build, load_run_config, parse_pairs
from .context import build_context_graph
from .fragment import DEFAULT_RULE_TABLE, RULE_TABLE_VERSION, fragment, fragment_smiles
from .meta import Episode
from .records import make_record
from .smiles import SmilesError, parse, read_dataset
from .synth import SynthError, SynthSpec, gen_dataset
from .training import CheckpointError, load_checkpoint, load_splits, make_learner, train

log = logging.getLogger("causalmol")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(ValueError):
    pass


def _read_groundtruth(path: str) -> dict[int, list[int]]:
    if not path:
        return {}
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[int(rec["molecule"])] = [int(a) for a in rec["atoms"]]
    return out


def _run_config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "checkpoint", None):
        overrides["checkpoint"] = args.checkpoint
    return load_run_config(args.config, overrides)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _json_dump(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> dict:
    try:
        with open(args.config, encoding="utf-8") as fh:
            pairs = parse_pairs(fh.read(), args.config)
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    spec = build(SynthSpec, pairs, args.config)
    ds, splits, _ = gen_dataset(spec, args.out)
    return {"outputs": ["dataset.tsv", "splits.json", "groundtruth.jsonl"], "molecules": len(ds.smiles),
            "tasks": len(ds.task_names), "config_digest": spec.digest}


def cmd_fragment(args) -> dict:
    ds = read_dataset(args.inp)
    digest = _digest({"rule_table": DEFAULT_RULE_TABLE, "version": RULE_TABLE_VERSION})
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        for i, smi in enumerate(ds.smiles):
            g = parse(smi)
            frags = []
            for fg in fragment(g, i):
                frags.append({"atom_indices": list(fg.atom_indices),
                              "attachment_points": [list(a) for a in fg.attachment_points],
                              "canonical_key": fg.canonical_key, "smiles": fragment_smiles(fg, g)})
            rec = {"molecule_id": i, "smiles": smi, "fragments": frags, "rule_table": RULE_TABLE_VERSION,
                   "format_version": FORMAT_VERSION, "config_digest": digest}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return {"outputs": [args.out], "molecules": len(ds.smiles)}


def cmd_build_context(args) -> dict:
    with open(args.episode, encoding="utf-8") as fh:
        doc = json.load(fh)
    dataset_path = args.dataset or doc.get("dataset")
    if not dataset_path:
        raise ValidationError("build-context needs --dataset or a 'dataset' field in the episode file")
    ds = read_dataset(dataset_path)
    ep = Episode(int(doc["task_id"]), [tuple(x) for x in doc["support"]], [tuple(x) for x in doc["query"]],
                 int(doc["K"]), int(doc.get("rng_seed", 0)))
    ep.check()
    ids = [m for m, _ in ep.support] + [m for m, _ in ep.query]
    bad = [m for m in ids if not 0 <= m < len(ds.smiles)]
    if bad:
        raise ValidationError(f"episode references unknown molecule ids {bad}")
    recs = {m: make_record(m, ds.smiles[m]) for m in ids}
    aux = [int(p) for p in doc.get("auxiliary_properties", [])] if args.context_aux else []

    def aux_label(m, p):
        return float(ds.labels[m, p])

    cg = build_context_graph(ep, recs, aux, aux_label if aux else None, doc.get("episode_id", ""))
    out = cg.to_dict()
    out["format_version"] = FORMAT_VERSION
    out["config_digest"] = _digest({"episode": doc, "context_aux": bool(args.context_aux)})
    _json_dump(args.out, out)
    return {"outputs": [args.out], "nodes": cg.num_nodes, "edges": cg.num_edges}


def cmd_train(args) -> dict:
    cfg = _run_config(args)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.cfg"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_digest = {cfg.digest}\n")
        fh.write(cfg.dumps())
    ck = train(cfg, args.out, resume=args.resume, progress=True)
    return {"outputs": ["checkpoint.json", "metrics.jsonl", "config.cfg"], "steps": ck.step,
            "config_digest": cfg.digest}


def _load_eval(args):
    cfg = _run_config(args)
    if not cfg.checkpoint:
        raise ValidationError("a checkpoint is required (--checkpoint or 'checkpoint' in the config)")
    ck = load_checkpoint(cfg.checkpoint)
    if ck.config_digest != cfg.digest:
        log.warning("checkpoint digest %s differs from config digest %s", ck.config_digest, cfg.digest)
    learner = make_learner(cfg)
    return cfg, ck, learner


def _collect(args):
    from .report import collect

    cfg, ck, learner = _load_eval(args)
    truth = _read_groundtruth(cfg.groundtruth)
    col = collect(learner, ck.params, ck.bank, truth, cfg.eval_episodes, cfg.explain_ratio)
    return cfg, ck, learner, col


def cmd_eval(args) -> dict:
    from .report import summarize

    cfg, ck, learner, col = _collect(args)
    rep = summarize(col, cfg.digest, cfg.explain_ratio, cfg.cmi_clusters, cfg.seed)
    rep["checkpoint_digest"] = ck.config_digest
    rep["checkpoint_step"] = ck.step
    os.makedirs(args.out, exist_ok=True)
    _json_dump(os.path.join(args.out, "report.json"), rep)
    return {"outputs": ["report.json"], "auc_mean": rep["auc_mean"]}


def cmd_explain(args) -> dict:
    from .report import explanations

    cfg, ck, learner, col = _collect(args)
    if not cfg.use_causal:
        raise ValidationError("explanations need a model trained with use_causal = true")
    recs = explanations(col, learner.dataset.smiles)
    if args.molecules:
        wanted = {int(m) for m in args.molecules.split(",")}
        recs = [r for r in recs if r["molecule_id"] in wanted]
    doc = {"format_version": FORMAT_VERSION, "config_digest": cfg.digest, "ratio": cfg.explain_ratio,
           "molecules": recs}
    os.makedirs(args.out, exist_ok=True)
    _json_dump(os.path.join(args.out, "explanations.json"), doc)
    scored = [r["precision"] for r in recs if r.get("precision") is not None]
    return {"outputs": ["explanations.json"], "molecules": len(recs),
            "precision": float(np.mean(scored)) if scored else None}


def cmd_report(args) -> dict:
    from .report import similarity_matrices, write_matrix_csv

    cfg, ck, learner, col = _collect(args)
    J, I, pearson, spearman, props = similarity_matrices(col)
    os.makedirs(args.out, exist_ok=True)
    write_matrix_csv(os.path.join(args.out, "jaccard.csv"), props, J, cfg.digest)
    write_matrix_csv(os.path.join(args.out, "inverse_jsd.csv"), props, I, cfg.digest)
    summary = {"format_version": FORMAT_VERSION, "config_digest": cfg.digest, "properties": props,
               "pearson": None if np.isnan(pearson) else pearson,
               "spearman": None if np.isnan(spearman) else spearman}
    _json_dump(os.path.join(args.out, "similarity.json"), summary)
    return {"outputs": ["jaccard.csv", "inverse_jsd.csv", "similarity.json"]}


# --------------------------------------------------------------------------
# parser


def _config_epilog() -> str:
    lines = ["run config keys (flat 'key = value' file) with defaults:"]
    lines += [f"  {k} = {v}" for k, v in (ln.split(" = ", 1) for ln in RunConfig().dumps().splitlines())]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    ap = argparse.ArgumentParser(prog="causalmol", description=__doc__, formatter_class=fmt)
    ap.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads (default: 1)")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def run_args(p, checkpoint: bool):
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if checkpoint:
            p.add_argument("--checkpoint", default=None, help="checkpoint.json to evaluate")

    p = sub.add_parser("gen-synth", help="generate a synthetic benchmark", formatter_class=fmt,
                       epilog="synth config keys: " + ", ".join(SynthSpec().to_dict()))
    p.add_argument("--config", required=True, help="synth config file (key = value)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("fragment", help="fragment every molecule of a dataset")
    p.add_argument("--in", dest="inp", required=True, help="dataset.tsv")
    p.add_argument("--out", required=True, help="fragments.jsonl")
    p.set_defaults(fn=cmd_fragment)

    p = sub.add_parser("build-context", help="dump the context graph of one episode")
    p.add_argument("--episode", required=True, help="episode.json")
    p.add_argument("--dataset", default=None, help="dataset.tsv (else the episode's 'dataset' field)")
    p.add_argument("--context-aux", action="store_true", help="add auxiliary-property label edges (default: off)")
    p.add_argument("--out", required=True, help="context.json")
    p.set_defaults(fn=cmd_build_context)

    p = sub.add_parser("train", help="meta-train a model", formatter_class=fmt, epilog=_config_epilog())
    run_args(p, checkpoint=False)
    p.add_argument("--resume", default=None, help="continue from this checkpoint")
    p.set_defaults(fn=cmd_train)

    for name, fn, text in (("eval", cmd_eval, "JSON report on the test tasks"),
                           ("explain", cmd_explain, "per-atom relevance for test query molecules"),
                           ("report", cmd_report, "CSV similarity matrices for heatmaps")):
        p = sub.add_parser(name, help=text, formatter_class=fmt, epilog=_config_epilog())
        run_args(p, checkpoint=True)
        if name == "explain":
            p.add_argument("--molecules", default=None, help="comma-separated molecule ids to keep")
        p.set_defaults(fn=fn)
    return ap


_VALIDATION = (ConfigError, ValidationError, SmilesError, SynthError, CheckpointError, FileNotFoundError,
               KeyError, json.JSONDecodeError)


def _code(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "config_error"
    if isinstance(exc, SmilesError):
        return "smiles_error"
    if isinstance(exc, CheckpointError):
        return "checkpoint_error"
    if isinstance(exc, (FileNotFoundError, OSError)):
        return "io_error"
    if isinstance(exc, AutodiffError):
        return "numerical_error"
    if isinstance(exc, _VALIDATION):
        return "validation_error"
    return "runtime_error"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from threadpoolctl import threadpool_limits

    status = {"command": args.command}
    with threadpool_limits(limits=max(1, args.threads)):
        try:
            status.update(args.fn(args))
            status["status"], status["code"], rc = "ok", "ok", EXIT_OK
        except _VALIDATION as exc:
            status.update(status="error", code=_code(exc), message=str(exc))
            rc = EXIT_VALIDATION
        except AutodiffError as exc:
            status.update(status="error", code=_code(exc), message=str(exc))
            rc = EXIT_RUNTIME
        except ValueError as exc:
            status.update(status="error", code="validation_error", message=str(exc))
            rc = EXIT_VALIDATION
        except Exception as exc:  # noqa: BLE001 - reported in the status line
            log.debug("runtime failure", exc_info=True)
            status.update(status="error", code=_code(exc), message=f"{type(exc).__name__}: {exc}")
            rc = EXIT_RUNTIME
    print(json.dumps(status, sort_keys=True))
    return rc


if __name__ == "__main__":
    sys.exit(main())
