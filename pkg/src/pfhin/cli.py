"""Command-line pipeline driver.

Subcommands mirror the pipeline stages: synth, ingest, rank, walk,
pretrain, finetune, eval, pipeline. Every run directory receives the fully
resolved configuration; pipeline stages are cached by input digests and
skipped when nothing changed.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

import argparse
import hashlib
import json
import os
import sys
import time
import types

import numpy as np

from . import config as cfgmod
from .centrality import compute_centrality, rank_nodes, resolve_threads, \
    write_rank
from .checkpoint import load_checkpoint
from .encoder import init_params, load_params, save_params
from .errors import ConfigError, DataError, NumericError, PfhinError
from .finetune import (classify_nodes, cluster_nodes, finetune_link,
                       grid_search_link, similarity_matrix)
from .graph import load_hin, save_hin, split_links, write_vocab
from .metrics import (MetricsReport, ari, f1_scores, group_auc, nmi,
                      roc_auc, write_report)
from .pretrain import head_spec, run_pretrain
from .synth import generate_hin, modularity
from .walker import group_mini_sequences, sample_sequence, write_mini, \
    write_seq

TASKS = ("link", "sim", "classify", "cluster")


def _log(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _add_config_args(p):
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS),
                   help="configuration preset")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   dest="overrides", help="override one config key")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")


def _resolve(args):
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = raw.strip()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return cfgmod.resolve_config(preset=args.preset,
                                 config_file=args.config,
                                 overrides=overrides)


def _load_dataset(data_dir):
    nodes = os.path.join(data_dir, "nodes.tsv")
    edges = os.path.join(data_dir, "edges.tsv")
    for path in (nodes, edges):
        if not os.path.exists(path):
            raise DataError(f"dataset file missing: {path}")
    return load_hin(edges, nodes)


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _stage_digest(files, cfg, keys, extra=()):
    tokens = [f"{k}={cfg[k]!r}" for k in sorted(keys)]
    tokens += [_file_digest(f) for f in files]
    tokens += list(extra)
    h = hashlib.sha256()
    for t in tokens:
        h.update(t.encode())
        h.update(b"\n")
    return h.hexdigest()[:16]


def _stage_cached(stage_dir, digest, outputs):
    meta = os.path.join(stage_dir, "stage.json")
    if not os.path.exists(meta):
        return False
    try:
        with open(meta, encoding="utf-8") as fh:
            saved = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return False
    if saved.get("inputs") != digest:
        return False
    return all(os.path.exists(os.path.join(stage_dir, f)) for f in outputs)


def _stage_mark(stage_dir, digest, outputs):
    with open(os.path.join(stage_dir, "stage.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"inputs": digest, "outputs": list(outputs)}, fh, indent=2)
        fh.write("\n")


def _ranking_for(hin, cfg, threads=None):
    scores = compute_centrality(hin, threads=resolve_threads(threads))
    return scores, rank_nodes(scores, weights=cfgmod.rank_weights(cfg))


def _sequences_for(hin, ranking, cfg, rng_seed=None):
    wc = cfgmod.walk_config(cfg)
    seed = cfg["seed"] if rng_seed is None else rng_seed
    return [sample_sequence(hin, ranking, v, wc, seed)
            for v in range(hin.num_nodes)]


def _sequence_ensemble(hin, ranking, cfg):
    """Walk sets for training-free evaluation; >1 set smooths walk noise."""
    count = max(1, cfg["finetune.eval_walks"])
    return [_sequences_for(hin, ranking, cfg, rng_seed=cfg["seed"] * 7919 + j)
            for j in range(count)]


def _labeled_nodes(hin):
    nodes = [v for v in range(hin.num_nodes) if hin.labels[v] is not None]
    labels = np.array([hin.labels[v] for v in nodes])
    return np.array(nodes, dtype=np.int64), labels


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    cfg = _resolve(args)
    spec = cfgmod.synth_spec(cfg)
    hin, community = generate_hin(spec, cfg["seed"])
    os.makedirs(args.out, exist_ok=True)
    save_hin(hin, os.path.join(args.out, "edges.tsv"),
             os.path.join(args.out, "nodes.tsv"))
    cfgmod.write_resolved(cfg, os.path.join(args.out, "config.resolved.txt"))
    q = modularity(hin, community)
    _log(f"synth: {hin.num_nodes} nodes, {hin.num_edges} edges, "
         f"planted modularity {q:.3f} -> {args.out}")
    return 0


def cmd_ingest(args):
    hin = load_hin(args.edges, args.nodes)
    os.makedirs(args.out, exist_ok=True)
    save_hin(hin, os.path.join(args.out, "edges.tsv"),
             os.path.join(args.out, "nodes.tsv"))
    write_vocab(hin, os.path.join(args.out, "vocab.tsv"))
    _log(f"ingest: {hin.num_nodes} nodes, {hin.num_edges} edges, "
         f"{len(hin.node_types)} node types -> {args.out}")
    return 0


def cmd_rank(args):
    cfg = _resolve(args)
    hin = _load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    scores, ranking = _ranking_for(hin, cfg, threads=args.threads)
    write_rank(hin, scores, ranking, os.path.join(args.out, "rank.tsv"))
    cfgmod.write_resolved(cfg, os.path.join(args.out, "config.resolved.txt"))
    _log(f"rank: wrote {os.path.join(args.out, 'rank.tsv')}")
    return 0


def cmd_walk(args):
    cfg = _resolve(args)
    hin = _load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    _, ranking = _ranking_for(hin, cfg)
    seqs = _sequences_for(hin, ranking, cfg)
    write_seq(seqs, os.path.join(args.out, "seq.tsv"))
    write_mini([(s.seed, hin, group_mini_sequences(s, hin)) for s in seqs],
               os.path.join(args.out, "mini.tsv"))
    cfgmod.write_resolved(cfg, os.path.join(args.out, "config.resolved.txt"))
    _log(f"walk: {len(seqs)} sequences -> {args.out}")
    return 0


def _checkpoint_sidecar(cfg, hin):
    keys = [k for k in cfg if k.startswith(("model.", "walk."))]
    side = {k: cfg[k] for k in keys}
    side["V"] = hin.num_nodes
    side["num_types"] = len(hin.node_types)
    side["seed"] = cfg["seed"]
    return side


def cmd_pretrain(args):
    cfg = _resolve(args)
    hin = _load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    _, ranking = _ranking_for(hin, cfg)
    mc = cfgmod.model_config(cfg, hin.num_nodes, len(hin.node_types))
    pc = cfgmod.pretrain_config(cfg)
    wc = cfgmod.walk_config(cfg)
    out_path = os.path.join(args.out, "model.bin")
    t0 = time.perf_counter()
    params, heads, history = run_pretrain(
        hin, ranking, mc, wc, pc, out_path=None,
        loss_csv_path=os.path.join(args.out, "loss.csv"),
        log=_log if args.verbose else None)
    named = dict(params)
    named.update(heads)
    save_params(named, out_path, config=_checkpoint_sidecar(cfg, hin))
    cfgmod.write_resolved(cfg, os.path.join(args.out, "config.resolved.txt"))
    _log(f"pretrain: {len(history)} steps, final total loss "
         f"{history[-1][3]:.4f}, {time.perf_counter() - t0:.1f}s "
         f"-> {out_path}")
    return 0


def _load_checkpoint_for(hin, path, cfg):
    """Checkpoint arrays + the model/walk config they were trained with."""
    arrays, side = load_checkpoint(path)
    if side is None:
        raise DataError(f"{path}: missing config sidecar "
                        f"({path}.json); cannot validate compatibility")
    if side["V"] != hin.num_nodes or side["num_types"] != len(hin.node_types):
        raise ConfigError(
            f"checkpoint was trained on V={side['V']}, "
            f"num_types={side['num_types']}; dataset has "
            f"V={hin.num_nodes}, num_types={len(hin.node_types)}")
    # model/walk settings travel with the checkpoint; the task seed stays
    # with the caller so one checkpoint can serve several evaluation seeds
    merged = dict(cfg)
    for k, v in side.items():
        if k.startswith(("model.", "walk.")):
            merged[k] = v
    mc = cfgmod.model_config(merged, side["V"], side["num_types"])
    from .encoder import param_spec
    from .autodiff import Tensor
    want = dict(param_spec(mc))
    want.update(head_spec(mc))
    missing = sorted(set(want) - set(arrays))
    if missing:
        raise DataError(f"{path}: missing tensors {missing[:4]}")
    for name, shape in want.items():
        if arrays[name].shape != tuple(shape):
            raise ConfigError(f"{path}: tensor '{name}' has shape "
                              f"{arrays[name].shape}, expected {shape}")
    params = {k: Tensor(arrays[k], requires_grad=True)
              for k in sorted(set(arrays) - set(head_spec(mc)))}
    return params, mc, merged


def _report(task, metrics, cfg, t0):
    return MetricsReport(task=task, metrics=metrics,
                         config_digest=cfgmod.config_digest(cfg),
                         seed=cfg["seed"],
                         runtime_seconds=round(time.perf_counter() - t0, 3))


def _run_task(task, hin, params, mc, cfg, out_dir, log=_log):
    """One fine-tuning task; writes report.json and task artifacts."""
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    _, ranking = _ranking_for(hin, cfg)
    seqs = _sequences_for(hin, ranking, cfg)
    ft = cfgmod.finetune_config(cfg, task=task)

    if task == "link":
        split = split_links(hin, cfg["link.train_ratio"], rng_seed=cfg["seed"])
        if cfg["finetune.grid"]:
            ft, res, table = grid_search_link(params, mc, hin, seqs, split,
                                              ft, log=log)
            with open(os.path.join(out_dir, "grid.tsv"), "w",
                      encoding="utf-8") as fh:
                for lr, ep, bs, auc in table:
                    fh.write(f"{lr}\t{ep}\t{bs}\t{auc:.6f}\n")
        else:
            res = finetune_link(params, mc, hin, seqs, split, ft)
        auc = roc_auc(res.scores, res.labels)
        pred = (res.scores >= 0.5).astype(int)
        _, _, binary = f1_scores(pred, res.labels)
        with open(os.path.join(out_dir, "scores.tsv"), "w",
                  encoding="utf-8") as fh:
            pairs = np.vstack([split.test_pos[:, :2], split.test_neg[:, :2]])
            for (u, v), s, y in zip(pairs, res.scores, res.labels):
                fh.write(f"{u}\t{v}\t{s:.6f}\t{y}\n")
        metrics = {"auc": auc, "binary_f1": binary}

    elif task == "sim":
        nodes, labels = _labeled_nodes(hin)
        if len(np.unique(labels)) < 2:
            raise DataError("similarity evaluation needs >= 2 label groups")
        ens = _sequence_ensemble(hin, ranking, cfg)
        mat = similarity_matrix(params, mc, hin, ens, nodes,
                                pool=cfg["finetune.pool"])
        metrics = {"group_auc": group_auc(mat, nodes.tolist(), labels)}

    elif task == "classify":
        nodes, labels = _labeled_nodes(hin)
        res = classify_nodes(params, mc, hin, seqs, nodes, labels, ft,
                             train_ratio=cfg["classify.train_ratio"])
        micro, macro, _ = f1_scores(res.pred, res.test_labels)
        with open(os.path.join(out_dir, "predictions.tsv"), "w",
                  encoding="utf-8") as fh:
            for v, t, p in zip(res.test_nodes, res.test_labels, res.pred):
                fh.write(f"{v}\t{t}\t{p}\n")
        metrics = {"micro_f1": micro, "macro_f1": macro}

    elif task == "cluster":
        nodes, labels = _labeled_nodes(hin)
        k = cfg["cluster.k"] or len(np.unique(labels))
        ens = _sequence_ensemble(hin, ranking, cfg)
        assign, _ = cluster_nodes(params, mc, hin, ens, nodes, k,
                                  seed=cfg["seed"],
                                  pool=cfg["finetune.pool"])
        with open(os.path.join(out_dir, "assignments.tsv"), "w",
                  encoding="utf-8") as fh:
            for v, c in zip(nodes, assign):
                fh.write(f"{v}\t{c}\n")
        metrics = {"nmi": nmi(assign, labels), "ari": ari(assign, labels)}

    else:
        raise ConfigError(f"unknown task '{task}', expected one of {TASKS}")

    report = _report(task, metrics, cfg, t0)
    write_report(os.path.join(out_dir, "report.json"), report)
    pretty = ", ".join(f"{k}={v:.4f}" for k, v in metrics.items())
    log(f"{task}: {pretty} ({report.runtime_seconds:.1f}s)")
    return report


def cmd_finetune(args):
    cfg = _resolve(args)
    hin = _load_dataset(args.data)
    params, mc, cfg = _load_checkpoint_for(hin, args.checkpoint, cfg)
    _run_task(args.task, hin, params, mc, cfg, args.out)
    return 0


def cmd_eval(args):
    reports = []
    for root, _, files in os.walk(args.run):
        for f in sorted(files):
            if f == "report.json":
                with open(os.path.join(root, f), encoding="utf-8") as fh:
                    reports.append(json.load(fh))
    if not reports:
        raise DataError(f"no report.json files under {args.run}")
    summary = {r["task"]: r["metrics"] for r in reports}
    out = args.out or os.path.join(args.run, "summary.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for task in sorted(summary):
        line = ", ".join(f"{k}={v:.4f}" for k, v in summary[task].items())
        _log(f"{task}: {line}")
    _log(f"eval: {len(reports)} reports -> {out}")
    return 0


def cmd_pipeline(args):
    cfg = _resolve(args)
    data = args.data
    out = args.out
    os.makedirs(out, exist_ok=True)
    cfgmod.write_resolved(cfg, os.path.join(out, "config.resolved.txt"))
    hin = _load_dataset(data)
    data_files = [os.path.join(data, "nodes.tsv"),
                  os.path.join(data, "edges.tsv")]
    tasks = [t.strip() for t in args.tasks.split(",")] if args.tasks \
        else list(TASKS)
    for t in tasks:
        if t not in TASKS:
            raise ConfigError(f"unknown task '{t}', expected one of {TASKS}")

    # rank
    rank_dir = os.path.join(out, "rank")
    os.makedirs(rank_dir, exist_ok=True)
    rank_keys = [k for k in cfg if k.startswith("rank.")]
    digest = _stage_digest(data_files, cfg, rank_keys)
    ranking = None
    if _stage_cached(rank_dir, digest, ["rank.tsv"]):
        _log("[cache] rank: hit")
    else:
        scores, ranking = _ranking_for(hin, cfg, threads=args.threads)
        write_rank(hin, scores, ranking, os.path.join(rank_dir, "rank.tsv"))
        _stage_mark(rank_dir, digest, ["rank.tsv"])
        _log("rank: computed")
    if ranking is None:
        _, ranking = _ranking_for(hin, cfg, threads=args.threads)

    # walk
    walk_dir = os.path.join(out, "walk")
    os.makedirs(walk_dir, exist_ok=True)
    walk_keys = [k for k in cfg if k.startswith(("rank.", "walk."))] + ["seed"]
    digest = _stage_digest(data_files, cfg, walk_keys)
    seqs = None
    if _stage_cached(walk_dir, digest, ["seq.tsv", "mini.tsv"]):
        _log("[cache] walk: hit")
    else:
        seqs = _sequences_for(hin, ranking, cfg)
        write_seq(seqs, os.path.join(walk_dir, "seq.tsv"))
        write_mini([(s.seed, hin, group_mini_sequences(s, hin))
                    for s in seqs], os.path.join(walk_dir, "mini.tsv"))
        _stage_mark(walk_dir, digest, ["seq.tsv", "mini.tsv"])
        _log("walk: computed")

    # pretrain
    pre_dir = os.path.join(out, "pretrain")
    os.makedirs(pre_dir, exist_ok=True)
    pre_keys = [k for k in cfg if k.startswith(
        ("rank.", "walk.", "model.", "pretrain."))] + ["seed"]
    digest = _stage_digest(data_files, cfg, pre_keys)
    model_path = os.path.join(pre_dir, "model.bin")
    if _stage_cached(pre_dir, digest, ["model.bin", "loss.csv"]):
        _log("[cache] pretrain: hit")
    else:
        mc = cfgmod.model_config(cfg, hin.num_nodes, len(hin.node_types))
        pc = cfgmod.pretrain_config(cfg)
        wc = cfgmod.walk_config(cfg)
        t0 = time.perf_counter()
        params, heads, history = run_pretrain(
            hin, ranking, mc, wc, pc, out_path=None,
            loss_csv_path=os.path.join(pre_dir, "loss.csv"),
            log=_log if args.verbose else None)
        named = dict(params)
        named.update(heads)
        save_params(named, model_path, config=_checkpoint_sidecar(cfg, hin))
        _log(f"pretrain: {len(history)} steps, final loss "
             f"{history[-1][3]:.4f}, {time.perf_counter() - t0:.1f}s")
        _stage_mark(pre_dir, digest, ["model.bin", "loss.csv"])

    # finetune tasks
    ft_keys = [k for k in cfg if k.startswith(
        ("finetune.", "classify.", "link.", "cluster.", "walk.",
         "rank."))] + ["seed"]
    for task in tasks:
        task_dir = os.path.join(out, "finetune", task)
        os.makedirs(task_dir, exist_ok=True)
        digest = _stage_digest(data_files + [model_path], cfg, ft_keys,
                               extra=[task])
        if _stage_cached(task_dir, digest, ["report.json"]):
            _log(f"[cache] {task}: hit")
            continue
        params, mc, merged = _load_checkpoint_for(hin, model_path, cfg)
        _run_task(task, hin, params, mc, merged, task_dir)
        _stage_mark(task_dir, digest, ["report.json"])

    # summary
    return cmd_eval(types.SimpleNamespace(run=out, out=None))


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="pfhin",
        description="Heterogeneous-network pretrain/finetune pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a planted-community dataset")
    s.add_argument("--out", required=True)
    _add_config_args(s)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("ingest", help="validate and normalize a dataset")
    s.add_argument("--nodes", required=True)
    s.add_argument("--edges", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("rank", help="centrality scores and fused ranking")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int, default=None)
    _add_config_args(s)
    s.set_defaults(fn=cmd_rank)

    s = sub.add_parser("walk", help="sample rank-guided walk sequences")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    _add_config_args(s)
    s.set_defaults(fn=cmd_walk)

    s = sub.add_parser("pretrain", help="self-supervised pretraining")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--verbose", action="store_true")
    _add_config_args(s)
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("finetune", help="fine-tune one downstream task")
    s.add_argument("--task", required=True, choices=TASKS)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    _add_config_args(s)
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("eval", help="aggregate task reports")
    s.add_argument("--run", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("pipeline", help="run every stage with caching")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tasks", default=None,
                   help="comma-separated subset of " + ",".join(TASKS))
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--verbose", action="store_true")
    _add_config_args(s)
    s.set_defaults(fn=cmd_pipeline)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4
    except PfhinError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
