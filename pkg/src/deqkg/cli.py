"""``deqkg`` command line: dataset generation, training, evaluation and audits.

Exit codes: 0 success, 1 invalid input or usage, 2 failed audit, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import datasets as ds
from .encoder import CheckpointError, EncoderConfig, EncoderConfigError, init_encoder, load_checkpoint, save_checkpoint
from .evalkit import ReportFormatError, evaluate, random_baseline, report_to_dict
from .graph import GraphValidationError, KnowledgeGraph, TripletParseError, read_triplets, write_triplets
from .training import TrainConfig, TrainGraph, TrainingError, model_score_fn, train

log = logging.getLogger("deqkg")

EXIT_OK, EXIT_INVALID, EXIT_AUDIT, EXIT_RUNTIME = 0, 1, 2, 3
WORKERS_ENV = "DEQKG_WORKERS"
INPUT_ERRORS = (ValueError, GraphValidationError, TripletParseError, ds.DatasetError,
                EncoderConfigError, CheckpointError, ReportFormatError, FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# -- helpers -------------------------------------------------------------------


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")


def _float_list(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}")


def _prepare_out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _attach_log(out: Path) -> None:
    handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("deqkg").addHandler(handler)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _set_workers(n: int | None) -> None:
    if n:
        import torch
        torch.set_num_threads(int(n))


def _load_triplet_source(path) -> tuple[list, list[str], list[str]]:
    """Triplets from a .tsv file or from the observed graph of a bundle directory."""
    p = Path(path)
    if p.is_dir():
        b = ds.read_bundle(p)
        return [tuple(t) for t in b.observed.triplets.tolist()], b.node_names, b.relation_names
    return read_triplets(p)


# -- commands ------------------------------------------------------------------


def cmd_gen_fd2(args) -> int:
    out = _prepare_out_dir(args.out_dir, args.force)
    tr, te = ds.fd2_bundles(args.train_depths, args.test_depths, args.valid_ratio, args.seed)
    ds.write_bundle(tr, out / "train")
    ds.write_bundle(te, out / "test")
    print(f"train: {tr.counts()}")
    print(f"test:  {te.counts()}")
    return EXIT_OK


def cmd_sample(args) -> int:
    trip, nodes, rels = _load_triplet_source(args.input)
    if args.method == "bfs":
        kept = ds.sample_subgraph(trip, args.max_nodes, args.max_edges, args.max_degree, args.seed)
    else:
        g = KnowledgeGraph(trip, len(nodes), len(rels))
        _, kept = ds.forest_fire_sample(g, args.max_nodes, args.burn_prob, args.seed)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    write_triplets(kept, args.output, nodes, rels)
    used = {v for t in kept for v in (t[0], t[2])}
    print(f"sampled {len(kept)} triplets over {len(used)} nodes")
    return EXIT_OK


def cmd_split(args) -> int:
    trip, nodes, rels = _load_triplet_source(args.input)
    out = _prepare_out_dir(args.out_dir, args.force)
    b = ds.split_dataset(trip, args.ratios, args.seed, len(nodes), len(rels))
    b.node_names, b.relation_names = nodes, rels
    b.provenance["source"] = str(args.input)
    ds.write_bundle(b, out)
    print(b.counts())
    return EXIT_OK


def cmd_topic_split(args) -> int:
    trip, nodes, rels = _load_triplet_source(args.input)
    groups_raw = json.loads(Path(args.groups).read_text(encoding="utf-8"))
    rel_ix = {r: k for k, r in enumerate(rels)}
    groups = {}
    for name, members in groups_raw.items():
        unknown = [m for m in members if m not in rel_ix]
        if unknown:
            raise UsageError(f"group {name!r} names unknown relations: {unknown[:5]}")
        groups[name] = [rel_ix[m] for m in members]
    out = _prepare_out_dir(args.out_dir, args.force)
    for tg in ds.topic_split(trip, groups):
        tnodes = [nodes[i] for i in tg.node_ids]
        trels = [rels[k] for k in tg.relation_ids]
        if args.ratios:
            b = ds.split_dataset([tuple(t) for t in tg.graph.triplets.tolist()], args.ratios, args.seed,
                                 tg.graph.num_nodes, tg.graph.num_relations)
            b.node_names, b.relation_names = tnodes, trels
            b.provenance.update(topic=tg.name, source=str(args.input))
            ds.write_bundle(b, out / tg.name)
        else:
            write_triplets(tg.graph, out / f"{tg.name}.tsv", tnodes, trels)
        print(f"{tg.name}: {tg.graph.num_nodes} nodes, {tg.graph.num_relations} relations, "
              f"{tg.graph.num_triplets} triplets")
    return EXIT_OK


_ENCODER_FLAGS = ("num_layers", "hidden_dim", "aggregation", "use_distance", "distance_cap",
                  "augment_inverses", "seed")
_TRAIN_FLAGS = ("epochs", "batch_size", "learning_rate", "weight_decay", "n_nd", "n_rl",
                "mask_ratio", "patience", "valid_num_neg", "seed")


def resolve_train_config(args, bundles) -> dict:
    """Defaults, then the config file, then explicit flags."""
    fd2 = all(b.provenance.get("generator") == "fd2" for b in bundles)
    enc = {f.name: f.default for f in fields(EncoderConfig)}
    enc["num_layers"] = 2 if fd2 else 3
    tr = {f.name: f.default for f in fields(TrainConfig)}
    if args.config:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        unknown = set(cfg) - {"encoder", "train"}
        if unknown:
            raise UsageError(f"{args.config}: unknown sections {sorted(unknown)}")
        for section, target in (("encoder", enc), ("train", tr)):
            bad = set(cfg.get(section, {})) - set(target)
            if bad:
                raise UsageError(f"{args.config}: unknown {section} keys {sorted(bad)}")
            target.update(cfg.get(section, {}))
    for name in _ENCODER_FLAGS:
        if getattr(args, name, None) is not None:
            enc[name] = getattr(args, name)
    for name in _TRAIN_FLAGS:
        if getattr(args, name, None) is not None:
            tr[name] = getattr(args, name)
    enc["mlp_hidden_dims"] = list(enc["mlp_hidden_dims"])
    return {"encoder": enc, "train": tr, "data": [str(d) for d in args.data]}


def cmd_train(args) -> int:
    bundles = [ds.read_bundle(d) for d in args.data]
    resolved = resolve_train_config(args, bundles)
    enc_cfg = EncoderConfig.from_dict(resolved["encoder"])
    tr_cfg = TrainConfig(**resolved["train"])
    enc_cfg.validate()
    tr_cfg.validate()
    start_epoch = 0
    if args.resume:
        model, meta = load_checkpoint(args.resume)
        start_epoch = int(meta.get("next_epoch", 0))
        resolved["encoder"] = model.config.to_dict()
        resolved["resumed_from"] = str(args.resume)
    resolved["start_epoch"] = start_epoch
    if args.dry_run:
        print(json.dumps(resolved, indent=1, sort_keys=True))
        return EXIT_OK
    out = _prepare_out_dir(args.out_dir, args.force)
    _attach_log(out)
    _write_json(out / "config.json", resolved)
    if not args.resume:
        model = init_encoder(enc_cfg)
    graphs = [TrainGraph(b.observed, list(b.train) or None, list(b.valid)) for b in bundles]
    model, history = train(model, graphs, tr_cfg, start_epoch=start_epoch)
    with open(out / "history.jsonl", "w", encoding="utf-8") as fh:
        for rec in history.records():
            fh.write(json.dumps(dict(rec, seed=history.seed), sort_keys=True) + "\n")
    last = history.epochs[-1] + 1 if history.epochs else start_epoch
    save_checkpoint(
        model, out / "checkpoint.npz", next_epoch=last, best_epoch=history.best_epoch,
        train_nodes=sorted({n for b in bundles for n in (b.node_names or [])}),
        train_relations=sorted({r for b in bundles for r in (b.relation_names or [])}),
    )
    from .verification import check_double_invariance
    audit = check_double_invariance(model.score, trials=args.audit_trials, seed=tr_cfg.seed)
    audit.write(out / "audit.json")
    final = history.valid_metrics[-1] if history.valid_metrics else None
    print(f"trained epochs {start_epoch}..{last - 1}, final loss "
          f"{history.losses[-1] if history.losses else float('nan'):.4f}, valid {final}")
    print(f"invariance audit: max relative gap {audit.max_rel_gap:.2e} -> "
          f"{'pass' if audit.passed else 'FAIL'}")
    return EXIT_OK if audit.passed else EXIT_AUDIT


def _random_score_fn(seed: int):
    rng = np.random.default_rng(seed)
    return lambda g, q: rng.random(len(np.asarray(q).reshape(-1, 3)))


def cmd_eval(args) -> int:
    bundle = ds.read_bundle(args.data)
    queries = getattr(bundle, args.split)
    if not queries:
        raise UsageError(f"{args.data}: split {args.split!r} is empty")
    meta = {}
    if args.random_scorer:
        score_fn = _random_score_fn(args.seed)
    else:
        if not args.checkpoint:
            raise UsageError("pass --checkpoint or --random-scorer")
        model, meta = load_checkpoint(args.checkpoint)
        score_fn = model_score_fn(model)
    overlap = {"nodes": 0, "relations": 0}
    if meta.get("train_nodes") is not None:
        overlap["nodes"] = len(set(meta["train_nodes"]) & set(bundle.node_names or []))
        overlap["relations"] = len(set(meta.get("train_relations", [])) & set(bundle.relation_names or []))
        if args.strict and (overlap["nodes"] or overlap["relations"]):
            raise UsageError(f"test names overlap the training names ({overlap}); "
                             "use --no-strict to evaluate anyway")
    protocol = args.relation_protocol
    if protocol == "auto":
        protocol = "all" if bundle.provenance.get("generator") == "fd2" else "sample"
    out = _prepare_out_dir(args.out_dir, args.force)
    _attach_log(out)
    report = evaluate(score_fn, bundle.observed, queries, task=args.task, num_neg=args.num_neg,
                      seed=args.seed, ks=args.ks, corrupt=args.corrupt, relation_protocol=protocol,
                      filtered=args.filtered)
    d = report_to_dict(report)
    d.update(
        config={k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        name_overlap=overlap, doubly_inductive=not any(overlap.values()) and bool(meta),
        standard_errors=report.standard_errors(),
    )
    if args.task == "node" or protocol == "sample":
        n_neg = report.per_query[0].num_negatives
        d["random_baseline"] = random_baseline(n_neg, args.ks)
    elif protocol == "all":
        d["random_baseline"] = random_baseline(bundle.observed.num_relations - 1, args.ks)
    _write_json(out / "report.json", d)
    how = f", relation protocol {protocol}" if args.task == "relation" else ""
    print(f"{args.task} ({report.num_queries} queries{how}):")
    for k, v in report.metrics.items():
        print(f"  {k:8s} {v:.4f}  (random {d['random_baseline'].get(k, float('nan')):.4f})")
    return EXIT_OK


def _load_model(args):
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint)[0]
    return init_encoder(EncoderConfig(seed=args.seed))


def cmd_check(args) -> int:
    from . import deq, verification as V
    what = args.what
    result: dict = {"check": what, "seed": args.seed}
    if what == "invariance":
        model = _load_model(args)
        audit = V.check_double_invariance(model.score, trials=args.trials or 100, tol=args.tol, seed=args.seed)
        result.update(audit.to_dict())
        ok = audit.passed
        print(f"{audit.trials} trials, max abs gap {audit.max_abs_gap:.2e}, "
              f"max relative gap {audit.max_rel_gap:.2e}, failing {len(audit.failing_cases)}")
    elif what == "counterexample":
        rep = V.expressivity_counterexample(_load_model(args), tol=args.tol)
        ok = rep.passed
        for group, scores in zip(V.FORCED_SCORE_GROUPS, rep.score_groups):
            for q, s in zip(group, scores):
                print(f"  s{q} = {s:.10f}")
        print(f"  embedding gaps {rep.embedding_gaps}")
        result.update(score_groups=rep.score_groups, embedding_gaps=rep.embedding_gaps,
                      max_score_gap=rep.max_score_gap, tolerance=rep.tolerance, passed=ok)
    elif what == "deq-trend":
        trials = args.trials or 20
        trend = V.deq_trend(deq.RandomFeatureScorer(weight_seed=args.seed), trials=trials, seed=args.seed)
        ok = (-0.65 <= trend.mean_slope <= -0.35) and trend.decreasing >= 0.9 * trials
        result.update(Ms=trend.Ms, gaps=trend.gaps.tolist(), mean_slope=trend.mean_slope,
                      decreasing=trend.decreasing, passed=ok)
        print(f"mean log-log slope {trend.mean_slope:.3f}, gap shrank in {trend.decreasing}/{trials} trials")
    elif what == "uqer":
        ok = True
        for D in args.depths:
            g, q = ds.fd2_graph([D])
            derived = ds.uqer_derive_all(ds.FD2_CLAUSES, g)
            same = derived == set(q)
            ok &= same
            print(f"depth {D}: derived {len(derived)}, generator {len(q)}, equal {same}")
        result.update(depths=args.depths, passed=ok)
    else:
        raise UsageError(f"unknown check {what!r}")
    if args.out_dir:
        out = _prepare_out_dir(args.out_dir, args.force)
        _write_json(out / "audit.json", result)
    print("pass" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_AUDIT


def cmd_uqer(args) -> int:
    clause = ds.read_clause(args.clause)
    p = Path(args.input)
    if p.is_dir():
        b = ds.read_bundle(p)
        g, nodes, rels = b.observed, b.node_names, b.relation_names
    else:
        trip, nodes, rels = read_triplets(p)
        g = KnowledgeGraph(trip, len(nodes), len(rels))
    derived = ds.uqer_derive(clause, g, budget=args.budget)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    write_triplets(sorted(derived), args.output, nodes, rels)
    print(f"derived {len(derived)} triplets ({len(derived - g.triplet_set())} not observed)")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deqkg", description="Doubly inductive link prediction toolkit.")
    p.add_argument("--workers", type=int, default=None,
                   help=f"CPU threads for tensor ops (default: ${WORKERS_ENV} or library default)")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-fd2", help="generate the FD-2 train and test trees")
    s.add_argument("--train-depths", type=_int_list, default=[6])
    s.add_argument("--test-depths", type=_int_list, default=[6, 6])
    s.add_argument("--valid-ratio", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_gen_fd2)

    s = sub.add_parser("sample", help="budgeted subgraph sample of a triplet file")
    s.add_argument("--input", required=True, help="triplet .tsv or bundle directory")
    s.add_argument("--output", required=True)
    s.add_argument("--method", choices=("bfs", "forest-fire"), default="bfs")
    s.add_argument("--max-nodes", type=int, required=True)
    s.add_argument("--max-edges", type=int, default=10**9)
    s.add_argument("--max-degree", type=int, default=10**9)
    s.add_argument("--burn-prob", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("split", help="split a triplet file into a dataset bundle")
    s.add_argument("--input", required=True)
    s.add_argument("--ratios", type=_float_list, default=[0.8, 0.1, 0.1])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("topic-split", help="partition a graph by relation groups")
    s.add_argument("--input", required=True)
    s.add_argument("--groups", required=True, help="JSON object: group name -> relation names")
    s.add_argument("--ratios", type=_float_list, default=None,
                   help="also split each topic into a bundle with these ratios")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_topic_split)

    s = sub.add_parser("train", help="train the encoder on one or more bundles")
    s.add_argument("--data", action="append", required=True, help="bundle directory (repeatable)")
    s.add_argument("--config", help="JSON file with 'encoder' and 'train' sections; flags win")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--force", action="store_true")
    s.add_argument("--dry-run", action="store_true")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--audit-trials", type=int, default=20)
    s.add_argument("--num-layers", type=int)
    s.add_argument("--hidden-dim", type=int)
    s.add_argument("--aggregation", choices=("mean", "sum", "max"))
    s.add_argument("--use-distance", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--distance-cap", type=int)
    s.add_argument("--augment-inverses", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--n-nd", type=int)
    s.add_argument("--n-rl", type=int)
    s.add_argument("--mask-ratio", type=float)
    s.add_argument("--patience", type=int)
    s.add_argument("--valid-num-neg", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="rank held-out queries against sampled negatives")
    s.add_argument("--data", required=True, help="bundle directory")
    s.add_argument("--split", choices=("test", "valid", "train"), default="test")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--random-scorer", action="store_true")
    s.add_argument("--task", choices=("node", "relation"), default="node")
    s.add_argument("--num-neg", type=int, default=50)
    s.add_argument("--ks", type=_int_list, default=[1, 5, 10])
    s.add_argument("--corrupt", choices=("tail", "head"), default="tail")
    s.add_argument("--relation-protocol", choices=("auto", "sample", "all"), default="auto")
    s.add_argument("--filtered", action="store_true")
    s.add_argument("--strict", action=argparse.BooleanOptionalAction, default=True,
                   help="require test names disjoint from the checkpoint's training names")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("check", help="run a symmetry or oracle audit")
    s.add_argument("what", choices=("invariance", "counterexample", "deq-trend", "uqer"))
    s.add_argument("--checkpoint", help="audit this checkpoint instead of a fresh encoder")
    s.add_argument("--trials", type=int)
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--depths", type=_int_list, default=[2, 3, 4])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("uqer", help="derive every triplet a clause entails on a graph")
    s.add_argument("--clause", required=True)
    s.add_argument("--input", required=True, help="triplet .tsv or bundle directory")
    s.add_argument("--output", required=True)
    s.add_argument("--budget", type=float, default=1e7)
    s.set_defaults(func=cmd_uqer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("deqkg")
    root.handlers[:] = [console]
    root.setLevel(logging.INFO)
    root.propagate = False
    workers = args.workers if args.workers is not None else os.environ.get(WORKERS_ENV)
    try:
        _set_workers(int(workers) if workers else None)
        return args.func(args)
    except (UsageError, *INPUT_ERRORS) as exc:
        print(f"deqkg: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingError as exc:
        print(f"deqkg: training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("unexpected failure", exc_info=True)
        print(f"deqkg: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
