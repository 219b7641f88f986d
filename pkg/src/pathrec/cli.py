"""Command-line entry point: ``pathrec <subcommand> [options]``.

Stage subcommands run the pipeline up to and including that stage inside a
work directory; completed upstream stages are skipped via their manifests.
Settings come from ``--config`` (YAML/JSON), ``PATHREC_<KEY>`` environment
variables and flags, in increasing priority.
"""

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from . import __version__
from .config import load_config
from .datastore import load_interactions
from .encoder import EXPORT_SCHEMA_VERSION
from .errors import PathRecError
from .graph import ITEM, USER, NodeId, build
from .pipeline import Pipeline, bench_retrieval, retrieval_config, retrieval_record, save_graph
from .retrieval import NodeReps, render_prompt, retrieve
from .synthetic import sparse_graph

log = logging.getLogger("pathrec")


def _common(p):
    p.add_argument("--config", help="YAML or JSON key-value config file")
    p.add_argument("--work", "--out", dest="work_dir", help="work directory (default: work)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="processes for batch retrieval")
    p.add_argument("--force", action="store_true", help="rerun stages even if up to date")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _inputs(p):
    p.add_argument("--embeddings-text", dest="embeddings_text")
    p.add_argument("--embeddings-visual", dest="embeddings_visual")
    p.add_argument("--interactions")
    p.add_argument("--profiles")
    p.add_argument("--pairs", help="TSV of user<TAB>item query pairs")


def _retrieval_flags(p):
    p.add_argument("-k", dest="k_paths", type=int)
    p.add_argument("--l-hop", dest="l_hop", type=int)
    p.add_argument("--k-core", dest="k_core", type=int)
    p.add_argument("--user-arc-rule", dest="user_arc_rule", choices=("source", "target"))
    p.add_argument("--keep-target-edge", dest="remove_target_edge", action="store_const",
                   const=False)


def build_parser():
    parser = argparse.ArgumentParser(prog="pathrec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"pathrec {__version__} (export schema {EXPORT_SCHEMA_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate inputs and persist the data store")
    _common(p)
    _inputs(p)

    p = sub.add_parser("fit-codebooks", help="train projections and residual codebooks")
    _common(p)
    _inputs(p)
    p.add_argument("--modality", choices=("text", "visual", "both"), default="both",
                   help="which codebook to summarize (both are always fitted jointly)")
    p.add_argument("-L", dest="L_codebooks", type=int)
    p.add_argument("-K", dest="K", type=int)
    p.add_argument("-d", dest="d", type=int)
    p.add_argument("--epochs", dest="projection_epochs", type=int)

    p = sub.add_parser("quantize", help="export semantic ids")
    _common(p)
    _inputs(p)

    p = sub.add_parser("train-user-rep", help="train the sequence encoder")
    _common(p)
    _inputs(p)
    p.add_argument("--epochs", dest="user_epochs", type=int)
    p.add_argument("--lr", dest="user_lr", type=float)
    p.add_argument("--negs", dest="negatives", type=int)

    p = sub.add_parser("build-graph", help="build the interaction graph")
    _common(p)
    _inputs(p)

    p = sub.add_parser("retrieve", help="retrieve paths for one pair or a pair list")
    _common(p)
    _inputs(p)
    _retrieval_flags(p)
    p.add_argument("--user")
    p.add_argument("--item")
    p.add_argument("--emit-prompt", action="store_true")
    p.add_argument("--output", help="copy the batch result to this file")

    for name, text in (("encode", "compute soft prompts"), ("export", "write bundles")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _inputs(p)
        p.add_argument("--output", help="copy the stage result to this file")

    p = sub.add_parser("run", help="run every stage")
    _common(p)
    _inputs(p)
    _retrieval_flags(p)

    p = sub.add_parser("bench", help="time per-query retrieval")
    _common(p)
    _inputs(p)
    _retrieval_flags(p)
    p.add_argument("--n-queries", type=int, default=1000)
    p.add_argument("--report", required=True, help="per-query CSV output")
    p.add_argument("--synthetic-nodes", type=int, default=0,
                   help="benchmark a generated graph of this many nodes instead of the work dir")
    return parser


CONFIG_KEYS = ("embeddings_text", "embeddings_visual", "interactions", "profiles", "pairs",
               "work_dir", "seed", "workers", "k_paths", "l_hop", "k_core", "user_arc_rule",
               "remove_target_edge", "L_codebooks", "K", "d", "projection_epochs", "user_epochs",
               "user_lr", "negatives")


def config_from_args(args, env=None):
    overrides = {k: getattr(args, k) for k in CONFIG_KEYS if getattr(args, k, None) is not None}
    return load_config(args.config, overrides, env)


def _report(reports):
    for r in reports:
        state = "skipped" if r.skipped else f"done in {r.seconds:.2f}s"
        print(f"{r.stage}: {state}")


def _copy_output(pipe, stage, name, dest):
    if dest:
        shutil.copyfile(pipe.stage_dir(stage) / name, dest)


def cmd_stage(args, config):
    pipe = Pipeline(config)
    if args.command == "build-graph" and config.interactions and not config.embeddings_text:
        # standalone: the graph only needs the interaction log
        out = Path(config.work_dir)
        out.mkdir(parents=True, exist_ok=True)
        g = build(load_interactions(config.interactions))
        save_graph(g, out / "edges.tsv")
        print(f"build-graph: {len(g)} nodes, {g.n_edges} edges -> {out / 'edges.tsv'}")
        return 0
    _report(pipe.run(args.command, args.force))
    if args.command == "fit-codebooks":
        meta = json.loads((pipe.stage_dir("fit-codebooks") / "codebooks.json").read_text())
        for m, info in sorted(meta["codebooks"].items()):
            if args.modality in (m, "both"):
                print(f"codebooks[{m}]: shape {info['shape']}")
    if args.command in ("encode", "export"):
        name = "soft_prompts.tsv" if args.command == "encode" else "bundles.jsonl"
        _copy_output(pipe, args.command, name, args.output)
    return 0


def cmd_retrieve(args, config):
    pipe = Pipeline(config)
    if args.user is None and args.item is None:
        _report(pipe.run("retrieve", args.force))
        _copy_output(pipe, "retrieve", "retrieval.jsonl", args.output)
        return 0
    if args.user is None or args.item is None:
        raise PathRecError("--user and --item must be given together")
    _report(pipe.run("build-graph", args.force))
    g = pipe.graph()
    reps = pipe.reps()
    u, v = NodeId(USER, args.user), NodeId(ITEM, args.item)
    paths = retrieve(g, reps, u, v, retrieval_config(config))
    print(json.dumps(retrieval_record(args.user, args.item, paths)))
    if args.emit_prompt:
        print(render_prompt(u, v, paths, pipe.store().profiles))
    return 0


def cmd_run(args, config):
    _report(Pipeline(config).run(None, args.force))
    return 0


def cmd_bench(args, config):
    if args.synthetic_nodes:
        data = sparse_graph(args.synthetic_nodes, seed=config.seed)
        g, reps = build(data.log), NodeReps(data.users, data.items)
        summary = bench_retrieval(config, args.n_queries, args.report, g, reps)
    else:
        summary = bench_retrieval(config, args.n_queries, args.report)
    s = summary.as_dict()
    print(f"queries {s['n_queries']}  total {s['total_seconds']:.3f}s  "
          f"p50 {s['p50'] * 1e3:.2f}ms  p95 {s['p95'] * 1e3:.2f}ms  qps {s['qps']:.1f}")
    return 0


COMMANDS = {"retrieve": cmd_retrieve, "run": cmd_run, "bench": cmd_bench}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
        handler = COMMANDS.get(args.command, cmd_stage)
        return handler(args, config)
    except (PathRecError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
