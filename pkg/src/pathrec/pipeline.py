"""Staged, resumable pipeline and the retrieval benchmark harness.

Every stage writes its artifacts under ``<work_dir>/<stage>/`` and finishes
by atomically writing ``stage.json``, which records a hash of everything the
stage consumed (relevant config keys plus upstream output hashes, or raw
input file bytes for ingest).  A stage whose recorded hash matches and whose
outputs are present is skipped.  Stage manifests are removed before a stage
runs, so a crash never leaves partial artifacts marked complete.
"""

import csv
import hashlib
import json
import logging
import multiprocessing
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .datastore import (DataStore, load_embeddings, load_interactions, load_profiles, load_store,
                        parse_embeddings, save_store, write_matrix)
from .encoder import (EXPORT_SCHEMA_VERSION, GNNParams, MoEParams, concat_paths, export_bundle,
                      gnn_encode, moe_forward, retrieval_subgraph, save_gnn, save_moe)
from .errors import InputError, PathRecError, StageError
from .graph import ITEM, USER, BipartiteGraph, NodeId, build
from .retrieval import (NodeReps, RetrievalConfig, RetrievalPath, check_path, render_prompt,
                        retrieve_detailed)
from .rq import (CodebookStack, DegenerateLayerWarning, LinearMap, ProjectionParams,
                 quantize_batch, train_projection)
from .seeding import rng_for
from .userrep import (FeatureContext, SeqEncoderParams, VectorTable, encode_users,
                      train_user_rep)

log = logging.getLogger(__name__)

STAGES = ("ingest", "fit-codebooks", "quantize", "train-user-rep", "build-graph", "retrieve",
          "encode", "export")
MANIFEST = "stage.json"

# upstream stages and config keys each stage depends on
DEPENDS = {
    "ingest": ((), ()),
    "fit-codebooks": (("ingest",), ("L_codebooks", "K", "d", "kmeans_iters", "beta", "tau",
                                    "projection_epochs", "projection_lr", "refit_every",
                                    "straight_through", "seed")),
    "quantize": (("ingest", "fit-codebooks"), ()),
    "train-user-rep": (("ingest", "fit-codebooks"), ("user_epochs", "user_lr", "negatives",
                                                     "batch_size", "temperature", "seed")),
    "build-graph": (("ingest",), ()),
    "retrieve": (("ingest", "build-graph", "train-user-rep"),
                 ("l_hop", "k_core", "k_paths", "user_arc_rule", "remove_target_edge",
                  "fallback")),
    "encode": (("build-graph", "train-user-rep", "retrieve"),
               ("gnn_dim", "activation", "n_experts", "d_out", "dropout", "k_paths", "seed")),
    "export": (("ingest", "retrieve", "encode"), ()),
}

INPUT_KEYS = ("embeddings_text", "embeddings_visual", "interactions", "profiles")

# keys that name files rather than change results; excluded from exported hashes
PATH_KEYS = ("embeddings_text", "embeddings_visual", "interactions", "profiles", "pairs",
             "work_dir", "workers")


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def result_config_hash(config):
    """Hash of every setting that can change results (file locations excluded)."""
    keys = [k for k in config.to_dict() if k not in PATH_KEYS]
    return config.digest(keys)


def _atomic_write(path, text):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# -- artifact I/O helpers -----------------------------------------------------


def save_table(table, path):
    write_matrix(path, table.ids, table.matrix)


def load_table(path):
    t = parse_embeddings(Path(path).read_text().splitlines(), None, source=path)
    return VectorTable(t.ids, t.matrix)


def save_projection(projection, directory):
    shapes = {}
    for m in sorted(projection.maps):
        lm = projection[m]
        write_matrix(directory / f"projection_{m}_weight.tsv",
                     [str(i) for i in range(lm.d_in)], lm.weight)
        write_matrix(directory / f"projection_{m}_bias.tsv", ["0"], lm.bias[None, :])
        shapes[m] = [lm.d_in, lm.d_out]
    return shapes


def load_projection(directory, shapes):
    maps = {}
    for m, (d_in, d_out) in shapes.items():
        w = load_table(directory / f"projection_{m}_weight.tsv").matrix.reshape(d_in, d_out)
        b = load_table(directory / f"projection_{m}_bias.tsv").matrix.reshape(d_out)
        maps[m] = LinearMap(w, b)
    return ProjectionParams(maps)


def save_codebooks(stack, path):
    L, K, d = stack.codebooks.shape
    ids = [f"{l}:{k}" for l in range(L) for k in range(K)]
    write_matrix(path, ids, stack.codebooks.reshape(L * K, d))


def load_codebooks(path, modality, shape, seed):
    flat = load_table(path).matrix
    return CodebookStack(modality, flat.reshape(shape), seed, True)


def load_pairs(path):
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not all(parts):
                raise InputError("expected 'user<TAB>item'", path, n)
            pairs.append((parts[0], parts[1]))
    return pairs


def default_pairs(store):
    """Each user's most recent interaction."""
    return [(s.user, s.items[-1]) for s in store.sequences() if s.items]


def path_nodes(ids):
    """Node ids of an alternating path that starts at a user."""
    return tuple(NodeId(USER if k % 2 == 0 else ITEM, x) for k, x in enumerate(ids))


# -- batch retrieval ----------------------------------------------------------

_WORKER = {}


def _init_worker(g, reps, rconf):
    _WORKER.update(g=g, reps=reps, rconf=rconf)


def _retrieve_one(pair):
    u, v = pair
    outcome = retrieve_detailed(_WORKER["g"], _WORKER["reps"], NodeId(USER, u), NodeId(ITEM, v),
                                _WORKER["rconf"])
    return outcome


def retrieve_batch(g, reps, pairs, rconf, workers=1):
    """Retrieval outcomes for ``pairs`` in input order."""
    if workers <= 1 or len(pairs) < 2:
        _init_worker(g, reps, rconf)
        return [_retrieve_one(p) for p in pairs]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(workers, mp_context=ctx, initializer=_init_worker,
                             initargs=(g, reps, rconf)) as pool:
        return list(pool.map(_retrieve_one, pairs, chunksize=max(1, len(pairs) // (4 * workers))))


def retrieval_config(config):
    return RetrievalConfig(config.l_hop, config.k_core, config.k_paths,
                           config.remove_target_edge, config.user_arc_rule, config.fallback)


# -- the runner ---------------------------------------------------------------


@dataclass
class StageReport:
    stage: str
    skipped: bool
    seconds: float
    outputs: dict = field(default_factory=dict)


class Pipeline:
    def __init__(self, config):
        self.config = config
        self.work = Path(config.work_dir)
        self._cache = {}

    # manifests

    def stage_dir(self, stage):
        return self.work / stage

    def manifest(self, stage):
        path = self.stage_dir(stage) / MANIFEST
        if not path.exists():
            return None
        return json.loads(path.read_text())

    def input_hash(self, stage):
        upstream, keys = DEPENDS[stage]
        parts = {"stage": stage, "config": {k: getattr(self.config, k) for k in keys}}
        if stage == "ingest":
            parts["files"] = {}
            for key in INPUT_KEYS:
                path = getattr(self.config, key)
                if path is None:
                    raise InputError(f"no {key} file configured")
                if not Path(path).is_file():
                    raise InputError(f"{key} file not found", path)
                parts["files"][key] = file_digest(path)
        if stage == "retrieve":
            parts["pairs"] = file_digest(self.config.pairs) if self.config.pairs else None
        for up in upstream:
            m = self.manifest(up)
            if m is None or not m.get("complete"):
                raise PathRecError(f"upstream stage '{up}' has not completed")
            parts[up] = m["outputs"]
        return _digest(parts)

    def is_current(self, stage):
        m = self.manifest(stage)
        if m is None or not m.get("complete"):
            return False
        if stage == "ingest" and not any(getattr(self.config, k) for k in INPUT_KEYS):
            # no inputs named: trust the persisted store
            return True
        try:
            if m["input_hash"] != self.input_hash(stage):
                return False
        except PathRecError:
            return False
        d = self.stage_dir(stage)
        return all((d / name).is_file() and (d / name).stat().st_size == meta["size"]
                   for name, meta in m["outputs"].items())

    def _finish(self, stage, input_hash, files):
        d = self.stage_dir(stage)
        outputs = {}
        for name in sorted(files):
            p = d / name
            outputs[name] = {"sha256": file_digest(p), "size": p.stat().st_size}
        record = {"stage": stage, "complete": True, "input_hash": input_hash,
                  "outputs": outputs, "schema_version": EXPORT_SCHEMA_VERSION}
        _atomic_write(d / MANIFEST, json.dumps(record, indent=2, sort_keys=True) + "\n")
        return outputs

    def run_stage(self, stage, force=False):
        t0 = time.perf_counter()
        try:
            if not force and self.is_current(stage):
                log.info("stage %s: up to date, skipped", stage)
                return StageReport(stage, True, time.perf_counter() - t0)
            input_hash = self.input_hash(stage)
            d = self.stage_dir(stage)
            d.mkdir(parents=True, exist_ok=True)
            (d / MANIFEST).unlink(missing_ok=True)
            log.info("stage %s: running", stage)
            files = getattr(self, "_stage_" + stage.replace("-", "_"))(d)
            outputs = self._finish(stage, input_hash, files)
        except StageError:
            raise
        except (PathRecError, OSError, ValueError, KeyError) as exc:
            raise StageError(stage, exc) from exc
        return StageReport(stage, False, time.perf_counter() - t0, outputs)

    def run(self, until=None, force=False):
        until = until or STAGES[-1]
        reports = []
        for stage in STAGES[:STAGES.index(until) + 1]:
            reports.append(self.run_stage(stage, force=force))
        return reports

    # loaders (cached; read from disk when the stage was skipped)

    def store(self):
        if "store" not in self._cache:
            self._cache["store"] = load_store(self.stage_dir("ingest") / "store")
        return self._cache["store"]

    def codebook_state(self):
        if "codebooks" not in self._cache:
            d = self.stage_dir("fit-codebooks")
            meta = json.loads((d / "codebooks.json").read_text())
            projection = load_projection(d, meta["projection"])
            stacks = {m: load_codebooks(d / f"codebooks_{m}.tsv", m, info["shape"], info["seed"])
                      for m, info in meta["codebooks"].items()}
            self._cache["codebooks"] = (projection, stacks)
        return self._cache["codebooks"]

    def reps(self):
        if "reps" not in self._cache:
            d = self.stage_dir("train-user-rep")
            self._cache["reps"] = NodeReps(load_table(d / "user_reps.tsv"),
                                           load_table(d / "item_features.tsv"))
        return self._cache["reps"]

    def graph(self):
        if "graph" not in self._cache:
            self._cache["graph"] = load_graph(self.stage_dir("build-graph") / "edges.tsv")
        return self._cache["graph"]

    def pairs(self):
        if self.config.pairs:
            return load_pairs(self.config.pairs)
        return default_pairs(self.store())

    def retrieved(self):
        with open(self.stage_dir("retrieve") / "retrieval.jsonl", encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]

    # stages

    def _stage_ingest(self, d):
        c = self.config
        store = DataStore(load_embeddings(c.embeddings_text, "text"),
                          load_embeddings(c.embeddings_visual, "visual"),
                          load_interactions(c.interactions), load_profiles(c.profiles))
        save_store(store, d / "store")
        self._cache["store"] = store
        return [f"store/{p.name}" for p in sorted((d / "store").iterdir())]

    def _stage_fit_codebooks(self, d):
        c, store = self.config, self.store()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateLayerWarning)
            result = train_projection(store.text, store.visual, None, c.L_codebooks, c.K, c.d,
                                      c.projection_epochs, c.projection_lr, c.refit_every, c.beta,
                                      c.tau, straight_through=c.straight_through, seed=c.seed,
                                      max_iters=c.kmeans_iters)
        shapes = save_projection(result.projection, d)
        codebooks = {}
        for m, stack in result.stacks.items():
            save_codebooks(stack, d / f"codebooks_{m}.tsv")
            codebooks[m] = {"shape": list(stack.codebooks.shape), "seed": stack.seed}
        meta = {"projection": shapes, "codebooks": codebooks, "history": result.history}
        (d / "codebooks.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        self._cache["codebooks"] = (result.projection, result.stacks)
        return (["codebooks.json"] + [f"codebooks_{m}.tsv" for m in codebooks]
                + [f"projection_{m}_{p}.tsv" for m in shapes for p in ("weight", "bias")])

    def _stage_quantize(self, d):
        store = self.store()
        projection, stacks = self.codebook_state()
        files = []
        for m in sorted(stacks):
            table = getattr(store, m)
            idx, _, _ = quantize_batch(projection[m](table.matrix), stacks[m])
            name = f"sids_{m}.tsv"
            with open(d / name, "w", encoding="utf-8") as fh:
                for ident, row in zip(table.ids, idx):
                    fh.write(ident + "\t" + ",".join(str(int(x)) for x in row) + "\n")
            files.append(name)
        return files

    def _stage_train_user_rep(self, d):
        c, store = self.config, self.store()
        projection, stacks = self.codebook_state()
        context = FeatureContext(store.text, store.visual, stacks)
        params = SeqEncoderParams.init(projection, c.seed)
        seqs = store.sequences()
        result = train_user_rep(seqs, context, params, c.user_epochs, c.user_lr, c.negatives,
                                c.batch_size, c.seed, c.temperature)
        feats = context.feature_table(result.params.projection)
        users = encode_users([s for s in seqs if s.items], feats, result.params)
        save_table(users, d / "user_reps.tsv")
        save_table(feats, d / "item_features.tsv")
        dim = len(result.params.bias)
        write_matrix(d / "seqenc_weight.tsv", [str(i) for i in range(dim)], result.params.weight)
        write_matrix(d / "seqenc_bias.tsv", ["0"], result.params.bias[None, :])
        (d / "losses.json").write_text(json.dumps(result.losses) + "\n")
        self._cache["reps"] = NodeReps(users, feats)
        return ["user_reps.tsv", "item_features.tsv", "seqenc_weight.tsv", "seqenc_bias.tsv",
                "losses.json"]

    def _stage_build_graph(self, d):
        g = build(self.store().log)
        save_graph(g, d / "edges.tsv")
        self._cache["graph"] = g
        return ["edges.tsv"]

    def _stage_retrieve(self, d):
        c = self.config
        g, reps, pairs = self.graph(), self.reps(), self.pairs()
        for n, (u, v) in enumerate(pairs, 1):
            for node in (NodeId(USER, u), NodeId(ITEM, v)):
                if node not in g:
                    raise InputError(f"pair {n} ({u}, {v}): {node} is not in the graph",
                                     c.pairs or "default pairs")
        outcomes = retrieve_batch(g, reps, pairs, retrieval_config(c), c.workers)
        with open(d / "retrieval.jsonl", "w", encoding="utf-8") as fh:
            for (u, v), out in zip(pairs, outcomes):
                for p in out.paths:
                    check_path(p, NodeId(USER, u), NodeId(ITEM, v))
                fh.write(json.dumps(retrieval_record(u, v, out.paths)) + "\n")
        return ["retrieval.jsonl"]

    def _stage_encode(self, d):
        c = self.config
        g, reps = self.graph(), self.reps()
        d_in = reps.users.matrix.shape[1]
        gnn = GNNParams.init(d_in, c.gnn_dim, c.seed, c.activation)
        moe = MoEParams.init(c.k_paths * c.gnn_dim, c.d_out, c.n_experts, c.seed, c.dropout)
        save_gnn(gnn, d / "gnn")
        save_moe(moe, d / "moe")
        records = self.retrieved()
        rows = np.zeros((len(records), c.d_out))
        for n, rec in enumerate(records):
            encs = [gnn_encode(retrieval_subgraph(g, path_nodes(p)), reps, gnn)
                    for p in rec["paths"]]
            rows[n] = moe_forward(concat_paths(encs, c.k_paths, gnn.d_out), moe)
        write_matrix(d / "soft_prompts.tsv", [str(n) for n in range(len(records))], rows)
        return (["soft_prompts.tsv"] + [f"gnn/{p.name}" for p in sorted((d / "gnn").iterdir())]
                + [f"moe/{p.name}" for p in sorted((d / "moe").iterdir())])

    def _stage_export(self, d):
        c = self.config
        profiles = self.store().profiles
        records = self.retrieved()
        soft = load_table(self.stage_dir("encode") / "soft_prompts.tsv").matrix
        digest = result_config_hash(c)
        with open(d / "bundles.jsonl", "w", encoding="utf-8") as fh:
            for rec, vec in zip(records, soft.reshape(len(records), -1)):
                paths = [path_nodes(p) for p in rec["paths"]]
                prompt = render_prompt(rec["user"], rec["item"], paths, profiles)
                export_bundle(rec["user"], rec["item"], rec["paths"], prompt, vec, fh,
                              digest, c.seed)
        return ["bundles.jsonl"]


def retrieval_record(u, v, paths):
    return {"user": u, "item": v, "paths": [list(p.ids()) for p in paths],
            "lengths": [p.length for p in paths]}


def save_graph(g, path):
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in sorted((a.id, b.id) for a, b in g.edge_set()):
            fh.write(f"{u}\t{i}\n")


def load_graph(path):
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise InputError("expected 'user<TAB>item'", path, n)
            pairs.append(tuple(parts))
    return BipartiteGraph.from_edges(pairs)


def run_pipeline(config, until=None, force=False):
    """Run stages in order; returns the list of :class:`StageReport`."""
    return Pipeline(config).run(until, force)


# -- benchmark ----------------------------------------------------------------

BENCH_FIELDS = ("query", "user", "item", "n_paths", "n_nodes", "seconds", "lengths", "paths")


@dataclass
class BenchSummary:
    n_queries: int
    total_seconds: float
    p50: float
    p95: float
    qps: float

    def as_dict(self):
        return dict(self.__dict__)


def sample_queries(g, n_queries, seed=0):
    """Uniformly drawn existing (user, item) edges; deterministic in ``seed``."""
    if n_queries == 0:
        return []
    edges = sorted((a.id, b.id) for a, b in g.edge_set())
    rng = rng_for(seed, "bench/queries")
    picks = rng.integers(len(edges), size=n_queries)
    return [edges[k] for k in picks]


def bench_retrieval(config, n_queries, report, graph=None, reps=None, queries=None):
    """Time per-query retrieval and write a per-query CSV to ``report``.

    ``graph``/``reps`` default to the artifacts of a completed pipeline run in
    ``config.work_dir``.  A ``<report>.summary.json`` file holds the summary.
    """
    config = config or PipelineConfig()
    if graph is None or reps is None:
        p = Pipeline(config)
        graph, reps = p.graph(), p.reps()
    queries = sample_queries(graph, n_queries, config.seed) if queries is None else queries
    rconf = retrieval_config(config)
    times = []
    report = Path(report)
    t_all = time.perf_counter()
    with open(report, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BENCH_FIELDS)
        for q, (u, v) in enumerate(queries):
            t0 = time.perf_counter()
            out = retrieve_detailed(graph, reps, NodeId(USER, u), NodeId(ITEM, v), rconf)
            dt = time.perf_counter() - t0
            times.append(dt)
            writer.writerow([q, u, v, len(out.paths), out.attempts[-1][2], f"{dt:.6f}",
                             ";".join(repr(p.length) for p in out.paths),
                             ";".join(" ".join(p.ids()) for p in out.paths)])
    total = time.perf_counter() - t_all
    arr = np.array(times)
    summary = BenchSummary(len(times), total,
                           float(np.percentile(arr, 50)) if len(arr) else 0.0,
                           float(np.percentile(arr, 95)) if len(arr) else 0.0,
                           len(times) / total if len(times) and total > 0 else 0.0)
    report.with_name(report.name + ".summary.json").write_text(
        json.dumps(summary.as_dict(), indent=2, sort_keys=True) + "\n")
    return summary


def read_bench(report):
    with open(report, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def path_from_record(ids, length):
    return RetrievalPath(path_nodes(ids), length)
