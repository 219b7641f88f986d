"""Per-query retrieval latency on sparse synthetic graphs of growing size."""

import tempfile
from pathlib import Path

from pathrec import NodeReps, PipelineConfig, bench_retrieval, build
from pathrec.synthetic import sparse_graph

out = Path(tempfile.mkdtemp(prefix="pathrec-bench-"))
print(f"{'nodes':>7} {'edges':>7} {'p50 ms':>8} {'p95 ms':>8} {'qps':>7}")
for n_nodes in (1_000, 3_000, 10_000):
    data = sparse_graph(n_nodes, seed=0)
    g = build(data.log)
    s = bench_retrieval(PipelineConfig(), 200, out / f"bench_{n_nodes}.csv", g,
                        NodeReps(data.users, data.items))
    print(f"{len(g):>7} {g.n_edges:>7} {s.p50 * 1e3:8.2f} {s.p95 * 1e3:8.2f} {s.qps:7.1f}")
print(f"per-query CSVs in {out}")
