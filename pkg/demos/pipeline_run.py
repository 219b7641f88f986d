"""Run every pipeline stage on the planted dataset and inspect one bundle.

Writes inputs and a work directory under a temporary folder, runs the
stages (about half a minute), then runs them again to show that finished
stages are skipped.
"""

import json
import tempfile
from pathlib import Path

from pathrec import PipelineConfig, run_pipeline, save_store
from pathrec.synthetic import planted_dataset

root = Path(tempfile.mkdtemp(prefix="pathrec-demo-"))
data = planted_dataset()
save_store(data.store, root / "in")

config = PipelineConfig(
    embeddings_text=str(root / "in" / "embeddings_text.tsv"),
    embeddings_visual=str(root / "in" / "embeddings_visual.tsv"),
    interactions=str(root / "in" / "interactions.tsv"),
    profiles=str(root / "in" / "profiles.jsonl"),
    work_dir=str(root / "work"),
    d_out=256,
)

for report in run_pipeline(config):
    print(f"{report.stage:<15} {report.seconds:6.2f}s")

print("\nsecond run:", [r.stage for r in run_pipeline(config) if not r.skipped] or "all skipped")

with open(root / "work" / "export" / "bundles.jsonl") as fh:
    bundle = json.loads(fh.readline())
print(f"\nbundle for {bundle['user']} -> {bundle['item']}")
for path in bundle["paths"]:
    print("  " + " -> ".join(path))
print(f"soft prompt: {len(bundle['soft_prompt'])} values, meta {bundle['meta']}")
print("\n" + bundle["prompt"])
print(f"\nfiles are in {root}")
