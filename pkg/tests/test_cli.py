import json
import subprocess
import sys

import pytest

from conftest import TINY
from pathrec import __version__
from pathrec.cli import build_parser, main

SMALL_FLAGS = ["-L", str(TINY["L_codebooks"]), "-K", str(TINY["K"]), "-d", str(TINY["d"])]


@pytest.fixture
def tiny_env(tiny_inputs, tmp_path, monkeypatch):
    """Config file holding the small settings, plus input flags."""
    cfg = tmp_path / "config.yaml"
    cfg.write_text("".join(f"{k}: {v}\n" for k, v in TINY.items()))
    for key in list(__import__("os").environ):
        if key.startswith("PATHREC_"):
            monkeypatch.delenv(key)
    flags = ["--config", str(cfg), "--work", str(tmp_path / "work")]
    for key, path in tiny_inputs.items():
        flags += ["--" + key.replace("_", "-"), path]
    return flags


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert capsys.readouterr().out.strip() == f"pathrec {__version__} (export schema 1)"


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "pathrec.cli", "--version"],
                         capture_output=True, text=True, check=True)
    assert out.stdout.startswith("pathrec ")


def test_subcommands_exist():
    parser = build_parser()
    names = set(parser._subparsers._group_actions[0].choices)
    assert names == {"ingest", "fit-codebooks", "quantize", "train-user-rep", "build-graph",
                     "retrieve", "encode", "export", "run", "bench"}


def test_missing_input_exits_nonzero(tmp_path, capsys):
    code = main(["ingest", "--work", str(tmp_path / "w"), "--embeddings-text",
                 str(tmp_path / "missing.tsv"), "--embeddings-visual", "x", "--interactions",
                 "y", "--profiles", "z"])
    assert code == 1
    assert "missing.tsv" in capsys.readouterr().err


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("bogus: 1\n")
    assert main(["ingest", "--config", str(cfg)]) == 1
    assert "bogus" in capsys.readouterr().err


def test_build_graph_standalone(tiny_inputs, tmp_path, capsys):
    out = tmp_path / "g"
    assert main(["build-graph", "--interactions", tiny_inputs["interactions"],
                 "--out", str(out)]) == 0
    lines = (out / "edges.tsv").read_text().splitlines()
    assert lines == sorted(lines) and len(lines) > 0
    assert "nodes" in capsys.readouterr().out


def test_stages_and_retrieve(tiny_env, tmp_path, capsys):
    assert main(["fit-codebooks", *tiny_env, *SMALL_FLAGS, "--modality", "text"]) == 0
    out = capsys.readouterr().out
    assert "codebooks[text]: shape [2, 8, 8]" in out and "codebooks[visual]" not in out

    assert main(["retrieve", *tiny_env, "--user", "u0000", "--item", "i0003",
                 "--emit-prompt"]) == 0
    lines = capsys.readouterr().out.splitlines()
    rec = json.loads(next(line for line in lines if line.startswith("{")))
    assert rec["user"] == "u0000" and rec["item"] == "i0003"
    for p in rec["paths"]:
        assert p[0] == "u0000" and p[-1] == "i0003"
    assert any("Explanations:" in line for line in lines)

    assert main(["retrieve", *tiny_env, "--user", "u0000", "--item", "nobody"]) == 1

    dest = tmp_path / "bundles.jsonl"
    assert main(["export", *tiny_env, "--output", str(dest)]) == 0
    out = capsys.readouterr().out
    assert "ingest: skipped" in out and "export: done" in out
    assert len(dest.read_text().splitlines()) == 40

    report = tmp_path / "bench.csv"
    assert main(["bench", *tiny_env, "--n-queries", "5", "--report", str(report)]) == 0
    assert len(report.read_text().splitlines()) == 6
    assert "p50" in capsys.readouterr().out


def test_bench_synthetic(tmp_path, capsys):
    report = tmp_path / "r.csv"
    assert main(["bench", "--synthetic-nodes", "300", "--n-queries", "10",
                 "--report", str(report)]) == 0
    assert len(report.read_text().splitlines()) == 11


def test_retrieve_needs_both_ids(tiny_env, capsys):
    assert main(["retrieve", *tiny_env, "--user", "u0000"]) == 1
    assert "together" in capsys.readouterr().err
