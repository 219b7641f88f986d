import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathrec.datastore import (DataStore, EmbeddingTable, InteractionLog, ProfileStore,
                               derive_sequences, load_embeddings, load_interactions,
                               load_profiles, load_store, parse_embeddings, parse_interactions,
                               save_embeddings, save_interactions, save_profiles, save_store)
from pathrec.errors import (DimMismatch, DuplicateId, MalformedLine, MalformedRecord,
                            MissingField, NegativeTimestamp, NonFiniteValue)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadEmbeddings:
    def test_empty_file_takes_dim_from_header(self, tmp_path):
        t = load_embeddings(write(tmp_path, "e.tsv", "#dim=1280\n"), "text")
        assert len(t) == 0
        assert t.dim == 1280
        assert t.matrix.shape == (0, 1280)

    def test_dim_mismatch_reports_line_two(self, tmp_path):
        rows = ["a\t" + ",".join(["0.5"] * 1280), "b\t" + ",".join(["0.5"] * 1279)]
        p = write(tmp_path, "e.tsv", "\n".join(rows) + "\n")
        with pytest.raises(DimMismatch) as exc:
            load_embeddings(p, "text")
        assert exc.value.line == 2
        assert str(p) in str(exc.value)

    def test_row_count_at_catalogue_scale(self, tmp_path):
        # item catalogue size of a mid-sized public review dataset
        rng = np.random.default_rng(0)
        ids = [f"item{k}" for k in range(6956)]
        table = EmbeddingTable("text", 8, ids, rng.normal(size=(6956, 8)))
        p = tmp_path / "e.tsv"
        save_embeddings(table, p)
        loaded = load_embeddings(p, "text")
        assert len(loaded) == 6956

    def test_count_equals_non_blank_lines(self, tmp_path):
        p = write(tmp_path, "e.tsv", "a\t1,2\n\n   \nb\t3,4\n")
        assert len(load_embeddings(p, "visual")) == 2

    def test_duplicate_id(self, tmp_path):
        with pytest.raises(DuplicateId):
            load_embeddings(write(tmp_path, "e.tsv", "a\t1,2\na\t3,4\n"), "text")

    @pytest.mark.parametrize("bad", ["nan", "inf", "-inf"])
    def test_non_finite(self, tmp_path, bad):
        with pytest.raises(NonFiniteValue):
            load_embeddings(write(tmp_path, "e.tsv", f"a\t1,{bad}\n"), "text")

    @pytest.mark.parametrize("line", ["no-tab-here", "a\t1,x", "\t1,2"])
    def test_malformed(self, tmp_path, line):
        with pytest.raises(MalformedLine):
            load_embeddings(write(tmp_path, "e.tsv", line + "\n"), "text")

    def test_header_conflict(self, tmp_path):
        with pytest.raises(DimMismatch):
            load_embeddings(write(tmp_path, "e.tsv", "#dim=3\na\t1,2\n"), "text")

    def test_ids_are_opaque_strings(self, tmp_path):
        t = load_embeddings(write(tmp_path, "e.tsv", "007\t1\n7\t2\n"), "text")
        assert t.ids == ("007", "7")

    def test_matrix_is_read_only(self, tmp_path):
        t = load_embeddings(write(tmp_path, "e.tsv", "a\t1,2\n"), "text")
        with pytest.raises(ValueError):
            t.matrix[0, 0] = 5.0


class TestLoadInteractions:
    def test_empty(self, tmp_path):
        assert len(load_interactions(write(tmp_path, "i.tsv", ""))) == 0

    def test_negative_timestamp(self, tmp_path):
        with pytest.raises(NegativeTimestamp):
            load_interactions(write(tmp_path, "i.tsv", "u\ti\t-5\n"))

    @pytest.mark.parametrize("line", ["u\ti", "u\ti\t1.5", "\ti\t3", "u\ti\t1\textra"])
    def test_malformed(self, tmp_path, line):
        with pytest.raises(MalformedLine):
            load_interactions(write(tmp_path, "i.tsv", line + "\n"))

    def test_file_order_and_duplicates_kept(self, tmp_path):
        log = load_interactions(write(tmp_path, "i.tsv", "u\ta\t5\nu\ta\t5\nv\tb\t1\n"))
        assert log.entries == (("u", "a", 5), ("u", "a", 5), ("v", "b", 1))

    def test_log_at_dataset_scale(self, tmp_path):
        # interaction count of the same dataset
        lines = "".join(f"u{k % 19445}\ti{k % 6956}\t{k}\n" for k in range(159624))
        assert len(load_interactions(write(tmp_path, "i.tsv", lines))) == 159624


class TestDeriveSequences:
    def test_sorted_by_timestamp(self):
        seqs = derive_sequences(InteractionLog((("u1", "a", 3), ("u1", "b", 1))))
        assert seqs[0].items == ("b", "a")

    def test_singleton(self):
        seqs = derive_sequences(InteractionLog((("u1", "a", 0),)))
        assert len(seqs) == 1 and seqs[0].items == ("a",)

    def test_ties_keep_file_order(self):
        seqs = derive_sequences(InteractionLog((("u", "x", 2), ("u", "y", 1), ("u", "z", 2))))
        assert seqs[0].items == ("y", "x", "z")

    def test_matches_reference_sort(self):
        rng = np.random.default_rng(3)
        entries = tuple((f"u{rng.integers(10)}", f"i{rng.integers(30)}", int(rng.integers(20)))
                        for _ in range(300))
        got = {s.user: list(s.items) for s in derive_sequences(InteractionLog(entries))}
        for user in {e[0] for e in entries}:
            mine = [(ts, pos, it) for pos, (u, it, ts) in enumerate(entries) if u == user]
            # reference: explicit (timestamp, file position) key
            assert got[user] == [it for _, _, it in sorted(mine)]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("xyz"),
                              st.integers(0, 5)), max_size=40))
    def test_preserves_multiplicity(self, entries):
        seqs = derive_sequences(InteractionLog(tuple(entries)))
        assert sum(len(s.items) for s in seqs) == len(entries)
        for s in seqs:
            ts = [t for u, _, t in entries if u == s.user]
            assert len(ts) == len(s.items)


class TestProfiles:
    def test_missing_profile_field(self, tmp_path):
        p = write(tmp_path, "p.jsonl", json.dumps({"id": "u", "kind": "user"}) + "\n")
        with pytest.raises(MissingField):
            load_profiles(p)

    def test_sizes(self, tmp_path):
        recs = [{"id": f"u{k}", "kind": "user", "profile": "p"} for k in range(3)]
        recs += [{"id": f"i{k}", "kind": "item", "profile": "q", "title": "T", "x": 1}
                 for k in range(2)]
        store = load_profiles(write(tmp_path, "p.jsonl",
                                    "\n".join(json.dumps(r) for r in recs) + "\n"))
        assert store.sizes == (3, 2)
        assert store.item_titles["i0"] == "T"

    def test_unknown_kind(self, tmp_path):
        p = write(tmp_path, "p.jsonl",
                  json.dumps({"id": "s", "kind": "shop", "profile": "p"}) + "\n")
        with pytest.raises(MalformedRecord):
            load_profiles(p)

    def test_bad_json(self, tmp_path):
        with pytest.raises(MalformedRecord):
            load_profiles(write(tmp_path, "p.jsonl", "{not json\n"))


class TestRoundTrip:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 6), st.integers(1, 5), st.integers(0, 10_000))
    def test_embeddings(self, n, dim, seed):
        import tempfile
        from pathlib import Path

        rng = np.random.default_rng(seed)
        table = EmbeddingTable("text", dim, [f"id{k}" for k in range(n)],
                               rng.normal(size=(n, dim)) * 10.0 ** rng.integers(-5, 5))
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "e.tsv"
            save_embeddings(table, p)
            assert load_embeddings(p, "text") == table

    def test_log_and_profiles(self, tmp_path):
        log = InteractionLog((("u", "a", 3), ("v", "b", 0), ("u", "a", 3)))
        save_interactions(log, tmp_path / "i.tsv")
        assert load_interactions(tmp_path / "i.tsv") == log
        store = ProfileStore({"u": "likes things"}, {"a": "a thing"}, {"a": "Thing"})
        save_profiles(store, tmp_path / "p.jsonl")
        back = load_profiles(tmp_path / "p.jsonl")
        assert (back.user_profiles, back.item_profiles, back.item_titles) == (
            store.user_profiles, store.item_profiles, store.item_titles)

    def test_store_directory(self, tmp_path):
        rng = np.random.default_rng(0)
        store = DataStore(EmbeddingTable("text", 3, ["a", "b"], rng.normal(size=(2, 3))),
                          EmbeddingTable("visual", 2, ["a", "b"], rng.normal(size=(2, 2))),
                          InteractionLog((("u", "a", 1),)),
                          ProfileStore({"u": "U"}, {"a": "A", "b": "B"}, {"a": "TA"}))
        manifest = save_store(store, tmp_path / "s")
        assert manifest["dims"] == {"text": 3, "visual": 2}
        assert manifest["counts"]["interactions"] == 1
        back = load_store(tmp_path / "s")
        assert back.text == store.text and back.visual == store.visual
        assert back.log == store.log

    def test_deterministic_parse(self):
        lines = ["#dim=2", "a\t0.1,0.2", "b\t1e-300,-3"]
        a, b = parse_embeddings(lines, "text"), parse_embeddings(lines, "text")
        assert a == b
        np.testing.assert_array_equal(a.matrix, b.matrix)
        assert parse_interactions(["u\ti\t1"]) == parse_interactions(["u\ti\t1"])
