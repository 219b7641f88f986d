"""Loading, validating and persisting embeddings, interactions and profiles.

File formats
------------
embeddings
    optional ``#dim=N`` header, then one ``id<TAB>v1,v2,...`` record per line.
interactions
    ``user<TAB>item<TAB>timestamp`` with integer seconds.
profiles
    line-delimited JSON, ``{"id", "kind": "user"|"item", "profile", "title"?}``.

Ids are opaque strings everywhere; nothing here parses them as numbers.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimMismatch,
    DuplicateId,
    MalformedLine,
    MalformedRecord,
    MissingField,
    NegativeTimestamp,
    NonFiniteValue,
)

MODALITIES = ("text", "visual")
STORE_SCHEMA_VERSION = 1


class EmbeddingTable:
    """Dense per-item vectors of a single modality.

    Rows are kept in file order in ``matrix``; ``index`` maps id -> row.
    """

    def __init__(self, modality, dim, ids=(), matrix=None):
        if modality not in MODALITIES and modality is not None:
            raise ValueError(f"unknown modality {modality!r}")
        self.modality = modality
        self.dim = int(dim)
        self.ids = tuple(ids)
        if matrix is None:
            matrix = np.zeros((len(self.ids), self.dim))
        self.matrix = np.asarray(matrix, dtype=np.float64).reshape(len(self.ids), self.dim)
        self.matrix.setflags(write=False)
        self.index = {}
        for row, item in enumerate(self.ids):
            if item in self.index:
                raise DuplicateId(f"duplicate id {item!r}")
            self.index[item] = row
        if not np.all(np.isfinite(self.matrix)):
            bad = int(np.argwhere(~np.isfinite(self.matrix))[0, 0])
            raise NonFiniteValue(f"non-finite value for id {self.ids[bad]!r}")

    def __len__(self):
        return len(self.ids)

    def __contains__(self, item):
        return item in self.index

    def __getitem__(self, item):
        return self.matrix[self.index[item]]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.dim == other.dim
            and self.ids == other.ids
            and np.array_equal(self.matrix, other.matrix)
        )

    def __repr__(self):
        return f"EmbeddingTable(modality={self.modality!r}, dim={self.dim}, rows={len(self)})"

    @property
    def rows(self):
        return {item: self.matrix[row] for item, row in self.index.items()}

    def take(self, ids):
        """Matrix of the rows for ``ids`` in the given order."""
        return self.matrix[[self.index[i] for i in ids]]


@dataclass(frozen=True)
class InteractionLog:
    entries: tuple = ()

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def users(self):
        return tuple(dict.fromkeys(u for u, _, _ in self.entries))

    @property
    def items(self):
        return tuple(dict.fromkeys(i for _, i, _ in self.entries))


@dataclass(frozen=True)
class UserSequence:
    user: str
    items: tuple

    def __len__(self):
        return len(self.items)


@dataclass
class ProfileStore:
    user_profiles: dict = field(default_factory=dict)
    item_profiles: dict = field(default_factory=dict)
    item_titles: dict = field(default_factory=dict)

    @property
    def sizes(self):
        return len(self.user_profiles), len(self.item_profiles)


# -- embeddings ---------------------------------------------------------------


def parse_embeddings(lines, modality, source=None):
    dim = None
    ids = []
    rows = []
    seen = set()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            if key.strip() == "dim":
                try:
                    dim = int(value)
                except ValueError:
                    raise MalformedLine(f"bad header {line!r}", source, lineno) from None
                if dim < 0:
                    raise MalformedLine(f"bad header {line!r}", source, lineno)
            continue
        item, sep, payload = line.partition("\t")
        if not sep or not item:
            raise MalformedLine("expected 'id<TAB>values'", source, lineno)
        try:
            vec = [float(x) for x in payload.split(",")] if payload else []
        except ValueError:
            raise MalformedLine(f"unparsable vector for id {item!r}", source, lineno) from None
        if dim is None:
            dim = len(vec)
        if len(vec) != dim:
            raise DimMismatch(f"expected {dim} values, got {len(vec)}", source, lineno)
        if not all(math.isfinite(x) for x in vec):
            raise NonFiniteValue(f"non-finite value for id {item!r}", source, lineno)
        if item in seen:
            raise DuplicateId(f"duplicate id {item!r}", source, lineno)
        seen.add(item)
        ids.append(item)
        rows.append(vec)
    dim = dim or 0
    matrix = np.array(rows, dtype=np.float64).reshape(len(ids), dim)
    return EmbeddingTable(modality, dim, ids, matrix)


def load_embeddings(path, modality):
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_embeddings(fh, modality, source=path)


def format_vector(vec):
    return ",".join(repr(float(x)) for x in vec)


def write_matrix(path, ids, matrix):
    """Write rows in the embedding line format (also used for weights)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(-1, 1)
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"#dim={matrix.shape[1]}\n")
        for item, row in zip(ids, matrix):
            fh.write(f"{item}\t{format_vector(row)}\n")


def save_embeddings(table, path):
    write_matrix(path, table.ids, table.matrix.reshape(len(table), table.dim))


# -- interactions -------------------------------------------------------------


def parse_interactions(lines, source=None):
    entries = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not parts[0] or not parts[1]:
            raise MalformedLine("expected 'user<TAB>item<TAB>timestamp'", source, lineno)
        user, item, ts = parts
        try:
            ts = int(ts)
        except ValueError:
            raise MalformedLine(f"bad timestamp {ts!r}", source, lineno) from None
        if ts < 0:
            raise NegativeTimestamp(f"negative timestamp {ts}", source, lineno)
        entries.append((user, item, ts))
    return InteractionLog(tuple(entries))


def load_interactions(path):
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_interactions(fh, source=path)


def save_interactions(log, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for user, item, ts in log.entries:
            fh.write(f"{user}\t{item}\t{ts}\n")


def derive_sequences(log):
    """One chronological sequence per user, users in order of first appearance.

    Python's sort is stable, so equal timestamps keep their file order.
    """
    per_user = {}
    for user, item, ts in log.entries:
        per_user.setdefault(user, []).append((ts, item))
    out = []
    for user, events in per_user.items():
        events.sort(key=lambda e: e[0])
        out.append(UserSequence(user, tuple(item for _, item in events)))
    return out


# -- profiles -----------------------------------------------------------------


def parse_profiles(lines, source=None):
    store = ProfileStore()
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(f"invalid JSON ({exc.msg})", source, lineno) from None
        if not isinstance(rec, dict):
            raise MalformedRecord("record is not an object", source, lineno)
        for key in ("id", "kind", "profile"):
            if key not in rec:
                raise MissingField(f"missing field {key!r}", source, lineno)
        kind = rec["kind"]
        if kind not in ("user", "item"):
            raise MalformedRecord(f"unknown kind {kind!r}", source, lineno)
        ident, profile = rec["id"], rec["profile"]
        if not isinstance(ident, str) or not isinstance(profile, str):
            raise MalformedRecord("'id' and 'profile' must be strings", source, lineno)
        if kind == "user":
            store.user_profiles[ident] = profile
        else:
            store.item_profiles[ident] = profile
            title = rec.get("title")
            if title is not None:
                store.item_titles[ident] = str(title)
    return store


def load_profiles(path):
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_profiles(fh, source=path)


def save_profiles(store, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for ident, text in store.user_profiles.items():
            fh.write(json.dumps({"id": ident, "kind": "user", "profile": text}) + "\n")
        for ident, text in store.item_profiles.items():
            rec = {"id": ident, "kind": "item", "profile": text}
            if ident in store.item_titles:
                rec["title"] = store.item_titles[ident]
            fh.write(json.dumps(rec) + "\n")


# -- persisted store ----------------------------------------------------------

STORE_FILES = {
    "text": "embeddings_text.tsv",
    "visual": "embeddings_visual.tsv",
    "interactions": "interactions.tsv",
    "profiles": "profiles.jsonl",
}


@dataclass
class DataStore:
    text: EmbeddingTable
    visual: EmbeddingTable
    log: InteractionLog
    profiles: ProfileStore

    def sequences(self):
        return derive_sequences(self.log)


def save_store(store, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_embeddings(store.text, directory / STORE_FILES["text"])
    save_embeddings(store.visual, directory / STORE_FILES["visual"])
    save_interactions(store.log, directory / STORE_FILES["interactions"])
    save_profiles(store.profiles, directory / STORE_FILES["profiles"])
    n_users, n_items = store.profiles.sizes
    manifest = {
        "schema_version": STORE_SCHEMA_VERSION,
        "files": STORE_FILES,
        "dims": {"text": store.text.dim, "visual": store.visual.dim},
        "counts": {
            "text": len(store.text),
            "visual": len(store.visual),
            "interactions": len(store.log),
            "user_profiles": n_users,
            "item_profiles": n_items,
        },
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_store(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    files = manifest.get("files", STORE_FILES)
    store = DataStore(
        text=load_embeddings(directory / files["text"], "text"),
        visual=load_embeddings(directory / files["visual"], "visual"),
        log=load_interactions(directory / files["interactions"]),
        profiles=load_profiles(directory / files["profiles"]),
    )
    for key, dim in manifest["dims"].items():
        table = getattr(store, key)
        if len(table) and table.dim != dim:
            raise DimMismatch(f"manifest dim {dim} != file dim {table.dim}", directory / files[key])
    return store
