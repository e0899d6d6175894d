"""Bank storage: unit/edge/entity tables, lexical and vector indexes, snapshots.

Concurrency works by publishing immutable :class:`BankState` objects.
Readers grab the current state with :meth:`MemoryBank.snapshot` and keep
using it for as long as they like; nothing they hold is ever mutated. A
writer opens a :class:`Transaction`, which works on copies, and on commit
the bank swaps in a fresh state under its write lock. A transaction that
raises is simply dropped, so a failed write leaves no trace.

File-backed banks write the new snapshot to disk (temp file, fsync,
rename) before publishing it in memory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
import threading
from collections import Counter
from concurrent.futures import Future, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import RejectedFactError, SnapshotError, StorageError, UnsupportedVersionError
from .model import (
    BankProfile,
    Edge,
    EngineConfig,
    Entity,
    LinkKind,
    MemoryUnit,
    Network,
    validate_unit,
)
from .text import tokenize

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SNAPSHOT_MAGIC = "membank-snapshot"

EdgeKey = tuple[str, str, LinkKind]


# --------------------------------------------------------------------------
# Indexes
# --------------------------------------------------------------------------


class InvertedIndex:
    """Term postings with per-document lengths, scored with Okapi BM25.

    Treat an instance reachable from a published state as read-only.
    """

    def __init__(self) -> None:
        self.postings: dict[str, dict[str, int]] = {}
        self.doc_len: dict[str, int] = {}
        self.total_len = 0

    def copy(self) -> InvertedIndex:
        out = InvertedIndex()
        out.postings = {term: dict(p) for term, p in self.postings.items()}
        out.doc_len = dict(self.doc_len)
        out.total_len = self.total_len
        return out

    def add(self, doc_id: str, text: str) -> None:
        if doc_id in self.doc_len:
            self.remove(doc_id)
        tokens = tokenize(text)
        for term, tf in Counter(tokens).items():
            self.postings.setdefault(term, {})[doc_id] = tf
        self.doc_len[doc_id] = len(tokens)
        self.total_len += len(tokens)

    def remove(self, doc_id: str) -> None:
        if doc_id not in self.doc_len:
            return
        for term in list(self.postings):
            posting = self.postings[term]
            if posting.pop(doc_id, None) is not None and not posting:
                del self.postings[term]
        self.total_len -= self.doc_len.pop(doc_id)

    def __len__(self) -> int:
        return len(self.doc_len)

    def bm25(self, query_terms: Iterable[str], k1: float = 1.2, b: float = 0.75) -> dict[str, float]:
        """Score every document containing at least one distinct query term.

        Uses ``idf = ln(1 + (N - df + 0.5) / (df + 0.5))``, which stays
        positive for terms present in most documents.
        """
        n_docs = len(self.doc_len)
        if n_docs == 0:
            return {}
        avgdl = self.total_len / n_docs if self.total_len else 1.0
        scores: dict[str, float] = {}
        for term in dict.fromkeys(query_terms):
            posting = self.postings.get(term)
            if not posting:
                continue
            df = len(posting)
            idf = math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))
            for doc_id in sorted(posting):
                tf = posting[doc_id]
                norm = k1 * (1.0 - b + b * self.doc_len[doc_id] / avgdl)
                scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (k1 + 1.0) / (tf + norm)
        return scores

    def checksum(self) -> str:
        h = hashlib.sha256()
        for term in sorted(self.postings):
            for doc_id in sorted(self.postings[term]):
                h.update(f"{term}\x00{doc_id}\x00{self.postings[term][doc_id]}\n".encode())
        for doc_id in sorted(self.doc_len):
            h.update(f"{doc_id}\x01{self.doc_len[doc_id]}\n".encode())
        return h.hexdigest()


class VectorIndex:
    """Exact cosine index over a dense matrix.

    Rows are immutable arrays shared between copies; the stacked matrix is
    built lazily on the first search after a change.
    """

    def __init__(self, dim: int) -> None:
        self.dim = dim
        self._rows: dict[str, np.ndarray] = {}
        self._cache: tuple[list[str], np.ndarray, np.ndarray] | None = None
        self._cache_lock = threading.Lock()

    def copy(self) -> VectorIndex:
        out = VectorIndex(self.dim)
        out._rows = dict(self._rows)
        return out

    def add(self, doc_id: str, vector: Sequence[float]) -> None:
        row = np.asarray(vector, dtype=np.float64)
        if row.shape != (self.dim,):
            raise RejectedFactError("embedding dimension mismatch", [f"{row.shape} != ({self.dim},)"])
        row.setflags(write=False)
        self._rows[doc_id] = row
        self._cache = None

    def remove(self, doc_id: str) -> None:
        if self._rows.pop(doc_id, None) is not None:
            self._cache = None

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._rows

    def __len__(self) -> int:
        return len(self._rows)

    def get(self, doc_id: str) -> np.ndarray | None:
        return self._rows.get(doc_id)

    def _matrix(self) -> tuple[list[str], np.ndarray, np.ndarray]:
        with self._cache_lock:
            if self._cache is None:
                ids = sorted(self._rows)
                mat = np.vstack([self._rows[i] for i in ids]) if ids else np.zeros((0, self.dim))
                norms = np.linalg.norm(mat, axis=1) if ids else np.zeros(0)
                self._cache = (ids, mat, norms)
            return self._cache

    def cosine_all(self, query: Sequence[float]) -> dict[str, float]:
        """Cosine similarity of ``query`` against every stored vector."""
        ids, mat, norms = self._matrix()
        if not ids:
            return {}
        q = np.asarray(query, dtype=np.float64)
        qn = float(np.linalg.norm(q))
        if qn == 0.0:
            return {i: 0.0 for i in ids}
        denom = norms * qn
        dots = mat @ q
        sims = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
        return dict(zip(ids, sims.tolist()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for doc_id in sorted(self._rows):
            h.update(doc_id.encode() + b"\x00")
            h.update(self._rows[doc_id].astype("<f8").tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# Published state
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BankState:
    """An immutable, consistent view of one bank."""

    bank_id: str
    profile: BankProfile
    units: Mapping[str, MemoryUnit]
    edges: Mapping[EdgeKey, Edge]
    out_edges: Mapping[str, tuple[Edge, ...]]
    entities: Mapping[str, Entity]
    entity_units: Mapping[str, frozenset[str]]
    lexical: InvertedIndex
    vectors: VectorIndex
    sequences: Mapping[str, int]
    version: int = 0

    @classmethod
    def empty(cls, bank_id: str, dim: int, profile: BankProfile | None = None) -> BankState:
        return cls(
            bank_id=bank_id,
            profile=profile or BankProfile(name=bank_id),
            units={},
            edges={},
            out_edges={},
            entities={},
            entity_units={},
            lexical=InvertedIndex(),
            vectors=VectorIndex(dim),
            sequences={"unit": 0, "entity": 0},
        )

    def network(self, network: Network) -> list[MemoryUnit]:
        return [u for u in self.units.values() if u.network is network]

    def opinions(self) -> list[MemoryUnit]:
        return self.network(Network.OPINION)

    def edges_of_kind(self, kind: LinkKind) -> list[Edge]:
        return [e for e in self.edges.values() if e.kind is kind]

    def counts(self) -> dict[str, Any]:
        per_network = Counter(u.network.value for u in self.units.values())
        per_kind = Counter(e.kind.value for e in self.edges.values())
        return {
            "units": len(self.units),
            "edges": len(self.edges),
            "entities": len(self.entities),
            "networks": {n.value: per_network.get(n.value, 0) for n in Network},
            "edge_kinds": {k.value: per_kind.get(k.value, 0) for k in LinkKind},
        }


def check_coherence(state: BankState) -> list[str]:
    """Return every index/table disagreement in ``state``; empty means coherent."""
    problems: list[str] = []
    rebuilt = InvertedIndex()
    for uid, unit in state.units.items():
        rebuilt.add(uid, unit.text)
        row = state.vectors.get(uid)
        if row is None:
            problems.append(f"{uid}: missing vector entry")
        elif not np.array_equal(row, np.asarray(unit.embedding, dtype=np.float64)):
            problems.append(f"{uid}: vector entry differs from unit embedding")
    if len(state.vectors) != len(state.units):
        problems.append("vector index holds ids not in the unit table")
    if rebuilt.checksum() != state.lexical.checksum():
        problems.append("lexical index does not match unit texts")
    for key, edge in state.edges.items():
        if edge.source not in state.units or edge.target not in state.units:
            problems.append(f"dangling edge {key}")
    return problems


# --------------------------------------------------------------------------
# Transactions
# --------------------------------------------------------------------------

FaultHook = Callable[[str], None]


class Transaction:
    """Mutable working copy of a :class:`BankState`.

    Every mutator validates its input; invalid units raise
    :class:`RejectedFactError` without touching the copy.
    """

    def __init__(self, base: BankState, config: EngineConfig, fault_hook: FaultHook | None = None) -> None:
        self.base = base
        self.config = config
        self._fault = fault_hook
        self.bank_id = base.bank_id
        self.profile = base.profile
        self.units: dict[str, MemoryUnit] = dict(base.units)
        self.edges: dict[EdgeKey, Edge] = dict(base.edges)
        self.out_edges: dict[str, tuple[Edge, ...]] = dict(base.out_edges)
        self.entities: dict[str, Entity] = dict(base.entities)
        self.entity_units: dict[str, frozenset[str]] = dict(base.entity_units)
        self.sequences: dict[str, int] = dict(base.sequences)
        self._lexical: InvertedIndex | None = None
        self._vectors: VectorIndex | None = None

    # Lazily copied indexes keep read-only transactions cheap.
    @property
    def lexical(self) -> InvertedIndex:
        if self._lexical is None:
            self._lexical = self.base.lexical.copy()
        return self._lexical

    @property
    def vectors(self) -> VectorIndex:
        if self._vectors is None:
            self._vectors = self.base.vectors.copy()
        return self._vectors

    def fault(self, stage: str) -> None:
        if self._fault is not None:
            self._fault(stage)

    def next_id(self, kind: str) -> str:
        self.sequences[kind] = self.sequences.get(kind, 0) + 1
        prefix = {"unit": "u", "entity": "e"}.get(kind, kind)
        return f"{prefix}-{self.sequences[kind]:06d}"

    def put_units(self, units: Sequence[MemoryUnit]) -> list[str]:
        """Insert or replace units, keeping both indexes in step."""
        problems: list[str] = []
        for unit in units:
            problems.extend(f"{unit.id}: {p}" for p in validate_unit(unit, self.config))
            if unit.bank_id != self.bank_id:
                problems.append(f"{unit.id}: bank_id {unit.bank_id!r} != {self.bank_id!r}")
        if problems:
            raise RejectedFactError("unit validation failed", problems)
        for unit in units:
            old = self.units.get(unit.id)
            self.units[unit.id] = unit
            if old is not None:
                for ent in old.entities:
                    self._unlink_entity(ent, unit.id)
            for ent in unit.entities:
                self.entity_units[ent] = self.entity_units.get(ent, frozenset()) | {unit.id}
        self.fault("units")
        for unit in units:
            self.lexical.add(unit.id, unit.text)
        self.fault("lexical")
        for unit in units:
            self.vectors.add(unit.id, unit.embedding)
        self.fault("vectors")
        return [u.id for u in units]

    def _unlink_entity(self, entity_id: str, unit_id: str) -> None:
        members = self.entity_units.get(entity_id, frozenset()) - {unit_id}
        if members:
            self.entity_units[entity_id] = members
        else:
            self.entity_units.pop(entity_id, None)

    def remove_unit(self, unit_id: str) -> None:
        """Delete a unit together with every edge touching it."""
        unit = self.units.pop(unit_id, None)
        if unit is None:
            return
        for ent in unit.entities:
            self._unlink_entity(ent, unit_id)
        self.lexical.remove(unit_id)
        self.vectors.remove(unit_id)
        doomed = [k for k in self.edges if k[0] == unit_id or k[1] == unit_id]
        for key in doomed:
            self._drop_edge(key)
        self.out_edges.pop(unit_id, None)

    def put_edge(self, edge: Edge) -> bool:
        """Add ``edge`` unless one with the same (source, target, kind) exists.

        Returns True when a new edge was stored.
        """
        if edge.source not in self.units or edge.target not in self.units:
            raise RejectedFactError("edge endpoint missing", [f"{edge.source}->{edge.target}"])
        if edge.key in self.edges:
            return False
        self.edges[edge.key] = edge
        self.out_edges[edge.source] = self.out_edges.get(edge.source, ()) + (edge,)
        return True

    def drop_edges(self, unit_id: str, kind: LinkKind) -> list[Edge]:
        """Remove every ``kind`` edge touching ``unit_id``; returns what was removed."""
        doomed = [k for k in self.edges if k[2] is kind and unit_id in (k[0], k[1])]
        removed = [self.edges[k] for k in doomed]
        for key in doomed:
            self._drop_edge(key)
        return removed

    def _drop_edge(self, key: EdgeKey) -> None:
        edge = self.edges.pop(key)
        remaining = tuple(e for e in self.out_edges.get(edge.source, ()) if e.key != key)
        if remaining:
            self.out_edges[edge.source] = remaining
        else:
            self.out_edges.pop(edge.source, None)

    def put_entity(self, entity: Entity) -> None:
        self.entities[entity.id] = entity

    def set_profile(self, profile: BankProfile) -> None:
        self.profile = profile

    def freeze(self, version: int) -> BankState:
        return BankState(
            bank_id=self.bank_id,
            profile=self.profile,
            units=MappingProxyType(dict(self.units)),
            edges=MappingProxyType(dict(self.edges)),
            out_edges=MappingProxyType(dict(self.out_edges)),
            entities=MappingProxyType(dict(self.entities)),
            entity_units=MappingProxyType(dict(self.entity_units)),
            lexical=self._lexical if self._lexical is not None else self.base.lexical,
            vectors=self._vectors if self._vectors is not None else self.base.vectors,
            sequences=dict(self.sequences),
            version=version,
        )


# --------------------------------------------------------------------------
# Bank
# --------------------------------------------------------------------------


class MemoryBank:
    """A named bank with single-writer, many-reader semantics.

    Args:
        bank_id: bank name.
        config: engine configuration (embedding dimension, etc.).
        profile: initial profile; defaults to a neutral one named after the bank.
        path: optional snapshot file; when set every commit is persisted
            before it becomes visible.
    """

    def __init__(
        self,
        bank_id: str,
        config: EngineConfig | None = None,
        profile: BankProfile | None = None,
        path: str | os.PathLike[str] | None = None,
        *,
        state: BankState | None = None,
    ) -> None:
        self.bank_id = bank_id
        self.config = config or EngineConfig()
        self.path = Path(path) if path is not None else None
        self._state = state or BankState.empty(bank_id, self.config.embedding_dim, profile)
        self._write_lock = threading.RLock()
        self.fault_hook: FaultHook | None = None
        self._executor: ThreadPoolExecutor | None = None
        self._pending: set[Future[Any]] = set()
        self._pending_lock = threading.Lock()

    def snapshot(self) -> BankState:
        """The latest published state. Never blocks on writers."""
        return self._state

    @contextmanager
    def transaction(self) -> Iterator[Transaction]:
        """Exclusive write scope. Commits on normal exit, discards on error."""
        with self._write_lock:
            txn = Transaction(self._state, self.config, self.fault_hook)
            yield txn
            txn.fault("commit")
            new_state = txn.freeze(self._state.version + 1)
            if self.path is not None:
                save_snapshot(new_state, self.path)
            self._state = new_state

    @contextmanager
    def write_lock(self) -> Iterator[None]:
        with self._write_lock:
            yield

    def upsert_units(self, units: Sequence[MemoryUnit]) -> list[str]:
        with self.transaction() as txn:
            return txn.put_units(units)

    # Background work ----------------------------------------------------

    def submit_background(self, fn: Callable[[], Any]) -> Future[Any]:
        with self._pending_lock:
            if self._executor is None:
                self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"membank-{self.bank_id}")
            future = self._executor.submit(fn)
            self._pending.add(future)
        future.add_done_callback(self._discard)
        return future

    def _discard(self, future: Future[Any]) -> None:
        with self._pending_lock:
            self._pending.discard(future)
        exc = future.exception()
        if exc is not None:
            log.warning("background task failed in bank %s: %s", self.bank_id, exc)

    def wait_background(self, timeout: float | None = None) -> None:
        """Block until every scheduled background task, including retries, finishes."""
        while True:
            with self._pending_lock:
                pending = list(self._pending)
            if not pending:
                return
            for fut in pending:
                try:
                    fut.result(timeout=timeout)
                except Exception:  # already logged by _discard
                    pass

    def close(self) -> None:
        self.wait_background()
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    # Persistence --------------------------------------------------------

    def save(self, path: str | os.PathLike[str] | None = None) -> Path:
        target = Path(path) if path is not None else self.path
        if target is None:
            raise StorageError("bank has no snapshot path")
        save_snapshot(self.snapshot(), target)
        return target

    @classmethod
    def load(cls, path: str | os.PathLike[str], config: EngineConfig | None = None, *, attach: bool = True) -> MemoryBank:
        state = load_snapshot(path)
        cfg = config or EngineConfig()
        if state.vectors.dim != cfg.embedding_dim:
            cfg = cfg.with_overrides(embedding_dim=state.vectors.dim)
        return cls(state.bank_id, cfg, path=path if attach else None, state=state)


# --------------------------------------------------------------------------
# Snapshots
# --------------------------------------------------------------------------


def _snapshot_lines(state: BankState) -> list[str]:
    header = {
        "format": SNAPSHOT_MAGIC,
        "format_version": FORMAT_VERSION,
        "bank_id": state.bank_id,
        "embedding_dim": state.vectors.dim,
        "counts": {
            "units": len(state.units),
            "edges": len(state.edges),
            "entities": len(state.entities),
        },
        "checksums": {
            "lexical": state.lexical.checksum(),
            "vector": state.vectors.checksum(),
        },
        "sequences": dict(state.sequences),
    }
    lines = [header, {"type": "profile", **state.profile.to_record()}]
    lines += [{"type": "unit", **state.units[k].to_record()} for k in sorted(state.units)]
    lines += [{"type": "edge", **state.edges[k].to_record()} for k in sorted(state.edges, key=lambda k: (k[0], k[1], k[2].value))]
    lines += [{"type": "entity", **state.entities[k].to_record()} for k in sorted(state.entities)]
    return [json.dumps(rec, sort_keys=True, ensure_ascii=False) for rec in lines]


def dump_snapshot(state: BankState) -> str:
    return "\n".join(_snapshot_lines(state)) + "\n"


def save_snapshot(state: BankState, path: str | os.PathLike[str]) -> None:
    """Write ``state`` atomically: temp file in the same directory, fsync, rename."""
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(dump_snapshot(state))
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise StorageError(f"cannot write snapshot {target}: {exc}") from exc


def parse_snapshot(text: str) -> BankState:
    """Rebuild a :class:`BankState` from snapshot text, verifying counts and checksums."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise SnapshotError("snapshot is empty")
    try:
        records = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"corrupt snapshot line: {exc}") from exc
    header = records[0]
    if not isinstance(header, dict) or header.get("format") != SNAPSHOT_MAGIC:
        raise SnapshotError("missing snapshot header")
    if header.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported snapshot format_version {header.get('format_version')!r} (expected {FORMAT_VERSION})"
        )
    bank_id = str(header["bank_id"])
    dim = int(header["embedding_dim"])
    profile = BankProfile(name=bank_id)
    units: list[MemoryUnit] = []
    edges: list[Edge] = []
    entities: list[Entity] = []
    try:
        for rec in records[1:]:
            kind = rec.pop("type", None)
            if kind == "profile":
                profile = BankProfile.from_record(rec)
            elif kind == "unit":
                units.append(MemoryUnit.from_record(rec))
            elif kind == "edge":
                edges.append(Edge.from_record(rec))
            elif kind == "entity":
                entities.append(Entity.from_record(rec))
            else:
                raise SnapshotError(f"unknown record type {kind!r}")
    except (KeyError, ValueError, TypeError) as exc:
        raise SnapshotError(f"malformed snapshot record: {exc}") from exc
    counts = header.get("counts", {})
    actual = {"units": len(units), "edges": len(edges), "entities": len(entities)}
    if counts != actual:
        raise SnapshotError(f"snapshot truncated or inconsistent: header {counts}, found {actual}")

    cfg = EngineConfig(embedding_dim=dim)
    txn = Transaction(BankState.empty(bank_id, dim, profile), cfg)
    try:
        txn.put_units(units)
        for edge in edges:
            txn.put_edge(edge)
    except RejectedFactError as exc:
        raise SnapshotError(f"snapshot holds invalid records: {exc.violations[:5]}") from exc
    for ent in entities:
        txn.put_entity(ent)
    txn.sequences = {k: int(v) for k, v in header.get("sequences", {}).items()}
    state = txn.freeze(version=0)
    sums = header.get("checksums", {})
    if sums.get("lexical") != state.lexical.checksum() or sums.get("vector") != state.vectors.checksum():
        raise SnapshotError("index checksum mismatch")
    return state


def load_snapshot(path: str | os.PathLike[str]) -> BankState:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read snapshot {path}: {exc}") from exc
    return parse_snapshot(text)
