from __future__ import annotations

import random
import threading
from dataclasses import replace

import pytest

from conftest import SMALL_DIM, config, random_bank, unit
from membank.errors import RejectedFactError, SnapshotError, StorageError, UnsupportedVersionError
from membank.model import Edge, LinkKind, Network
from membank.store import (
    BankState,
    MemoryBank,
    check_coherence,
    dump_snapshot,
    load_snapshot,
    parse_snapshot,
    save_snapshot,
)


class Crash(Exception):
    pass


def test_insert_then_get_returns_identical_record(bank):
    u = unit("u-1", "Alice moved to Paris", entities=["e-1"])
    assert bank.upsert_units([u]) == ["u-1"]
    state = bank.snapshot()
    assert state.units["u-1"] == u
    assert state.entity_units["e-1"] == {"u-1"}
    assert check_coherence(state) == []


def test_duplicate_upsert_replaces_record_and_indexes(bank):
    bank.upsert_units([unit("u-1", "alpha words", entities=["e-1"])])
    bank.upsert_units([unit("u-1", "beta words", entities=["e-2"])])
    state = bank.snapshot()
    assert state.units["u-1"].text == "beta words"
    assert "alpha" not in state.lexical.postings
    assert state.lexical.postings["beta"] == {"u-1": 1}
    assert "e-1" not in state.entity_units
    assert check_coherence(state) == []


def test_invalid_unit_is_rejected_and_nothing_stored(bank):
    good = unit("u-1", "fine")
    bad = replace(unit("u-2", "bad"), confidence=0.4)
    with pytest.raises(RejectedFactError) as err:
        bank.upsert_units([good, bad])
    assert any("confidence on non-opinion" in v for v in err.value.violations)
    assert bank.snapshot().units == {}


def test_wrong_bank_id_is_rejected(bank):
    with pytest.raises(RejectedFactError):
        bank.upsert_units([unit("u-1", "x", bank_id="other")])


@pytest.mark.parametrize("stage", ["units", "lexical", "vectors", "commit"])
def test_crash_between_index_updates_leaves_bank_consistent(bank, stage):
    bank.upsert_units([unit("u-0", "existing unit")])
    before = dump_snapshot(bank.snapshot())

    def hook(s: str) -> None:
        if s == stage:
            raise Crash(s)

    bank.fault_hook = hook
    with pytest.raises(Crash):
        bank.upsert_units([unit("u-1", "first new"), unit("u-2", "second new")])
    bank.fault_hook = None
    assert dump_snapshot(bank.snapshot()) == before
    assert check_coherence(bank.snapshot()) == []
    bank.upsert_units([unit("u-1", "first new")])
    assert check_coherence(bank.snapshot()) == []


def test_removing_unit_drops_incident_edges(bank):
    bank.upsert_units([unit("a", "a"), unit("b", "b"), unit("c", "c")])
    with bank.transaction() as txn:
        txn.put_edge(Edge("a", "b", 1.0, LinkKind.TEMPORAL))
        txn.put_edge(Edge("b", "c", 1.0, LinkKind.TEMPORAL))
        txn.put_edge(Edge("c", "a", 0.5, LinkKind.SEMANTIC))
    with bank.transaction() as txn:
        txn.remove_unit("b")
    state = bank.snapshot()
    assert list(state.edges) == [("c", "a", LinkKind.SEMANTIC)]
    assert "b" not in state.out_edges
    assert check_coherence(state) == []


def test_edge_endpoints_must_exist_and_duplicates_are_ignored(bank):
    bank.upsert_units([unit("a", "a"), unit("b", "b")])
    with bank.transaction() as txn:
        with pytest.raises(RejectedFactError):
            txn.put_edge(Edge("a", "zzz", 1.0, LinkKind.TEMPORAL))
        assert txn.put_edge(Edge("a", "b", 1.0, LinkKind.TEMPORAL))
        assert not txn.put_edge(Edge("a", "b", 0.3, LinkKind.TEMPORAL))
        assert txn.put_edge(Edge("a", "b", 0.3, LinkKind.SEMANTIC))


def test_snapshot_isolation_reader_never_sees_uncommitted_writes(bank):
    bank.upsert_units([unit("u-0", "base")])
    entered, release = threading.Event(), threading.Event()

    def writer() -> None:
        with bank.transaction() as txn:
            txn.put_units([unit("u-1", "new")])
            entered.set()
            release.wait(5)

    t = threading.Thread(target=writer)
    t.start()
    entered.wait(5)
    view = bank.snapshot()
    assert set(view.units) == {"u-0"}
    release.set()
    t.join()
    assert set(view.units) == {"u-0"}
    assert set(bank.snapshot().units) == {"u-0", "u-1"}


def test_published_state_is_read_only(bank):
    bank.upsert_units([unit("u-0", "base")])
    with pytest.raises(TypeError):
        bank.snapshot().units["x"] = None  # type: ignore[index]


def test_empty_bank_round_trip(tmp_path):
    state = BankState.empty("b", SMALL_DIM)
    save_snapshot(state, tmp_path / "b.jsonl")
    loaded = load_snapshot(tmp_path / "b.jsonl")
    assert dump_snapshot(loaded) == dump_snapshot(state)


def test_random_bank_round_trip_is_exact(tmp_path):
    bank = random_bank(random.Random(7), 100)
    path = tmp_path / "b.jsonl"
    bank.save(path)
    loaded = MemoryBank.load(path, config())
    assert dump_snapshot(loaded.snapshot()) == dump_snapshot(bank.snapshot())
    assert check_coherence(loaded.snapshot()) == []


def test_snapshot_header_line_carries_format_version():
    text = dump_snapshot(BankState.empty("b", SMALL_DIM))
    assert '"format_version": 1' in text.splitlines()[0]


def test_truncated_snapshot_fails_to_load(tmp_path):
    bank = random_bank(random.Random(3), 20)
    lines = dump_snapshot(bank.snapshot()).splitlines()
    with pytest.raises(SnapshotError):
        parse_snapshot("\n".join(lines[:-3]))
    with pytest.raises(SnapshotError):
        parse_snapshot("\n".join(lines)[:-40])
    with pytest.raises(SnapshotError):
        parse_snapshot("")


def test_version_mismatch_is_explicit():
    text = dump_snapshot(BankState.empty("b", SMALL_DIM)).replace('"format_version": 1', '"format_version": 99')
    with pytest.raises(UnsupportedVersionError):
        parse_snapshot(text)


def test_tampered_text_fails_checksum():
    bank = MemoryBank("b", config())
    bank.upsert_units([unit("u-1", "alpha beta")])
    text = dump_snapshot(bank.snapshot())
    tampered = text.replace('"text": "alpha beta"', '"text": "alpha gamma"')
    assert tampered != text
    with pytest.raises(SnapshotError):
        parse_snapshot(tampered)


def test_unreadable_snapshot_path(tmp_path):
    with pytest.raises(StorageError):
        load_snapshot(tmp_path / "missing.jsonl")


def test_file_backed_bank_persists_each_commit(tmp_path):
    path = tmp_path / "b.jsonl"
    bank = MemoryBank("b", config(), path=path)
    bank.upsert_units([unit("u-1", "persisted", network=Network.EXPERIENCE)])
    assert set(load_snapshot(path).units) == {"u-1"}


def test_counts_partition_networks():
    bank = random_bank(random.Random(11), 60)
    state = bank.snapshot()
    counts = state.counts()
    assert sum(counts["networks"].values()) == counts["units"]
    ids = [set(u.id for u in state.network(n)) for n in Network]
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            assert not ids[i] & ids[j]
    assert set().union(*ids) == set(state.units)
