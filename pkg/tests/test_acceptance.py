"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal."""

from __future__ import annotations

import random
import time
from datetime import timedelta

import pytest

import oracles
from conftest import T0, config, random_bank, suite, turns
from membank.model import ALL_CHANNELS
from membank.opinions import apply_confidence_update
from membank.providers import mock_embed
from membank.recall import (
    Hit,
    RankedList,
    graph_search,
    keyword_search,
    pack_budget,
    recall,
    rrf_fuse,
    semantic_search,
    temporal_search,
)
from membank.reflect import reflect
from membank.retain import retain
from membank.store import MemoryBank, dump_snapshot
from scenarios import build_multihop, build_temporal_corpus


@pytest.fixture
def report(capsys):
    def emit(name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} [{name}] {detail}")
        assert ok, detail

    return emit


def _pairs(lst: RankedList) -> list[tuple[str, float]]:
    return [(h.unit_id, h.score) for h in lst.entries]


def test_channel_oracles(report):
    rng = random.Random(2024)
    started = time.perf_counter()
    failures: list[str] = []
    for b in range(50):
        cfg = config(max_hops=rng.randint(1, 3))
        state = random_bank(rng, rng.randint(1, 200)).snapshot()
        units = state.units
        words = rng.sample(oracles.words(" ".join(u.text for u in units.values())) + ["zebra"], 3)
        query = " ".join(words)
        pool = cfg.channel_pool_size

        qvec = mock_embed(query, cfg.embedding_dim)
        sem = semantic_search(qvec, state, pool)
        if not oracles.ranking_matches(_pairs(sem), oracles.semantic_scores(qvec, units), pool, 1e-6):
            failures.append(f"bank {b}: semantic")

        kw = keyword_search(query, state, pool, cfg)
        if _pairs(kw) != oracles.ranked(oracles.bm25_scores(query, units), units, pool):
            failures.append(f"bank {b}: keyword")

        start = T0 + timedelta(hours=rng.randint(0, 24 * 120))
        end = start + timedelta(hours=rng.choice([0, 5, 48, 24 * 30]))
        temp = temporal_search((start, end), state, pool)
        if _pairs(temp) != oracles.ranked(oracles.temporal_scores(start, end, units), units, pool):
            failures.append(f"bank {b}: temporal")

        seeds = {h.unit_id: h.score for h in sem.entries[: cfg.graph_entry_points]}
        edges = [(e.source, e.target, e.weight, e.kind) for e in state.edges.values()]
        walk = oracles.activation_by_walks(seeds, edges, cfg.activation_decay, cfg.link_multipliers, cfg.max_hops)
        if _pairs(graph_search(seeds, state, cfg, pool)) != oracles.ranked(walk, units, pool):
            failures.append(f"bank {b}: graph")
    elapsed = time.perf_counter() - started
    ok = not failures and elapsed < 60
    report("channel oracles", ok, f"50 banks, {len(failures)} mismatches {failures[:5]}, {elapsed:.1f}s (limit 60s)")


def test_rrf_formula_and_dominance(report):
    rng = random.Random(7)
    worst, dominance_violations = 0.0, 0
    for _ in range(1000):
        universe = [f"u{i}" for i in range(rng.randint(1, 40))]
        lists = []
        for _ in range(rng.randint(2, 4)):
            ids = rng.sample(universe, rng.randint(0, len(universe)))
            lists.append(ids)
        k = rng.randint(1, 120)
        fused = dict(_pairs(rrf_fuse([RankedList(ch, tuple(Hit(u, 0.0) for u in ids)) for ch, ids in zip(ALL_CHANNELS, lists)], k)))
        want = oracles.rrf(lists, k)
        if fused.keys() != want.keys():
            worst = float("inf")
            continue
        worst = max([worst] + [abs(fused[u] - want[u]) for u in want])
        pos = [{u: i for i, u in enumerate(ids)} for ids in lists]
        for f in fused:
            for g in fused:
                if all(f in p for p in pos if g in p) and all(p[f] <= p[g] for p in pos if f in p and g in p):
                    dominance_violations += fused[f] < fused[g]
    ok = worst <= 1e-12 and dominance_violations == 0
    report("rrf", ok, f"1000 configurations, max abs error {worst:.2e} (tol 1e-12), {dominance_violations} dominance violations")


def test_budget_safety_fuzz(report):
    rng = random.Random(11)
    bad = 0
    for _ in range(10_000):
        costs = [rng.choice([0, 1, rng.randint(1, 80)]) for _ in range(rng.randint(0, 30))]
        texts = ["x" * (4 * c - rng.randint(0, 3)) if c else "" for c in costs]
        budget = rng.randint(0, 600)
        count, total = pack_budget(texts, budget)
        if total > budget or count != oracles.max_prefix(costs, budget) or total != sum(costs[:count]):
            bad += 1
    report("budget safety", bad == 0, f"10000 (ranking, budget) pairs, {bad} violations")


def test_opinion_dynamics(report):
    rng = random.Random(13)
    out_of_range = 0
    for _ in range(10_000):
        c, alpha = rng.random(), rng.uniform(0.001, 0.999)
        for _ in range(rng.randint(1, 25)):
            c = apply_confidence_update(c, rng.choice(["reinforce", "weaken", "contradict", "neutral"]), alpha)
            out_of_range += not 0.0 <= c <= 1.0
    c, path = 0.70, []
    for label in ["reinforce", "reinforce", "contradict"]:
        c = apply_confidence_update(c, label, 0.1)
        path.append(c)
    ok = out_of_range == 0 and path == [0.80, 0.90, 0.70]
    report("opinion dynamics", ok, f"10000 sequences, {out_of_range} out of [0,1]; trajectory {path} (expected [0.8, 0.9, 0.7])")


def test_multihop_graph_only_fact(report):
    surfaced, leaked, suppressed = 0, 0, 0
    for seed in range(100):
        s = build_multihop(seed)
        res = recall(s.bank, s.query, 10**6, s.providers, s.config)
        leaked += s.hidden_id in res.channels["semantic"].ids or s.hidden_id in res.channels["keyword"].ids
        surfaced += s.hidden_id in res.ids
        off = build_multihop(seed, channels=("semantic", "keyword", "temporal"))
        suppressed += off.hidden_id not in recall(off.bank, off.query, 10**6, off.providers, off.config).ids
    ok = surfaced == 100 and suppressed == 100 and leaked == 0
    report(
        "multi-hop",
        ok,
        f"surfaced {surfaced}/100 with graph, absent {suppressed}/100 without, reached by text channels {leaked}/100",
    )


def test_temporal_end_to_end(report):
    corpus = build_temporal_corpus(0)
    hits = 0
    for query, now, expected in corpus.probes:
        res = recall(corpus.bank, query, 200, corpus.providers, corpus.config, now=now)
        hits += expected in res.ids
    report("temporal end-to-end", hits >= 24, f"{hits}/{len(corpus.probes)} probes contain the ground-truth fact (need 24)")


class _Injected(Exception):
    pass


def test_atomicity_and_snapshot_round_trip(report, tmp_path):
    cfg = config(observation_mode="inline")
    prov = suite()
    bank = MemoryBank("atomic", cfg)
    rng = random.Random(17)
    people = ["Alice", "Bob", "Carol", "Dmitri"]
    unchanged, attempts = 0, 0
    for session in range(6):
        texts = [f"{rng.choice(people)} discussed the {rng.choice(oracles_vocab())} with {rng.choice(people)}." for _ in range(4)]
        sess = turns(*texts, start=T0 + timedelta(days=3 * session))
        for stage in ("units", "lexical", "vectors", "commit"):
            before = dump_snapshot(bank.snapshot())

            def hook(s, stage=stage):
                if s == stage:
                    raise _Injected(stage)

            bank.fault_hook = hook
            try:
                retain(bank, sess, prov, cfg, biographical=True, now=T0)
            except _Injected:
                pass
            bank.fault_hook = None
            attempts += 1
            unchanged += dump_snapshot(bank.snapshot()) == before
        retain(bank, sess, prov, cfg, now=T0)

    path = tmp_path / "atomic.jsonl"
    bank.save(path)
    loaded = MemoryBank.load(path, cfg, attach=False)
    probes = ["Alice discussed", "what happened on June 4, 2024?", "Bob and Carol", "budget river", "Dmitri in June 2024"]
    same = sum(
        recall(bank, q, 300, prov, cfg, now=T0).to_dict(explain=True)
        == recall(loaded, q, 300, prov, cfg, now=T0).to_dict(explain=True)
        for q in probes
    )
    identical_dump = dump_snapshot(loaded.snapshot()) == dump_snapshot(bank.snapshot())
    ok = unchanged == attempts and same == len(probes) and identical_dump
    report(
        "atomicity and round-trip",
        ok,
        f"{unchanged}/{attempts} faulted retains left the bank identical; {same}/{len(probes)} probes identical after save/load",
    )


def oracles_vocab() -> list[str]:
    return ["report", "garden", "launch", "river", "budget", "concert"]


def _pipeline_run() -> list[dict]:
    cfg = config(observation_mode="inline")
    prov = suite(opinions=[{"opinion": "I think Alice is a dependable teammate", "confidence": 0.7, "reasoning": "steady work"}])
    bank = MemoryBank("det", cfg)
    out = []
    sessions = [
        ["Alice shipped the report on Monday.", "Great work.", "Bob reviewed it in Paris."],
        ["Alice and Bob planned the launch.", "Sounds busy.", "Carol joined from Tokyo."],
        ["I think Alice is a dependable teammate.", "Noted.", "Bob missed the launch review."],
    ]
    for i, texts in enumerate(sessions):
        receipt = retain(bank, turns(*texts, start=T0 + timedelta(days=5 * i)), prov, cfg, biographical=i == 0, now=T0)
        out.append(receipt.to_dict())
    out.append(recall(bank, "What did Alice do in June 2024?", 250, prov, cfg, now=T0 + timedelta(days=20)).to_dict(explain=True))
    out.append(reflect(bank, "Is Alice dependable?", prov, cfg, now=T0 + timedelta(days=21)).to_dict())
    out.append({"dump": dump_snapshot(bank.snapshot())})
    return out


def test_determinism(report):
    runs = [_pipeline_run() for _ in range(3)]
    ok = runs[0] == runs[1] == runs[2]
    report("determinism", ok, f"3 runs of retain x3, recall and reflect: {'identical' if ok else 'differ'}")
