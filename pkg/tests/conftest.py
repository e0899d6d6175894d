from __future__ import annotations

import random
from datetime import datetime, timedelta
from typing import Any, Sequence

import pytest

from membank.model import UTC, Edge, EngineConfig, Entity, EntityKind, LinkKind, MemoryUnit, Network
from membank.providers import (
    MockAssessor,
    MockEmbedder,
    MockExtractor,
    MockReranker,
    MockSynthesizer,
    ProviderSuite,
    ScriptedExtractor,
    mock_embed,
)
from membank.store import MemoryBank

T0 = datetime(2024, 6, 1, 12, 0, 0, tzinfo=UTC)
SMALL_DIM = 64


def suite(
    *,
    extractor: Any = None,
    embedder: Any = None,
    reranker: Any = None,
    assessor: Any = None,
    synthesizer: Any = None,
    opinions: Sequence[dict[str, Any]] = (),
    dim: int = SMALL_DIM,
    retries: int = 0,
    timeout: float | None = None,
) -> ProviderSuite:
    return ProviderSuite(
        extractor=extractor or MockExtractor(),
        embedder=embedder or MockEmbedder(dim),
        reranker=reranker or MockReranker(),
        assessor=assessor or MockAssessor(),
        synthesizer=synthesizer or MockSynthesizer(opinions),
        retries=retries,
        timeout=timeout,
    )


def scripted(facts: Sequence[dict[str, Any]], **kw: Any) -> ProviderSuite:
    return suite(extractor=ScriptedExtractor(facts), **kw)


def config(**kw: Any) -> EngineConfig:
    base: dict[str, Any] = {"embedding_dim": SMALL_DIM, "observation_mode": "off"}
    base.update(kw)
    return EngineConfig(**base)


def fact(what: str, when: datetime = T0, *, kind: str = "world", entities: Sequence[str] = (), **kw: Any) -> dict[str, Any]:
    rec: dict[str, Any] = {
        "what": what,
        "fact_type": kind,
        "occurred_start": when,
        "occurred_end": kw.pop("end", when),
        "mentioned_at": kw.pop("mentioned", when),
        "entities": [{"text": e, "kind": kw.pop("entity_kind", "OTHER")} for e in entities],
    }
    rec.update(kw)
    return rec


def turns(*texts: str, start: datetime = T0, speaker: str = "user") -> list[dict[str, Any]]:
    return [
        {"speaker": speaker, "text": t, "timestamp": (start + timedelta(minutes=i)).isoformat()}
        for i, t in enumerate(texts)
    ]


def unit(
    uid: str,
    text: str,
    *,
    bank_id: str = "b",
    dim: int = SMALL_DIM,
    start: datetime = T0,
    end: datetime | None = None,
    mentioned: datetime | None = None,
    network: Network = Network.WORLD,
    confidence: float | None = None,
    entities: Sequence[str] = (),
    embedding: Sequence[float] | None = None,
) -> MemoryUnit:
    return MemoryUnit(
        id=uid,
        bank_id=bank_id,
        text=text,
        embedding=tuple(embedding) if embedding is not None else tuple(mock_embed(text, dim)),
        occurred_start=start,
        occurred_end=end or start,
        mentioned_at=mentioned or end or start,
        network=network,
        confidence=confidence,
        metadata={"entities": list(entities)},
    )


VOCAB = (
    "alice bob carol dave paris tokyo berlin hiking piano chess coffee tea report launch budget "
    "meeting garden river bridge museum concert soccer python rust market storm winter summer"
).split()


def random_bank(
    rng: random.Random,
    n_units: int,
    *,
    dim: int = SMALL_DIM,
    edge_prob: float | None = None,
    bank_id: str = "b",
) -> MemoryBank:
    """A bank of random short texts, random intervals and random sparse edges."""
    cfg = config(embedding_dim=dim)
    bank = MemoryBank(bank_id, cfg)
    ents = [f"e-{i:06d}" for i in range(1, 6)]
    units = []
    for i in range(n_units):
        words = rng.choices(VOCAB, k=rng.randint(2, 9))
        start = T0 + timedelta(hours=rng.randint(0, 24 * 120))
        end = start + timedelta(hours=rng.choice([0, 0, 1, 30, 24 * 5]))
        mentioned = end + timedelta(minutes=rng.randint(0, 3)) if rng.random() < 0.8 else end
        network = rng.choice(list(Network))
        units.append(
            unit(
                f"u-{i + 1:06d}",
                " ".join(words),
                bank_id=bank_id,
                dim=dim,
                start=start,
                end=end,
                mentioned=mentioned,
                network=network,
                confidence=round(rng.random(), 3) if network is Network.OPINION else None,
                entities=rng.sample(ents, rng.randint(0, 2)),
            )
        )
    p = edge_prob if edge_prob is not None else min(1.0, 3.0 / max(n_units, 1))
    with bank.transaction() as txn:
        for e in ents:
            txn.put_entity(Entity(e, e.upper(), EntityKind.OTHER, 1, T0))
        txn.put_units(units)
        for a in units:
            for b in units:
                if a.id != b.id and rng.random() < p:
                    kind = rng.choice(list(LinkKind))
                    txn.put_edge(
                        Edge(
                            a.id,
                            b.id,
                            round(rng.random(), 4),
                            kind,
                            causal_subtype="causes" if kind is LinkKind.CAUSAL else None,
                            entity_id=ents[0] if kind is LinkKind.ENTITY else None,
                        )
                    )
    return bank


@pytest.fixture
def cfg() -> EngineConfig:
    return config()


@pytest.fixture
def bank(cfg: EngineConfig):
    b = MemoryBank("b", cfg)
    yield b
    b.close()
