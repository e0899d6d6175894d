"""Entity resolution and edge construction over a write transaction.

Both retain and reflect use these helpers: retain for new facts and
observations, reflect for newly formed opinions.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable, Sequence

from .errors import ConfigError, RejectedFactError
from .model import (
    CausalKind,
    Edge,
    EngineConfig,
    Entity,
    EntityKind,
    LinkKind,
    to_ts,
)
from .store import Transaction
from .text import string_similarity


@dataclass(frozen=True)
class Mention:
    """An entity mention awaiting resolution."""

    text: str
    kind: EntityKind
    co_mentions: frozenset[str]
    timestamp: datetime


@dataclass(frozen=True)
class Resolution:
    mention: str
    entity_id: str
    created: bool
    score: float | None


def entity_co_mentions(txn: Transaction, entity_id: str) -> set[str]:
    """Case-folded names of entities that share a stored unit with ``entity_id``."""
    names: set[str] = set()
    for uid in txn.entity_units.get(entity_id, ()):
        for other in txn.units[uid].entities:
            if other != entity_id and other in txn.entities:
                names.add(txn.entities[other].canonical_name.casefold())
    return names


def co_mention_similarity(a: Iterable[str], b: Iterable[str]) -> float:
    sa = {x.casefold() for x in a}
    sb = {x.casefold() for x in b}
    union = sa | sb
    return len(sa & sb) / len(union) if union else 0.0


def resolution_score(mention: Mention, entity: Entity, co_names: Iterable[str], config: EngineConfig) -> float:
    w_str, w_co, w_temp = config.entity_weights
    dt = abs(to_ts(mention.timestamp) - to_ts(entity.last_mentioned))
    return (
        w_str * string_similarity(mention.text, entity.canonical_name)
        + w_co * co_mention_similarity(mention.co_mentions, co_names)
        + w_temp * math.exp(-dt / config.sigma_t)
    )


def resolve_entity(mention: Mention, txn: Transaction, config: EngineConfig) -> Resolution:
    """Map a mention to a canonical entity, creating one when nothing scores high enough.

    Candidates are existing entities of the same kind. The best-scoring
    candidate (ties to the lowest id) wins when its score reaches
    ``config.entity_threshold``; its mention count and last-mention time are
    updated in ``txn``.
    """
    best: tuple[float, str] | None = None
    for ent in txn.entities.values():
        if ent.kind is not mention.kind:
            continue
        score = resolution_score(mention, ent, entity_co_mentions(txn, ent.id), config)
        if best is None or score > best[0] or (score == best[0] and ent.id < best[1]):
            best = (score, ent.id)
    if best is not None and best[0] >= config.entity_threshold:
        ent = txn.entities[best[1]]
        txn.put_entity(
            Entity(
                id=ent.id,
                canonical_name=ent.canonical_name,
                kind=ent.kind,
                mention_count=ent.mention_count + 1,
                last_mentioned=max(ent.last_mentioned, mention.timestamp),
            )
        )
        return Resolution(mention.text, ent.id, False, best[0])
    new_id = txn.next_id("entity")
    txn.put_entity(
        Entity(
            id=new_id,
            canonical_name=mention.text.strip(),
            kind=mention.kind,
            mention_count=1,
            last_mentioned=mention.timestamp,
        )
    )
    return Resolution(mention.text, new_id, True, best[0] if best else None)


def resolve_mentions(
    mentions: Sequence[tuple[str, EntityKind]], when: datetime, txn: Transaction, config: EngineConfig
) -> list[Resolution]:
    """Resolve every mention of one fact; co-mentions are the fact's other mentions."""
    texts = [t for t, _ in mentions]
    out: list[Resolution] = []
    for i, (text, kind) in enumerate(mentions):
        co = frozenset(t for j, t in enumerate(texts) if j != i)
        out.append(resolve_entity(Mention(text, kind, co, when), txn, config))
    return out


def temporal_link_weight(t_i: float, t_j: float, sigma_t: float) -> float:
    """``exp(-|t_i - t_j| / sigma_t)``; both times in seconds.

    Raises:
        ConfigError: if ``sigma_t`` is not positive.
    """
    if not sigma_t > 0:
        raise ConfigError("sigma_t must be > 0", [f"sigma_t={sigma_t}"])
    return math.exp(-abs(t_i - t_j) / sigma_t)


CausalLink = tuple[int, int, CausalKind]


def build_links(
    new_ids: Sequence[str],
    txn: Transaction,
    config: EngineConfig,
    causal: Sequence[CausalLink] = (),
    kinds: Iterable[LinkKind] = tuple(LinkKind),
) -> list[Edge]:
    """Create every edge a batch of freshly stored units calls for.

    Entity, temporal and semantic edges are stored in both orientations;
    causal edges keep the extractor's direction. ``causal`` holds
    ``(source_index, target_index, subtype)`` triples indexing ``new_ids``.
    Existing (source, target, kind) keys are left alone.

    Returns:
        The edges actually added, in creation order.

    Raises:
        RejectedFactError: if a causal index falls outside the batch.
    """
    kinds = set(kinds)
    created: list[Edge] = []

    def add(edge: Edge) -> None:
        if txn.put_edge(edge):
            created.append(edge)

    def add_pair(a: str, b: str, weight: float, kind: LinkKind, entity_id: str | None = None) -> None:
        add(Edge(a, b, weight, kind, entity_id=entity_id))
        add(Edge(b, a, weight, kind, entity_id=entity_id))

    bad = [c for c in causal if not (0 <= c[0] < len(new_ids) and 0 <= c[1] < len(new_ids))]
    if bad:
        raise RejectedFactError("causal relation outside batch", [f"{s}->{t}" for s, t, _ in bad])

    for uid in new_ids:
        unit = txn.units[uid]
        if LinkKind.ENTITY in kinds:
            for ent in sorted(unit.entities):
                for other in sorted(txn.entity_units.get(ent, ())):
                    if other != uid:
                        add_pair(uid, other, 1.0, LinkKind.ENTITY, entity_id=ent)

        if LinkKind.TEMPORAL in kinds and unit.network in config.temporal_link_networks:
            window = config.temporal_window_sigmas * config.sigma_t
            mid = unit.midpoint
            for other in sorted(txn.units):
                cand = txn.units[other]
                if other == uid or cand.network not in config.temporal_link_networks:
                    continue
                if abs(cand.midpoint - mid) <= window:
                    add_pair(uid, other, temporal_link_weight(mid, cand.midpoint, config.sigma_t), LinkKind.TEMPORAL)

        if LinkKind.SEMANTIC in kinds:
            sims = txn.vectors.cosine_all(unit.embedding)
            ranked = sorted(((s, o) for o, s in sims.items() if o != uid), key=lambda p: (-p[0], p[1]))
            for sim, other in ranked[: config.channel_pool_size]:
                if sim < config.theta_s:
                    break
                add_pair(uid, other, min(sim, 1.0), LinkKind.SEMANTIC)

    if LinkKind.CAUSAL in kinds:
        for src, tgt, subtype in causal:
            if src != tgt:
                add(Edge(new_ids[src], new_ids[tgt], 1.0, LinkKind.CAUSAL, causal_subtype=CausalKind(subtype)))
    return created


def count_by_kind(edges: Iterable[Edge]) -> dict[str, int]:
    counts = Counter(e.kind.value for e in edges)
    return {k.value: counts.get(k.value, 0) for k in LinkKind}
