"""Retain: turn transcripts into stored facts, entities, edges and belief updates.

Pipeline order: extract, normalize time, embed, resolve entities, create
units, build links, reinforce opinions, schedule observation refresh, merge
background. All provider calls except assessment, opinion revision and the
background merge happen before the bank's write lock is taken. Everything
that changes the bank happens inside one transaction, so a failure at any
step leaves the bank exactly as it was.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from typing import Any, Mapping, Sequence

from .errors import (
    BackgroundRejectedError,
    PreconditionError,
    ProviderError,
    RejectedFactError,
    RetainFailedError,
    TemporalParseError,
)
from .graph import (
    Mention,
    build_links,
    count_by_kind,
    resolve_entity,
    resolve_mentions,
    temporal_link_weight,
)
from .model import (
    EngineConfig,
    MemoryUnit,
    Network,
    as_utc,
    format_when,
    utcnow,
)
from .opinions import OpinionUpdate, reinforce_opinions
from .providers import ExtractedFact, ProviderSuite, Turn
from .store import MemoryBank, Transaction
from .temporal import parse_temporal
from .text import is_first_person, normalize_first_person, string_similarity

log = logging.getLogger(__name__)

FACT_NETWORKS = (Network.WORLD, Network.EXPERIENCE)

__all__ = [
    "Mention",
    "RetainReceipt",
    "build_links",
    "merge_background",
    "normalize_first_person",
    "refresh_observations",
    "resolve_entity",
    "retain",
    "string_similarity",
    "temporal_link_weight",
]


@dataclass
class RetainReceipt:
    """Audit trail of one retain call; every count matches the store delta."""

    bank_id: str
    fact_ids: list[str] = field(default_factory=list)
    new_entities: list[str] = field(default_factory=list)
    merged_entities: list[tuple[str, str]] = field(default_factory=list)
    edges_created: dict[str, int] = field(default_factory=dict)
    edges_removed: dict[str, int] = field(default_factory=dict)
    opinions_updated: list[OpinionUpdate] = field(default_factory=list)
    background_changed: bool = False
    observations_scheduled: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    config: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["merged_entities"] = [list(p) for p in self.merged_entities]
        out["opinions_updated"] = [u.to_dict() for u in self.opinions_updated]
        return out


@dataclass(frozen=True)
class _Prepared:
    fact: ExtractedFact
    network: Network
    start: datetime
    end: datetime
    mentioned: datetime
    embedding: tuple[float, ...]


def _fact_times(fact: ExtractedFact, now: datetime, fallback: Any = None) -> tuple[datetime, datetime, datetime]:
    mentioned = as_utc(fact.mentioned_at) if fact.mentioned_at else now
    start = as_utc(fact.occurred_start) if fact.occurred_start else None
    end = as_utc(fact.occurred_end) if fact.occurred_end else None
    if start is None and end is None and fact.when.strip():
        try:
            parsed = parse_temporal(fact.when, mentioned, fallback)
        except TemporalParseError:
            parsed = None
        if parsed is not None:
            start, end = parsed
    start = start or end or mentioned
    end = end or start
    return start, end, mentioned


def _mentions(fact: ExtractedFact) -> list[tuple[str, Any]]:
    seen: dict[str, Any] = {}
    for m in fact.entities:
        text = m.text.strip()
        if text and text.casefold() not in {k.casefold() for k in seen}:
            seen[text] = m.kind
    return list(seen.items())


def retain(
    bank: MemoryBank,
    turns: Sequence[Turn | Mapping[str, Any]],
    providers: ProviderSuite,
    config: EngineConfig | None = None,
    *,
    biographical: bool = False,
    context: str = "",
    now: datetime | None = None,
) -> RetainReceipt:
    """Ingest a transcript into ``bank``.

    Args:
        bank: target bank.
        turns: transcript turns, in order.
        providers: provider suite.
        config: engine configuration; defaults to the bank's.
        biographical: also merge the transcript text into the bank's
            background.
        context: free-text context stored in each unit's metadata.
        now: ingestion time used for facts without their own timestamps.

    Returns:
        The receipt for the committed changes.

    Raises:
        PreconditionError: on empty input.
        RejectedFactError: when extracted facts or built units are invalid.
        RetainFailedError: when a provider keeps failing.
    """
    config = config or bank.config
    if not turns:
        raise PreconditionError("retain needs at least one transcript turn")
    turns = [t if isinstance(t, Turn) else Turn.from_record(t) for t in turns]
    now = as_utc(now) if now is not None else utcnow()

    try:
        facts = providers.extract(turns)
        if not facts:
            raise RejectedFactError("extractor returned no facts")
        prepared: list[_Prepared] = []
        for fact in facts:
            start, end, mentioned = _fact_times(fact, now, providers.temporal_fallback)
            prepared.append(
                _Prepared(
                    fact=fact,
                    network=Network(fact.fact_type),
                    start=start,
                    end=end,
                    mentioned=mentioned,
                    embedding=providers.embed(fact.what),
                )
            )
    except ProviderError as exc:
        raise RetainFailedError(f"retain aborted: {exc}") from exc

    receipt = RetainReceipt(bank_id=bank.bank_id)
    touched: set[str] = set()
    try:
        with bank.transaction() as txn:
            _store_facts(txn, prepared, context, config, receipt, touched)
            updates, made, dropped = reinforce_opinions(
                [txn.units[i] for i in receipt.fact_ids if txn.units[i].network is not Network.OPINION],
                txn,
                providers,
                config,
            )
            receipt.opinions_updated = updates
            _add_counts(receipt.edges_created, made)
            _add_counts(receipt.edges_removed, dropped)
            if biographical:
                snippet = " ".join(t.text.strip() for t in turns)
                try:
                    merged = merge_background(txn.profile.background, snippet, providers, config)
                except (BackgroundRejectedError, ProviderError) as exc:
                    receipt.warnings.append(f"background unchanged: {exc}")
                else:
                    if merged != txn.profile.background:
                        txn.set_profile(replace(txn.profile, background=merged))
                        receipt.background_changed = True
    except ProviderError as exc:
        raise RetainFailedError(f"retain aborted: {exc}") from exc

    receipt.observations_scheduled = sorted(touched)
    _schedule_observations(bank, sorted(touched), providers, config)
    return receipt


def _add_counts(into: dict[str, int], more: dict[str, int]) -> None:
    for k, v in more.items():
        into[k] = into.get(k, 0) + v


def _store_facts(
    txn: Transaction,
    prepared: Sequence[_Prepared],
    context: str,
    config: EngineConfig,
    receipt: RetainReceipt,
    touched: set[str],
) -> None:
    units: list[MemoryUnit] = []
    for p in prepared:
        resolutions = resolve_mentions(_mentions(p.fact), p.mentioned, txn, config)
        entity_ids: list[str] = []
        for r in resolutions:
            if r.created:
                receipt.new_entities.append(r.entity_id)
            else:
                receipt.merged_entities.append((r.mention, r.entity_id))
            if r.entity_id not in entity_ids:
                entity_ids.append(r.entity_id)
        meta: dict[str, Any] = {
            "context": context,
            "access_count": 0,
            "entities": entity_ids,
            "when": p.fact.when or format_when(p.start),
            "where": p.fact.where,
            "who": p.fact.who,
            "why": p.fact.why,
        }
        if p.network is Network.OPINION:
            meta["revisions"] = 0
        units.append(
            MemoryUnit(
                id=txn.next_id("unit"),
                bank_id=txn.bank_id,
                text=p.fact.what.strip(),
                embedding=p.embedding,
                occurred_start=p.start,
                occurred_end=p.end,
                mentioned_at=p.mentioned,
                network=p.network,
                confidence=config.default_opinion_confidence if p.network is Network.OPINION else None,
                metadata=meta,
            )
        )
        if p.network in FACT_NETWORKS:
            touched.update(entity_ids)
    ids = txn.put_units(units)
    receipt.fact_ids = ids
    causal = [
        (i, rel.target_fact_index, rel.relation_type)
        for i, p in enumerate(prepared)
        for rel in p.fact.causal_relations
    ]
    created = build_links(ids, txn, config, causal)
    _add_counts(receipt.edges_created, count_by_kind(created))


# --------------------------------------------------------------------------
# Observations
# --------------------------------------------------------------------------


def observation_id(entity_id: str, k: int) -> str:
    return f"obs-{entity_id}-{k:02d}"


def _schedule_observations(
    bank: MemoryBank, entity_ids: Sequence[str], providers: ProviderSuite, config: EngineConfig
) -> None:
    if not entity_ids or config.observation_mode == "off":
        return
    if config.observation_mode == "inline":
        for ent in entity_ids:
            refresh_observations(ent, bank, providers, config)
        return
    bank.submit_background(lambda: _refresh_all(bank, list(entity_ids), providers, config))


def _refresh_all(bank: MemoryBank, entity_ids: list[str], providers: ProviderSuite, config: EngineConfig, attempt: int = 0) -> None:
    failed: list[str] = []
    for ent in entity_ids:
        try:
            refresh_observations(ent, bank, providers, config)
        except ProviderError as exc:
            log.warning("observation refresh for %s failed (attempt %d): %s", ent, attempt + 1, exc)
            failed.append(ent)
    if failed and attempt < config.provider_retries:
        bank.submit_background(lambda: _refresh_all(bank, failed, providers, config, attempt + 1))


def refresh_observations(
    entity_id: str, bank: MemoryBank, providers: ProviderSuite, config: EngineConfig | None = None
) -> list[str]:
    """Regenerate the observation units summarizing one entity.

    Facts are read from a snapshot and synthesized without holding the
    write lock; only the final swap runs inside a transaction. On provider
    failure the old observations stay and :class:`ProviderError` is raised.

    Returns:
        Ids of the observation units now stored for the entity.
    """
    config = config or bank.config
    state = bank.snapshot()
    entity = state.entities.get(entity_id)
    if entity is None:
        return []
    facts = sorted(
        (state.units[u] for u in state.entity_units.get(entity_id, ()) if state.units[u].network in FACT_NETWORKS),
        key=lambda u: (u.occurred_start, u.id),
    )
    texts: list[str] = []
    embeddings: list[tuple[float, ...]] = []
    if facts:
        texts = providers.summarize_entity(entity.canonical_name, [f.text for f in facts])[: config.max_observations]
        embeddings = [providers.embed(t) for t in texts]

    with bank.transaction() as txn:
        stale = [u for u in txn.units.values() if u.network is Network.OBSERVATION and u.metadata.get("observation_of") == entity_id]
        for unit in stale:
            txn.remove_unit(unit.id)
        if not texts:
            return []
        start = min(f.occurred_start for f in facts)
        end = max(f.occurred_end for f in facts)
        mentioned = max(f.mentioned_at for f in facts)
        units = [
            MemoryUnit(
                id=observation_id(entity_id, k + 1),
                bank_id=txn.bank_id,
                text=text,
                embedding=emb,
                occurred_start=start,
                occurred_end=end,
                mentioned_at=mentioned,
                network=Network.OBSERVATION,
                metadata={
                    "context": "",
                    "access_count": 0,
                    "entities": [entity_id],
                    "observation_of": entity_id,
                    "source_facts": [f.id for f in facts],
                    "when": format_when(start),
                },
            )
            for k, (text, emb) in enumerate(zip(texts, embeddings))
        ]
        ids = txn.put_units(units)
        build_links(ids, txn, config)
        return ids


# --------------------------------------------------------------------------
# Background
# --------------------------------------------------------------------------


def merge_background(current: str, snippet: str, providers: ProviderSuite, config: EngineConfig) -> str:
    """Merge a biographical snippet into the current background.

    The snippet is normalized to first person before the synthesizer sees
    it. The merged text is accepted only if it fits ``background_max_len``
    and no sentence opens in second person.

    Raises:
        BackgroundRejectedError: if the merged text fails either check.
    """
    snippet = normalize_first_person(snippet.strip())
    if not snippet:
        return current
    merged = providers.merge_background(current, snippet, config.background_max_len).strip()
    problems = []
    if len(merged) > config.background_max_len:
        problems.append(f"length {len(merged)} exceeds {config.background_max_len}")
    if not is_first_person(merged):
        problems.append("merged background is not in first person")
    if problems:
        raise BackgroundRejectedError("merged background rejected", problems)
    return merged
