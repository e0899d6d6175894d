"""Budgeted four-channel recall.

Semantic, keyword, graph and temporal channels each produce a ranked list.
Reciprocal rank fusion merges them, a reranker reorders the head of the
fused list, and the result is cut to the longest rank prefix that fits the
token budget.

Ties are broken the same way everywhere: higher score first, then the more
recently mentioned unit, then the smaller unit id.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Any, Callable, Mapping, Sequence

from .errors import PreconditionError, ProviderError
from .model import ALL_CHANNELS, EngineConfig, MemoryUnit, as_utc, format_when, iso, midpoint, to_ts, utcnow
from .providers import ProviderSuite
from .store import BankState, MemoryBank
from .temporal import parse_temporal
from .text import TokenCounter, count_tokens, tokenize

log = logging.getLogger(__name__)

_POOL = ThreadPoolExecutor(max_workers=8, thread_name_prefix="membank-recall")


@dataclass(frozen=True)
class Hit:
    unit_id: str
    score: float


@dataclass(frozen=True)
class RankedList:
    """One channel's ranking; rank 1 is the first entry."""

    channel: str
    entries: tuple[Hit, ...] = ()

    @property
    def ids(self) -> list[str]:
        return [h.unit_id for h in self.entries]

    def ranks(self) -> dict[str, int]:
        return {h.unit_id: i + 1 for i, h in enumerate(self.entries)}

    def __len__(self) -> int:
        return len(self.entries)


def tiebreak_key(units: Mapping[str, MemoryUnit]) -> Callable[[str, float], tuple[float, float, str]]:
    """Sort key implementing score desc, mentioned_at desc, id asc."""

    def key(unit_id: str, score: float) -> tuple[float, float, str]:
        unit = units.get(unit_id)
        mentioned = to_ts(unit.mentioned_at) if unit is not None else 0.0
        return (-score, -mentioned, unit_id)

    return key


def rank(channel: str, scores: Mapping[str, float], units: Mapping[str, MemoryUnit], n: int | None) -> RankedList:
    key = tiebreak_key(units)
    ordered = sorted(scores.items(), key=lambda kv: key(kv[0], kv[1]))
    if n is not None:
        ordered = ordered[:n]
    return RankedList(channel, tuple(Hit(uid, float(s)) for uid, s in ordered))


# --------------------------------------------------------------------------
# Channels
# --------------------------------------------------------------------------


def semantic_search(query_embedding: Sequence[float], state: BankState, n: int) -> RankedList:
    """Top-``n`` units by cosine similarity to the query embedding."""
    if n < 1:
        raise PreconditionError("n must be >= 1")
    if len(query_embedding) != state.vectors.dim:
        raise PreconditionError(f"query embedding dimension {len(query_embedding)} != {state.vectors.dim}")
    return rank("semantic", state.vectors.cosine_all(query_embedding), state.units, n)


def keyword_search(query_text: str, state: BankState, n: int, config: EngineConfig | None = None) -> RankedList:
    """Top-``n`` units by BM25 over case-folded alphanumeric tokens.

    Corpus statistics come from ``state`` alone. Query terms count once
    each; a query with no indexed terms yields an empty list.
    """
    config = config or EngineConfig()
    if not query_text.strip():
        raise PreconditionError("keyword query must be non-empty")
    terms = tokenize(query_text, drop_stopwords=config.bm25_stopwords)
    scores = state.lexical.bm25(terms, config.bm25_k1, config.bm25_b)
    return rank("keyword", scores, state.units, n)


def spread_activation(
    seeds: Mapping[str, float], state: BankState, config: EngineConfig
) -> dict[str, float]:
    """Synchronous spreading activation for ``config.max_hops`` steps.

    Each step every node keeps the larger of its current activation and the
    best incoming ``activation * weight * decay * multiplier(kind)``, capped
    at 1.0. Seeds are clamped into [0, 1] first.
    """
    decay = config.activation_decay
    mult = config.link_multipliers
    act = {uid: min(max(float(a), 0.0), 1.0) for uid, a in seeds.items()}
    for _ in range(config.max_hops):
        nxt = dict(act)
        for src, a in act.items():
            if a <= 0.0:
                continue
            for edge in state.out_edges.get(src, ()):
                contrib = min(a * edge.weight * decay * mult[edge.kind], 1.0)
                if contrib > nxt.get(edge.target, 0.0):
                    nxt[edge.target] = contrib
        if nxt == act:
            break
        act = nxt
    return act


def graph_search(
    entries: RankedList | Mapping[str, float], state: BankState, config: EngineConfig, n: int | None = None
) -> RankedList:
    """Rank entry points and everything they activate by final activation.

    Args:
        entries: seed units with their initial activation (normally the top
            semantic hits and their cosine scores).
        n: optional cut-off; defaults to ``config.channel_pool_size``.
    """
    seeds = {h.unit_id: h.score for h in entries.entries} if isinstance(entries, RankedList) else dict(entries)
    act = spread_activation(seeds, state, config)
    return rank("graph", act, state.units, n if n is not None else config.channel_pool_size)


def temporal_score(unit: MemoryUnit, start: datetime, end: datetime) -> float:
    """Proximity of the unit's midpoint to the range midpoint, clamped to [0, 1]."""
    span = to_ts(end) - to_ts(start)
    half = max(span, 1.0) / 2.0
    centre = midpoint(start, end)
    return min(max(1.0 - abs(unit.midpoint - centre) / half, 0.0), 1.0)


def temporal_search(rng: tuple[datetime, datetime], state: BankState, n: int) -> RankedList:
    """Units whose occurrence interval overlaps ``rng``, scored by :func:`temporal_score`.

    A zero-length range is widened to one second.
    """
    start, end = rng
    if start > end:
        raise PreconditionError("temporal range is inverted")
    if end == start:
        end = datetime.fromtimestamp(to_ts(start) + 1, tz=start.tzinfo)
    lo, hi = to_ts(start), to_ts(end)
    scores = {
        uid: temporal_score(u, start, end)
        for uid, u in state.units.items()
        if to_ts(u.occurred_start) <= hi and lo <= to_ts(u.occurred_end)
    }
    return rank("temporal", scores, state.units, n)


# --------------------------------------------------------------------------
# Fusion, rerank, packing
# --------------------------------------------------------------------------


def rrf_fuse(
    lists: Sequence[RankedList],
    k: int = 60,
    tiebreak: Callable[[str, float], Any] | None = None,
) -> RankedList:
    """Reciprocal rank fusion: ``sum(1 / (k + rank))`` over the lists holding a unit.

    Ranks are positions within each (already truncated) list. Ties fall
    back to ``tiebreak`` or, by default, unit id.
    """
    if k < 1:
        raise PreconditionError("rrf k must be >= 1")
    scores: dict[str, float] = {}
    for lst in lists:
        for r, hit in enumerate(lst.entries, start=1):
            scores[hit.unit_id] = scores.get(hit.unit_id, 0.0) + 1.0 / (k + r)
    key = tiebreak or (lambda uid, s: (-s, uid))
    ordered = sorted(scores.items(), key=lambda kv: key(kv[0], kv[1]))
    return RankedList("fused", tuple(Hit(uid, s) for uid, s in ordered))


def rerank_text(unit: MemoryUnit) -> str:
    """Reranker input: the unit text prefixed with its date, written out and in ISO form."""
    start = unit.occurred_start
    return f"[{format_when(start)} ({start.date().isoformat()})] {unit.text}"


@dataclass(frozen=True)
class Reranked:
    order: tuple[str, ...]
    scores: Mapping[str, float]
    fallback: bool = False


def rerank(
    query_text: str,
    candidates: RankedList,
    state: BankState,
    providers: ProviderSuite,
    window: int = 50,
) -> Reranked:
    """Rescore the first ``window`` fused candidates with the reranker.

    Candidates past the window keep their fused order after the reranked
    head. If the provider fails, the fused order is returned unchanged with
    ``fallback`` set.
    """
    head = candidates.ids[:window]
    tail = candidates.ids[window:]
    try:
        scores = {uid: providers.rerank_score(query_text, rerank_text(state.units[uid])) for uid in head}
    except ProviderError as exc:
        log.warning("rerank failed, keeping fused order: %s", exc)
        return Reranked(tuple(candidates.ids), {}, fallback=True)
    key = tiebreak_key(state.units)
    ordered = sorted(head, key=lambda uid: key(uid, scores[uid]))
    return Reranked(tuple(ordered + tail), scores)


def pack_budget(
    texts: Sequence[str], budget_tokens: int, counter: TokenCounter = count_tokens
) -> tuple[int, int]:
    """Longest prefix of ``texts`` whose summed token count stays within budget.

    Returns:
        ``(count, total_tokens)``: how many leading items fit and their
        token total. Packing stops at the first item that would overflow.
    """
    if budget_tokens < 0:
        raise PreconditionError("budget must be >= 0")
    total = 0
    for i, text in enumerate(texts):
        cost = counter(text)
        if total + cost > budget_tokens:
            return i, total
        total += cost
    return len(texts), total


# --------------------------------------------------------------------------
# Orchestration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RecallItem:
    unit_id: str
    text: str
    network: str
    fused_score: float
    rerank_score: float | None
    channels_hit: tuple[str, ...]
    occurred_start: str
    occurred_end: str
    mentioned_at: str
    tokens: int
    channel_ranks: Mapping[str, int] = field(default_factory=dict)

    def to_dict(self, explain: bool = False) -> dict[str, Any]:
        out = asdict(self)
        out["channels_hit"] = list(self.channels_hit)
        out["channel_ranks"] = dict(self.channel_ranks)
        if not explain:
            out.pop("channel_ranks")
        return out


@dataclass(frozen=True)
class RecallResult:
    items: tuple[RecallItem, ...]
    total_tokens: int
    budget: int
    temporal_range_used: tuple[datetime, datetime] | None = None
    rerank_fallback: bool = False
    channels: Mapping[str, RankedList] = field(default_factory=dict)

    @property
    def ids(self) -> list[str]:
        return [i.unit_id for i in self.items]

    def to_dict(self, explain: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {
            "items": [i.to_dict(explain) for i in self.items],
            "total_tokens": self.total_tokens,
            "budget": self.budget,
            "temporal_range_used": [iso(t) for t in self.temporal_range_used] if self.temporal_range_used else None,
            "rerank_fallback": self.rerank_fallback,
        }
        if explain:
            out["channels"] = {
                name: [{"unit_id": h.unit_id, "rank": r, "score": h.score} for r, h in enumerate(lst.entries, 1)]
                for name, lst in self.channels.items()
            }
        return out


def recall(
    bank: MemoryBank | BankState,
    query_text: str,
    budget_tokens: int,
    providers: ProviderSuite,
    config: EngineConfig | None = None,
    *,
    now: datetime | None = None,
    counter: TokenCounter = count_tokens,
) -> RecallResult:
    """Retrieve the memories most relevant to ``query_text`` within a token budget.

    All four networks are searched. Semantic and keyword channels always
    run; the graph channel is seeded with the top semantic hits; the
    temporal channel runs only when the query contains a temporal
    expression. Channels disabled in ``config.channels`` are skipped.
    Channels read a single snapshot, so concurrent writes are invisible.
    """
    if isinstance(bank, MemoryBank):
        config = config or bank.config
        state = bank.snapshot()
    else:
        state = bank
    config = config or EngineConfig()
    if budget_tokens < 0:
        raise PreconditionError("budget must be >= 0")
    if not query_text.strip():
        raise PreconditionError("query must be non-empty")
    enabled = set(config.channels)
    now = as_utc(now) if now is not None else utcnow()
    rng = parse_temporal(query_text, now, providers.temporal_fallback) if "temporal" in enabled else None
    if not state.units:
        return RecallResult((), 0, budget_tokens, rng)

    pool = config.channel_pool_size
    qvec = providers.embed(query_text)

    def semantic_and_graph() -> list[RankedList]:
        sem = semantic_search(qvec, state, max(pool, config.graph_entry_points))
        out = [RankedList("semantic", sem.entries[:pool])] if "semantic" in enabled else []
        if "graph" in enabled:
            seeds = RankedList("entry", sem.entries[: config.graph_entry_points])
            out.append(graph_search(seeds, state, config, pool))
        return out

    futures = [_POOL.submit(semantic_and_graph)]
    if "keyword" in enabled:
        futures.append(_POOL.submit(lambda: [keyword_search(query_text, state, pool, config)]))
    if rng is not None:
        futures.append(_POOL.submit(lambda: [temporal_search(rng, state, pool)]))
    lists: list[RankedList] = []
    for fut in futures:
        lists.extend(fut.result())
    lists.sort(key=lambda lst: ALL_CHANNELS.index(lst.channel))

    fused = rrf_fuse(lists, config.rrf_k, tiebreak_key(state.units))
    reranked = rerank(query_text, fused, state, providers, config.rerank_window)
    fused_scores = {h.unit_id: h.score for h in fused.entries}
    texts = [state.units[uid].text for uid in reranked.order]
    count, total = pack_budget(texts, budget_tokens, counter)
    per_channel = {lst.channel: lst.ranks() for lst in lists}
    items = []
    for uid, text in zip(reranked.order[:count], texts[:count]):
        unit = state.units[uid]
        ranks = {ch: r[uid] for ch, r in per_channel.items() if uid in r}
        items.append(
            RecallItem(
                unit_id=uid,
                text=text,
                network=unit.network.value,
                fused_score=fused_scores[uid],
                rerank_score=reranked.scores.get(uid),
                channels_hit=tuple(ranks),
                occurred_start=iso(unit.occurred_start),
                occurred_end=iso(unit.occurred_end),
                mentioned_at=iso(unit.mentioned_at),
                tokens=counter(text),
                channel_ranks=ranks,
            )
        )
    return RecallResult(
        items=tuple(items),
        total_tokens=total,
        budget=budget_tokens,
        temporal_range_used=rng,
        rerank_fallback=reranked.fallback,
        channels={lst.channel: lst for lst in lists},
    )
