"""Opinion dynamics: candidate selection, confidence updates, reinforcement."""

from __future__ import annotations

import logging
from decimal import Decimal
from dataclasses import asdict, dataclass, replace
from typing import Any, Iterable, Mapping, Sequence

from .errors import PreconditionError, ProviderError
from .graph import build_links, count_by_kind
from .model import EngineConfig, LinkKind, MemoryUnit, Network, cosine
from .providers import LABELS, ProviderSuite
from .store import Transaction
from .text import is_first_person, tokenize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OpinionUpdate:
    opinion_id: str
    old_confidence: float
    new_confidence: float
    label: str
    fact_id: str | None = None
    revised: bool = False

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def apply_confidence_update(c: float, label: str, alpha: float) -> float:
    """Four-case confidence rule.

    ``reinforce`` adds ``alpha``, ``weaken`` subtracts it, ``contradict``
    subtracts twice ``alpha`` and ``neutral`` keeps ``c``; results are
    clamped to [0, 1]. The arithmetic is decimal on the shortest float
    representation of each input.

    Raises:
        PreconditionError: on an unknown label or arguments out of range.
    """
    if not 0.0 <= c <= 1.0:
        raise PreconditionError(f"confidence {c} outside [0, 1]")
    if not 0.0 < alpha < 1.0:
        raise PreconditionError(f"alpha {alpha} outside (0, 1)")
    # Decimal arithmetic on the shortest repr keeps hand-checkable
    # trajectories exact (0.7 + 0.1 gives 0.8, not 0.7999999999999999).
    step = {"reinforce": 1, "weaken": -1, "contradict": -2, "neutral": 0}.get(label)
    if step is not None:
        moved = Decimal(repr(float(c))) + step * Decimal(repr(float(alpha)))
        return float(min(max(moved, Decimal(0)), Decimal(1)))
    raise PreconditionError(f"unknown opinion label {label!r}; expected one of {LABELS}")


def find_candidate_opinions(
    fact: MemoryUnit, units: Mapping[str, MemoryUnit] | Iterable[MemoryUnit], config: EngineConfig
) -> list[MemoryUnit]:
    """Opinions sharing an entity with ``fact`` or with cosine strictly above ``opinion_theta``.

    Returned in id order, each at most once; ``fact`` itself is never a candidate.
    """
    pool = units.values() if isinstance(units, Mapping) else units
    fact_entities = set(fact.entities)
    out: dict[str, MemoryUnit] = {}
    for unit in pool:
        if unit.network is not Network.OPINION or unit.id == fact.id:
            continue
        if fact_entities & set(unit.entities) or cosine(unit.embedding, fact.embedding) > config.opinion_theta:
            out[unit.id] = unit
    return [out[k] for k in sorted(out)]


_FIRST_PERSON = frozenset({"i", "me", "my", "mine", "myself"})


def acceptable_revision(text: str) -> bool:
    """A revised opinion must be non-empty, speak in first person and never address a reader."""
    return bool(text.strip()) and is_first_person(text) and bool(_FIRST_PERSON & set(tokenize(text)))


def reinforce_opinions(
    new_facts: Sequence[MemoryUnit],
    txn: Transaction,
    providers: ProviderSuite,
    config: EngineConfig,
    *,
    eligible: set[str] | None = None,
) -> tuple[list[OpinionUpdate], dict[str, int], dict[str, int]]:
    """Update pre-existing opinions in light of new facts, in ingestion order.

    Each (fact, candidate) pair gets an assessment label. Confidence moves
    per :func:`apply_confidence_update`; a contradiction also asks the
    synthesizer for a revised statement, accepted only when non-empty and
    first person. A revised opinion keeps its formation time, bumps
    ``metadata["revisions"]`` and gets fresh semantic edges. Assessor
    failures skip the pair.

    Args:
        eligible: opinion ids that may be updated; defaults to the opinions
            present before this transaction.

    Returns:
        ``(updates, edges_created, edges_removed)``; neutral outcomes are
        not listed.
    """
    if eligible is None:
        eligible = {u.id for u in txn.base.units.values() if u.network is Network.OPINION}
    updates: list[OpinionUpdate] = []
    created: list[Any] = []
    removed: list[Any] = []
    for fact in new_facts:
        pool = (txn.units[i] for i in sorted(eligible) if i in txn.units)
        for op in find_candidate_opinions(fact, pool, config):
            try:
                label = providers.assess(op.text, fact.text)
            except ProviderError as exc:
                log.warning("assessment of %s against %s skipped: %s", op.id, fact.id, exc)
                continue
            if label == "neutral":
                continue
            assert op.confidence is not None
            new_c = apply_confidence_update(op.confidence, label, config.opinion_alpha)
            updated = replace(op, confidence=new_c)
            revised = False
            if label == "contradict":
                try:
                    text = providers.revise_opinion(op.text, fact.text).strip()
                    if acceptable_revision(text) and text != op.text:
                        embedding = providers.embed(text)
                        meta = dict(op.metadata)
                        meta["revisions"] = int(meta.get("revisions", 0)) + 1
                        updated = replace(updated, text=text, embedding=embedding, metadata=meta)
                        revised = True
                    else:
                        log.warning("revision for %s rejected: %r", op.id, text)
                except ProviderError as exc:
                    log.warning("revision for %s failed: %s", op.id, exc)
            txn.put_units([updated])
            if revised:
                removed.extend(txn.drop_edges(op.id, LinkKind.SEMANTIC))
                created.extend(build_links([op.id], txn, config, kinds=(LinkKind.SEMANTIC,)))
            updates.append(OpinionUpdate(op.id, op.confidence, new_c, label, fact.id, revised))
    return updates, count_by_kind(created), count_by_kind(removed)
