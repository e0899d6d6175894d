"""Reflect: profile-conditioned answers and opinion formation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Any

from pydantic import ValidationError

from .errors import PreconditionError
from .graph import build_links, resolve_mentions
from .model import BankProfile, EngineConfig, MemoryUnit, Network, Opinion, as_utc, format_when, iso, utcnow
from .opinions import (
    OpinionUpdate,
    acceptable_revision,
    apply_confidence_update,
    find_candidate_opinions,
    reinforce_opinions,
)
from .providers import OpinionCandidate, ProviderSuite
from .recall import RecallResult, recall
from .store import MemoryBank

log = logging.getLogger(__name__)

__all__ = [
    "ReflectResult",
    "apply_confidence_update",
    "find_candidate_opinions",
    "reflect",
    "reinforce_opinions",
    "verbalize_profile",
]

_SKEPTICISM = (
    "You are trusting and readily take what you are told at face value.",
    "You are mostly trusting, though you notice obvious inconsistencies.",
    "You weigh claims evenly, neither credulous nor suspicious.",
    "You are skeptical and look for evidence before accepting a claim.",
    "You are highly skeptical and question claims until they are well supported.",
)
_LITERALISM = (
    "You read language loosely and look for the intent behind the words.",
    "You interpret wording flexibly and allow for implied meaning.",
    "You balance the literal wording against the likely intent.",
    "You lean toward reading statements literally.",
    "You read statements strictly literally and attend to exact wording.",
)
_EMPATHY = (
    "You focus on facts and set emotional context aside.",
    "You notice emotional context but stay mostly factual.",
    "You balance factual analysis with attention to how people feel.",
    "You are empathetic and attentive to how people feel.",
    "You are highly empathetic and put emotional context at the center of your reasoning.",
)
_BIAS = (
    "Keep your own preferences out of the answer and emphasize objectivity.",
    "Let your established views inform the answer while staying open to the evidence.",
    "State your views with conviction and be openly opinionated where your beliefs apply.",
)


def verbalize_profile(profile: BankProfile) -> str:
    """Render a bank profile as a system message. Pure and deterministic.

    Each 1-5 trait picks one of five fixed phrases; bias strength picks one
    of three clauses for the bands [0, 1/3), [1/3, 2/3) and [2/3, 1].
    """
    problems = profile.profile.violations()
    if problems:
        raise PreconditionError("invalid behavioral profile", problems)
    p = profile.profile
    beta = p.bias_strength
    band = 0 if beta < 1 / 3 else 1 if beta < 2 / 3 else 2
    name = profile.name.strip()
    lines = [f"You are {name}, an agent with a long-term memory." if name else "You are an agent with a long-term memory."]
    if profile.background.strip():
        lines.append(f"Your background, in your own words: {profile.background.strip()}")
    lines += [_SKEPTICISM[p.skepticism - 1], _LITERALISM[p.literalism - 1], _EMPATHY[p.empathy - 1], _BIAS[band]]
    return "\n".join(lines)


@dataclass
class ReflectResult:
    response_text: str
    opinions_formed: list[Opinion] = field(default_factory=list)
    opinions_updated: list[OpinionUpdate] = field(default_factory=list)
    memories_used: list[str] = field(default_factory=list)
    system_message_used: str = ""
    dropped_candidates: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self, show_system_message: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {
            "response_text": self.response_text,
            "opinions_formed": [o.to_record() for o in self.opinions_formed],
            "opinions_updated": [u.to_dict() for u in self.opinions_updated],
            "memories_used": list(self.memories_used),
            "dropped_candidates": list(self.dropped_candidates),
        }
        if show_system_message:
            out["system_message_used"] = self.system_message_used
        return out


def _memory_line(item: Any) -> str:
    return f"[{item.network}, {item.occurred_start[:10]}] {item.text}"


def reflect(
    bank: MemoryBank,
    query: str,
    providers: ProviderSuite,
    config: EngineConfig | None = None,
    *,
    budget: int | None = None,
    now: datetime | None = None,
) -> ReflectResult:
    """Answer ``query`` in the bank's voice and store any opinions it forms.

    Memories come from :func:`membank.recall.recall` with the reflect
    budget. Each candidate opinion is validated on its own; invalid ones are
    dropped and reported. A candidate whose text matches an existing opinion
    exactly (ignoring case and surrounding space) reinforces that opinion
    instead of duplicating it. Only the opinion-store step holds the bank's
    write lock.

    Raises:
        ProviderError: if the synthesizer fails; nothing is written.
    """
    config = config or bank.config
    now = as_utc(now) if now is not None else utcnow()
    state = bank.snapshot()
    result: RecallResult = recall(
        state, query, config.reflect_budget if budget is None else budget, providers, config, now=now
    )
    system_message = verbalize_profile(state.profile)
    response = providers.respond(system_message, [_memory_line(i) for i in result.items], query)

    accepted: list[OpinionCandidate] = []
    dropped: list[dict[str, Any]] = []
    for raw in response.opinions:
        try:
            cand = OpinionCandidate.model_validate(raw)
        except ValidationError as exc:
            log.warning("dropping malformed opinion candidate %r: %s", raw, exc)
            dropped.append({"candidate": raw, "reason": "; ".join(e["msg"] for e in exc.errors())})
            continue
        if not acceptable_revision(cand.opinion.strip()):
            dropped.append({"candidate": raw, "reason": "opinion must be a first-person statement"})
            continue
        accepted.append(cand)

    prepared = []
    for cand in accepted:
        text = cand.opinion.strip()
        prepared.append(
            (
                cand,
                text,
                providers.embed(text),
                [(m.text.strip(), m.kind) for m in providers.extract_entities(text) if m.text.strip()],
            )
        )

    formed: list[Opinion] = []
    updated: list[OpinionUpdate] = []
    if prepared:
        with bank.transaction() as txn:
            for cand, text, embedding, mentions in prepared:
                existing = next(
                    (
                        u
                        for u in sorted(txn.units.values(), key=lambda u: u.id)
                        if u.network is Network.OPINION and u.text.strip().casefold() == text.casefold()
                    ),
                    None,
                )
                if existing is not None:
                    assert existing.confidence is not None
                    new_c = apply_confidence_update(existing.confidence, "reinforce", config.opinion_alpha)
                    txn.put_units([replace(existing, confidence=new_c)])
                    updated.append(OpinionUpdate(existing.id, existing.confidence, new_c, "reinforce"))
                    continue
                entity_ids: list[str] = []
                for r in resolve_mentions(mentions, now, txn, config):
                    if r.entity_id not in entity_ids:
                        entity_ids.append(r.entity_id)
                confidence = cand.confidence if cand.confidence is not None else config.default_opinion_confidence
                unit = MemoryUnit(
                    id=txn.next_id("unit"),
                    bank_id=txn.bank_id,
                    text=text,
                    embedding=embedding,
                    occurred_start=now,
                    occurred_end=now,
                    mentioned_at=now,
                    network=Network.OPINION,
                    confidence=confidence,
                    metadata={
                        "context": f"reflect: {query}",
                        "access_count": 0,
                        "entities": entity_ids,
                        "reasoning": cand.reasoning,
                        "revisions": 0,
                        "when": format_when(now),
                        "formed_at": iso(now),
                    },
                )
                txn.put_units([unit])
                build_links([unit.id], txn, config)
                formed.append(Opinion.from_unit(unit))

    return ReflectResult(
        response_text=response.answer,
        opinions_formed=formed,
        opinions_updated=updated,
        memories_used=result.ids,
        system_message_used=system_message,
        dropped_candidates=dropped,
    )
