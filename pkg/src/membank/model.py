"""Domain types, engine configuration and validation predicates.

Every type here is an immutable value object. Mutation of a bank happens
only through :mod:`membank.store` transactions, which swap whole records.
Timestamps are timezone-aware UTC datetimes truncated to whole seconds,
and all intervals are closed on both ends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Mapping, Sequence

from .errors import ConfigError, PreconditionError

UTC = timezone.utc

DAY = 86_400.0


class Network(str, Enum):
    """The four disjoint partitions of a memory bank."""

    WORLD = "world"
    EXPERIENCE = "experience"
    OPINION = "opinion"
    OBSERVATION = "observation"


class EntityKind(str, Enum):
    PERSON = "PERSON"
    ORGANIZATION = "ORGANIZATION"
    LOCATION = "LOCATION"
    PRODUCT = "PRODUCT"
    CONCEPT = "CONCEPT"
    OTHER = "OTHER"


class LinkKind(str, Enum):
    TEMPORAL = "temporal"
    SEMANTIC = "semantic"
    ENTITY = "entity"
    CAUSAL = "causal"


class CausalKind(str, Enum):
    CAUSES = "causes"
    CAUSED_BY = "caused_by"
    ENABLES = "enables"
    PREVENTS = "prevents"


# --------------------------------------------------------------------------
# Time helpers
# --------------------------------------------------------------------------


def as_utc(value: datetime | str | int | float) -> datetime:
    """Coerce a datetime, ISO-8601 string or epoch seconds to a UTC instant.

    Naive datetimes are taken to be UTC. Sub-second precision is dropped.
    """
    if isinstance(value, datetime):
        dt = value
    elif isinstance(value, str):
        text = value.strip()
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        try:
            dt = datetime.fromisoformat(text)
        except ValueError as exc:
            raise PreconditionError(f"invalid timestamp {value!r}") from exc
    elif isinstance(value, (int, float)) and not isinstance(value, bool):
        if not math.isfinite(value):
            raise PreconditionError(f"invalid timestamp {value!r}")
        dt = datetime.fromtimestamp(int(value), tz=UTC)
    else:
        raise PreconditionError(f"invalid timestamp {value!r}")
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=UTC)
    return dt.astimezone(UTC).replace(microsecond=0)


def to_ts(dt: datetime) -> float:
    return dt.timestamp()


def iso(dt: datetime) -> str:
    return as_utc(dt).strftime("%Y-%m-%dT%H:%M:%SZ")


def utcnow() -> datetime:
    return datetime.now(UTC).replace(microsecond=0)


def format_when(dt: datetime) -> str:
    """Human-readable time reference, e.g. ``Sunday, June 9, 2024``."""
    return f"{dt:%A}, {dt:%B} {dt.day}, {dt.year}"


def midpoint(start: datetime, end: datetime) -> float:
    return (to_ts(start) + to_ts(end)) / 2.0


def interval_overlaps(a_start: Any, a_end: Any, b_start: Any, b_end: Any) -> bool:
    """Return True when two closed intervals share at least one point.

    Works on any mutually comparable values (numbers or datetimes).

    Raises:
        PreconditionError: if either interval is inverted.
    """
    if a_start > a_end or b_start > b_end:
        raise PreconditionError("interval start must not exceed its end")
    return max(a_start, b_start) <= min(a_end, b_end)


# --------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MemoryUnit:
    """One stored fact.

    ``metadata`` carries auxiliary data: ``context`` string, ``access_count``,
    ``entities`` (canonical entity ids mentioned), ``when`` (human-readable
    time reference) and, for observations, ``observation_of``.
    """

    id: str
    bank_id: str
    text: str
    embedding: tuple[float, ...]
    occurred_start: datetime
    occurred_end: datetime
    mentioned_at: datetime
    network: Network
    confidence: float | None = None
    metadata: Mapping[str, Any] = field(default_factory=dict)

    @property
    def entities(self) -> tuple[str, ...]:
        return tuple(self.metadata.get("entities", ()))

    @property
    def midpoint(self) -> float:
        return midpoint(self.occurred_start, self.occurred_end)

    def to_record(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "bank_id": self.bank_id,
            "text": self.text,
            "embedding": list(self.embedding),
            "occurred_start": iso(self.occurred_start),
            "occurred_end": iso(self.occurred_end),
            "mentioned_at": iso(self.mentioned_at),
            "network": self.network.value,
            "confidence": self.confidence,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> MemoryUnit:
        conf = rec.get("confidence")
        return cls(
            id=str(rec["id"]),
            bank_id=str(rec["bank_id"]),
            text=str(rec["text"]),
            embedding=tuple(float(x) for x in rec["embedding"]),
            occurred_start=as_utc(rec["occurred_start"]),
            occurred_end=as_utc(rec["occurred_end"]),
            mentioned_at=as_utc(rec["mentioned_at"]),
            network=Network(rec["network"]),
            confidence=None if conf is None else float(conf),
            metadata=dict(rec.get("metadata") or {}),
        )


@dataclass(frozen=True)
class BehavioralProfile:
    skepticism: int = 3
    literalism: int = 3
    empathy: int = 3
    bias_strength: float = 0.5

    def violations(self) -> list[str]:
        out = []
        for name in ("skepticism", "literalism", "empathy"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or not 1 <= value <= 5:
                out.append(f"{name} must be an integer in 1..5")
        if not 0.0 <= self.bias_strength <= 1.0:
            out.append("bias_strength must lie in [0, 1]")
        return out


@dataclass(frozen=True)
class BankProfile:
    name: str = ""
    profile: BehavioralProfile = field(default_factory=BehavioralProfile)
    background: str = ""

    def to_record(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "profile": {f.name: getattr(self.profile, f.name) for f in fields(self.profile)},
            "background": self.background,
        }

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> BankProfile:
        prof = rec.get("profile") or {}
        return cls(
            name=str(rec.get("name", "")),
            profile=BehavioralProfile(
                skepticism=int(prof.get("skepticism", 3)),
                literalism=int(prof.get("literalism", 3)),
                empathy=int(prof.get("empathy", 3)),
                bias_strength=float(prof.get("bias_strength", 0.5)),
            ),
            background=str(rec.get("background", "")),
        )


@dataclass(frozen=True)
class Entity:
    id: str
    canonical_name: str
    kind: EntityKind
    mention_count: int
    last_mentioned: datetime

    def to_record(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "canonical_name": self.canonical_name,
            "kind": self.kind.value,
            "mention_count": self.mention_count,
            "last_mentioned": iso(self.last_mentioned),
        }

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> Entity:
        return cls(
            id=str(rec["id"]),
            canonical_name=str(rec["canonical_name"]),
            kind=EntityKind(rec["kind"]),
            mention_count=int(rec["mention_count"]),
            last_mentioned=as_utc(rec["last_mentioned"]),
        )


@dataclass(frozen=True)
class Edge:
    source: str
    target: str
    weight: float
    kind: LinkKind
    causal_subtype: CausalKind | None = None
    entity_id: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LinkKind(self.kind))
        if self.causal_subtype is not None:
            object.__setattr__(self, "causal_subtype", CausalKind(self.causal_subtype))
        if not 0.0 <= self.weight <= 1.0:
            raise PreconditionError(f"edge weight {self.weight} outside [0, 1]")
        if (self.kind is LinkKind.CAUSAL) != (self.causal_subtype is not None):
            raise PreconditionError("causal_subtype is required exactly for causal edges")
        if (self.kind is LinkKind.ENTITY) != (self.entity_id is not None):
            raise PreconditionError("entity_id is required exactly for entity edges")

    @property
    def key(self) -> tuple[str, str, LinkKind]:
        return (self.source, self.target, self.kind)

    def to_record(self) -> dict[str, Any]:
        return {
            "source": self.source,
            "target": self.target,
            "weight": self.weight,
            "kind": self.kind.value,
            "causal_subtype": self.causal_subtype.value if self.causal_subtype else None,
            "entity_id": self.entity_id,
        }

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> Edge:
        sub = rec.get("causal_subtype")
        return cls(
            source=str(rec["source"]),
            target=str(rec["target"]),
            weight=float(rec["weight"]),
            kind=LinkKind(rec["kind"]),
            causal_subtype=CausalKind(sub) if sub else None,
            entity_id=rec.get("entity_id"),
        )


@dataclass(frozen=True)
class Opinion:
    """A belief; a view over an opinion-network :class:`MemoryUnit`."""

    id: str
    text: str
    confidence: float
    formed_at: datetime
    bank_id: str
    entities: frozenset[str] = frozenset()

    @classmethod
    def from_unit(cls, unit: MemoryUnit) -> Opinion:
        if unit.network is not Network.OPINION or unit.confidence is None:
            raise PreconditionError(f"unit {unit.id} is not an opinion")
        return cls(
            id=unit.id,
            text=unit.text,
            confidence=unit.confidence,
            formed_at=unit.mentioned_at,
            bank_id=unit.bank_id,
            entities=frozenset(unit.entities),
        )

    def to_record(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "confidence": self.confidence,
            "formed_at": iso(self.formed_at),
            "bank_id": self.bank_id,
            "entities": sorted(self.entities),
        }


_DEFAULT_MULTIPLIERS = {
    LinkKind.CAUSAL: 1.5,
    LinkKind.ENTITY: 1.3,
    LinkKind.TEMPORAL: 1.0,
    LinkKind.SEMANTIC: 0.9,
}

ALL_CHANNELS = ("semantic", "keyword", "graph", "temporal")


@dataclass(frozen=True)
class EngineConfig:
    """Engine tunables. Durations are in seconds."""

    embedding_dim: int = 256
    sigma_t: float = 7 * DAY
    theta_s: float = 0.80
    activation_decay: float = 0.7
    link_multipliers: Mapping[LinkKind, float] = field(
        default_factory=lambda: dict(_DEFAULT_MULTIPLIERS)
    )
    rrf_k: int = 60
    opinion_alpha: float = 0.1
    opinion_theta: float = 0.75
    entity_weights: tuple[float, float, float] = (0.6, 0.25, 0.15)
    entity_threshold: float = 0.55
    channel_pool_size: int = 50
    max_hops: int = 2
    background_max_len: int = 500

    graph_entry_points: int = 10
    temporal_window_sigmas: float = 3.0
    temporal_link_networks: tuple[Network, ...] = (
        Network.WORLD,
        Network.EXPERIENCE,
        Network.OBSERVATION,
    )
    rerank_window: int = 50
    reflect_budget: int = 2048
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    bm25_stopwords: bool = False
    channels: tuple[str, ...] = ALL_CHANNELS
    default_opinion_confidence: float = 0.6
    max_observations: int = 7
    observation_mode: str = "background"
    provider: str = "mock"
    external_command: tuple[str, ...] = ()
    provider_retries: int = 2
    provider_timeout: float = 30.0
    # Accepted and echoed, not enforced.
    latency_budget_ms: float | None = None

    def __post_init__(self) -> None:
        # Accept plain-string keys so configs loaded from JSON work unchanged.
        try:
            mult = {LinkKind(k): float(v) for k, v in dict(self.link_multipliers).items()}
            object.__setattr__(self, "link_multipliers", mult)
            object.__setattr__(self, "entity_weights", tuple(float(w) for w in self.entity_weights))
            object.__setattr__(
                self, "temporal_link_networks", tuple(Network(n) for n in self.temporal_link_networks)
            )
            object.__setattr__(self, "channels", tuple(self.channels))
            object.__setattr__(self, "external_command", tuple(self.external_command))
        except (TypeError, ValueError) as exc:
            raise ConfigError("invalid engine config", [str(exc)]) from exc
        problems = self.violations()
        if problems:
            raise ConfigError("invalid engine config", problems)

    def violations(self) -> list[str]:
        out: list[str] = []
        if self.embedding_dim < 1:
            out.append("embedding_dim must be >= 1")
        if not self.sigma_t > 0:
            out.append("sigma_t must be > 0")
        if not 0.0 < self.theta_s < 1.0:
            out.append("theta_s must lie in (0, 1)")
        if not 0.0 < self.activation_decay < 1.0:
            out.append("activation_decay must lie in (0, 1)")
        missing = set(LinkKind) - set(self.link_multipliers)
        if missing:
            out.append(f"link_multipliers missing {sorted(k.value for k in missing)}")
        if any(not v > 0 for v in self.link_multipliers.values()):
            out.append("link_multipliers must be > 0")
        if self.rrf_k < 1:
            out.append("rrf_k must be >= 1")
        if not 0.0 < self.opinion_alpha < 1.0:
            out.append("opinion_alpha must lie in (0, 1)")
        if not 0.0 < self.opinion_theta < 1.0:
            out.append("opinion_theta must lie in (0, 1)")
        if len(self.entity_weights) != 3 or any(w < 0 for w in self.entity_weights):
            out.append("entity_weights must be three non-negative reals")
        elif abs(sum(self.entity_weights) - 1.0) > 1e-9:
            out.append("entity_weights must sum to 1")
        if self.channel_pool_size < 1:
            out.append("channel_pool_size must be >= 1")
        if self.max_hops < 1:
            out.append("max_hops must be >= 1")
        if self.background_max_len < 1:
            out.append("background_max_len must be >= 1")
        if self.graph_entry_points < 1:
            out.append("graph_entry_points must be >= 1")
        if self.rerank_window < 0:
            out.append("rerank_window must be >= 0")
        unknown = set(self.channels) - set(ALL_CHANNELS)
        if unknown:
            out.append(f"unknown channels {sorted(unknown)}")
        if not 0.0 <= self.default_opinion_confidence <= 1.0:
            out.append("default_opinion_confidence must lie in [0, 1]")
        if self.observation_mode not in ("background", "inline", "off"):
            out.append("observation_mode must be background, inline or off")
        if self.provider not in ("mock", "external"):
            out.append("provider must be mock or external")
        if self.provider_retries < 0:
            out.append("provider_retries must be >= 0")
        return out

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "link_multipliers":
                value = {k.value: v for k, v in value.items()}
            elif f.name == "temporal_link_networks":
                value = [n.value for n in value]
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EngineConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError("unknown config keys", [f"unknown key {k!r}" for k in unknown])
        return cls(**dict(data))

    def with_overrides(self, **overrides: Any) -> EngineConfig:
        merged = self.to_dict()
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return EngineConfig.from_dict(merged)


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


def validate_unit(unit: MemoryUnit, config: EngineConfig) -> list[str]:
    """Return the invariants ``unit`` violates; an empty list means valid."""
    problems: list[str] = []
    if not isinstance(unit.network, Network):
        problems.append(f"unknown network {unit.network!r}")
    if not unit.id:
        problems.append("empty id")
    if not unit.text or not unit.text.strip():
        problems.append("empty text")
    for name in ("occurred_start", "occurred_end", "mentioned_at"):
        value = getattr(unit, name)
        if not isinstance(value, datetime) or value.tzinfo is None:
            problems.append(f"{name} must be a timezone-aware datetime")
    try:
        if unit.occurred_start > unit.occurred_end:
            problems.append("occurred_start after occurred_end")
    except TypeError:
        pass
    if unit.network is Network.OPINION:
        if unit.confidence is None:
            problems.append("opinion without confidence")
    elif unit.confidence is not None:
        problems.append("confidence on non-opinion")
    if unit.confidence is not None and not 0.0 <= unit.confidence <= 1.0:
        problems.append("confidence outside [0, 1]")
    if len(unit.embedding) != config.embedding_dim:
        problems.append(
            f"embedding dimension {len(unit.embedding)} != configured {config.embedding_dim}"
        )
    elif not all(math.isfinite(x) for x in unit.embedding):
        problems.append("non-finite embedding component")
    return problems


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


__all__ = [
    "ALL_CHANNELS",
    "BankProfile",
    "BehavioralProfile",
    "CausalKind",
    "DAY",
    "Edge",
    "EngineConfig",
    "Entity",
    "EntityKind",
    "LinkKind",
    "MemoryUnit",
    "Network",
    "Opinion",
    "UTC",
    "as_utc",
    "cosine",
    "format_when",
    "interval_overlaps",
    "iso",
    "midpoint",
    "to_ts",
    "utcnow",
    "validate_unit",
]
