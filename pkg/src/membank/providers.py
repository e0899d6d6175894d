"""Provider interfaces for model-backed steps, their schemas, and offline mocks.

The engine talks to five providers: a fact extractor, an embedder, a
reranker, an opinion assessor and a synthesizer. Each is a structural
protocol; any object with the right methods works. Every provider output is
validated against a pydantic schema before the engine uses it, and
:meth:`ProviderSuite.call` wraps each call with a timeout, a retry budget
and optional single-flight serialization.

The mock implementations are pure functions of their inputs so the full
test-suite runs offline and deterministically.
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Callable, Literal, Mapping, Protocol, Sequence, TypeVar, runtime_checkable

from pydantic import AliasChoices, BaseModel, Field, ValidationError, field_validator

from .errors import PreconditionError, ProviderError, RejectedFactError
from .model import CausalKind, EntityKind, as_utc, format_when
from .text import tokenize

log = logging.getLogger(__name__)

T = TypeVar("T")

Label = Literal["reinforce", "weaken", "contradict", "neutral"]
LABELS: tuple[str, ...] = ("reinforce", "weaken", "contradict", "neutral")


# --------------------------------------------------------------------------
# Schemas
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Turn:
    """One transcript turn."""

    speaker: str
    text: str
    timestamp: datetime

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> Turn:
        try:
            speaker, text, ts = rec["speaker"], rec["text"], rec["timestamp"]
        except (KeyError, TypeError) as exc:
            raise PreconditionError(
                "transcript turn needs speaker, text and timestamp", [f"missing {exc}"]
            ) from exc
        if not isinstance(speaker, str) or not isinstance(text, str) or not text.strip():
            raise PreconditionError("transcript turn needs string speaker and non-empty text")
        return cls(speaker=speaker, text=text, timestamp=as_utc(ts))


class EntityMention(BaseModel):
    text: str = Field(min_length=1)
    kind: EntityKind = EntityKind.OTHER


class CausalRelation(BaseModel):
    target_fact_index: int = Field(ge=0)
    relation_type: CausalKind
    strength: float = Field(ge=0.0, le=1.0)


class ExtractedFact(BaseModel):
    """One narrative fact as returned by an extractor."""

    what: str
    when: str = ""
    where: str = ""
    who: str = ""
    why: str = ""
    fact_type: Literal["world", "experience", "opinion"]
    occurred_start: datetime | None = None
    occurred_end: datetime | None = None
    mentioned_at: datetime | None = None
    entities: list[EntityMention] = Field(default_factory=list)
    causal_relations: list[CausalRelation] = Field(default_factory=list)

    @field_validator("what")
    @classmethod
    def _non_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("what must be non-empty")
        return value

    @field_validator("entities", "causal_relations", mode="before")
    @classmethod
    def _none_is_empty(cls, value: Any) -> Any:
        return [] if value is None else value


class OpinionCandidate(BaseModel):
    opinion: str = Field(min_length=1, validation_alias=AliasChoices("opinion", "text"))
    confidence: float | None = Field(default=None, ge=0.0, le=1.0)
    reasoning: str = ""


class ReflectResponse(BaseModel):
    """Synthesizer answer. ``opinions`` holds raw candidates, checked one by one."""

    answer: str
    opinions: list[dict[str, Any]] = Field(default_factory=list)


def validate_fact_batch(raw: Sequence[Any]) -> list[ExtractedFact]:
    """Validate an extractor's output as a whole batch.

    Raises:
        RejectedFactError: listing every violation; nothing is accepted.
    """
    facts: list[ExtractedFact] = []
    problems: list[str] = []
    for i, item in enumerate(raw):
        try:
            fact = item if isinstance(item, ExtractedFact) else ExtractedFact.model_validate(item)
        except ValidationError as exc:
            problems.extend(f"fact {i}: {err['loc']}: {err['msg']}" for err in exc.errors())
            continue
        facts.append(fact)
    for i, fact in enumerate(facts):
        for rel in fact.causal_relations:
            if rel.target_fact_index >= len(raw):
                problems.append(
                    f"fact {i}: causal target {rel.target_fact_index} outside batch of {len(raw)}"
                )
        if (
            fact.occurred_start is not None
            and fact.occurred_end is not None
            and as_utc(fact.occurred_start) > as_utc(fact.occurred_end)
        ):
            problems.append(f"fact {i}: occurred_start after occurred_end")
    if problems:
        raise RejectedFactError("extractor output rejected", problems)
    return facts


# --------------------------------------------------------------------------
# Protocols
# --------------------------------------------------------------------------


@runtime_checkable
class FactExtractor(Protocol):
    def extract(self, turns: Sequence[Turn]) -> list[ExtractedFact]: ...

    def extract_entities(self, text: str) -> list[EntityMention]: ...


@runtime_checkable
class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> list[float]: ...


@runtime_checkable
class Reranker(Protocol):
    def score(self, query: str, candidate: str) -> float: ...


@runtime_checkable
class Assessor(Protocol):
    def assess(self, opinion_text: str, fact_text: str) -> str: ...


@runtime_checkable
class Synthesizer(Protocol):
    def summarize_entity(self, name: str, facts: Sequence[str]) -> list[str]: ...

    def merge_background(self, current: str, snippet: str, max_len: int) -> str: ...

    def respond(self, system_message: str, memories: Sequence[str], query: str) -> ReflectResponse: ...

    def revise_opinion(self, opinion_text: str, fact_text: str) -> str: ...


class TemporalFallback(Protocol):
    def resolve(self, text: str, now: datetime) -> tuple[datetime, datetime] | None: ...


# --------------------------------------------------------------------------
# Call wrapper
# --------------------------------------------------------------------------

_POOL = ThreadPoolExecutor(max_workers=16, thread_name_prefix="membank-provider")


@dataclass
class ProviderSuite:
    """The set of providers one engine uses.

    Providers that set ``single_flight = True`` are never invoked
    concurrently; the suite serializes them behind a per-provider lock.
    """

    extractor: FactExtractor
    embedder: Embedder
    reranker: Reranker
    assessor: Assessor
    synthesizer: Synthesizer
    temporal_fallback: TemporalFallback | None = None
    retries: int = 2
    timeout: float | None = 30.0
    _locks: dict[int, threading.Lock] = field(default_factory=dict, repr=False)
    _locks_guard: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def _lock_for(self, provider: object) -> threading.Lock | None:
        if not getattr(provider, "single_flight", False):
            return None
        with self._locks_guard:
            return self._locks.setdefault(id(provider), threading.Lock())

    def call(
        self,
        provider: object,
        method: str,
        *args: Any,
        validate: Callable[[Any], T] | None = None,
    ) -> T:
        """Invoke ``provider.method(*args)`` with timeout, retries and validation.

        A call that raises, times out, or whose output fails ``validate`` is
        retried up to ``retries`` more times.

        Raises:
            ProviderError: once every attempt has failed.
        """
        fn = getattr(provider, method)
        lock = self._lock_for(provider)
        last: BaseException | None = None
        for attempt in range(self.retries + 1):
            try:
                if lock is not None:
                    with lock:
                        out = self._run(fn, args)
                else:
                    out = self._run(fn, args)
                return validate(out) if validate is not None else out
            except (ProviderError, RejectedFactError, ValidationError, PreconditionError) as exc:
                last = exc
            except Exception as exc:  # provider code is untrusted
                last = exc
            log.warning("provider %s.%s attempt %d failed: %s", type(provider).__name__, method, attempt + 1, last)
        if isinstance(last, RejectedFactError):
            raise last
        raise ProviderError(f"{type(provider).__name__}.{method} failed after {self.retries + 1} attempts: {last}")

    def _run(self, fn: Callable[..., Any], args: tuple[Any, ...]) -> Any:
        if self.timeout is None:
            return fn(*args)
        future = _POOL.submit(fn, *args)
        try:
            return future.result(timeout=self.timeout)
        except FutureTimeout as exc:
            future.cancel()
            raise ProviderError(f"provider call timed out after {self.timeout}s") from exc

    # Typed conveniences -------------------------------------------------

    def extract(self, turns: Sequence[Turn]) -> list[ExtractedFact]:
        return self.call(self.extractor, "extract", list(turns), validate=validate_fact_batch)

    def extract_entities(self, text: str) -> list[EntityMention]:
        return self.call(
            self.extractor,
            "extract_entities",
            text,
            validate=lambda out: [
                m if isinstance(m, EntityMention) else EntityMention.model_validate(m) for m in out
            ],
        )

    def embed(self, text: str) -> tuple[float, ...]:
        dim = self.embedder.dim

        def check(vec: Any) -> tuple[float, ...]:
            out = tuple(float(x) for x in vec)
            if len(out) != dim or not all(math.isfinite(x) for x in out):
                raise ProviderError(f"embedding has wrong dimension or non-finite values ({len(out)} != {dim})")
            return out

        return self.call(self.embedder, "embed", text, validate=check)

    def rerank_score(self, query: str, candidate: str) -> float:
        def check(value: Any) -> float:
            out = float(value)
            if not math.isfinite(out):
                raise ProviderError("non-finite rerank score")
            return out

        return self.call(self.reranker, "score", query, candidate, validate=check)

    def assess(self, opinion_text: str, fact_text: str) -> str:
        def check(value: Any) -> str:
            if value not in LABELS:
                raise ProviderError(f"unknown assessment label {value!r}")
            return str(value)

        return self.call(self.assessor, "assess", opinion_text, fact_text, validate=check)

    def summarize_entity(self, name: str, facts: Sequence[str]) -> list[str]:
        def check(value: Any) -> list[str]:
            out = [str(v).strip() for v in value]
            if any(not v for v in out):
                raise ProviderError("empty observation text")
            return out

        return self.call(self.synthesizer, "summarize_entity", name, list(facts), validate=check)

    def merge_background(self, current: str, snippet: str, max_len: int) -> str:
        return self.call(self.synthesizer, "merge_background", current, snippet, max_len, validate=str)

    def respond(self, system_message: str, memories: Sequence[str], query: str) -> ReflectResponse:
        return self.call(
            self.synthesizer,
            "respond",
            system_message,
            list(memories),
            query,
            validate=lambda out: out if isinstance(out, ReflectResponse) else ReflectResponse.model_validate(out),
        )

    def revise_opinion(self, opinion_text: str, fact_text: str) -> str:
        return self.call(self.synthesizer, "revise_opinion", opinion_text, fact_text, validate=str)


# --------------------------------------------------------------------------
# Mocks
# --------------------------------------------------------------------------

DEFAULT_DIM = 256


def mock_embed(text: str, dim: int = DEFAULT_DIM) -> list[float]:
    """Hashed character-trigram embedding.

    The text is case-folded, whitespace-collapsed and padded with one space
    on each side. Every character trigram is hashed with BLAKE2b; the low
    bits pick a coordinate and bit 32 picks a sign. The count vector is then
    scaled to unit length.

    Raises:
        PreconditionError: on empty or whitespace-only text.
    """
    norm = " ".join(text.casefold().split())
    if not norm:
        raise PreconditionError("cannot embed empty text")
    padded = f" {norm} "
    vec = [0.0] * dim
    for i in range(len(padded) - 2):
        h = int.from_bytes(hashlib.blake2b(padded[i : i + 3].encode(), digest_size=8).digest(), "little")
        vec[h % dim] += 1.0 if (h >> 32) & 1 else -1.0
    norm2 = math.sqrt(sum(x * x for x in vec))
    if norm2 == 0.0:
        # Every trigram cancelled out; fall back to a fixed axis so the
        # vector still has unit length.
        vec[0] = 1.0
        return vec
    return [x / norm2 for x in vec]


class MockEmbedder:
    def __init__(self, dim: int = DEFAULT_DIM) -> None:
        self.dim = dim

    def embed(self, text: str) -> list[float]:
        return mock_embed(text, self.dim)


_CAP_RUN = re.compile(r"\b[A-Z][\w'&-]*(?:\s+[A-Z][\w'&-]*)*")

_ENTITY_STOP = frozenset(
    """i i'm i've i'd i'll a an the we you he she it they my our your his her their this that
    these those yes no ok okay hi hello hey thanks so and but or if then also what when where
    who why how yesterday today tomorrow tonight last next later earlier soon now then once still just
    well oh on in at of by for from to with about after before during since until as is was were are
    do did does have has had can could will would should let please sure great nice
    monday tuesday wednesday thursday friday saturday sunday
    january february march april may june july august september october november december""".split()
)


def mock_entities(text: str) -> list[EntityMention]:
    """Capitalized token runs, minus leading function words, deduplicated in order."""
    seen: dict[str, None] = {}
    for match in _CAP_RUN.finditer(text):
        words = match.group(0).split()
        while words and words[0].casefold().strip("'") in _ENTITY_STOP:
            words.pop(0)
        name = re.sub(r"'s$", "", " ".join(words)).strip("'-&")
        if name and name not in seen:
            seen[name] = None
    return [EntityMention(text=name) for name in seen]


def _chunk_count(n_turns: int) -> int:
    if n_turns < 2:
        return n_turns
    return min(5, max(2, math.ceil(n_turns / 2)))


def mock_extract(
    turns: Sequence[Turn], *, self_speakers: frozenset[str] = frozenset({"assistant", "agent", "me"})
) -> list[ExtractedFact]:
    """Rule-based extraction that groups consecutive turns into facts.

    ``n`` turns are split into ``min(5, max(2, ceil(n / 2)))`` contiguous
    chunks of near-equal size (a single turn yields one fact). Each chunk
    becomes one fact whose text is the ``speaker: text`` lines joined by
    spaces and whose occurrence interval spans the chunk's timestamps.
    Chunks spoken only by ``self_speakers`` are experience facts; the rest
    are world facts.

    Raises:
        PreconditionError: on an empty transcript.
    """
    if not turns:
        raise PreconditionError("transcript is empty")
    k = _chunk_count(len(turns))
    base, extra = divmod(len(turns), k)
    facts: list[ExtractedFact] = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        chunk = turns[start : start + size]
        start += size
        text = " ".join(f"{t.speaker}: {t.text.strip()}" for t in chunk)
        first = min(t.timestamp for t in chunk)
        last = max(t.timestamp for t in chunk)
        speakers = {t.speaker for t in chunk}
        fact_type = "experience" if {s.casefold() for s in speakers} <= self_speakers else "world"
        facts.append(
            ExtractedFact(
                what=text,
                when=format_when(first),
                who=", ".join(sorted(speakers)),
                fact_type=fact_type,
                occurred_start=first,
                occurred_end=last,
                mentioned_at=last,
                entities=mock_entities(" ".join(t.text for t in chunk)),
            )
        )
    return facts


class MockExtractor:
    def extract(self, turns: Sequence[Turn]) -> list[ExtractedFact]:
        return mock_extract(turns)

    def extract_entities(self, text: str) -> list[EntityMention]:
        return mock_entities(text)


class ScriptedExtractor:
    """Returns a fixed batch of facts regardless of input; for tests and demos."""

    def __init__(self, facts: Sequence[ExtractedFact | Mapping[str, Any]]) -> None:
        self.facts = list(facts)

    def extract(self, turns: Sequence[Turn]) -> list[Any]:
        return list(self.facts)

    def extract_entities(self, text: str) -> list[EntityMention]:
        return mock_entities(text)


def mock_assess(opinion_text: str, fact_text: str) -> str:
    """Keyword rule: ``supports:`` reinforces, ``refutes:`` contradicts, ``doubts:`` weakens."""
    lowered = fact_text.casefold()
    if "refutes:" in lowered:
        return "contradict"
    if "doubts:" in lowered:
        return "weaken"
    if "supports:" in lowered:
        return "reinforce"
    return "neutral"


class MockAssessor:
    def assess(self, opinion_text: str, fact_text: str) -> str:
        return mock_assess(opinion_text, fact_text)


class MockReranker:
    """Score = share of distinct query tokens present in the candidate."""

    def score(self, query: str, candidate: str) -> float:
        q = set(tokenize(query))
        if not q:
            return 0.0
        return len(q & set(tokenize(candidate))) / len(q)


_SENTENCE_RE = re.compile(r"[^.!?]+[.!?]*")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_RE.findall(text) if s.strip()]


def mock_merge(current: str, snippet: str, max_len: int) -> str:
    """Sentence-level merge; a new sentence whose first three tokens match an
    old one replaces it, any other new sentence is appended. The result is
    cut to ``max_len`` characters."""
    merged = split_sentences(current)
    for sentence in split_sentences(snippet):
        key = tokenize(sentence)[:3]
        for i, old in enumerate(merged):
            if tokenize(old)[:3] == key:
                merged[i] = sentence
                break
        else:
            merged.append(sentence)
    return " ".join(merged)[:max_len].rstrip()


class MockSynthesizer:
    """Deterministic synthesizer.

    Args:
        opinions: candidate opinions returned by every :meth:`respond` call
            that has at least one memory to work with.
        max_observations: cap on observations per entity.
    """

    def __init__(self, opinions: Sequence[Mapping[str, Any]] = (), max_observations: int = 7) -> None:
        self.opinions = [dict(o) for o in opinions]
        self.max_observations = max_observations

    def summarize_entity(self, name: str, facts: Sequence[str]) -> list[str]:
        return [f"Observation about {name}: {fact}" for fact in list(facts)[: self.max_observations]]

    def merge_background(self, current: str, snippet: str, max_len: int) -> str:
        return mock_merge(current, snippet, max_len)

    def respond(self, system_message: str, memories: Sequence[str], query: str) -> ReflectResponse:
        if not memories:
            return ReflectResponse(answer="I don't have enough information to answer that.")
        answer = f"Drawing on {len(memories)} memories: {memories[0]}"
        return ReflectResponse(answer=answer, opinions=[dict(o) for o in self.opinions])

    def revise_opinion(self, opinion_text: str, fact_text: str) -> str:
        return f"I have reconsidered my view ({opinion_text.strip()}) in light of: {fact_text.strip()}"


def mock_suite(
    *,
    dim: int = DEFAULT_DIM,
    opinions: Sequence[Mapping[str, Any]] = (),
    retries: int = 2,
    timeout: float | None = 30.0,
) -> ProviderSuite:
    return ProviderSuite(
        extractor=MockExtractor(),
        embedder=MockEmbedder(dim),
        reranker=MockReranker(),
        assessor=MockAssessor(),
        synthesizer=MockSynthesizer(opinions),
        retries=retries,
        timeout=timeout,
    )
