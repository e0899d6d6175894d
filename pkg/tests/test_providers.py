from __future__ import annotations

import hashlib
import math
import threading
import time
from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import T0, suite, turns
from membank.errors import PreconditionError, ProviderError, RejectedFactError
from membank.model import EntityKind
from membank.providers import (
    ExtractedFact,
    MockReranker,
    OpinionCandidate,
    Turn,
    mock_assess,
    mock_embed,
    mock_entities,
    mock_extract,
    mock_merge,
    validate_fact_batch,
)
from oracles import cosine, trigram_counts


def _turns(*texts: str) -> list[Turn]:
    return [Turn.from_record(t) for t in turns(*texts)]


def _reference_embed(text: str, dim: int) -> list[float]:
    vec = [0.0] * dim
    for gram, count in trigram_counts(text).items():
        h = int.from_bytes(hashlib.blake2b(gram.encode(), digest_size=8).digest(), "little")
        vec[h % dim] += count * (1.0 if (h >> 32) & 1 else -1.0)
    norm = math.sqrt(sum(x * x for x in vec))
    if norm == 0.0:
        return [1.0] + [0.0] * (dim - 1)
    return [x / norm for x in vec]


def test_mock_embed_is_deterministic_and_unit_norm():
    a = mock_embed("Alice went hiking", 128)
    assert a == mock_embed("Alice went hiking", 128)
    assert math.sqrt(sum(x * x for x in a)) == pytest.approx(1.0, abs=1e-9)
    assert cosine(a, a) == pytest.approx(1.0, abs=1e-12)


@given(st.text(min_size=1, max_size=40).filter(lambda s: s.strip()))
@settings(max_examples=60)
def test_mock_embed_follows_documented_trigram_scheme(text):
    assert mock_embed(text, 64) == pytest.approx(_reference_embed(text, 64), abs=1e-12)


def test_mock_embed_overlap_ordering():
    ab = mock_embed("alpha beta")
    assert cosine(ab, mock_embed("alpha beta gamma")) > cosine(ab, mock_embed("unrelated zzz"))


def test_mock_embed_rejects_empty_text():
    with pytest.raises(PreconditionError):
        mock_embed("   ")


def test_mock_extract_ten_turns_gives_two_to_five_facts():
    facts = mock_extract(_turns(*[f"turn number {i}" for i in range(10)]))
    assert 2 <= len(facts) <= 5


@given(st.integers(2, 40))
def test_mock_extract_fact_count_bounds(n):
    facts = mock_extract(_turns(*[f"t{i}" for i in range(n)]))
    assert 2 <= len(facts) <= 5


def test_mock_extract_copies_turn_times():
    ts = _turns("one", "two", "three", "four")
    facts = mock_extract(ts)
    assert facts[0].occurred_start == ts[0].timestamp
    assert facts[-1].occurred_end == ts[-1].timestamp
    assert facts[0].when == "Saturday, June 1, 2024"


def test_mock_extract_lowercase_transcript_has_no_entities():
    facts = mock_extract(_turns("we went for a walk", "it was nice"))
    assert all(f.entities == [] for f in facts)


def test_mock_extract_deduplicates_mentions():
    facts = mock_extract(_turns("Alice called. Later Alice emailed."))
    assert [e.text for e in facts[0].entities] == ["Alice"]


def test_mock_extract_classifies_self_speech_as_experience():
    ts = [Turn("assistant", "I booked the flight", T0), Turn("user", "Thanks Bob", T0 + timedelta(minutes=1))]
    assert [f.fact_type for f in mock_extract(ts)] == ["experience", "world"]


def test_mock_extract_empty_transcript_errors():
    with pytest.raises(PreconditionError):
        mock_extract([])


def test_mock_entities_strip_function_words():
    names = [m.text for m in mock_entities("On Monday, The Louvre hosted Alice Chen's talk in Paris.")]
    assert names == ["Louvre", "Alice Chen", "Paris"]


@pytest.mark.parametrize(
    "fact,label",
    [
        ("supports: X shipped on time", "reinforce"),
        ("refutes: X failed audit", "contradict"),
        ("doubts: X may slip", "weaken"),
        ("weather is mild", "neutral"),
    ],
)
def test_mock_assess_rule(fact, label):
    assert mock_assess("X is good", fact) == label


def test_mock_reranker_scores_token_overlap():
    r = MockReranker()
    assert r.score("alice paris", "[Monday] Alice moved to Paris") == 1.0
    assert r.score("alice paris", "Bob stayed") == 0.0
    assert r.score("alice paris", "alice") == 0.5


def test_mock_merge_replaces_conflicting_sentence():
    out = mock_merge(
        "I was born in Colorado.", "I was born in Texas and have 10 years of startup experience.", 500
    )
    assert out == "I was born in Texas and have 10 years of startup experience."


def test_mock_merge_appends_and_truncates():
    assert mock_merge("", "I am a pianist.", 500) == "I am a pianist."
    out = mock_merge("I like tea.", "My dog is Rex.", 20)
    assert out == "I like tea. My dog i"


def test_schema_gate_rejects_bad_facts():
    good = {"what": "x", "fact_type": "world"}
    with pytest.raises(RejectedFactError) as err:
        validate_fact_batch([good, {"what": " ", "fact_type": "world"}])
    assert err.value.violations
    with pytest.raises(RejectedFactError):
        validate_fact_batch([{"what": "x", "fact_type": "observation"}])
    with pytest.raises(RejectedFactError):
        validate_fact_batch(
            [{**good, "causal_relations": [{"target_fact_index": 3, "relation_type": "causes", "strength": 0.5}]}]
        )
    with pytest.raises(RejectedFactError):
        validate_fact_batch(
            [{**good, "causal_relations": [{"target_fact_index": 0, "relation_type": "causes", "strength": 1.5}]}]
        )
    with pytest.raises(RejectedFactError):
        validate_fact_batch([{**good, "occurred_start": "2024-06-02T00:00:00Z", "occurred_end": "2024-06-01T00:00:00Z"}])
    facts = validate_fact_batch([{**good, "entities": None}])
    assert facts == [ExtractedFact(what="x", fact_type="world")]


def test_opinion_candidate_schema():
    c = OpinionCandidate.model_validate({"text": "I like it", "confidence": 0.8})
    assert c.opinion == "I like it"
    with pytest.raises(ValueError):
        OpinionCandidate.model_validate({"opinion": "I like it", "confidence": 1.3})


class Flaky:
    dim = 64

    def __init__(self, failures: int) -> None:
        self.failures = failures
        self.calls = 0

    def embed(self, text: str) -> list[float]:
        self.calls += 1
        if self.calls <= self.failures:
            raise RuntimeError("transient")
        return mock_embed(text, 64)


def test_provider_retries_then_succeeds():
    flaky = Flaky(2)
    prov = suite(embedder=flaky, retries=2)
    assert len(prov.embed("hello")) == 64
    assert flaky.calls == 3


def test_provider_failure_after_retries_raises():
    prov = suite(embedder=Flaky(10), retries=1)
    with pytest.raises(ProviderError):
        prov.embed("hello")


def test_provider_output_validation():
    class Wrong:
        dim = 64

        def embed(self, text):
            return [1.0, 2.0]

    with pytest.raises(ProviderError):
        suite(embedder=Wrong()).embed("x")

    class BadLabel:
        def assess(self, o, f):
            return "maybe"

    with pytest.raises(ProviderError):
        suite(assessor=BadLabel()).assess("a", "b")


def test_provider_timeout():
    class Slow:
        dim = 64

        def embed(self, text):
            time.sleep(0.5)
            return mock_embed(text, 64)

    with pytest.raises(ProviderError):
        suite(embedder=Slow(), timeout=0.05).embed("x")


def test_single_flight_providers_are_serialized():
    class Exclusive:
        dim = 64
        single_flight = True

        def __init__(self):
            self.active = 0
            self.peak = 0
            self.lock = threading.Lock()

        def embed(self, text):
            with self.lock:
                self.active += 1
                self.peak = max(self.peak, self.active)
            time.sleep(0.01)
            with self.lock:
                self.active -= 1
            return mock_embed(text, 64)

    ex = Exclusive()
    prov = suite(embedder=ex, timeout=5)
    threads = [threading.Thread(target=prov.embed, args=(f"t{i}",)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert ex.peak == 1


def test_turn_record_validation():
    with pytest.raises(PreconditionError):
        Turn.from_record({"speaker": "u", "text": "hi"})
    with pytest.raises(PreconditionError):
        Turn.from_record({"speaker": "u", "text": "", "timestamp": "2024-01-01"})
    assert Turn.from_record({"speaker": "u", "text": "hi", "timestamp": "2024-01-01T00:00:00Z"}).timestamp == T0.replace(
        month=1, day=1, hour=0
    )


def test_entity_kind_is_enumerated():
    assert {k.value for k in EntityKind} == {"PERSON", "ORGANIZATION", "LOCATION", "PRODUCT", "CONCEPT", "OTHER"}
