from __future__ import annotations

from dataclasses import replace
from datetime import datetime, timedelta

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import T0, unit
from membank.errors import ConfigError, PreconditionError
from membank.model import (
    UTC,
    BankProfile,
    BehavioralProfile,
    Edge,
    EngineConfig,
    Entity,
    EntityKind,
    LinkKind,
    MemoryUnit,
    Network,
    Opinion,
    as_utc,
    format_when,
    interval_overlaps,
    iso,
    validate_unit,
)
from oracles import overlaps_by_points


def test_boundary_touch_counts_as_overlap():
    assert interval_overlaps(1, 5, 5, 9)


def test_disjoint_intervals_do_not_overlap():
    assert not interval_overlaps(1, 2, 3, 4)


def test_inverted_interval_is_rejected():
    with pytest.raises(PreconditionError):
        interval_overlaps(5, 1, 0, 9)
    with pytest.raises(ValueError):
        interval_overlaps(0, 9, 5, 1)


def test_interval_overlap_on_datetimes():
    assert interval_overlaps(T0, T0, T0, T0 + timedelta(days=1))
    assert not interval_overlaps(T0, T0, T0 + timedelta(seconds=1), T0 + timedelta(days=1))


@given(
    st.integers(-20, 20), st.integers(0, 10), st.integers(-20, 20), st.integers(0, 10)
)
def test_interval_overlap_matches_point_sampling(a0, alen, b0, blen):
    a, b = (a0, a0 + alen), (b0, b0 + blen)
    assert interval_overlaps(*a, *b) == overlaps_by_points(a, b)


def test_valid_world_fact_has_no_violations(cfg):
    assert validate_unit(unit("u1", "Alice moved to Paris"), cfg) == []


def test_confidence_on_world_unit_is_flagged(cfg):
    u = replace(unit("u1", "Alice moved to Paris"), confidence=0.5)
    assert "confidence on non-opinion" in validate_unit(u, cfg)


def test_inverted_occurrence_interval_is_flagged(cfg):
    u = unit("u1", "x", start=T0, end=T0 - timedelta(hours=1))
    assert "occurred_start after occurred_end" in validate_unit(u, cfg)


def test_opinion_needs_confidence_in_range(cfg):
    u = unit("u1", "I think so", network=Network.OPINION)
    assert "opinion without confidence" in validate_unit(u, cfg)
    u = replace(u, confidence=1.5)
    assert "confidence outside [0, 1]" in validate_unit(u, cfg)
    assert validate_unit(replace(u, confidence=1.0), cfg) == []


def test_embedding_dimension_must_match(cfg):
    u = unit("u1", "x", embedding=[1.0, 0.0])
    assert any("embedding dimension" in p for p in validate_unit(u, cfg))
    u = unit("u1", "x", embedding=[float("nan")] * cfg.embedding_dim)
    assert "non-finite embedding component" in validate_unit(u, cfg)


def test_unit_record_round_trip():
    u = unit("u1", "Alice met Bob", entities=["e-000001"], network=Network.OPINION, confidence=0.25)
    assert MemoryUnit.from_record(u.to_record()) == u


def test_edge_invariants():
    with pytest.raises(PreconditionError):
        Edge("a", "b", 1.2, LinkKind.TEMPORAL)
    with pytest.raises(PreconditionError):
        Edge("a", "b", 1.0, LinkKind.CAUSAL)
    with pytest.raises(PreconditionError):
        Edge("a", "b", 1.0, LinkKind.ENTITY)
    with pytest.raises(PreconditionError):
        Edge("a", "b", 1.0, LinkKind.TEMPORAL, entity_id="e")
    e = Edge("a", "b", 1.0, "causal", causal_subtype="enables")
    assert e.kind is LinkKind.CAUSAL and Edge.from_record(e.to_record()) == e


def test_entity_and_profile_records_round_trip():
    ent = Entity("e-1", "Alice", EntityKind.PERSON, 3, T0)
    assert Entity.from_record(ent.to_record()) == ent
    prof = BankProfile("Ava", BehavioralProfile(1, 2, 5, 0.2), "I am a pianist.")
    assert BankProfile.from_record(prof.to_record()) == prof


def test_behavioral_profile_bounds():
    assert BehavioralProfile().violations() == []
    assert len(BehavioralProfile(0, 6, 3, 1.5).violations()) == 3


def test_opinion_view_of_unit():
    u = unit("u1", "I think tea is better", network=Network.OPINION, confidence=0.7, entities=["e-2"])
    op = Opinion.from_unit(u)
    assert (op.confidence, op.formed_at, op.entities) == (0.7, u.mentioned_at, frozenset({"e-2"}))
    with pytest.raises(PreconditionError):
        Opinion.from_unit(unit("u2", "fact"))


def test_config_defaults():
    c = EngineConfig()
    assert c.sigma_t == 7 * 86400
    assert (c.theta_s, c.activation_decay, c.rrf_k, c.opinion_alpha, c.opinion_theta) == (0.8, 0.7, 60, 0.1, 0.75)
    assert c.link_multipliers == {
        LinkKind.CAUSAL: 1.5,
        LinkKind.ENTITY: 1.3,
        LinkKind.TEMPORAL: 1.0,
        LinkKind.SEMANTIC: 0.9,
    }
    assert (c.channel_pool_size, c.max_hops, c.background_max_len) == (50, 2, 500)
    assert c.entity_weights == (0.6, 0.25, 0.15)


@pytest.mark.parametrize(
    "override",
    [
        {"theta_s": 1.0},
        {"activation_decay": 0.0},
        {"rrf_k": 0},
        {"opinion_alpha": 1.0},
        {"entity_weights": (0.5, 0.5, 0.5)},
        {"link_multipliers": {"causal": 1.5}},
        {"sigma_t": 0},
        {"channels": ("semantic", "psychic")},
        {"link_multipliers": {"bogus": 1.0}},
    ],
)
def test_config_rejects_out_of_range_values(override):
    with pytest.raises(ConfigError):
        EngineConfig(**override)


def test_config_dict_round_trip_and_overrides():
    c = EngineConfig(theta_s=0.5)
    assert EngineConfig.from_dict(c.to_dict()) == c
    assert c.with_overrides(rrf_k=10, max_hops=None).rrf_k == 10
    with pytest.raises(ConfigError):
        EngineConfig.from_dict({"nonsense": 1})


def test_time_helpers():
    assert as_utc("2024-06-09T10:00:00Z") == datetime(2024, 6, 9, 10, tzinfo=UTC)
    assert as_utc(0) == datetime(1970, 1, 1, tzinfo=UTC)
    assert iso(datetime(2024, 6, 9, 10, 0, 0, 999, tzinfo=UTC)) == "2024-06-09T10:00:00Z"
    assert format_when(datetime(2024, 6, 9, tzinfo=UTC)) == "Sunday, June 9, 2024"
    with pytest.raises(PreconditionError):
        as_utc("not a date")
