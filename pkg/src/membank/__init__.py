"""Agent memory engine with four memory networks and budgeted recall.

The three core operations are :func:`retain`, :func:`recall` and
:func:`reflect`. They act on a :class:`MemoryBank` and reach model-backed
steps through a :class:`ProviderSuite`; :func:`mock_suite` supplies
deterministic offline providers.
"""

from __future__ import annotations

from .engine import CommandEnvelope, Engine
from .errors import (
    ConfigError,
    MemoryEngineError,
    MemoryValidationError,
    NotFoundError,
    PreconditionError,
    ProviderError,
    RejectedFactError,
    RetainFailedError,
    SnapshotError,
    StorageError,
    UnsupportedVersionError,
)
from .model import (
    BankProfile,
    BehavioralProfile,
    CausalKind,
    Edge,
    EngineConfig,
    Entity,
    EntityKind,
    LinkKind,
    MemoryUnit,
    Network,
    Opinion,
    interval_overlaps,
    validate_unit,
)
from .providers import ProviderSuite, Turn, mock_suite
from .recall import RecallResult, recall
from .reflect import ReflectResult, reflect, verbalize_profile
from .retain import RetainReceipt, retain
from .store import MemoryBank, load_snapshot, save_snapshot

__version__ = "0.1.0"

__all__ = [
    "BankProfile",
    "BehavioralProfile",
    "CausalKind",
    "CommandEnvelope",
    "ConfigError",
    "Edge",
    "Engine",
    "EngineConfig",
    "Entity",
    "EntityKind",
    "LinkKind",
    "MemoryBank",
    "MemoryEngineError",
    "MemoryUnit",
    "MemoryValidationError",
    "Network",
    "NotFoundError",
    "Opinion",
    "PreconditionError",
    "ProviderError",
    "ProviderSuite",
    "RecallResult",
    "ReflectResult",
    "RejectedFactError",
    "RetainFailedError",
    "RetainReceipt",
    "SnapshotError",
    "StorageError",
    "Turn",
    "UnsupportedVersionError",
    "interval_overlaps",
    "load_snapshot",
    "mock_suite",
    "recall",
    "reflect",
    "retain",
    "save_snapshot",
    "validate_unit",
    "verbalize_profile",
]
