"""Shared dispatch layer behind the CLI and the HTTP facade.

Both front ends build a :class:`CommandEnvelope` and hand it to
:meth:`Engine.dispatch`, which validates the verb-specific payload, applies
config overrides and returns a JSON-ready dict. Identical envelopes
therefore produce identical engine-level results through either surface.
"""

from __future__ import annotations

import json
import os
import re
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError, MemoryValidationError, NotFoundError, PreconditionError
from .external import external_suite
from .model import BankProfile, BehavioralProfile, EngineConfig, Opinion
from .providers import ProviderSuite, Turn, mock_suite
from .recall import recall
from .reflect import reflect
from .retain import normalize_first_person, retain
from .store import MemoryBank, load_snapshot, save_snapshot
from .text import is_first_person

CONFIG_ENV = "MEMBANK_CONFIG"
DATA_DIR_ENV = "MEMBANK_DATA_DIR"

VERBS = ("create-bank", "configure", "retain", "recall", "reflect", "inspect", "export", "import")

_BANK_ID = re.compile(r"[A-Za-z0-9][A-Za-z0-9._-]{0,127}")


class _Payload(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CreateBankPayload(_Payload):
    name: str | None = None
    skepticism: int = Field(3, ge=1, le=5)
    literalism: int = Field(3, ge=1, le=5)
    empathy: int = Field(3, ge=1, le=5)
    bias: float = Field(0.5, ge=0.0, le=1.0)
    background: str = ""


class ConfigurePayload(_Payload):
    name: str | None = None
    skepticism: int | None = Field(None, ge=1, le=5)
    literalism: int | None = Field(None, ge=1, le=5)
    empathy: int | None = Field(None, ge=1, le=5)
    bias: float | None = Field(None, ge=0.0, le=1.0)
    background: str | None = None


class RetainPayload(_Payload):
    turns: list[dict[str, Any]] = Field(min_length=1)
    biographical: bool = False
    context: str = ""
    now: str | None = None


class RecallPayload(_Payload):
    query: str = Field(min_length=1)
    budget: int = Field(ge=0)
    explain: bool = False
    now: str | None = None


class ReflectPayload(_Payload):
    query: str = Field(min_length=1)
    budget: int | None = Field(None, ge=0)
    show_system_message: bool = False
    now: str | None = None


class InspectPayload(_Payload):
    opinions: bool = False
    entities: bool = False
    units: bool = False
    edges: bool = False
    wait: bool = True


class ExportPayload(_Payload):
    path: str


class ImportPayload(_Payload):
    path: str
    overwrite: bool = False


PAYLOADS: dict[str, type[_Payload]] = {
    "create-bank": CreateBankPayload,
    "configure": ConfigurePayload,
    "retain": RetainPayload,
    "recall": RecallPayload,
    "reflect": ReflectPayload,
    "inspect": InspectPayload,
    "export": ExportPayload,
    "import": ImportPayload,
}


@dataclass(frozen=True)
class CommandEnvelope:
    """One engine request: a verb, its target bank, payload and config overrides."""

    verb: str
    bank_id: str | None = None
    payload: Mapping[str, Any] = field(default_factory=dict)
    overrides: Mapping[str, Any] = field(default_factory=dict)

    def parse(self) -> _Payload:
        """Validate the envelope and return the typed payload.

        Raises:
            PreconditionError: listing every violation.
        """
        if self.verb not in PAYLOADS:
            raise PreconditionError(f"unknown verb {self.verb!r}", [f"verb must be one of {', '.join(VERBS)}"])
        problems: list[str] = []
        if self.verb != "import" and not self.bank_id:
            problems.append("bank_id is required")
        if self.bank_id and not _BANK_ID.fullmatch(self.bank_id):
            problems.append(f"invalid bank_id {self.bank_id!r}")
        try:
            payload = PAYLOADS[self.verb].model_validate(dict(self.payload))
        except ValidationError as exc:
            problems.extend(f"{'.'.join(map(str, e['loc'])) or 'payload'}: {e['msg']}" for e in exc.errors())
            payload = None
        if problems or payload is None:
            raise PreconditionError(f"invalid {self.verb} request", problems)
        return payload


def load_config_file(path: str | os.PathLike[str] | None) -> EngineConfig:
    """Read an :class:`EngineConfig` from a JSON file; ``None`` gives defaults."""
    if path is None:
        return EngineConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return EngineConfig.from_dict(data)


class Engine:
    """Owns the banks of one data directory and serves command envelopes.

    Args:
        config: base configuration; per-call overrides apply on top.
        data_dir: directory holding one snapshot file per bank; ``None``
            keeps banks in memory only.
        providers: fixed provider suite; when omitted it is built from the
            effective config (``provider = "mock" | "external"``).
    """

    def __init__(
        self,
        config: EngineConfig | None = None,
        data_dir: str | os.PathLike[str] | None = None,
        providers: ProviderSuite | None = None,
    ) -> None:
        self.config = config or EngineConfig()
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self._fixed_providers = providers
        self._suites: dict[tuple[Any, ...], ProviderSuite] = {}
        self._banks: dict[str, MemoryBank] = {}
        self._lock = threading.RLock()

    @classmethod
    def from_env(cls, config_path: str | None = None, data_dir: str | None = None) -> Engine:
        path = config_path or os.environ.get(CONFIG_ENV)
        return cls(load_config_file(path), data_dir or os.environ.get(DATA_DIR_ENV))

    # Providers and banks ------------------------------------------------

    def providers_for(self, config: EngineConfig) -> ProviderSuite:
        if self._fixed_providers is not None:
            return self._fixed_providers
        key = (config.provider, config.external_command, config.embedding_dim, config.provider_retries, config.provider_timeout)
        with self._lock:
            if key not in self._suites:
                if config.provider == "external":
                    if not config.external_command:
                        raise ConfigError("provider 'external' needs external_command")
                    suite = external_suite(config.external_command, config.embedding_dim, config.provider_retries, config.provider_timeout)
                else:
                    suite = mock_suite(dim=config.embedding_dim, retries=config.provider_retries, timeout=config.provider_timeout)
                self._suites[key] = suite
            return self._suites[key]

    def _path(self, bank_id: str) -> Path | None:
        return self.data_dir / f"{bank_id}.jsonl" if self.data_dir is not None else None

    def has_bank(self, bank_id: str) -> bool:
        with self._lock:
            if bank_id in self._banks:
                return True
            path = self._path(bank_id)
            return path is not None and path.exists()

    def get_bank(self, bank_id: str) -> MemoryBank:
        with self._lock:
            bank = self._banks.get(bank_id)
            if bank is not None:
                return bank
            path = self._path(bank_id)
            if path is None or not path.exists():
                raise NotFoundError(f"bank {bank_id!r} not found")
            bank = MemoryBank.load(path, self.config)
            self._banks[bank_id] = bank
            return bank

    def create_bank(self, bank_id: str, profile: BankProfile) -> MemoryBank:
        with self._lock:
            if self.has_bank(bank_id):
                raise PreconditionError(f"bank {bank_id!r} already exists")
            bank = MemoryBank(bank_id, self.config, profile, path=self._path(bank_id))
            if bank.path is not None:
                bank.save()
            self._banks[bank_id] = bank
            return bank

    def close(self) -> None:
        with self._lock:
            banks = list(self._banks.values())
        for bank in banks:
            bank.close()

    # Dispatch -----------------------------------------------------------

    def dispatch(self, envelope: CommandEnvelope) -> dict[str, Any]:
        """Validate and run one envelope; returns a JSON-ready dict.

        Raises:
            MemoryEngineError subclasses, which front ends map to exit or
            status codes.
        """
        payload = envelope.parse()
        config = self.config.with_overrides(**dict(envelope.overrides)) if envelope.overrides else self.config
        handler: Callable[[CommandEnvelope, Any, EngineConfig], dict[str, Any]] = getattr(
            self, "_do_" + envelope.verb.replace("-", "_")
        )
        return handler(envelope, payload, config)

    def _do_create_bank(self, env: CommandEnvelope, p: CreateBankPayload, config: EngineConfig) -> dict[str, Any]:
        profile = BankProfile(
            name=p.name if p.name is not None else env.bank_id or "",
            profile=BehavioralProfile(p.skepticism, p.literalism, p.empathy, p.bias),
            background=_checked_background(p.background, config),
        )
        bank = self.create_bank(env.bank_id or "", profile)
        return {"bank_id": bank.bank_id, "profile": bank.snapshot().profile.to_record()}

    def _do_configure(self, env: CommandEnvelope, p: ConfigurePayload, config: EngineConfig) -> dict[str, Any]:
        bank = self.get_bank(env.bank_id or "")
        with bank.transaction() as txn:
            cur = txn.profile
            beh = cur.profile
            beh = BehavioralProfile(
                skepticism=p.skepticism if p.skepticism is not None else beh.skepticism,
                literalism=p.literalism if p.literalism is not None else beh.literalism,
                empathy=p.empathy if p.empathy is not None else beh.empathy,
                bias_strength=p.bias if p.bias is not None else beh.bias_strength,
            )
            txn.set_profile(
                replace(
                    cur,
                    name=p.name if p.name is not None else cur.name,
                    profile=beh,
                    background=_checked_background(p.background, config) if p.background is not None else cur.background,
                )
            )
        return {"bank_id": bank.bank_id, "profile": bank.snapshot().profile.to_record()}

    def _do_retain(self, env: CommandEnvelope, p: RetainPayload, config: EngineConfig) -> dict[str, Any]:
        bank = self.get_bank(env.bank_id or "")
        turns = [Turn.from_record(t) for t in p.turns]
        receipt = retain(
            bank, turns, self.providers_for(config), config, biographical=p.biographical, context=p.context, now=p.now
        )
        receipt.config = config.to_dict()
        return receipt.to_dict()

    def _do_recall(self, env: CommandEnvelope, p: RecallPayload, config: EngineConfig) -> dict[str, Any]:
        bank = self.get_bank(env.bank_id or "")
        result = recall(bank, p.query, p.budget, self.providers_for(config), config, now=p.now)
        out = result.to_dict(explain=p.explain)
        out["config"] = config.to_dict()
        return out

    def _do_reflect(self, env: CommandEnvelope, p: ReflectPayload, config: EngineConfig) -> dict[str, Any]:
        bank = self.get_bank(env.bank_id or "")
        result = reflect(bank, p.query, self.providers_for(config), config, budget=p.budget, now=p.now)
        out = result.to_dict(show_system_message=p.show_system_message)
        out["config"] = config.to_dict()
        return out

    def _do_inspect(self, env: CommandEnvelope, p: InspectPayload, config: EngineConfig) -> dict[str, Any]:
        bank = self.get_bank(env.bank_id or "")
        if p.wait:
            bank.wait_background()
        state = bank.snapshot()
        out: dict[str, Any] = {
            "bank_id": state.bank_id,
            "profile": state.profile.to_record(),
            "counts": state.counts(),
        }
        if p.opinions:
            out["opinions"] = [Opinion.from_unit(u).to_record() for u in sorted(state.opinions(), key=lambda u: u.id)]
        if p.entities:
            out["entities"] = [state.entities[k].to_record() for k in sorted(state.entities)]
        if p.units:
            out["units"] = [
                {k: v for k, v in state.units[k].to_record().items() if k != "embedding"} for k in sorted(state.units)
            ]
        if p.edges:
            out["edges"] = [e.to_record() for e in sorted(state.edges.values(), key=lambda e: (e.source, e.target, e.kind.value))]
        return out

    def _do_export(self, env: CommandEnvelope, p: ExportPayload, config: EngineConfig) -> dict[str, Any]:
        bank = self.get_bank(env.bank_id or "")
        bank.wait_background()
        state = bank.snapshot()
        save_snapshot(state, p.path)
        return {"bank_id": state.bank_id, "path": str(p.path), "counts": state.counts()}

    def _do_import(self, env: CommandEnvelope, p: ImportPayload, config: EngineConfig) -> dict[str, Any]:
        state = load_snapshot(p.path)
        if env.bank_id and env.bank_id != state.bank_id:
            raise PreconditionError(
                "snapshot belongs to another bank", [f"snapshot bank_id {state.bank_id!r} != {env.bank_id!r}"]
            )
        with self._lock:
            if self.has_bank(state.bank_id) and not p.overwrite:
                raise PreconditionError(f"bank {state.bank_id!r} already exists; pass overwrite to replace it")
            old = self._banks.pop(state.bank_id, None)
            if old is not None:
                old.close()
            cfg = self.config
            if state.vectors.dim != cfg.embedding_dim:
                cfg = cfg.with_overrides(embedding_dim=state.vectors.dim)
            bank = MemoryBank(state.bank_id, cfg, path=self._path(state.bank_id), state=state)
            if bank.path is not None:
                bank.save()
            self._banks[state.bank_id] = bank
        return {"bank_id": state.bank_id, "counts": state.counts()}


def _checked_background(text: str, config: EngineConfig) -> str:
    text = normalize_first_person(text.strip())
    problems = []
    if len(text) > config.background_max_len:
        problems.append(f"background length {len(text)} exceeds {config.background_max_len}")
    if not is_first_person(text):
        problems.append("background must be first person")
    if problems:
        raise MemoryValidationError("invalid background", problems)
    return text

