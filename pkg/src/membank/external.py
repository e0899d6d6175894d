"""Out-of-process providers over a JSON-lines pipe.

The engine starts ``command`` once and keeps it running. Each request is one
line ``{"id": n, "method": name, "params": {...}}`` on the child's stdin;
the child answers with one line ``{"id": n, "result": ...}`` or
``{"id": n, "error": message}``. Requests carry the prompt template for the
step in ``params["prompt"]`` so an adapter can forward it to a model
unchanged. Outputs are validated by :class:`membank.providers.ProviderSuite`
like any other provider's.

``python -m membank.external`` runs a server backed by the mock providers,
which is handy for exercising the protocol end to end.
"""

from __future__ import annotations

import itertools
import json
import subprocess
import sys
import threading
from datetime import datetime
from typing import Any, Sequence

from .errors import ProviderError
from .model import iso
from .providers import (
    EntityMention,
    ExtractedFact,
    MockAssessor,
    MockEmbedder,
    MockExtractor,
    MockReranker,
    MockSynthesizer,
    ProviderSuite,
    ReflectResponse,
    Turn,
)

PROMPTS: dict[str, str] = {
    "extract": (
        "Read the conversation below and write between two and five self-contained facts. "
        "Each fact should cover a whole exchange rather than a single sentence, and must state "
        "what happened, when (including the day of the week), where, who was involved and why. "
        "Classify each fact as world (about others or the world), experience (something the "
        "assistant itself did) or opinion (a belief). Resolve relative dates against the turn "
        "timestamps, list named entities with a kind, and note cause-and-effect links between "
        "facts by index. Answer with JSON matching the ExtractedFact schema."
    ),
    "extract_entities": "List the named entities in the text with a kind for each. Answer with JSON.",
    "embed": "Return a dense embedding of the text.",
    "score": "Rate how relevant the candidate memory is to the query as a single number.",
    "assess": (
        "Given a belief and a new fact, answer with exactly one word: reinforce if the fact "
        "supports the belief, weaken if it casts some doubt, contradict if it refutes it, "
        "neutral if it is unrelated."
    ),
    "summarize_entity": (
        "Write short, neutral, third-person statements summarizing what the facts say about the "
        "named entity. Use three to seven statements, fewer when there are few facts. Do not "
        "add opinions or information that the facts do not contain."
    ),
    "merge_background": (
        "Combine the current self-description with the new information. Where they disagree, "
        "keep the new information. Keep every other detail, write in the first person, and stay "
        "under the given character limit."
    ),
    "respond": (
        "Follow the system message. Answer the question using the supplied memories. If the "
        "answer leads you to a view, list each view as a first-person opinion with a confidence "
        "between 0 and 1 and the reasoning behind it. Answer with JSON: {answer, opinions}."
    ),
    "revise_opinion": (
        "A new fact contradicts the belief below. Rewrite the belief, in the first person, so "
        "it fits the new evidence."
    ),
}


class ExternalProvider:
    """Implements every provider protocol by delegating to a child process.

    Calls are serialized: the engine honors ``single_flight``.
    """

    single_flight = True

    def __init__(self, command: Sequence[str], dim: int) -> None:
        if not command:
            raise ProviderError("external provider needs a command")
        self.command = list(command)
        self.dim = dim
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._proc: subprocess.Popen[str] | None = None

    def _ensure(self) -> subprocess.Popen[str]:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self.command,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    text=True,
                    bufsize=1,
                )
            except OSError as exc:
                raise ProviderError(f"cannot start external provider: {exc}") from exc
        return self._proc

    def request(self, method: str, **params: Any) -> Any:
        with self._lock:
            proc = self._ensure()
            req_id = next(self._ids)
            params["prompt"] = PROMPTS.get(method, "")
            assert proc.stdin is not None and proc.stdout is not None
            try:
                proc.stdin.write(json.dumps({"id": req_id, "method": method, "params": params}) + "\n")
                proc.stdin.flush()
                line = proc.stdout.readline()
            except OSError as exc:
                raise ProviderError(f"external provider pipe failed: {exc}") from exc
        if not line:
            raise ProviderError("external provider closed its output")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProviderError(f"external provider sent invalid JSON: {exc}") from exc
        if reply.get("id") != req_id:
            raise ProviderError("external provider reply id mismatch")
        if "error" in reply:
            raise ProviderError(f"external provider error: {reply['error']}")
        return reply.get("result")

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.terminate()
            self._proc.wait(timeout=5)
        self._proc = None

    # Protocol methods -----------------------------------------------------

    def extract(self, turns: Sequence[Turn]) -> list[Any]:
        records = [{"speaker": t.speaker, "text": t.text, "timestamp": iso(t.timestamp)} for t in turns]
        return list(self.request("extract", turns=records))

    def extract_entities(self, text: str) -> list[Any]:
        return list(self.request("extract_entities", text=text))

    def embed(self, text: str) -> list[float]:
        return list(self.request("embed", text=text, dim=self.dim))

    def score(self, query: str, candidate: str) -> float:
        return float(self.request("score", query=query, candidate=candidate))

    def assess(self, opinion_text: str, fact_text: str) -> str:
        return str(self.request("assess", opinion=opinion_text, fact=fact_text))

    def summarize_entity(self, name: str, facts: Sequence[str]) -> list[str]:
        return list(self.request("summarize_entity", name=name, facts=list(facts)))

    def merge_background(self, current: str, snippet: str, max_len: int) -> str:
        return str(self.request("merge_background", current=current, snippet=snippet, max_len=max_len))

    def respond(self, system_message: str, memories: Sequence[str], query: str) -> Any:
        return self.request("respond", system_message=system_message, memories=list(memories), query=query)

    def revise_opinion(self, opinion_text: str, fact_text: str) -> str:
        return str(self.request("revise_opinion", opinion=opinion_text, fact=fact_text))


def external_suite(command: Sequence[str], dim: int, retries: int = 2, timeout: float | None = 30.0) -> ProviderSuite:
    provider = ExternalProvider(command, dim)
    return ProviderSuite(
        extractor=provider,
        embedder=provider,
        reranker=provider,
        assessor=provider,
        synthesizer=provider,
        retries=retries,
        timeout=timeout,
    )


# --------------------------------------------------------------------------
# Reference server backed by the mocks
# --------------------------------------------------------------------------


def _dump(value: Any) -> Any:
    if isinstance(value, (ExtractedFact, EntityMention, ReflectResponse)):
        return value.model_dump(mode="json")
    if isinstance(value, list):
        return [_dump(v) for v in value]
    if isinstance(value, datetime):
        return iso(value)
    return value


def serve_mock(stdin: Any = sys.stdin, stdout: Any = sys.stdout) -> None:
    extractor, reranker, assessor, synth = MockExtractor(), MockReranker(), MockAssessor(), MockSynthesizer()
    handlers = {
        "extract": lambda p: extractor.extract([Turn.from_record(t) for t in p["turns"]]),
        "extract_entities": lambda p: extractor.extract_entities(p["text"]),
        "embed": lambda p: MockEmbedder(int(p.get("dim", 256))).embed(p["text"]),
        "score": lambda p: reranker.score(p["query"], p["candidate"]),
        "assess": lambda p: assessor.assess(p["opinion"], p["fact"]),
        "summarize_entity": lambda p: synth.summarize_entity(p["name"], p["facts"]),
        "merge_background": lambda p: synth.merge_background(p["current"], p["snippet"], int(p["max_len"])),
        "respond": lambda p: synth.respond(p["system_message"], p["memories"], p["query"]),
        "revise_opinion": lambda p: synth.revise_opinion(p["opinion"], p["fact"]),
    }
    for line in stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        try:
            reply = {"id": req["id"], "result": _dump(handlers[req["method"]](req.get("params", {})))}
        except Exception as exc:  # report, keep serving
            reply = {"id": req.get("id"), "error": f"{type(exc).__name__}: {exc}"}
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()


if __name__ == "__main__":
    serve_mock()
