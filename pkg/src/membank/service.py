"""Local HTTP facade over the shared dispatch layer.

Routes (JSON bodies, same schemas as the CLI payloads):

* ``POST /banks`` with ``{"bank_id": ..., <profile fields>}``
* ``POST /banks/{id}/configure``
* ``POST /banks/{id}/retain``, ``/recall``, ``/reflect``
* ``GET /banks/{id}/inspect?opinions=1&entities=1&units=1&edges=1``

A body may carry ``"overrides": {...}`` with engine config overrides.
Validation errors map to 400 with the violation list, unknown banks to 404,
provider failures to 502 and storage failures to 500.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any
from urllib.parse import parse_qs, urlsplit

from .engine import CommandEnvelope, Engine
from .errors import MemoryEngineError, MemoryValidationError, NotFoundError, ProviderError, StorageError

log = logging.getLogger(__name__)

_BANK_ROUTE = re.compile(r"^/banks/([^/]+)/(retain|recall|reflect|configure|inspect)$")


def status_for(exc: BaseException) -> HTTPStatus:
    if isinstance(exc, NotFoundError):
        return HTTPStatus.NOT_FOUND
    if isinstance(exc, MemoryValidationError):
        return HTTPStatus.BAD_REQUEST
    if isinstance(exc, ProviderError):
        return HTTPStatus.BAD_GATEWAY
    if isinstance(exc, StorageError):
        return HTTPStatus.INTERNAL_SERVER_ERROR
    return HTTPStatus.INTERNAL_SERVER_ERROR


def _truthy(values: list[str]) -> bool:
    return bool(values) and values[-1].lower() not in ("0", "false", "no", "")


def make_handler(engine: Engine) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        server_version = "membank"
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt: str, *args: Any) -> None:
            log.info("%s - " + fmt, self.address_string(), *args)

        def _send(self, status: HTTPStatus, body: dict[str, Any]) -> None:
            data = json.dumps(body, sort_keys=True, ensure_ascii=False).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _body(self) -> dict[str, Any]:
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b"{}"
            try:
                body = json.loads(raw or b"{}")
            except json.JSONDecodeError as exc:
                raise MemoryValidationError("request body is not valid JSON", [str(exc)]) from exc
            if not isinstance(body, dict):
                raise MemoryValidationError("request body must be a JSON object")
            return body

        def _run(self, envelope: CommandEnvelope, ok: HTTPStatus = HTTPStatus.OK) -> None:
            try:
                result = engine.dispatch(envelope)
            except MemoryEngineError as exc:
                self._send(
                    status_for(exc),
                    {"error": {"type": type(exc).__name__, "message": str(exc), "violations": list(getattr(exc, "violations", []))}},
                )
                return
            except Exception as exc:  # keep the server alive
                log.exception("unhandled error")
                self._send(HTTPStatus.INTERNAL_SERVER_ERROR, {"error": {"type": type(exc).__name__, "message": str(exc), "violations": []}})
                return
            self._send(ok, result)

        def _not_found(self) -> None:
            self._send(HTTPStatus.NOT_FOUND, {"error": {"type": "NotFound", "message": f"no route {self.path}", "violations": []}})

        def do_POST(self) -> None:  # noqa: N802
            path = urlsplit(self.path).path
            try:
                body = self._body()
            except MemoryValidationError as exc:
                self._send(HTTPStatus.BAD_REQUEST, {"error": {"type": type(exc).__name__, "message": str(exc), "violations": exc.violations}})
                return
            overrides = body.pop("overrides", None) or {}
            if path == "/banks":
                bank_id = body.pop("bank_id", None)
                self._run(CommandEnvelope("create-bank", bank_id, body, overrides), HTTPStatus.CREATED)
                return
            m = _BANK_ROUTE.match(path)
            if m is None or m.group(2) == "inspect":
                self._not_found()
                return
            self._run(CommandEnvelope(m.group(2), m.group(1), body, overrides))

        def do_GET(self) -> None:  # noqa: N802
            parts = urlsplit(self.path)
            m = _BANK_ROUTE.match(parts.path)
            if m is None or m.group(2) != "inspect":
                self._not_found()
                return
            query = parse_qs(parts.query)
            payload = {k: _truthy(query.get(k, [])) for k in ("opinions", "entities", "units", "edges")}
            self._run(CommandEnvelope("inspect", m.group(1), payload))

    return Handler


def make_server(engine: Engine, host: str = "127.0.0.1", port: int = 8765) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), make_handler(engine))
    server.daemon_threads = True
    return server


def serve_http(engine: Engine, host: str = "127.0.0.1", port: int = 8765) -> None:
    """Serve until interrupted."""
    server = make_server(engine, host, port)
    log.warning("membank listening on http://%s:%d", host, server.server_address[1])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def serve_in_thread(engine: Engine, host: str = "127.0.0.1", port: int = 0) -> tuple[ThreadingHTTPServer, threading.Thread]:
    """Start a server on a background thread; port 0 picks a free port."""
    server = make_server(engine, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread
