"""Command-line front end.

Every command prints one JSON object per line on stdout (``--pretty`` gives
a human-oriented rendering instead). Exit codes:

* 0 success
* 2 usage error
* 3 validation failure
* 4 provider failure
* 5 storage failure
* 6 bank not found
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence, TextIO

from .engine import CommandEnvelope, Engine
from .errors import MemoryEngineError, MemoryValidationError, NotFoundError, ProviderError, StorageError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_PROVIDER = 4
EXIT_STORAGE = 5
EXIT_NOT_FOUND = 6


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NotFoundError):
        return EXIT_NOT_FOUND
    if isinstance(exc, MemoryValidationError):
        return EXIT_VALIDATION
    if isinstance(exc, ProviderError):
        return EXIT_PROVIDER
    if isinstance(exc, StorageError):
        return EXIT_STORAGE
    return 1


def error_record(exc: BaseException) -> dict[str, Any]:
    return {
        "error": {
            "type": type(exc).__name__,
            "message": str(exc),
            "violations": list(getattr(exc, "violations", [])),
        }
    }


def read_transcript(path: str) -> list[dict[str, Any]]:
    """Load turns from JSON lines (one ``{speaker, text, timestamp}`` per line) or a JSON array."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise MemoryValidationError(f"cannot read transcript {path}: {exc}") from exc
    stripped = text.strip()
    try:
        if stripped.startswith("["):
            records = json.loads(stripped)
        else:
            records = [json.loads(line) for line in text.splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise MemoryValidationError("malformed transcript", [f"line {exc.lineno}: {exc.msg}"]) from exc
    if not isinstance(records, list) or not all(isinstance(r, dict) for r in records):
        raise MemoryValidationError("malformed transcript", ["each turn must be a JSON object"])
    return records


def _parse_override(item: str) -> tuple[str, Any]:
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {item!r}")
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON engine config file (env MEMBANK_CONFIG)")
    parser.add_argument("--data-dir", default=default, help="bank directory (env MEMBANK_DATA_DIR)")
    parser.add_argument("--provider", choices=("mock", "external"), default=default)
    parser.add_argument("--external-command", default=default, help="command line of an external provider")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        type=_parse_override,
        default=argparse.SUPPRESS if suppress else [],
        metavar="KEY=VALUE",
        help="override one engine config key; VALUE is parsed as JSON when possible",
    )
    parser.add_argument(
        "--pretty", action="store_true", default=argparse.SUPPRESS if suppress else False, help="human-readable output"
    )


def _profile_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--name")
    parser.add_argument("--skepticism", type=int, choices=range(1, 6), metavar="1..5")
    parser.add_argument("--literalism", type=int, choices=range(1, 6), metavar="1..5")
    parser.add_argument("--empathy", type=int, choices=range(1, 6), metavar="1..5")
    parser.add_argument("--bias", type=float, metavar="0..1")
    parser.add_argument("--background")


def _add_bank_verbs(sub: Any, common: argparse.ArgumentParser, *, prefix: str = "") -> None:
    p = sub.add_parser("create" if prefix else "create-bank", parents=[common], help="create a bank")
    p.add_argument("--bank", required=True)
    _profile_options(p)
    p.set_defaults(verb="create-bank")

    p = sub.add_parser("configure", parents=[common], help="set profile traits and background")
    p.add_argument("--bank", required=True)
    _profile_options(p)
    p.set_defaults(verb="configure")

    p = sub.add_parser("inspect", parents=[common], help="dump bank contents")
    p.add_argument("--bank", required=True)
    p.add_argument("--opinions", action="store_true")
    p.add_argument("--entities", action="store_true")
    p.add_argument("--units", action="store_true")
    p.add_argument("--edges", action="store_true")
    p.set_defaults(verb="inspect")

    p = sub.add_parser("export", parents=[common], help="write a bank snapshot")
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(verb="export")

    p = sub.add_parser("import", parents=[common], help="load a bank snapshot")
    p.add_argument("--file", required=True)
    p.add_argument("--bank")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(verb="import")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="membank", description="Agent memory engine")
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    _add_bank_verbs(sub, common)

    p = sub.add_parser("retain", parents=[common], help="ingest a transcript")
    p.add_argument("--bank", required=True)
    p.add_argument("--file", required=True, help="JSON-lines transcript of {speaker, text, timestamp}")
    p.add_argument("--biographical", action="store_true", help="also merge the text into the background")
    p.add_argument("--context", default="")
    p.add_argument("--now", help="ingestion time (ISO-8601)")
    p.set_defaults(verb="retain")

    p = sub.add_parser("recall", parents=[common], help="budgeted retrieval")
    p.add_argument("--bank", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--explain", action="store_true", help="include per-channel ranks and scores")
    p.add_argument("--now", help="reference time for relative dates (ISO-8601)")
    p.set_defaults(verb="recall")

    p = sub.add_parser("reflect", parents=[common], help="answer in the bank's voice and form opinions")
    p.add_argument("--bank", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--budget", type=int)
    p.add_argument("--show-system-message", action="store_true")
    p.add_argument("--now")
    p.set_defaults(verb="reflect")

    p = sub.add_parser("bank", help="bank lifecycle commands")
    bank_sub = p.add_subparsers(dest="bank_command", required=True, metavar="ACTION")
    _add_bank_verbs(bank_sub, common, prefix="bank")

    p = sub.add_parser("serve", parents=[common], help="run the HTTP facade")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(verb="serve")
    return parser


def _profile_payload(args: argparse.Namespace) -> dict[str, Any]:
    keys = ("name", "skepticism", "literalism", "empathy", "bias", "background")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def envelope_from_args(args: argparse.Namespace) -> CommandEnvelope:
    verb = args.verb
    overrides = dict(getattr(args, "overrides", []) or [])
    if args.provider:
        overrides["provider"] = args.provider
    if args.external_command:
        overrides["external_command"] = args.external_command.split()
    payload: dict[str, Any]
    if verb in ("create-bank", "configure"):
        payload = _profile_payload(args)
    elif verb == "retain":
        payload = {"turns": read_transcript(args.file), "biographical": args.biographical, "context": args.context}
        if args.now:
            payload["now"] = args.now
    elif verb == "recall":
        payload = {"query": args.query, "budget": args.budget, "explain": args.explain}
        if args.now:
            payload["now"] = args.now
    elif verb == "reflect":
        payload = {"query": args.query, "show_system_message": args.show_system_message}
        if args.budget is not None:
            payload["budget"] = args.budget
        if args.now:
            payload["now"] = args.now
    elif verb == "inspect":
        payload = {k: getattr(args, k) for k in ("opinions", "entities", "units", "edges")}
    elif verb == "export":
        payload = {"path": args.out}
    elif verb == "import":
        payload = {"path": args.file, "overwrite": args.overwrite}
    else:  # pragma: no cover - argparse restricts verbs
        raise MemoryValidationError(f"unknown verb {verb!r}")
    return CommandEnvelope(verb=verb, bank_id=getattr(args, "bank", None), payload=payload, overrides=overrides)


def render_pretty(verb: str, result: dict[str, Any]) -> str:
    if "error" in result:
        err = result["error"]
        lines = [f"error ({err['type']}): {err['message']}"] + [f"  - {v}" for v in err["violations"]]
        return "\n".join(lines)
    if verb == "recall":
        lines = [f"{len(result['items'])} memories, {result['total_tokens']}/{result['budget']} tokens"]
        if result.get("temporal_range_used"):
            lines.append("time range: " + " .. ".join(result["temporal_range_used"]))
        for i, item in enumerate(result["items"], 1):
            rr = "-" if item["rerank_score"] is None else f"{item['rerank_score']:.3f}"
            lines.append(
                f"{i:>3}. {item['unit_id']} [{item['network']}] {item['text']}"
                f"  (rrf {item['fused_score']:.4f}, rerank {rr}, via {','.join(item['channels_hit'])})"
            )
        return "\n".join(lines)
    if verb == "reflect":
        lines = [result["response_text"]]
        for op in result["opinions_formed"]:
            lines.append(f"  new opinion {op['id']} ({op['confidence']:.2f}): {op['text']}")
        if "system_message_used" in result:
            lines += ["", "system message:", result["system_message_used"]]
        return "\n".join(lines)
    shown = {k: v for k, v in result.items() if k != "config"}
    return json.dumps(shown, indent=2, sort_keys=True, ensure_ascii=False)


def run_cli(argv: Sequence[str] | None = None, stdout: TextIO | None = None, engine: Engine | None = None) -> int:
    """Parse ``argv``, dispatch, print the result and return the exit code."""
    out = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)

    owned = engine is None
    try:
        if engine is None:
            engine = Engine.from_env(args.config, args.data_dir)
        if args.verb == "serve":
            from .service import serve_http

            config = engine.config
            overrides = dict(getattr(args, "overrides", []) or [])
            if args.provider:
                overrides["provider"] = args.provider
            if overrides:
                engine.config = config.with_overrides(**overrides)
            serve_http(engine, args.host, args.port)
            return EXIT_OK
        envelope = envelope_from_args(args)
        result = engine.dispatch(envelope)
        code = EXIT_OK
    except MemoryEngineError as exc:
        result, code = error_record(exc), exit_code_for(exc)
    finally:
        if owned and engine is not None:
            engine.close()
    verb = getattr(args, "verb", "")
    if args.pretty:
        out.write(render_pretty(verb, result) + "\n")
    else:
        out.write(json.dumps(result, sort_keys=True, ensure_ascii=False) + "\n")
    out.flush()
    return code


def main() -> None:
    sys.exit(run_cli())
