"""Command line entry points: serve, replay, ask, feedback, eval."""

from __future__ import annotations

import argparse
import logging
import sys

from .clock import VirtualClock, parse_ts
from .config import load_config_file
from .gateway import HttpBackend, HttpLmConfig, LmGateway
from .scripted import ScriptedBackend
from .service import (
    EventRecord,
    MemoryEngine,
    MemoryService,
    ServiceConfig,
    load_event_file,
    record_to_scene,
)
from .tree import count_nodes, serialize

logger = logging.getLogger(__name__)


def _service_config(args) -> ServiceConfig:
    data = load_config_file(args.config) if args.config else {}
    return ServiceConfig.from_dict(data)


def _gateway(args, data: dict | None = None) -> LmGateway:
    if args.lm_backend == "http":
        lm = (data or {}).get("lm")
        config = HttpLmConfig.from_dict(lm) if lm else HttpLmConfig.from_env()
        return LmGateway(HttpBackend(config))
    return LmGateway(ScriptedBackend())


def _clock(args):
    if getattr(args, "virtual_clock", None):
        return VirtualClock(parse_ts(args.virtual_clock))
    return None


def cmd_serve(args) -> int:
    import uvicorn

    from .api import create_app

    config = _service_config(args)
    gateway = _gateway(args, load_config_file(args.config) if args.config else {})
    service = MemoryService(config, gateway, clock=_clock(args))
    service.start()
    app = create_app(service)
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    finally:
        service.stop()
    return 0


def cmd_replay(args) -> int:
    """Feed an event file through a local engine and print the outcome."""
    config = _service_config(args)
    gateway = _gateway(args)
    records = load_event_file(args.event_file)
    records.sort(key=lambda r: r.at)
    clock = _clock(args) or VirtualClock(records[0].at if records else 0)
    engine = MemoryEngine(config, gateway, clock=clock)
    batch: list[EventRecord] = []
    for record in records:
        record.validate()
        batch.append(record)
        if len(batch) >= args.batch:
            clock.set(max(clock.now(), batch[-1].at))
            engine.apply_batch([record_to_scene(r) for r in batch])
            if args.sweep:
                engine.sweep_now()
            batch = []
    if batch:
        clock.set(max(clock.now(), batch[-1].at))
        engine.apply_batch([record_to_scene(r) for r in batch])
        if args.sweep:
            engine.sweep_now()
    print(f"events: {len(records)}")
    print(f"tree version: {engine.tree.version}")
    print(f"nodes: {len(engine.tree.nodes())} (goal+: {count_nodes(engine.tree)})")
    usage = gateway.ledger.total
    print(f"lm usage: prompt={usage.prompt_tokens} completion={usage.completion_tokens}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(serialize(engine.tree))
        print(f"tree written to {args.out}")
    return 0


def _post(url: str, payload: dict) -> dict:
    import requests

    response = requests.post(url, json=payload, timeout=120)
    response.raise_for_status()
    return response.json()


def cmd_ask(args) -> int:
    body = _post(f"{args.url.rstrip('/')}/ask", {"text": args.text})
    print(body["answer"])
    usage = body.get("usage", {})
    print(
        f"[tokens: {usage.get('prompt_tokens', 0)}+{usage.get('completion_tokens', 0)}"
        f"{', forgotten' if body.get('forgotten_indicated') else ''}]"
    )
    return 0


def cmd_feedback(args) -> int:
    body = _post(f"{args.url.rstrip('/')}/feedback", {"text": args.text})
    print(f"rules version: {body['rules_version']}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation.harness import run_from_config

    data = load_config_file(args.config)
    if args.seed is not None:
        data["seeds"] = [args.seed]
    report, detail = run_from_config(data, lm_backend=args.lm_backend, with_detail=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report)
        print(f"report written to {args.out}")
    else:
        print(report, end="")
    if args.detail:
        import json

        with open(args.detail, "w", encoding="utf-8") as fh:
            for line in detail:
                fh.write(json.dumps(line, sort_keys=True) + "\n")
        print(f"per-question detail written to {args.detail}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emtree", description="Episodic memory tree service")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--config", default=None)
    serve.add_argument("--lm-backend", choices=("scripted", "http"), default="scripted")
    serve.add_argument("--virtual-clock", default=None, help="start time for a virtual clock")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8807)
    serve.set_defaults(func=cmd_serve)

    replay = sub.add_parser("replay", help="replay an event file locally")
    replay.add_argument("event_file")
    replay.add_argument("--config", default=None)
    replay.add_argument("--lm-backend", choices=("scripted", "http"), default="scripted")
    replay.add_argument("--virtual-clock", default=None)
    replay.add_argument("--batch", type=int, default=1)
    replay.add_argument("--sweep", action="store_true", help="sweep after each update")
    replay.add_argument("--out", default=None, help="write the final tree here")
    replay.set_defaults(func=cmd_replay)

    ask = sub.add_parser("ask", help="ask a running service a question")
    ask.add_argument("text")
    ask.add_argument("--url", default="http://127.0.0.1:8807")
    ask.set_defaults(func=cmd_ask)

    feedback = sub.add_parser("feedback", help="send relevance feedback to a running service")
    feedback.add_argument("text")
    feedback.add_argument("--url", default="http://127.0.0.1:8807")
    feedback.set_defaults(func=cmd_feedback)

    evaluate = sub.add_parser("eval", help="run the evaluation harness")
    evaluate.add_argument("config")
    evaluate.add_argument("--lm-backend", choices=("scripted", "http"), default="scripted")
    evaluate.add_argument("--seed", type=int, default=None)
    evaluate.add_argument("--out", default=None)
    evaluate.add_argument("--detail", default=None, help="write a per-question JSONL log here")
    evaluate.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
