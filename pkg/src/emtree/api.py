"""HTTP surface for the memory service (consumed by the CLI and web console)."""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import PlainTextResponse
from pydantic import BaseModel

from .service import EventRecord, MemoryService, OutOfOrderError


class EventIn(BaseModel):
    at: int
    kind: str
    attributes: dict[str, str] = {}


class TextIn(BaseModel):
    text: str


def create_app(service: MemoryService) -> FastAPI:
    app = FastAPI(title="emtree", version="0.1.0")
    # the web console is served separately; this is a local single-user API
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.post("/events")
    def post_event(event: EventIn):
        record = EventRecord(at=event.at, kind=event.kind, attributes=dict(event.attributes))
        try:
            depth = service.ingest(record)
        except OutOfOrderError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"queue_depth": depth}

    @app.post("/ask")
    def post_ask(body: TextIn):
        if not body.text.strip():
            raise HTTPException(status_code=422, detail="empty question")
        result = service.ask(body.text)
        return {
            "answer": result.answer,
            "usage": {
                "prompt_tokens": result.usage.prompt_tokens,
                "completion_tokens": result.usage.completion_tokens,
            },
            "trace": result.trace,
            "gave_up": result.gave_up,
            "forgotten_indicated": result.forgotten_indicated,
            "snapshot_version": result.snapshot_version,
        }

    @app.post("/feedback")
    def post_feedback(body: TextIn):
        if not body.text.strip():
            raise HTTPException(status_code=422, detail="empty feedback")
        version = service.feedback(body.text)
        return {"rules_version": version}

    @app.get("/tree", response_class=PlainTextResponse)
    def get_tree(version: int | None = None):
        text = service.serialized_snapshot(version)
        if text is None:
            raise HTTPException(status_code=404, detail=f"no snapshot for version {version}")
        return text

    @app.get("/rules")
    def get_rules():
        current = service.engine.rule_store.current
        return {"version": current.version, "rules": list(current.rules)}

    @app.get("/metrics")
    def get_metrics():
        return service.metrics()

    @app.get("/health")
    def get_health():
        return {"status": "ok"}

    return app
