"""Language-model access: prompt kinds, token accounting, pluggable backends."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Protocol

import requests

logger = logging.getLogger(__name__)

ROLE_SYSTEM = "system"
ROLE_HUMAN = "human"
ROLE_AI = "ai"


class PromptKind(str, Enum):
    GROUPING = "grouping"
    RELEVANCE = "relevance-estimation"
    RULE_LEARNING = "rule-learning"
    QA_AGENT = "qa-agent"
    DIALOG_ROUTING = "dialog-routing"
    JUDGE = "judge"
    SIMPLE_SUMMARIZE = "simple-summarize"


@dataclass(frozen=True)
class Message:
    role: str
    text: str


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass
class LmExchange:
    kind: PromptKind
    messages: list[Message]
    response: str
    usage: TokenUsage
    truncated: bool = False


def count_tokens(text: str) -> int:
    """Whitespace token count: cheap, deterministic, tokenizer-comparable."""
    return len(text.split())


def validate_messages(messages: list[Message]) -> None:
    if not messages:
        raise ValueError("empty message list")
    if messages[0].role != ROLE_SYSTEM:
        raise ValueError("first message must have the system role")


class LmError(Exception):
    pass


class BackendUnreachableError(LmError):
    pass


class LmBackend(Protocol):
    def complete(self, kind: PromptKind, messages: list[Message]) -> str: ...


@dataclass
class HttpLmConfig:
    endpoint: str
    model: str
    api_key: str = ""
    timeout: float = 60.0
    max_retries: int = 3
    temperature: float = 0.0
    max_response_chars: int = 20000

    @classmethod
    def from_env(cls, env: dict[str, str] | None = None) -> "HttpLmConfig":
        env = env if env is not None else dict(os.environ)
        return cls(
            endpoint=env.get("EMTREE_LM_ENDPOINT", "http://localhost:8000/v1/chat/completions"),
            model=env.get("EMTREE_LM_MODEL", ""),
            api_key=env.get("EMTREE_LM_API_KEY", ""),
            timeout=float(env.get("EMTREE_LM_TIMEOUT", "60")),
            max_retries=int(env.get("EMTREE_LM_RETRIES", "3")),
            temperature=float(env.get("EMTREE_LM_TEMPERATURE", "0")),
        )

    @classmethod
    def from_dict(cls, data: dict) -> "HttpLmConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


_WIRE_ROLE = {ROLE_SYSTEM: "system", ROLE_HUMAN: "user", ROLE_AI: "assistant"}


class HttpBackend:
    """Chat-completion endpoint with bounded retries."""

    def __init__(self, config: HttpLmConfig, session: requests.Session | None = None):
        self.config = config
        self.session = session or requests.Session()
        self.last_usage: TokenUsage | None = None
        self.last_truncated = False

    def complete(self, kind: PromptKind, messages: list[Message]) -> str:
        payload = {
            "model": self.config.model,
            "messages": [{"role": _WIRE_ROLE[m.role], "content": m.text} for m in messages],
            "temperature": self.config.temperature,
        }
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries):
            try:
                resp = self.session.post(
                    self.config.endpoint, json=payload, headers=headers, timeout=self.config.timeout
                )
                if resp.status_code >= 500:
                    last_error = LmError(f"server error {resp.status_code}")
                    time.sleep(min(2**attempt * 0.1, 2.0))
                    continue
                resp.raise_for_status()
                body = resp.json()
                text = body["choices"][0]["message"]["content"] or ""
                usage = body.get("usage") or {}
                self.last_usage = TokenUsage(
                    int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))
                )
                self.last_truncated = len(text) > self.config.max_response_chars
                if self.last_truncated:
                    text = text[: self.config.max_response_chars]
                return text
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = exc
                time.sleep(min(2**attempt * 0.1, 2.0))
        raise BackendUnreachableError(
            f"LM endpoint unreachable after {self.config.max_retries} attempts: {last_error}"
        )


class ReplayBackend:
    """Replays a recorded exchange log; raises on unseen requests."""

    def __init__(self, exchanges: list[LmExchange]):
        self._responses: dict[str, str] = {}
        for ex in exchanges:
            self._responses[self._key(ex.kind, ex.messages)] = ex.response

    @staticmethod
    def _key(kind: PromptKind, messages: list[Message]) -> str:
        return json.dumps([kind.value] + [[m.role, m.text] for m in messages], sort_keys=False)

    def complete(self, kind: PromptKind, messages: list[Message]) -> str:
        key = self._key(kind, messages)
        if key not in self._responses:
            raise LmError("no recorded response for this request")
        return self._responses[key]


class UsageLedger:
    """Thread-safe running totals per prompt kind; supports delta accounting."""

    def __init__(self):
        self._lock = threading.Lock()
        self._by_kind: dict[str, TokenUsage] = {}
        self._total = TokenUsage()
        self._calls = 0

    def record(self, kind: PromptKind, usage: TokenUsage) -> None:
        with self._lock:
            self._by_kind[kind.value] = self._by_kind.get(kind.value, TokenUsage()) + usage
            self._total = self._total + usage
            self._calls += 1

    @property
    def total(self) -> TokenUsage:
        with self._lock:
            return self._total

    @property
    def calls(self) -> int:
        with self._lock:
            return self._calls

    def by_kind(self) -> dict[str, TokenUsage]:
        with self._lock:
            return dict(self._by_kind)

    def mark(self) -> TokenUsage:
        return self.total

    def delta_since(self, mark: TokenUsage) -> TokenUsage:
        now = self.total
        return TokenUsage(
            now.prompt_tokens - mark.prompt_tokens,
            now.completion_tokens - mark.completion_tokens,
        )


class LmGateway:
    """Uniform entry point for all LM calls, with a shared usage ledger.

    Safe for concurrent callers; each call is synchronous. When the backend
    reports its own usage (HTTP), that is recorded; otherwise usage is the
    whitespace token count of the prompt and response.
    """

    def __init__(self, backend: LmBackend, record_path: str | None = None):
        self.backend = backend
        self.ledger = UsageLedger()
        self.exchanges: list[LmExchange] = []
        self._record_path = record_path
        self._lock = threading.Lock()

    def complete(self, kind: PromptKind, messages: list[Message]) -> tuple[str, TokenUsage]:
        validate_messages(messages)
        response = self.backend.complete(kind, messages)
        reported = getattr(self.backend, "last_usage", None)
        if reported is not None:
            usage = reported
        else:
            usage = TokenUsage(
                prompt_tokens=sum(count_tokens(m.text) for m in messages),
                completion_tokens=count_tokens(response),
            )
        truncated = bool(getattr(self.backend, "last_truncated", False))
        exchange = LmExchange(kind=kind, messages=list(messages), response=response, usage=usage, truncated=truncated)
        self.ledger.record(kind, usage)
        with self._lock:
            self.exchanges.append(exchange)
            if self._record_path:
                with open(self._record_path, "a", encoding="utf-8") as fh:
                    fh.write(dump_exchange(exchange) + "\n")
        return response, usage


def dump_exchange(exchange: LmExchange) -> str:
    return json.dumps(
        {
            "kind": exchange.kind.value,
            "messages": [[m.role, m.text] for m in exchange.messages],
            "response": exchange.response,
            "usage": [exchange.usage.prompt_tokens, exchange.usage.completion_tokens],
            "truncated": exchange.truncated,
        },
        sort_keys=True,
    )


def load_exchanges(path: str) -> list[LmExchange]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                LmExchange(
                    kind=PromptKind(rec["kind"]),
                    messages=[Message(role, text) for role, text in rec["messages"]],
                    response=rec["response"],
                    usage=TokenUsage(*rec["usage"]),
                    truncated=rec.get("truncated", False),
                )
            )
    return out
