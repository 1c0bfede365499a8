"""Dialog manager: routes utterances to QA, relevance learning, or direct replies."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

from .clock import Clock
from .gateway import LmError, LmGateway, PromptKind
from .prompts import ParseFailure, parse_routing_response, render_routing_prompt
from .qa import MODE_TREE, QaResult, answer_question
from .rules import RuleStore
from .tree import HistoryTree

logger = logging.getLogger(__name__)

CONTEXT_WINDOW = 10

ROUTE_QUESTION = "question"
ROUTE_FEEDBACK = "feedback"
ROUTE_DIRECT = "direct"

_FUNCTION_ROUTES = {
    "answer_question_about_my_past": ROUTE_QUESTION,
    "handle_forgetting_feedback": ROUTE_FEEDBACK,
    "reply": ROUTE_DIRECT,
}


@dataclass(frozen=True)
class Route:
    kind: str
    text: str


class DialogManager:
    """One conversational session over a snapshot provider and a rule store."""

    def __init__(
        self,
        snapshot_provider: Callable[[], HistoryTree],
        rule_store: RuleStore,
        gateway: LmGateway,
        clock: Clock | None = None,
        qa_mode: str = MODE_TREE,
        max_steps: int = 12,
    ):
        self.snapshot_provider = snapshot_provider
        self.rule_store = rule_store
        self.gateway = gateway
        self.clock = clock or Clock()
        self.qa_mode = qa_mode
        self.max_steps = max_steps
        self.turns: list[tuple[str, str]] = []
        self.last_qa: QaResult | None = None

    def route(self, utterance: str) -> Route:
        """One routing LM call; failures fall back to treating it as a question."""
        if not utterance.strip():
            raise ValueError("utterance must be non-empty")
        messages = render_routing_prompt(utterance, self.turns[-CONTEXT_WINDOW:])
        try:
            response, _ = self.gateway.complete(PromptKind.DIALOG_ROUTING, messages)
            function, argument = parse_routing_response(response)
        except (ParseFailure, LmError):
            logger.warning("routing failed; treating utterance as a question")
            return Route(ROUTE_QUESTION, utterance)
        return Route(_FUNCTION_ROUTES[function], argument or utterance)

    def handle(self, utterance: str) -> str:
        route = self.route(utterance)
        if route.kind == ROUTE_QUESTION:
            snapshot = self.snapshot_provider()
            result = answer_question(
                snapshot, route.text, self.gateway, mode=self.qa_mode, max_steps=self.max_steps
            )
            self.last_qa = result
            reply = result.answer
        elif route.kind == ROUTE_FEEDBACK:
            ruleset = self.rule_store.learn(route.text, self.gateway, now=self.clock.now())
            reply = f"Understood. I updated my relevance rules (version {ruleset.version})."
        else:
            reply = route.text
        self.turns.append(("user", utterance))
        self.turns.append(("assistant", reply))
        return reply
