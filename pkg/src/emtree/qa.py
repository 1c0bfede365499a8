"""Agentic question answering: iterative node expansion over a tree snapshot."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .gateway import LmGateway, PromptKind, TokenUsage
from .prompts import ParseFailure, parse_qa_action, render_qa_prompt
from .tree import (
    Child,
    ForgottenPlaceholder,
    HistoryTree,
    SceneInstant,
    TreeNode,
)

logger = logging.getLogger(__name__)

NO_RECORD_ANSWER = "There is no record of that in my available history."
NO_ANSWER = "I could not find an answer in my history."

MODE_TREE = "tree"
MODE_FLAT = "flat"

_FORGOT_PATTERN = re.compile(
    r"(no record|already forgot|forgotten|do not have (a record|information)|no information about|not recorded)",
    re.IGNORECASE,
)

_TOKEN = re.compile(r"[a-z0-9]+")


def _tokens(text: str) -> set[str]:
    return set(_TOKEN.findall(text.lower()))


@dataclass
class QaResult:
    answer: str
    usage: TokenUsage
    trace: list[str] = field(default_factory=list)
    gave_up: bool = False
    forgotten_indicated: bool = False
    snapshot_version: int = 0

    @property
    def steps(self) -> int:
        return len(self.trace)


def _entry_lines(child: Child, expanded: set[str], indent: int = 0) -> list[str]:
    pad = "  " * indent
    if isinstance(child, ForgottenPlaceholder):
        return [f"{pad}forgotten: {child.span.human()}"]
    if isinstance(child, SceneInstant):
        return [f"{pad}{child.span.human(seconds=True)}: {child.first_line()}"]
    inner = [c for c in child.children if not isinstance(c, SceneInstant)]
    header = f"{pad}[{child.id}] {child.span.human()}: {child.first_line()}"
    if child.id in expanded and inner:
        lines = [header]
        for sub in child.children:
            lines.extend(_entry_lines(sub, expanded, indent + 1))
        return lines
    if inner:
        header += f" (contains {len(inner)})"
    return [header]


def render_exploration_view(snapshot: HistoryTree, expanded: set[str]) -> str:
    """QA-audience view: expanded subtrees inline, tombstones without summaries."""
    if snapshot.is_empty():
        return "(memory is empty)"
    lines: list[str] = []
    for root in snapshot.roots:
        lines.extend(_entry_lines(root, expanded))
    return "\n".join(lines)


def lexical_search(snapshot: HistoryTree, keywords: str, limit: int = 5) -> list[tuple[str, int]]:
    """Token-overlap ranking over all nodes, ties broken by recency then id."""
    wanted = _tokens(keywords)
    scored: list[tuple[int, int, str]] = []
    for node in snapshot.nodes():
        score = len(wanted & _tokens(node.summary))
        if score > 0:
            scored.append((score, node.span.end, node.id))
    scored.sort(key=lambda t: (-t[0], -t[1], t[2]))
    return [(node_id, score) for score, _, node_id in scored[:limit]]


def answer_question(
    snapshot: HistoryTree,
    question: str,
    gateway: LmGateway,
    mode: str = MODE_TREE,
    max_steps: int = 12,
) -> QaResult:
    """Explore the snapshot until the LM commits to an answer.

    The snapshot is never mutated. Every LM exchange counts as one step; the
    call returns a no-answer result when the step budget runs out.
    """
    expanded: set[str] = set()
    steps: list[tuple[str, str]] = []
    trace: list[str] = []
    usage = TokenUsage()
    answer: str | None = None
    last_expanded: TreeNode | None = None

    for _ in range(max_steps):
        view = render_exploration_view(snapshot, expanded)
        messages = render_qa_prompt(question, view, mode, steps)
        response, step_usage = gateway.complete(PromptKind.QA_AGENT, messages)
        usage = usage + step_usage
        try:
            action = parse_qa_action(response)
        except ParseFailure:
            steps.append(("(unparseable)", "Respond with exactly one action, e.g. Action: answer(...)"))
            trace.append("invalid()")
            continue
        trace.append(f"{action.type}({action.argument})")
        if action.type == "answer":
            answer = action.argument
            break
        if action.type == "expand":
            node = snapshot.find(action.argument)
            if node is None:
                steps.append(
                    (f"expand({action.argument})", f"No node {action.argument} in the memory view.")
                )
                continue
            if node.id in expanded:
                steps.append((f"expand({action.argument})", "That node is already expanded."))
                continue
            expanded.add(node.id)
            last_expanded = node
            steps.append((f"expand({action.argument})", f"Expanded {node.id}."))
            continue
        if action.type == "search":
            if mode != MODE_FLAT:
                steps.append((f"search({action.argument})", "Search is only available in flat mode."))
                continue
            hits = lexical_search(snapshot, action.argument)
            if hits:
                listing = "\n".join(f"[{node_id}] (score {score})" for node_id, score in hits)
                observation = f"Search results:\n{listing}"
            else:
                observation = "Search found no matching nodes."
            steps.append((f"search({action.argument})", observation))
            continue

    gave_up = answer is None
    if answer is None:
        answer = NO_ANSWER
    forgotten = bool(_FORGOT_PATTERN.search(answer))
    if not forgotten and last_expanded is not None and last_expanded.children:
        forgotten = all(
            isinstance(c, ForgottenPlaceholder) for c in last_expanded.children
        )
    return QaResult(
        answer=answer,
        usage=usage,
        trace=trace,
        gave_up=gave_up,
        forgotten_indicated=forgotten,
        snapshot_version=snapshot.version,
    )
