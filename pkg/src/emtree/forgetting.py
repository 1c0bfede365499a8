"""Decay-based forgetting: expiration times, relevance-extended lifetimes, sweeps."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

from .clock import Timestamp
from .config import BuilderConfig
from .gateway import LmGateway, PromptKind, TokenUsage
from .prompts import ParseFailure, parse_relevance_response, render_relevance_prompt
from .rules import RelevanceRuleSet
from .tree import (
    Child,
    ForgottenPlaceholder,
    HistoryTree,
    SceneInstant,
    TimeSpan,
    TreeNode,
    forget_node,
    merge_placeholder_runs,
)

logger = logging.getLogger(__name__)

RELEVANCE_CAP = 100


@dataclass(frozen=True)
class RelevanceScore:
    """Lifetime multiplier for an expired node; None means keep forever."""

    value: int | None

    def __post_init__(self):
        if self.value is not None:
            object.__setattr__(self, "value", max(0, min(int(self.value), RELEVANCE_CAP)))

    @property
    def is_infinite(self) -> bool:
        return self.value is None


@dataclass
class SweepReport:
    forgotten: int = 0
    extended: int = 0
    visited: int = 0
    usage: TokenUsage = field(default_factory=TokenUsage)
    interrupted: bool = False

    def __post_init__(self):
        if self.forgotten + self.extended > self.visited:
            raise ValueError("forgotten + extended cannot exceed visited")


def gamma(level: int) -> int:
    """Lifetime multiplier: 1 up to the first higher level, doubling above."""
    return 1 if level <= 3 else 2 ** (level - 3)


def initial_expiration(span_end: Timestamp, level: int, config: BuilderConfig) -> Timestamp:
    return span_end + config.lifetime(level) * gamma(level)


def assign_expiration(node: TreeNode, config: BuilderConfig) -> TreeNode:
    node.expiration = initial_expiration(node.span.end, node.level, config)
    return node


def estimate_relevance(
    node: TreeNode,
    parent: TreeNode | None,
    rules: RelevanceRuleSet,
    gateway: LmGateway,
    now: Timestamp,
) -> tuple[RelevanceScore, TokenUsage]:
    """One LM call valuing an expired node; parse failure fails toward forgetting."""
    messages = render_relevance_prompt(
        item_text=node.describe(),
        parent_text=parent.describe() if parent is not None else None,
        rules=list(rules.rules),
        now=now,
    )
    response, usage = gateway.complete(PromptKind.RELEVANCE, messages)
    try:
        raw = parse_relevance_response(response)
    except ParseFailure:
        logger.warning("unparseable relevance response for node %s; defaulting to 0", node.id)
        return RelevanceScore(0), usage
    if raw == float("inf"):
        return RelevanceScore(None), usage
    return RelevanceScore(int(raw)), usage


class SweepInterrupted(Exception):
    pass


def sweep(
    tree: HistoryTree,
    now: Timestamp,
    rules: RelevanceRuleSet,
    gateway: LmGateway | None,
    config: BuilderConfig,
    interrupt: threading.Event | None = None,
    call_budget: int | None = None,
    estimate: bool = True,
) -> SweepReport:
    """Top-down forgetting pass, mutating the tree in place.

    Each expired node gets at most one lifetime extension per sweep; if it is
    still expired afterwards it collapses into a placeholder. Survivors are
    recursed into, then the parent's expiration is raised to cover all
    children. With estimate=False (pure time decay) no LM call is made and the
    relevance is taken as 0. The pass stops at a consistent frontier when the
    interrupt fires or the LM-call budget runs out.
    """
    report = SweepReport()
    calls = 0

    def should_stop() -> bool:
        if interrupt is not None and interrupt.is_set():
            return True
        return call_budget is not None and calls >= call_budget

    def visit(children: list[Child], owner: TreeNode | None) -> None:
        nonlocal calls
        changed = False
        for i, child in enumerate(children):
            if not isinstance(child, TreeNode):
                continue
            report.visited += 1
            if not child.never_expires and child.expiration < now:
                if estimate:
                    if should_stop():
                        report.interrupted = True
                        break
                    if gateway is None:
                        raise ValueError("relevance estimation needs a gateway")
                    score, usage = estimate_relevance(child, owner, rules, gateway, now)
                    calls += 1
                    report.usage = report.usage + usage
                else:
                    score = RelevanceScore(0)
                if score.is_infinite:
                    child.never_expires = True
                else:
                    child.expiration += score.value * config.lifetime(child.level)
                if not child.never_expires and child.expiration < now:
                    children[i] = forget_node(child)
                    report.forgotten += 1
                    changed = True
                    continue
                report.extended += 1
            visit(child.children, child)
            if report.interrupted:
                break
        if changed:
            merged = merge_placeholder_runs(children)
            children[:] = merged
        if owner is not None:
            surviving = owner.node_children()
            if any(c.never_expires for c in surviving):
                owner.never_expires = True
            if surviving:
                owner.expiration = max(owner.expiration, max(c.expiration for c in surviving))

    visit(tree.roots, None)
    return report


def forgotten_ratio(tree: HistoryTree, span: TimeSpan) -> float | None:
    """1.0 when every leaf inside the span is tombstoned, 0.0 when any survives.

    Returns None when the span falls outside the recorded history entirely.
    """
    surviving = 0
    tombstoned = 0

    def visit(child: Child) -> None:
        nonlocal surviving, tombstoned
        if isinstance(child, ForgottenPlaceholder):
            if child.span.intersects(span):
                tombstoned += 1
            return
        if isinstance(child, SceneInstant):
            return
        if not child.span.intersects(span):
            return
        if child.level == 0:
            surviving += 1
            return
        for sub in child.children:
            visit(sub)

    for root in tree.roots:
        visit(root)
    if surviving:
        return 0.0
    if tombstoned:
        return 1.0
    return None
