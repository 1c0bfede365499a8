"""History tree data model: nodes, spans, placeholders, rendering, snapshots."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Iterator, Union

from .clock import Timestamp, fmt_span, fmt_ts

logger = logging.getLogger(__name__)

# Level scheme is 0-based: 0 = scene instants (raw observations), 1 = events,
# 2 = goals, >= 3 = higher-level summaries. "L3+" metrics count level >= 2.
LEVEL_SCENE = 0
LEVEL_EVENT = 1
LEVEL_GOAL = 2

SHORT_SUMMARY_LIMIT = 200
PLACEHOLDER_JOIN = "; "

AUDIENCE_QA = "qa"
AUDIENCE_SUMMARIZER = "summarizer"


@dataclass(frozen=True, order=True)
class TimeSpan:
    start: Timestamp
    end: Timestamp

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"span start {self.start} after end {self.end}")

    @property
    def duration(self) -> int:
        return self.end - self.start

    def hull(self, other: TimeSpan) -> TimeSpan:
        return TimeSpan(min(self.start, other.start), max(self.end, other.end))

    def intersects(self, other: TimeSpan) -> bool:
        return self.start <= other.end and other.start <= self.end

    def contains(self, t: Timestamp) -> bool:
        return self.start <= t <= self.end

    def human(self, seconds: bool = False) -> str:
        return fmt_span(self.start, self.end, seconds=seconds)


@dataclass
class SceneInstant:
    """One raw observation: an ordered attribute map tied to a single instant."""

    at: Timestamp
    attributes: dict[str, str]
    source_id: str = ""

    def __post_init__(self):
        if not self.attributes:
            raise ValueError("scene instant needs at least one attribute")

    @property
    def span(self) -> TimeSpan:
        return TimeSpan(self.at, self.at)

    def first_line(self) -> str:
        action = self.attributes.get("action", "")
        return action or next(iter(self.attributes.values()))

    def describe_lines(self) -> list[str]:
        """Multi-line rendering used in summarizer prompts."""
        lines = [f"{fmt_ts(self.at)}: {self.first_line()}"]
        if self.attributes.get("speech"):
            lines.append(f"Speech: {self.attributes['speech']}")
        if self.attributes.get("objects"):
            lines.append(f"Visual observation: {self.attributes['objects']}")
        if self.attributes.get("location"):
            lines.append(f"Location: {self.attributes['location']}")
        for key, value in self.attributes.items():
            if key not in ("action", "speech", "objects", "location"):
                lines.append(f"{key}: {value}")
        return lines


@dataclass
class ForgottenPlaceholder:
    """Tombstone for a forgotten subtree: time range plus a one-line summary.

    The short summary stays visible to the summarizer but is hidden from QA.
    """

    span: TimeSpan
    short_summary: str = ""

    def __post_init__(self):
        self.short_summary = _single_line(self.short_summary)


Child = Union["TreeNode", SceneInstant, ForgottenPlaceholder]


@dataclass(eq=False)
class TreeNode:
    """Summary node; compared by identity since trees are mutated in place."""

    id: str
    level: int
    span: TimeSpan
    summary: str
    children: list[Child] = field(default_factory=list)
    expiration: Timestamp = 0
    never_expires: bool = False

    @property
    def kind(self) -> str:
        if self.level == LEVEL_SCENE:
            return "scene"
        if self.level == LEVEL_EVENT:
            return "event"
        if self.level == LEVEL_GOAL:
            return "goal"
        return "higher"

    def first_line(self) -> str:
        return _single_line(self.summary)

    def recompute_span(self) -> None:
        spans = [child_span(c) for c in self.children]
        if spans:
            self.span = TimeSpan(min(s.start for s in spans), max(s.end for s in spans))

    def node_children(self) -> list[TreeNode]:
        return [c for c in self.children if isinstance(c, TreeNode)]

    def describe(self) -> str:
        """One-line item text for prompts: "<span>: <summary>"."""
        return f"{self.span.human()}: {self.first_line()}"


def child_span(child: Child) -> TimeSpan:
    return child.span


def _single_line(text: str, limit: int = SHORT_SUMMARY_LIMIT) -> str:
    line = text.splitlines()[0].strip() if text else ""
    return line[:limit]


class HistoryTree:
    """Synthetic-rooted forest of summary nodes with a monotone version."""

    def __init__(self, max_depth: int = 8):
        if max_depth < 3:
            raise ValueError("max depth must be at least 3")
        self.max_depth = max_depth
        self.version = 0
        self.roots: list[Child] = []
        self.root_summary: str = ""
        self.last_cutoffs: dict[int, int] = {}
        self._next_id = 0

    def new_id(self) -> str:
        self._next_id += 1
        return f"n{self._next_id}"

    def walk(self) -> Iterator[tuple[TreeNode | None, Child]]:
        """Yield (parent, child) pairs in depth-first pre-order."""
        stack: list[tuple[TreeNode | None, Child]] = [(None, c) for c in reversed(self.roots)]
        while stack:
            parent, child = stack.pop()
            yield parent, child
            if isinstance(child, TreeNode):
                stack.extend((child, c) for c in reversed(child.children))

    def nodes(self, level: int | None = None) -> list[TreeNode]:
        found = [c for _, c in self.walk() if isinstance(c, TreeNode)]
        if level is not None:
            found = [n for n in found if n.level == level]
        found.sort(key=lambda n: (n.span.start, n.span.end))
        return found

    def find(self, node_id: str) -> TreeNode | None:
        for _, child in self.walk():
            if isinstance(child, TreeNode) and child.id == node_id:
                return child
        return None

    def parent_of(self, node: TreeNode) -> TreeNode | None:
        for parent, child in self.walk():
            if child is node:
                return parent
        return None

    def latest_end(self) -> Timestamp | None:
        ends = [child_span(c).end for c in self.roots]
        return max(ends) if ends else None

    def is_empty(self) -> bool:
        return not self.roots


def forget_node(node: TreeNode) -> ForgottenPlaceholder:
    """Collapse a node into a tombstone keeping its span and first summary line."""
    if not node.summary:
        logger.warning("forgetting node %s with empty summary", node.id)
    return ForgottenPlaceholder(span=node.span, short_summary=_single_line(node.summary))


def merge_placeholder_runs(children: list[Child]) -> list[Child]:
    """Collapse each maximal run of adjacent placeholders into one."""
    merged: list[Child] = []
    for child in children:
        if (
            isinstance(child, ForgottenPlaceholder)
            and merged
            and isinstance(merged[-1], ForgottenPlaceholder)
        ):
            prev = merged[-1]
            joined = PLACEHOLDER_JOIN.join(s for s in (prev.short_summary, child.short_summary) if s)
            merged[-1] = ForgottenPlaceholder(span=prev.span.hull(child.span), short_summary=joined)
        else:
            merged.append(child)
    return merged


def merge_adjacent_placeholders(parent: TreeNode) -> TreeNode:
    parent.children = merge_placeholder_runs(parent.children)
    return parent


def render(node: Child, audience: str, depth_limit: int = 2, indent: int = 0) -> str:
    """Render a subtree as text for the given audience.

    QA never sees placeholder short summaries; the summarizer does. Children
    beyond the depth limit collapse to one-line "[id] summary" stubs.
    """
    pad = "  " * indent
    if isinstance(node, ForgottenPlaceholder):
        if audience == AUDIENCE_QA or not node.short_summary:
            return f"{pad}forgotten: {node.span.human()}"
        return f"{pad}forgotten: {node.span.human()}: {node.short_summary}"
    if isinstance(node, SceneInstant):
        lines = node.describe_lines()
        return "\n".join(pad + line for line in lines)
    if depth_limit <= 0:
        return f"{pad}[{node.id}] {node.first_line()}"
    header = f"{pad}[{node.id}] {node.span.human()}: {node.first_line()}"
    parts = [header]
    for child in node.children:
        parts.append(render(child, audience, depth_limit - 1, indent + 1))
    return "\n".join(parts)


def snapshot(tree: HistoryTree) -> HistoryTree:
    """Deep, detached copy at the same version; safe for concurrent readers."""
    return copy.deepcopy(tree)


def count_nodes(tree: HistoryTree, min_level: int = LEVEL_GOAL) -> int:
    """Count non-placeholder nodes at or above a level (goal+ by default)."""
    return sum(1 for n in tree.nodes() if n.level >= min_level)


def _node_dict(child: Child, include_ids: bool) -> dict:
    if isinstance(child, ForgottenPlaceholder):
        return {
            "placeholder": True,
            "span": [child.span.start, child.span.end],
            "short_summary": child.short_summary,
        }
    if isinstance(child, SceneInstant):
        return {
            "instant": True,
            "at": child.at,
            "attributes": child.attributes,
            "source_id": child.source_id,
        }
    payload = {
        "level": child.level,
        "span": [child.span.start, child.span.end],
        "summary": child.summary,
        "expiration": child.expiration,
        "never_expires": child.never_expires,
        "children": [_node_dict(c, include_ids) for c in child.children],
    }
    if include_ids:
        payload["id"] = child.id
    return payload


def structural_hash(subject: HistoryTree | Child, include_ids: bool = True) -> str:
    """Stable content hash of a tree or subtree (sha256 of canonical JSON)."""
    if isinstance(subject, HistoryTree):
        payload = {
            "version": subject.version,
            "max_depth": subject.max_depth,
            "root_summary": subject.root_summary,
            "roots": [_node_dict(c, include_ids) for c in subject.roots],
        }
    else:
        payload = _node_dict(subject, include_ids)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def forest_hash(tree: HistoryTree, include_ids: bool = True) -> str:
    """Hash of node content only, ignoring version bookkeeping."""
    payload = [_node_dict(c, include_ids) for c in tree.roots]
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# --- serialization (emtree/1) -------------------------------------------------

FORMAT_HEADER = "emtree/1"


def _record(child: Child, parent_id: str | None) -> dict:
    if isinstance(child, ForgottenPlaceholder):
        return {
            "id": "",
            "level": None,
            "kind": "forgotten",
            "span": [child.span.start, child.span.end],
            "expiration": None,
            "summary": "",
            "parent_id": parent_id,
            "placeholder": True,
            "short_summary": child.short_summary,
        }
    assert isinstance(child, TreeNode)
    record = {
        "id": child.id,
        "level": child.level,
        "kind": child.kind,
        "span": [child.span.start, child.span.end],
        "expiration": None if child.never_expires else child.expiration,
        "summary": child.summary,
        "parent_id": parent_id,
        "placeholder": False,
        "short_summary": "",
    }
    if child.never_expires:
        record["never_expires"] = True
    instants = [c for c in child.children if isinstance(c, SceneInstant)]
    if instants:
        record["at"] = instants[0].at
        record["attributes"] = instants[0].attributes
        record["source_id"] = instants[0].source_id
    return record


def serialize(tree: HistoryTree) -> str:
    """Line-delimited text: "emtree/1" header, one JSON record per node."""
    lines = [FORMAT_HEADER]
    meta = {
        "meta": True,
        "version": tree.version,
        "max_depth": tree.max_depth,
        "root_summary": tree.root_summary,
        "next_id": tree._next_id,
    }
    lines.append(json.dumps(meta, sort_keys=True))

    def emit(child: Child, parent_id: str | None) -> None:
        lines.append(json.dumps(_record(child, parent_id), sort_keys=True))
        if isinstance(child, TreeNode):
            for sub in child.children:
                if not isinstance(sub, SceneInstant):
                    emit(sub, child.id)

    for root in tree.roots:
        emit(root, None)
    return "\n".join(lines) + "\n"


def deserialize(text: str) -> HistoryTree:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or lines[0] != FORMAT_HEADER:
        raise ValueError("not an emtree/1 file")
    meta = json.loads(lines[1])
    if not meta.get("meta"):
        raise ValueError("missing meta record")
    tree = HistoryTree(max_depth=meta["max_depth"])
    tree.version = meta["version"]
    tree.root_summary = meta.get("root_summary", "")
    tree._next_id = meta.get("next_id", 0)
    by_id: dict[str, TreeNode] = {}
    for line in lines[2:]:
        rec = json.loads(line)
        parent = by_id.get(rec["parent_id"]) if rec.get("parent_id") else None
        child: Child
        if rec.get("placeholder"):
            child = ForgottenPlaceholder(
                span=TimeSpan(*rec["span"]), short_summary=rec.get("short_summary", "")
            )
        else:
            node = TreeNode(
                id=rec["id"],
                level=rec["level"],
                span=TimeSpan(*rec["span"]),
                summary=rec["summary"],
                expiration=rec["expiration"] if rec["expiration"] is not None else 0,
                never_expires=bool(rec.get("never_expires")),
            )
            if "attributes" in rec:
                node.children.append(
                    SceneInstant(
                        at=rec["at"],
                        attributes=rec["attributes"],
                        source_id=rec.get("source_id", ""),
                    )
                )
            by_id[node.id] = node
            child = node
        if parent is None:
            tree.roots.append(child)
        else:
            parent.children.append(child)
    return tree


class InvariantViolation(AssertionError):
    pass


def validate_tree(tree: HistoryTree) -> None:
    """Check the structural invariants; raises InvariantViolation on the first hit.

    Covers span coverage, level discipline, sibling time order, non-overlap,
    and placeholder normal form.
    """
    for parent, child in tree.walk():
        if isinstance(child, SceneInstant):
            if parent is None or parent.level != 0:
                raise InvariantViolation("scene instants must sit inside level-0 nodes")
            if not parent.span.contains(child.at):
                raise InvariantViolation(f"instant at {child.at} outside parent span")
            continue
        if isinstance(child, TreeNode):
            if child.level >= tree.max_depth:
                raise InvariantViolation(f"node {child.id} exceeds the level bound")
            if parent is not None and child.level != parent.level - 1:
                raise InvariantViolation(
                    f"node {child.id} at level {child.level} under level {parent.level}"
                )
            node_children = child.node_children()
            non_instant = [c for c in child.children if not isinstance(c, SceneInstant)]
            if node_children:
                spans = [c.span for c in non_instant]
                if child.span.start != min(s.start for s in spans) or child.span.end != max(
                    s.end for s in spans
                ):
                    raise InvariantViolation(f"node {child.id} span does not cover children")
            starts = [child_span(c).start for c in child.children]
            if starts != sorted(starts):
                raise InvariantViolation(f"node {child.id} children out of time order")
            for a, b in zip(non_instant, non_instant[1:]):
                if isinstance(a, TreeNode) and isinstance(b, TreeNode) and a.span.end > b.span.start:
                    raise InvariantViolation(
                        f"node {child.id} holds overlapping sibling spans"
                    )
                if isinstance(a, ForgottenPlaceholder) and isinstance(b, ForgottenPlaceholder):
                    raise InvariantViolation(
                        f"node {child.id} holds adjacent unmerged placeholders"
                    )
    root_starts = [child_span(c).start for c in tree.roots]
    if root_starts != sorted(root_starts):
        raise InvariantViolation("top-level entries out of time order")
    for a, b in zip(tree.roots, tree.roots[1:]):
        if isinstance(a, ForgottenPlaceholder) and isinstance(b, ForgottenPlaceholder):
            raise InvariantViolation("adjacent unmerged placeholders at the top level")
