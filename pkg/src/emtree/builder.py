"""Online history tree construction: time-aware incremental grouping and batching."""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .config import BuilderConfig
from .forgetting import assign_expiration, initial_expiration
from .gateway import LmGateway, PromptKind, TokenUsage
from .prompts import (
    ParseFailure,
    parse_grouping_response,
    parse_summary_response,
    render_grouping_prompt,
    render_simple_summarize_prompt,
)
from .rules import RelevanceRuleSet
from .tree import (
    Child,
    ForgottenPlaceholder,
    HistoryTree,
    SceneInstant,
    TimeSpan,
    TreeNode,
    child_span,
    snapshot,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroupingDirective:
    """One revised group: an inclusive presented-index range plus its summary."""

    hi: int
    lo: int
    summary: str

    def __post_init__(self):
        if self.lo > self.hi or self.lo < 0:
            raise ValueError("directive range must satisfy 0 <= lo <= hi")

    @property
    def positions(self) -> set[int]:
        return set(range(self.lo, self.hi + 1))


# --- time-based clustering -----------------------------------------------------


def time_based_cluster(
    items: Sequence[Child], level: int, config: BuilderConfig
) -> list[list[Child]]:
    """Split time-ordered items where gaps exceed max(G * median gap, lifetime).

    If every cluster would be a singleton, one cluster holds all items.
    """
    if not items:
        return []
    gaps = [
        max(child_span(b).start - child_span(a).end, 0) for a, b in zip(items, items[1:])
    ]
    positive = [g for g in gaps if g > 0]
    threshold = float(config.lifetime(level))
    if positive:
        threshold = max(config.cluster_gap_factor * statistics.median(positive), threshold)
    clusters: list[list[Child]] = [[items[0]]]
    for gap, item in zip(gaps, items[1:]):
        if gap <= threshold:
            clusters[-1].append(item)
        else:
            clusters.append([item])
    if len(clusters) == len(items) and len(items) > 1:
        return [list(items)]
    return clusters


# --- presentation of one cluster to the grouping LM ------------------------------


@dataclass
class Presentation:
    """Items of one cluster numbered newest=0, with parent ownership ranges."""

    items: list[Child]  # oldest first, placeholders excluded
    groups: list[tuple[TreeNode, int, int]]  # (parent, hi, lo) presented indices
    loose: set[int]  # presented indices without a surviving parent

    def index_of(self, position: int) -> int:
        return len(self.items) - 1 - position

    def item_at_index(self, index: int) -> Child:
        return self.items[len(self.items) - 1 - index]


def item_lines(child: Child) -> list[str]:
    if isinstance(child, SceneInstant):
        lines = child.describe_lines()
        head = f"{child.span.human(seconds=True)}: {child.first_line()}"
        return [head] + lines[1:]
    if isinstance(child, TreeNode):
        scenes = [c for c in child.children if isinstance(c, SceneInstant)]
        if child.level == 0 and scenes:
            detail = scenes[0].describe_lines()[1:]
            return [f"{child.span.human(seconds=True)}: {child.first_line()}"] + detail
        return [f"{child.span.human(seconds=True)}: {child.first_line()}"]
    return [f"forgotten: {child.span.human()}"]


def build_presentation(parents: list[TreeNode], loose_items: list[Child]) -> Presentation:
    ordered: list[tuple[Child, TreeNode | None]] = []
    for parent in parents:
        for c in parent.children:
            if not isinstance(c, ForgottenPlaceholder):
                ordered.append((c, parent))
    for item in loose_items:
        ordered.append((item, None))
    ordered.sort(key=lambda pair: (child_span(pair[0]).start, child_span(pair[0]).end))
    items = [c for c, _ in ordered]
    n = len(items)
    groups: list[tuple[TreeNode, int, int]] = []
    loose: set[int] = set()
    position_by_parent: dict[int, list[int]] = {}
    for pos, (child, parent) in enumerate(ordered):
        index = n - 1 - pos
        if parent is None:
            loose.add(index)
        else:
            position_by_parent.setdefault(id(parent), []).append(index)
    seen: set[int] = set()
    for parent in parents:
        indices = position_by_parent.get(id(parent))
        if not indices or id(parent) in seen:
            continue
        seen.add(id(parent))
        hi, lo = max(indices), min(indices)
        if set(range(lo, hi + 1)) - set(indices) - loose:
            # time interleaving would make ownership ambiguous; treat as loose
            loose.update(indices)
            continue
        groups.append((parent, hi, lo))
    groups.sort(key=lambda g: -g[1])  # oldest (largest index) first
    return Presentation(items=items, groups=groups, loose=loose)


def _validate_directives(
    directives: list[GroupingDirective], presentation: Presentation
) -> bool:
    n = len(presentation.items)
    covered: set[int] = set()
    for d in directives:
        if d.hi >= n:
            return False
        if covered & d.positions:
            return False  # overlapping ranges
        covered |= d.positions
    if not covered:
        return False
    k = max(covered)
    if covered != set(range(0, k + 1)):
        return False  # must partition a contiguous suffix
    if presentation.loose - covered:
        return False  # every parentless item needs a home
    for _, hi, lo in presentation.groups:
        if lo <= k < hi:
            return False  # an existing group may not straddle the suffix boundary
    return True


def fallback_directives(presentation: Presentation, config: BuilderConfig) -> list[GroupingDirective]:
    """Each contiguous run of parentless items becomes one group (fail-safe)."""
    directives: list[GroupingDirective] = []
    indices = sorted(presentation.loose, reverse=True)
    run: list[int] = []
    for idx in indices:
        if run and run[-1] - idx > 1:
            directives.append(_run_directive(run, presentation))
            run = []
        run.append(idx)
    if run:
        directives.append(_run_directive(run, presentation))
    return directives


def _run_directive(run: list[int], presentation: Presentation) -> GroupingDirective:
    hi, lo = max(run), min(run)
    lines = [
        item_lines(presentation.item_at_index(i))[0].split(": ", 1)[-1]
        for i in sorted(run, reverse=True)
    ]
    return GroupingDirective(hi=hi, lo=lo, summary="; ".join(lines)[:200])


# --- directive application --------------------------------------------------------


@dataclass
class GroupingResult:
    children: list[Child]
    changed: bool
    usage: TokenUsage = field(default_factory=TokenUsage)


def _merge_children(base: list[Child], extra: list[Child]) -> list[Child]:
    merged = list(base) + list(extra)
    merged.sort(key=lambda c: (child_span(c).start, child_span(c).end))
    return merged


def _adopt_placeholders(children: list[Child], orphans: list[ForgottenPlaceholder]) -> list[Child]:
    """Re-home placeholders displaced by dissolved parents.

    Each orphan lands inside the node whose span covers it, or floats at the
    current level between nodes, preserving time order either way.
    """
    result = list(children)
    for orphan in sorted(orphans, key=lambda p: (p.span.start, p.span.end)):
        host = None
        for entry in result:
            if isinstance(entry, TreeNode) and entry.span.intersects(orphan.span):
                host = entry
                break
        if host is not None:
            host.children = _merge_children(host.children, [orphan])
            host.recompute_span()
        else:
            result = _merge_children(result, [orphan])
    return result


def apply_directives(
    directives: list[GroupingDirective],
    presentation: Presentation,
    level: int,
    tree: HistoryTree,
    config: BuilderConfig,
) -> GroupingResult:
    """Turn validated directives into the revised parent list for one cluster.

    A directive that covers exactly one existing group plus adjacent loose
    items, while keeping that group's summary, is absorbed in place and does
    not count as a change; anything else creates a fresh node.
    """
    k = max(d.hi for d in directives)
    kept_above = [(p, hi, lo) for p, hi, lo in presentation.groups if lo > k]
    replaced = [(p, hi, lo) for p, hi, lo in presentation.groups if hi <= k]
    changed = False

    result: list[Child] = [p for p, _, _ in kept_above]
    survivors: set[int] = set()
    for directive in sorted(directives, key=lambda d: -d.hi):
        members = [presentation.item_at_index(i) for i in range(directive.hi, directive.lo - 1, -1)]
        parents_inside = [
            (p, hi, lo) for p, hi, lo in replaced if directive.lo <= lo and hi <= directive.hi
        ]
        absorbed = None
        owned: set[int] = set()
        if len(parents_inside) == 1:
            p, hi, lo = parents_inside[0]
            owned = set(range(lo, hi + 1))
            if (directive.positions - owned) <= presentation.loose and directive.summary == p.summary:
                absorbed = p
        if absorbed is not None:
            survivors.add(id(absorbed))
            new_members = [
                presentation.item_at_index(i)
                for i in sorted(directive.positions - owned, reverse=True)
            ]
            if new_members:
                absorbed.children = _merge_children(absorbed.children, new_members)
                absorbed.recompute_span()
                absorbed.expiration = max(
                    absorbed.expiration,
                    initial_expiration(absorbed.span.end, absorbed.level, config),
                )
            result.append(absorbed)
            continue
        changed = True
        node = TreeNode(
            id=tree.new_id(),
            level=level + 1,
            span=TimeSpan(
                min(child_span(m).start for m in members),
                max(child_span(m).end for m in members),
            ),
            summary=directive.summary,
            children=list(members),
        )
        assign_expiration(node, config)
        result.append(node)
    # every covered parent not absorbed is dissolved; its tombstones get re-homed
    displaced: list[ForgottenPlaceholder] = []
    for p, _, _ in replaced:
        if id(p) not in survivors:
            displaced.extend(c for c in p.children if isinstance(c, ForgottenPlaceholder))
    result = _adopt_placeholders(result, displaced)
    result.sort(key=lambda c: (child_span(c).start, child_span(c).end))
    return GroupingResult(children=result, changed=changed)


# --- grouping entry points ---------------------------------------------------------

# A domain grouper may take over a level entirely (no LM call); it returns the
# directive list for the presentation, or None to defer to the LM.
DomainGrouper = Callable[[Presentation, int], "list[GroupingDirective] | None"]


def _prompt_groups(presentation: Presentation) -> list[tuple[int, int, str, list[tuple[int, list[str]]]]]:
    groups = []
    n = len(presentation.items)
    for parent, hi, lo in presentation.groups:
        members = []
        for index in range(hi, lo - 1, -1):
            if index in presentation.loose:
                continue
            members.append((index, item_lines(presentation.items[n - 1 - index])))
        groups.append((hi, lo, parent.summary, members))
    return groups


def _prompt_loose(presentation: Presentation) -> list[tuple[int, list[str]]]:
    n = len(presentation.items)
    return [
        (index, item_lines(presentation.items[n - 1 - index]))
        for index in sorted(presentation.loose, reverse=True)
    ]


def group_and_summarize(
    parents: list[TreeNode],
    new_items: list[Child],
    level: int,
    tree: HistoryTree,
    config: BuilderConfig,
    gateway: LmGateway | None,
    rules: RelevanceRuleSet | None = None,
    grouper: DomainGrouper | None = None,
    trace: list | None = None,
    cluster_id: int = 0,
) -> GroupingResult:
    """One grouping decision for one cluster: directives in, revised parents out."""
    presentation = build_presentation(parents, new_items)
    if not presentation.items:
        return GroupingResult(children=list(parents), changed=False)
    usage = TokenUsage()
    directives: list[GroupingDirective] | None = None
    if grouper is not None:
        directives = grouper(presentation, level)
    if directives is None:
        if gateway is None:
            directives = fallback_directives(presentation, config)
        else:
            messages = render_grouping_prompt(
                groups=_prompt_groups(presentation),
                current_items=_prompt_loose(presentation),
                rules=list(rules.rules) if rules is not None and rules.rules else None,
            )
            response, usage = gateway.complete(PromptKind.GROUPING, messages)
            try:
                parsed = parse_grouping_response(response)
                directives = [
                    GroupingDirective(hi=hi, lo=lo, summary=summary)
                    for (hi, lo), summary in sorted(parsed.items(), key=lambda kv: -kv[0][0])
                ]
            except (ParseFailure, ValueError):
                logger.warning("unparseable grouping response at level %d; using fallback", level)
                directives = fallback_directives(presentation, config)
    if not _validate_directives(directives, presentation):
        logger.warning("invalid grouping directives at level %d; using fallback", level)
        directives = fallback_directives(presentation, config)
    outcome = apply_directives(directives, presentation, level, tree, config)
    outcome.usage = usage
    if trace is not None:
        trace.append(
            {
                "level": level,
                "cluster": cluster_id,
                "directives": [(d.hi, d.lo, d.summary) for d in directives],
                "usage": [usage.prompt_tokens, usage.completion_tokens],
            }
        )
    return outcome


def time_aware_group_and_summarize(
    old_entries: list[Child],
    new_entries: list[Child],
    level: int,
    tree: HistoryTree,
    config: BuilderConfig,
    gateway: LmGateway | None,
    rules: RelevanceRuleSet | None = None,
    grouper: DomainGrouper | None = None,
    trace: list | None = None,
) -> list[Child]:
    """Cluster items by time, then re-group only clusters that hold new items.

    `old_entries` are the current level+1 entries (parents and tombstones);
    `new_entries` are parentless level items plus displaced tombstones. Clusters
    without new items pass through verbatim.
    """
    parents = [e for e in old_entries if isinstance(e, TreeNode)]
    floaters = [e for e in old_entries if isinstance(e, ForgottenPlaceholder)]
    new_items = [e for e in new_entries if not isinstance(e, ForgottenPlaceholder)]
    displaced = [e for e in new_entries if isinstance(e, ForgottenPlaceholder)]

    # parents holding only tombstones offer nothing to re-group; they pass
    # through untouched so forgotten ranges are never dropped
    hollow = [
        p for p in parents if all(isinstance(c, ForgottenPlaceholder) for c in p.children)
    ]
    hollow_ids = {id(p) for p in hollow}
    parents = [p for p in parents if id(p) not in hollow_ids]

    flat: list[tuple[Child, TreeNode | None]] = []
    for parent in parents:
        for c in parent.children:
            if not isinstance(c, ForgottenPlaceholder):
                flat.append((c, parent))
    for item in new_items:
        flat.append((item, None))
    flat.sort(key=lambda pair: (child_span(pair[0]).start, child_span(pair[0]).end))
    owner = {id(c): p for c, p in flat}
    items = [c for c, _ in flat]

    clusters = time_based_cluster(items, level, config)
    cluster_of: dict[int, int] = {}
    for ci, cluster in enumerate(clusters):
        for item in cluster:
            cluster_of[id(item)] = ci
    split_parents: set[int] = set()
    for parent in parents:
        member_clusters = {
            cluster_of[id(c)]
            for c in parent.children
            if not isinstance(c, ForgottenPlaceholder)
        }
        if len(member_clusters) > 1:
            split_parents.add(id(parent))
            displaced.extend(c for c in parent.children if isinstance(c, ForgottenPlaceholder))

    result: list[Child] = []
    for cluster_id, cluster in enumerate(clusters):
        cluster_parents: list[TreeNode] = []
        seen: set[int] = set()
        loose: list[Child] = []
        for item in cluster:
            parent = owner.get(id(item))
            if parent is None or id(parent) in split_parents:
                loose.append(item)
            elif id(parent) not in seen:
                seen.add(id(parent))
                cluster_parents.append(parent)
        if not loose:
            result.extend(cluster_parents)
            continue
        outcome = group_and_summarize(
            cluster_parents, loose, level, tree, config, gateway, rules, grouper, trace,
            cluster_id=cluster_id,
        )
        result.extend(outcome.children)
    result = _adopt_placeholders(result, displaced)
    for keeper in list(floaters) + list(hollow):
        result = _merge_children(result, [keeper])
    result.sort(key=lambda c: (child_span(c).start, child_span(c).end))
    return result


# --- the online construction loop ---------------------------------------------------


def level_entries(tree: HistoryTree, level: int) -> list[Child]:
    """Nodes at a level plus tombstones sitting among them, in time order."""
    entries: list[Child] = []
    for parent, child in tree.walk():
        if isinstance(child, TreeNode) and child.level == level:
            entries.append(child)
        elif isinstance(child, ForgottenPlaceholder):
            if (parent is None and level == tree.max_depth - 1) or (
                parent is not None and parent.level == level + 1
            ):
                entries.append(child)
    entries.sort(key=lambda c: (child_span(c).start, child_span(c).end))
    return entries


def index_of_first_change(new: list[Child], old: list[Child]) -> int | None:
    """First position where the lists diverge by identity; None when equal."""
    for i, (a, b) in enumerate(zip(new, old)):
        if a is not b:
            return i
    if len(new) != len(old):
        return min(len(new), len(old))
    return None


def _median_intra_parent_gap(parents: list[TreeNode]) -> float | None:
    gaps: list[int] = []
    for parent in parents:
        members = [c for c in parent.children if not isinstance(c, ForgottenPlaceholder)]
        for a, b in zip(members, members[1:]):
            gap = child_span(b).start - child_span(a).end
            if gap > 0:
                gaps.append(gap)
    return statistics.median(gaps) if gaps else None


def _p95(values: list[int]) -> int:
    ordered = sorted(values)
    return ordered[min(len(ordered) - 1, int(0.95 * (len(ordered) - 1) + 0.5))]


def prevent_push(
    tree: HistoryTree, new_items: list[Child], level: int, config: BuilderConfig
) -> bool:
    """Cheap continuation check: absorb into the latest parent without regrouping.

    Fires when the newest item sits closer to the tree's most recent item than
    typical intra-parent gaps, or when promotion would mint a parent whose span
    dwarfs the existing ones at that level.
    """
    parents = [e for e in level_entries(tree, level + 1) if isinstance(e, TreeNode)]
    if not parents or not new_items:
        return False
    latest = parents[-1]
    members = [c for c in latest.children if not isinstance(c, ForgottenPlaceholder)]
    if not members:
        return False
    first_new = min(child_span(c).start for c in new_items)
    gap = max(first_new - child_span(members[-1]).end, 0)
    med = _median_intra_parent_gap(parents)
    if med is not None and gap < med:
        return True
    # the span clause applies only when the items would cluster together anyway
    item_gaps = [
        max(child_span(b).start - child_span(a).end, 0)
        for a, b in zip(members, members[1:])
        if child_span(b).start > child_span(a).end
    ]
    threshold = float(config.lifetime(level))
    if item_gaps:
        threshold = max(config.cluster_gap_factor * statistics.median(item_gaps), threshold)
    if gap > threshold:
        return False
    last_new = max(child_span(c).end for c in new_items)
    candidate_span = last_new - latest.span.start
    spans = [p.span.duration for p in parents]
    p95 = _p95(spans)
    return p95 > 0 and candidate_span > config.push_prevention_factor * p95


def _insert_into_latest_parent(
    tree: HistoryTree,
    new_items: list[Child],
    level: int,
    config: BuilderConfig,
    gateway: LmGateway | None,
    grouper_summary: Callable[[TreeNode], str] | None = None,
) -> TreeNode:
    parents = [e for e in level_entries(tree, level + 1) if isinstance(e, TreeNode)]
    latest = parents[-1]
    latest.children = _merge_children(latest.children, new_items)
    latest.recompute_span()
    latest.expiration = max(
        latest.expiration, initial_expiration(latest.span.end, latest.level, config)
    )
    if grouper_summary is not None:
        latest.summary = grouper_summary(latest)
    elif gateway is not None:
        lines = [
            item_lines(c)[0]
            for c in latest.children
            if not isinstance(c, ForgottenPlaceholder)
        ]
        response, _ = gateway.complete(
            PromptKind.SIMPLE_SUMMARIZE, render_simple_summarize_prompt(lines)
        )
        try:
            latest.summary = parse_summary_response(response)
        except ParseFailure:
            pass
    return latest


def recompute_spans(tree: HistoryTree, config: BuilderConfig | None = None) -> None:
    """Re-derive spans bottom-up; optionally lift expirations to match new ends.

    A node whose span end did not move keeps its expiration (it can only ever
    be at or above the initial value), so frozen history is untouched.
    """

    def visit(node: Child) -> None:
        if not isinstance(node, TreeNode):
            return
        for c in node.children:
            visit(c)
        node.recompute_span()
        if config is not None and not node.never_expires:
            node.expiration = max(
                node.expiration, initial_expiration(node.span.end, node.level, config)
            )

    for root in tree.roots:
        visit(root)


def _simple_summarize(
    entries: list[Child], gateway: LmGateway | None
) -> str:
    lines = [item_lines(c)[0] for c in entries if not isinstance(c, ForgottenPlaceholder)]
    if not lines:
        return ""
    if gateway is None:
        return "; ".join(line.split(": ", 1)[-1] for line in lines)[:200]
    response, _ = gateway.complete(
        PromptKind.SIMPLE_SUMMARIZE, render_simple_summarize_prompt(lines)
    )
    try:
        return parse_summary_response(response)
    except ParseFailure:
        return "; ".join(line.split(": ", 1)[-1] for line in lines)[:200]


def make_scene_node(tree: HistoryTree, instant: SceneInstant, config: BuilderConfig) -> TreeNode:
    summary = instant.first_line()
    if instant.attributes.get("location"):
        summary = f"{summary} at {instant.attributes['location']}"
    if instant.attributes.get("speech"):
        summary = f"{summary}; heard \"{instant.attributes['speech']}\""
    node = TreeNode(
        id=tree.new_id(),
        level=0,
        span=TimeSpan(instant.at, instant.at),
        summary=summary,
        children=[instant],
    )
    return assign_expiration(node, config)


def update_tree(
    tree: HistoryTree,
    batch: list[SceneInstant],
    config: BuilderConfig,
    gateway: LmGateway | None,
    rules: RelevanceRuleSet | None = None,
    grouper: "RuleBasedGrouper | None" = None,
    trace: list | None = None,
) -> HistoryTree:
    """Fold a batch of new scenes into the tree (one committed version).

    Levels are revised bottom-up; changed parents are detached together with
    their siblings and re-grouped one level higher until a level absorbs the
    changes in place, the continuation short-circuit fires, or the top is
    re-summarized. Old parents whose span ends before the level's visibility
    cutoff are never presented to the LM and stay bit-stable.
    """
    if not batch:
        return tree
    batch = sorted(batch, key=lambda s: s.at)
    latest = tree.latest_end()
    if latest is not None and batch[0].at < latest:
        raise ValueError("batch timestamps must not precede existing tree content")

    work = snapshot(tree)
    work.last_cutoffs = {}
    new_entries: list[Child] = [make_scene_node(work, s, config) for s in batch]
    level = 0
    while level < work.max_depth - 1:
        old_entries = level_entries(work, level + 1)
        # the continuation shortcut must not override rule-based boundaries
        rule_level = grouper is not None and grouper.handles(level)
        if level == 0 and not rule_level and prevent_push(work, new_entries, level, config):
            _insert_into_latest_parent(work, new_entries, level, config, gateway)
            break
        starts = [child_span(c).start for c in new_entries]
        cutoff = min(starts) - int(config.visibility_window_factor * config.lifetime(level + 1))
        work.last_cutoffs[level + 1] = cutoff
        frozen = [e for e in old_entries if child_span(e).end < cutoff]
        visible = [e for e in old_entries if child_span(e).end >= cutoff]
        merged = time_aware_group_and_summarize(
            visible, new_entries, level, work, config, gateway, rules,
            grouper.directives if grouper is not None else None, trace,
        )
        revised = frozen + merged
        changed_at = index_of_first_change(revised, old_entries)
        if changed_at is None:
            break
        # detach every entry from the first change on and re-queue the siblings
        # of their dissolved parents for re-grouping one level up
        stale = old_entries[changed_at:]
        stale_ids = {id(e) for e in stale}
        carried = {id(e) for e in revised[changed_at:]}
        requeued: list[Child] = []
        dissolved: set[int] = set()
        for entry in stale:
            parent = _holder_of(work, entry)
            if parent is None:
                _remove_root(work, entry)
                continue
            if id(parent) in dissolved:
                continue
            dissolved.add(id(parent))
            for sibling in parent.children:
                if id(sibling) in carried or id(sibling) in stale_ids:
                    continue
                requeued.append(sibling)
            parent.children = []
            _drop_empty(work, parent)
        new_entries = list(revised[changed_at:])
        present = {id(e) for e in new_entries}
        for sibling in requeued:
            if id(sibling) not in present:
                new_entries.append(sibling)
        new_entries.sort(key=lambda c: (child_span(c).start, child_span(c).end))
        level += 1
        if level == work.max_depth - 1:
            work.roots = revised
            work.root_summary = _simple_summarize(revised, gateway)
            break
        # anything still pending must be parentless before the next iteration
        _detach_all(work, new_entries)
    recompute_spans(work, config)
    work.version = tree.version + 1
    return work


def _holder_of(tree: HistoryTree, entry: Child) -> TreeNode | None:
    for parent, child in tree.walk():
        if child is entry:
            return parent
    return None


def _remove_root(tree: HistoryTree, entry: Child) -> None:
    tree.roots = [r for r in tree.roots if r is not entry]


def _drop_empty(tree: HistoryTree, node: TreeNode) -> None:
    while node is not None and not node.children:
        parent = tree.parent_of(node)
        if parent is None:
            _remove_root(tree, node)
            return
        parent.children = [c for c in parent.children if c is not node]
        node = parent


def _detach_all(tree: HistoryTree, entries: list[Child]) -> None:
    wanted = {id(e) for e in entries}
    for entry in entries:
        holder = _holder_of(tree, entry)
        if holder is None:
            if any(r is entry for r in tree.roots):
                _remove_root(tree, entry)
            continue
        holder.children = [c for c in holder.children if c is not entry]
        _drop_empty(tree, holder)


# --- rule-based low levels (domain adapter) -------------------------------------------


def action_name(text: str) -> str:
    head = text.split("(", 1)[0].split(";", 1)[0].split(",", 1)[0]
    return head.strip()


def scene_attrs(node: Child) -> dict[str, str]:
    """Attributes of the first scene instant beneath a node (if any)."""
    current: Child | None = node
    for _ in range(16):
        if isinstance(current, SceneInstant):
            return current.attributes
        if not isinstance(current, TreeNode):
            return {}
        current = next(
            (c for c in current.children if not isinstance(c, ForgottenPlaceholder)), None
        )
        if current is None:
            return {}
    return {}


class RuleBasedGrouper:
    """Deterministic event/goal construction from the scene stream.

    A new event starts whenever the action, the observed scene graph, or the
    location changes, or when speech arrives. A goal collects events until an
    interaction (non-navigation) action closes it.
    """

    def __init__(self, config: BuilderConfig):
        self.config = config

    def handles(self, level: int) -> bool:
        return level in (0, 1)

    def directives(self, presentation: Presentation, level: int) -> list[GroupingDirective] | None:
        if not self.handles(level):
            return None
        if level == 0:
            return self._event_directives(presentation)
        return self._goal_directives(presentation)

    def summary_for_level(self, parent_level: int) -> Callable[[TreeNode], str]:
        if parent_level == 1:
            return lambda node: self.event_summary(
                [c for c in node.children if not isinstance(c, ForgottenPlaceholder)]
            )
        return lambda node: self.goal_summary(
            [c for c in node.children if not isinstance(c, ForgottenPlaceholder)]
        )

    def is_interaction(self, item: Child) -> bool:
        attrs = scene_attrs(item)
        name = action_name(attrs.get("action", ""))
        return name in self.config.interaction_actions

    def _event_boundary(self, prev: Child | None, item: Child) -> bool:
        if prev is None:
            return True
        a, b = scene_attrs(prev), scene_attrs(item)
        if b.get("speech"):
            return True
        return (
            a.get("action") != b.get("action")
            or a.get("objects") != b.get("objects")
            or a.get("location") != b.get("location")
        )

    def event_summary(self, scenes: list[Child]) -> str:
        attrs = scene_attrs(scenes[0]) if scenes else {}
        parts = [attrs.get("action", "")]
        if attrs.get("location"):
            parts.append(f"at {attrs['location']}")
        if attrs.get("speech"):
            parts.append(f'heard "{attrs["speech"]}"')
        return ", ".join(p for p in parts if p)[:200]

    def goal_summary(self, events: list[Child]) -> str:
        lines = []
        for event in events:
            if isinstance(event, TreeNode):
                lines.append(event.first_line())
            elif isinstance(event, SceneInstant):
                lines.append(event.first_line())
        return "; ".join(lines)[:200]

    def _event_directives(self, presentation: Presentation) -> list[GroupingDirective]:
        return self._segment(presentation, self._event_boundary, self.event_summary)

    def _goal_directives(self, presentation: Presentation) -> list[GroupingDirective]:
        def boundary(prev: Child | None, item: Child) -> bool:
            if prev is None:
                return True
            return self.is_interaction(prev)  # an interaction closes the goal

        return self._segment(presentation, boundary, self.goal_summary)

    def _segment(
        self,
        presentation: Presentation,
        boundary: Callable[[Child | None, Child], bool],
        summarize: Callable[[list[Child]], str],
    ) -> list[GroupingDirective]:
        """Cover the loose suffix with boundary-derived groups.

        When the oldest loose item continues the newest existing group, that
        group is re-issued with its membership extended (same summary when the
        content is unchanged, which lets the update stop at this level).
        """
        if not presentation.loose:
            return []
        k = max(presentation.loose)
        if presentation.loose != set(range(0, k + 1)):
            # loose items are not a clean suffix (split parents): fail safe
            return fallback_directives(presentation, self.config)
        last_group: tuple[TreeNode, int, int] | None = None
        for parent, hi, lo in presentation.groups:
            if lo == k + 1:
                last_group = (parent, hi, lo)
        prev_item: Child | None = None
        if last_group is not None:
            members = [c for c in last_group[0].children if not isinstance(c, ForgottenPlaceholder)]
            prev_item = members[-1] if members else None
        segments: list[list[int]] = []
        continues_last = False
        for index in range(k, -1, -1):
            item = presentation.item_at_index(index)
            if boundary(prev_item, item):
                segments.append([index])
            elif segments:
                segments[-1].append(index)
            else:
                continues_last = last_group is not None
                segments.append([index])
            prev_item = item
        directives: list[GroupingDirective] = []
        for i, segment in enumerate(segments):
            hi, lo = max(segment), min(segment)
            members = [presentation.item_at_index(j) for j in sorted(segment, reverse=True)]
            if i == 0 and continues_last and last_group is not None:
                hi = last_group[1]
                members = [
                    c for c in last_group[0].children if not isinstance(c, ForgottenPlaceholder)
                ] + members
            directives.append(GroupingDirective(hi=hi, lo=lo, summary=summarize(members)))
        return directives



# --- offline and flat construction paths ----------------------------------------------


def _make_parent(
    tree: HistoryTree,
    level: int,
    children: list[Child],
    summary: str,
    config: BuilderConfig,
) -> TreeNode:
    node = TreeNode(
        id=tree.new_id(),
        level=level,
        span=TimeSpan(
            min(child_span(c).start for c in children),
            max(child_span(c).end for c in children),
        ),
        summary=summary,
        children=list(children),
    )
    return assign_expiration(node, config)


def derive_low_levels(scenes: list[SceneInstant], config: BuilderConfig) -> HistoryTree:
    """Deterministic scene -> event -> goal construction for a whole stream.

    Applies the same trigger rules as the incremental grouper: event boundaries
    on action/scene-graph/location change or speech, goal cuts after each
    interaction action. The returned tree has goal nodes as roots.
    """
    tree = HistoryTree(max_depth=config.max_depth)
    grouper = RuleBasedGrouper(config)
    ordered = sorted(scenes, key=lambda s: s.at)
    scene_nodes = [make_scene_node(tree, s, config) for s in ordered]

    events: list[TreeNode] = []
    pending: list[TreeNode] = []
    prev: TreeNode | None = None
    for node in scene_nodes:
        if pending and grouper._event_boundary(prev, node):
            events.append(_make_parent(tree, 1, pending, grouper.event_summary(pending), config))
            pending = []
        pending.append(node)
        prev = node
    if pending:
        events.append(_make_parent(tree, 1, pending, grouper.event_summary(pending), config))

    goals: list[TreeNode] = []
    pending_events: list[TreeNode] = []
    for event in events:
        pending_events.append(event)
        if grouper.is_interaction(event):
            goals.append(
                _make_parent(tree, 2, pending_events, grouper.goal_summary(pending_events), config)
            )
            pending_events = []
    if pending_events:
        goals.append(
            _make_parent(tree, 2, pending_events, grouper.goal_summary(pending_events), config)
        )

    tree.roots = list(goals)
    tree.version = 1
    return tree


def offline_build(
    scenes: list[SceneInstant],
    config: BuilderConfig,
    gateway: LmGateway | None,
    rules: RelevanceRuleSet | None = None,
    trace: list | None = None,
) -> HistoryTree:
    """Retrospective bottom-up construction over the full recording."""
    tree = derive_low_levels(scenes, config)
    current: list[Child] = list(tree.roots)
    level = 2
    while level < config.max_depth - 1 and len(current) > 1:
        revised: list[Child] = []
        for cluster in time_based_cluster(current, level, config):
            outcome = group_and_summarize(
                [], cluster, level, tree, config, gateway, rules, None, trace
            )
            revised.extend(outcome.children)
        revised.sort(key=lambda c: (child_span(c).start, child_span(c).end))
        current = revised
        tree.roots = list(current)
        level += 1
    tree.roots = list(current)
    tree.root_summary = _simple_summarize(current, gateway)
    recompute_spans(tree, config)
    return tree
