from __future__ import annotations

import json
import random

import pytest

from emtree.clock import DAY, HOUR
from emtree.gateway import LmGateway, Message, PromptKind
from emtree.prompts import extract_current_items, extract_group_headers
from emtree.builder import (
    RuleBasedGrouper,
    derive_low_levels,
    group_and_summarize,
    index_of_first_change,
    make_scene_node,
    offline_build,
    prevent_push,
    time_aware_group_and_summarize,
    time_based_cluster,
    update_tree,
)
from emtree.scripted import ScriptedBackend, ScriptedRule
from emtree.tree import (
    HistoryTree,
    SceneInstant,
    TreeNode,
    forest_hash,
    structural_hash,
)

from .conftest import T0, make_node, scene


def append_to_latest_rule() -> ScriptedRule:
    """Grouping rule that folds all new items into the latest existing group,
    keeping that group's summary (or starts one group when none exists)."""

    def respond(messages: list[Message]) -> str:
        items = extract_current_items(messages)
        headers = extract_group_headers(messages)
        hi = max(idx for idx, _ in items)
        if headers:
            latest = min(headers, key=lambda h: h[1])  # smallest lo = newest group
            hi = latest[0]
            summary = latest[2]
        else:
            # canonical summary (oldest item) keeps the rule order-insensitive
            oldest = max(items, key=lambda pair: pair[0])
            summary = oldest[1].split(": ", 1)[-1]
        return "Reasoning: continue the latest group.\nJSON: " + json.dumps({f"{hi}-0": summary})

    return ScriptedRule(PromptKind.GROUPING, respond)


class TestTimeBasedCluster:
    def test_splits_at_large_gap(self, config):
        # gaps 1m, 1m, 8h with scene lifetime 15m and G=10
        tree = HistoryTree()
        items = [
            make_node(tree, 0, T0, T0),
            make_node(tree, 0, T0 + 60, T0 + 60),
            make_node(tree, 0, T0 + 120, T0 + 120),
            make_node(tree, 0, T0 + 120 + 8 * HOUR, T0 + 120 + 8 * HOUR),
        ]
        clusters = time_based_cluster(items, 0, config)
        assert [len(c) for c in clusters] == [3, 1]
        # brute-force threshold check: max(10 * median(60,60,28800), 900) = 900
        assert clusters[0] == items[:3]

    def test_single_item(self, config):
        tree = HistoryTree()
        items = [make_node(tree, 0, T0, T0)]
        assert time_based_cluster(items, 0, config) == [items]

    def test_equal_gaps_one_cluster(self, config):
        tree = HistoryTree()
        items = [make_node(tree, 0, T0 + i * HOUR, T0 + i * HOUR) for i in range(5)]
        clusters = time_based_cluster(items, 0, config)
        assert len(clusters) == 1

    def test_all_singletons_collapse(self, config):
        # every gap exceeds the threshold; the singleton rule keeps one cluster
        tree = HistoryTree()
        items = [
            make_node(tree, 0, T0, T0),
            make_node(tree, 0, T0 + 30 * DAY, T0 + 30 * DAY),
            make_node(tree, 0, T0 + 60 * DAY, T0 + 60 * DAY),
        ]
        assert time_based_cluster(items, 0, config) == [items]

    def test_empty(self, config):
        assert time_based_cluster([], 0, config) == []

    def test_matches_threshold_scan(self, config):
        # oracle: recompute the threshold directly and split accordingly
        import statistics

        rng = random.Random(5)
        for _ in range(50):
            tree = HistoryTree()
            t, items = T0, []
            for _ in range(rng.randint(2, 12)):
                items.append(make_node(tree, 1, t, t + 10))
                t += 10 + rng.choice([30, 60, 600, 7200, DAY])
            gaps = [b.span.start - a.span.end for a, b in zip(items, items[1:])]
            positive = [g for g in gaps if g > 0]
            threshold = max(
                config.cluster_gap_factor * statistics.median(positive), config.lifetime(1)
            ) if positive else config.lifetime(1)
            expected = 1
            for gap in gaps:
                if gap > threshold:
                    expected += 1
            clusters = time_based_cluster(items, 1, config)
            if expected == len(items) and len(items) > 1:
                assert len(clusters) == 1
            else:
                assert len(clusters) == expected


def _cooking_fixture(config):
    """Three existing groups presented as indices (6-6), (5-5), (4-1) plus a
    new item 0, mirroring the canonical microwave example."""
    tree = HistoryTree(max_depth=6)
    t = T0
    mk = lambda summary: make_node(tree, 1, t, t + 30, summary=summary, config=config)
    items = []
    for i, summary in enumerate(
        [
            "Pickup(Potato_4)",
            "ToggleOff(Microwave)",
            "Open(Microwave)",
            "Place(Potato_4, Microwave)",
            "Close(Microwave)",
            "ToggleOn(Microwave)",
        ]
    ):
        node = make_node(tree, 1, T0 + i * 60, T0 + i * 60 + 30, summary=summary, config=config)
        items.append(node)
    g6 = make_node(tree, 2, items[0].span.start, items[0].span.end,
                   summary="I picked up a potato", children=[items[0]], config=config)
    g5 = make_node(tree, 2, items[1].span.start, items[1].span.end,
                   summary="I toggled off the microwave", children=[items[1]], config=config)
    g41 = make_node(tree, 2, items[2].span.start, items[5].span.end,
                    summary="I opened the microwave, placed Potato_4 inside, closed it, and turned it on",
                    children=items[2:6], config=config)
    new_item = make_node(tree, 1, T0 + 6 * 60, T0 + 6 * 60 + 30,
                         summary="ToggleOff(Microwave)", config=config)
    return tree, [g6, g5, g41], new_item


class TestGroupAndSummarize:
    def test_microwave_merge_scenario(self, config):
        tree, parents, new_item = _cooking_fixture(config)
        backend = ScriptedBackend(
            rules=[
                ScriptedRule(
                    PromptKind.GROUPING,
                    'Reasoning: continuation of cooking.\nJSON: {"4-0": "I cooked Potato_4 in the microwave"}',
                )
            ]
        )
        gateway = LmGateway(backend)
        outcome = group_and_summarize(parents, [new_item], 1, tree, config, gateway)
        assert outcome.changed
        result = outcome.children
        assert result[0] is parents[0]  # (6-6) untouched
        assert result[1] is parents[1]  # (5-5) untouched
        merged = result[2]
        assert merged.summary == "I cooked Potato_4 in the microwave"
        assert len(merged.children) == 5
        assert merged.children[-1] is new_item
        assert merged.level == 2

    def test_singleton_directive_appends(self, config):
        tree, parents, new_item = _cooking_fixture(config)
        backend = ScriptedBackend(
            rules=[ScriptedRule(PromptKind.GROUPING, 'JSON: {"0": "something new started"}')]
        )
        gateway = LmGateway(backend)
        outcome = group_and_summarize(parents, [new_item], 1, tree, config, gateway)
        result = outcome.children
        assert result[:3] == parents
        assert result[3].summary == "something new started"
        assert result[3].children == [new_item]

    def test_overlapping_ranges_fall_back(self, config):
        tree, parents, new_item = _cooking_fixture(config)
        backend = ScriptedBackend(
            rules=[ScriptedRule(PromptKind.GROUPING, 'JSON: {"4-0": "a", "2-0": "b"}')]
        )
        gateway = LmGateway(backend)
        outcome = group_and_summarize(parents, [new_item], 1, tree, config, gateway)
        # fallback: the new item forms its own group, old parents untouched
        assert outcome.children[:3] == parents
        assert outcome.children[3].children == [new_item]

    def test_straddling_suffix_boundary_falls_back(self, config):
        tree, parents, new_item = _cooking_fixture(config)
        # range 2-0 would slice the (4-1) group in half
        backend = ScriptedBackend(
            rules=[ScriptedRule(PromptKind.GROUPING, 'JSON: {"2-0": "sliced"}')]
        )
        gateway = LmGateway(backend)
        outcome = group_and_summarize(parents, [new_item], 1, tree, config, gateway)
        assert outcome.children[:3] == parents
        assert outcome.children[3].children == [new_item]

    def test_unparseable_falls_back(self, config):
        tree, parents, new_item = _cooking_fixture(config)
        backend = ScriptedBackend(rules=[ScriptedRule(PromptKind.GROUPING, "no json at all")])
        gateway = LmGateway(backend)
        outcome = group_and_summarize(parents, [new_item], 1, tree, config, gateway)
        assert outcome.children[3].children == [new_item]

    def test_absorb_same_summary_is_unchanged(self, config):
        tree, parents, new_item = _cooking_fixture(config)
        old_summary = parents[2].summary
        backend = ScriptedBackend(
            rules=[ScriptedRule(PromptKind.GROUPING, "JSON: " + json.dumps({"4-0": old_summary}))]
        )
        gateway = LmGateway(backend)
        outcome = group_and_summarize(parents, [new_item], 1, tree, config, gateway)
        assert not outcome.changed
        assert outcome.children[2] is parents[2]
        assert new_item in parents[2].children


class TestTimeAwareGrouping:
    def test_no_new_items_is_identity(self, config, gateway):
        tree, parents, _ = _cooking_fixture(config)
        result = time_aware_group_and_summarize(parents, [], 1, tree, config, gateway)
        assert result == parents

    def test_distant_cluster_untouched(self, config):
        tree = HistoryTree(max_depth=6)
        # yesterday's group and today's group; new item lands today
        old_items = [make_node(tree, 1, T0 + i * 60, T0 + i * 60 + 30, config=config) for i in range(3)]
        old_parent = make_node(tree, 2, old_items[0].span.start, old_items[-1].span.end,
                               summary="yesterday", children=old_items, config=config)
        later = T0 + DAY
        new_items = [make_node(tree, 1, later + i * 60, later + i * 60 + 30, config=config) for i in range(2)]
        today_parent = make_node(tree, 2, new_items[0].span.start, new_items[-1].span.end,
                                 summary="today", children=new_items, config=config)
        fresh = make_node(tree, 1, later + 300, later + 330, summary="new", config=config)
        before = structural_hash(old_parent)
        gateway = LmGateway(ScriptedBackend())
        result = time_aware_group_and_summarize(
            [old_parent, today_parent], [fresh], 1, tree, config, gateway
        )
        assert result[0] is old_parent
        assert structural_hash(old_parent) == before

    def test_merge_all_single_parent(self, config):
        tree = HistoryTree(max_depth=6)
        items = [make_node(tree, 1, T0 + i * 60, T0 + i * 60 + 30, config=config) for i in range(3)]
        parents = [
            make_node(tree, 2, i.span.start, i.span.end, summary=f"g{k}", children=[i], config=config)
            for k, i in enumerate(items)
        ]
        fresh = make_node(tree, 1, T0 + 300, T0 + 330, config=config)
        backend = ScriptedBackend(
            rules=[ScriptedRule(PromptKind.GROUPING, 'JSON: {"3-0": "all one task"}')]
        )
        result = time_aware_group_and_summarize(parents, [fresh], 1, tree, config, LmGateway(backend))
        assert len(result) == 1
        assert result[0].summary == "all one task"
        assert len(result[0].children) == 4


class TestIndexOfFirstChange:
    def test_cases(self):
        tree = HistoryTree()
        a, b, c = (make_node(tree, 1, T0 + i, T0 + i) for i in range(3))
        d = make_node(tree, 1, T0 + 9, T0 + 9)
        assert index_of_first_change([a, b, c], [a, b, c]) is None
        assert index_of_first_change([a, d, c], [a, b, c]) == 1
        assert index_of_first_change([a, b, c, d], [a, b, c]) == 3
        assert index_of_first_change([a], [a, b]) == 1
        assert index_of_first_change([], []) is None


class TestUpdateTree:
    def test_empty_tree_single_scene_builds_chain(self, config, gateway):
        tree = HistoryTree(max_depth=config.max_depth)
        updated = update_tree(tree, [scene(T0)], config, gateway)
        assert updated.version == 1
        assert len(updated.roots) == 1
        node = updated.roots[0]
        seen_levels = []
        while isinstance(node, TreeNode):
            seen_levels.append(node.level)
            node = node.children[0] if node.children else None
            if isinstance(node, SceneInstant):
                break
        assert seen_levels == [5, 4, 3, 2, 1, 0]

    def test_empty_batch_is_noop(self, config, gateway):
        tree = HistoryTree(max_depth=config.max_depth)
        tree = update_tree(tree, [scene(T0)], config, gateway)
        before = structural_hash(tree)
        same = update_tree(tree, [], config, gateway)
        assert same is tree
        assert structural_hash(same) == before
        assert same.version == 1

    def test_rejects_out_of_order_batch(self, config, gateway):
        tree = HistoryTree(max_depth=config.max_depth)
        tree = update_tree(tree, [scene(T0 + 100)], config, gateway)
        with pytest.raises(ValueError):
            update_tree(tree, [scene(T0)], config, gateway)

    def test_absorb_stops_cascade_upper_levels_untouched(self, config):
        backend = ScriptedBackend(rules=[append_to_latest_rule()])
        gateway = LmGateway(backend)
        tree = HistoryTree(max_depth=config.max_depth)
        for i in range(3):
            tree = update_tree(tree, [scene(T0 + i * 40)], config, gateway)

        def upper_shape(t, above_level):
            return [
                (n.id, n.level, n.summary, tuple(
                    c.id for c in n.children if isinstance(c, TreeNode)
                ))
                for n in t.nodes()
                if n.level > above_level
            ]

        before = upper_shape(tree, 1)
        updated = update_tree(tree, [scene(T0 + 200)], config, gateway)
        assert updated.version == tree.version + 1
        assert upper_shape(updated, 1) == before
        # the new scene was absorbed into the latest event
        latest_event = updated.nodes(level=1)[-1]
        assert latest_event.span.end == T0 + 200

    def test_batch_equals_sequential_under_append_rule(self, config):
        scenes = [scene(T0 + i * 35) for i in range(6)]
        gw_a = LmGateway(ScriptedBackend(rules=[append_to_latest_rule()]))
        tree_a = HistoryTree(max_depth=config.max_depth)
        tree_a = update_tree(tree_a, scenes, config, gw_a)
        assert tree_a.version == 1

        gw_b = LmGateway(ScriptedBackend(rules=[append_to_latest_rule()]))
        tree_b = HistoryTree(max_depth=config.max_depth)
        for s in scenes:
            tree_b = update_tree(tree_b, [s], config, gw_b)
        assert tree_b.version == 6
        assert forest_hash(tree_a, include_ids=False) == forest_hash(tree_b, include_ids=False)

    def test_level_discipline_and_time_order(self, config):
        rng = random.Random(3)
        gateway = LmGateway(ScriptedBackend())
        grouper = RuleBasedGrouper(config)
        tree = HistoryTree(max_depth=config.max_depth)
        t = T0
        actions = ["Navigate(hall)", "Pickup(Cup_1)", "Place(Sink)", "Open(Fridge)"]
        for _ in range(30):
            t += rng.choice([30, 60, 3 * HOUR, DAY])
            tree = update_tree(
                tree, [scene(t, action=rng.choice(actions))], config, gateway, grouper=grouper
            )
            for node in tree.nodes():
                assert node.level < config.max_depth
                child_nodes = node.node_children()
                for child in child_nodes:
                    assert child.level == node.level - 1
                starts = [c.span.start for c in node.children]
                assert starts == sorted(starts)
            root_starts = [r.span.start for r in tree.roots]
            assert root_starts == sorted(root_starts)

    def test_prevent_push_soundness(self, config):
        # dense continuation without rule groupers: prevention must not grow
        # the set of top-level nodes
        backend = ScriptedBackend(rules=[append_to_latest_rule()])
        gateway = LmGateway(backend)
        tree = HistoryTree(max_depth=config.max_depth)
        t = T0
        for i in range(4):
            tree = update_tree(tree, [scene(t)], config, gateway)
            t += 100
        # larger intra-parent gaps exist now; a very close follow-up triggers it
        assert prevent_push(tree, [make_scene_node(tree, scene(t - 100 + 5), config)], 0, config)
        tops_before = len(tree.roots)
        updated = update_tree(tree, [scene(t - 100 + 5)], config, gateway)
        assert len(updated.roots) == tops_before


class TestDeriveLowLevels:
    def _episode(self):
        streams = [
            scene(T0, action="Navigate(kitchen)", location="hall"),
            scene(T0 + 30, action="Navigate(kitchen)", location="hall"),
            scene(T0 + 60, action="Pickup(Knife_0)", location="kitchen"),
            scene(T0 + 90, action="Navigate(counter)", location="kitchen"),
            scene(T0 + 120, action="Place(Knife_0, Counter)", location="counter"),
            scene(T0 + 150, action="Navigate(hall)", location="counter"),
        ]
        return streams

    def test_unchanged_attributes_share_event(self, config):
        tree = derive_low_levels(self._episode(), config)
        events = tree.nodes(level=1)
        # scenes 1+2 share one event; every other scene is its own event
        assert len(events) == 5
        assert len(events[0].children) == 2

    def test_action_change_starts_event(self, config):
        tree = derive_low_levels(
            [scene(T0, action="Pickup(Cup)"), scene(T0 + 10, action="Place(Cup)")], config
        )
        assert len(tree.nodes(level=1)) == 2

    def test_interaction_closes_goal(self, config):
        tree = derive_low_levels(self._episode(), config)
        goals = tree.nodes(level=2)
        # goal 1 = [navigate, pickup], goal 2 = [navigate, place], goal 3 = [navigate]
        assert len(goals) == 3
        assert "Pickup(Knife_0)" in goals[0].summary
        assert "Place(Knife_0, Counter)" in goals[1].summary
        grouper = RuleBasedGrouper(config)
        assert grouper.is_interaction(goals[0].node_children()[-1])

    def test_speech_starts_event(self, config):
        tree = derive_low_levels(
            [
                scene(T0, action="Navigate(kitchen)"),
                scene(T0 + 10, action="Navigate(kitchen)", speech="hello robot"),
            ],
            config,
        )
        assert len(tree.nodes(level=1)) == 2


class TestOfflineBuild:
    def test_builds_hierarchy(self, config, gateway):
        scenes = []
        t = T0
        rng = random.Random(1)
        for day in range(3):
            for i in range(6):
                scenes.append(scene(t, action=f"Pickup(Obj_{rng.randint(0, 5)})"))
                t += 60
            t += DAY
        tree = offline_build(scenes, config, gateway)
        assert tree.roots
        assert all(isinstance(r, TreeNode) for r in tree.roots)
        levels = {n.level for n in tree.nodes()}
        assert 2 in levels  # goals exist
        assert max(levels) >= 3  # something got grouped above goals


class TestUpdateTrace:
    def test_one_line_per_lm_call(self, config):
        gateway = LmGateway(ScriptedBackend())
        tree = HistoryTree(max_depth=config.max_depth)
        trace = []
        tree = update_tree(tree, [scene(T0, action="Pickup(Cup_1)")], config, gateway, trace=trace)
        assert trace, "grouping decisions must be traced"
        for entry in trace:
            assert {"level", "cluster", "directives", "usage"} <= set(entry)
        traced = sum(e["usage"][0] + e["usage"][1] for e in trace)
        grouping = gateway.ledger.by_kind()["grouping"]
        assert traced == grouping.total
