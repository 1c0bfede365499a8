from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emtree.clock import ts
from emtree.tree import (
    AUDIENCE_QA,
    AUDIENCE_SUMMARIZER,
    ForgottenPlaceholder,
    HistoryTree,
    SceneInstant,
    TimeSpan,
    count_nodes,
    deserialize,
    forget_node,
    merge_adjacent_placeholders,
    merge_placeholder_runs,
    render,
    serialize,
    snapshot,
    structural_hash,
)

from .conftest import T0, make_node, random_tree


class TestTimeSpan:
    def test_rejects_inverted(self):
        with pytest.raises(ValueError):
            TimeSpan(10, 5)

    def test_hull_and_intersects(self):
        a, b = TimeSpan(0, 10), TimeSpan(20, 30)
        assert a.hull(b) == TimeSpan(0, 30)
        assert not a.intersects(b)
        assert a.intersects(TimeSpan(5, 15))


class TestForgetNode:
    def test_keeps_span_and_first_line(self):
        tree = HistoryTree()
        node = make_node(
            tree, 2, ts(2024, 4, 24, 10, 0), ts(2024, 4, 24, 10, 20),
            summary="I cooked Potato_4 in the microwave\nDetails about the cooking",
        )
        ph = forget_node(node)
        assert ph.span == node.span
        assert ph.short_summary == "I cooked Potato_4 in the microwave"

    def test_single_line_summary_kept_whole(self):
        tree = HistoryTree()
        node = make_node(tree, 1, T0, T0 + 60, summary="one line only")
        assert forget_node(node).short_summary == "one line only"

    def test_empty_summary_logs_warning(self, caplog):
        tree = HistoryTree()
        node = make_node(tree, 1, T0, T0 + 60, summary="")
        with caplog.at_level("WARNING"):
            ph = forget_node(node)
        assert ph.short_summary == ""
        assert any("empty summary" in r.message for r in caplog.records)

    def test_truncates_to_200_chars(self):
        tree = HistoryTree()
        node = make_node(tree, 1, T0, T0 + 60, summary="x" * 500)
        assert len(forget_node(node).short_summary) == 200


class TestMergePlaceholders:
    def test_adjacent_pair_merges(self):
        t = ts(2024, 4, 24, 9, 0)
        tree = HistoryTree()
        inner = make_node(tree, 0, t + 1500, t + 1500, summary="kept")
        parent = make_node(
            tree, 1, t, t + 1500,
            children=[
                ForgottenPlaceholder(TimeSpan(t, t + 600), "a"),
                ForgottenPlaceholder(TimeSpan(t + 600, t + 1200), "b"),
                inner,
            ],
        )
        merge_adjacent_placeholders(parent)
        assert len(parent.children) == 2
        merged = parent.children[0]
        assert isinstance(merged, ForgottenPlaceholder)
        assert merged.span == TimeSpan(t, t + 1200)
        assert merged.short_summary == "a; b"
        assert parent.children[1] is inner

    def test_no_adjacent_is_identity(self):
        tree = HistoryTree()
        node = make_node(tree, 0, T0, T0)
        children = [
            ForgottenPlaceholder(TimeSpan(T0 - 100, T0 - 50), "a"),
            node,
            ForgottenPlaceholder(TimeSpan(T0 + 50, T0 + 100), "b"),
        ]
        assert merge_placeholder_runs(children) == children

    def test_runs_against_reference_fold(self):
        # brute-force oracle: walk once, start a new output slot whenever the
        # previous emitted entry was not a placeholder
        rng = random.Random(42)
        for _ in range(100):
            t = T0
            children = []
            for _ in range(rng.randint(0, 12)):
                if rng.random() < 0.5:
                    children.append(ForgottenPlaceholder(TimeSpan(t, t + 10), f"p{t}"))
                else:
                    tree = HistoryTree()
                    children.append(make_node(tree, 0, t, t + 10, summary=f"n{t}"))
                t += 20

            expected_kinds = []
            for child in children:
                if isinstance(child, ForgottenPlaceholder) and expected_kinds and expected_kinds[-1] == "ph":
                    continue
                expected_kinds.append("ph" if isinstance(child, ForgottenPlaceholder) else "node")
            merged = merge_placeholder_runs(children)
            got_kinds = ["ph" if isinstance(c, ForgottenPlaceholder) else "node" for c in merged]
            assert got_kinds == expected_kinds
            # node order preserved
            assert [c for c in merged if not isinstance(c, ForgottenPlaceholder)] == [
                c for c in children if not isinstance(c, ForgottenPlaceholder)
            ]


class TestRender:
    def test_placeholder_qa_hides_summary(self):
        ph = ForgottenPlaceholder(
            TimeSpan(ts(2024, 4, 24, 9, 0), ts(2024, 4, 24, 9, 20)), "secret detail"
        )
        text = render(ph, AUDIENCE_QA)
        assert text == "forgotten: 2024/04/24 09:00–09:20"
        assert "secret" not in text

    def test_placeholder_summarizer_shows_summary(self):
        ph = ForgottenPlaceholder(
            TimeSpan(ts(2024, 4, 24, 9, 0), ts(2024, 4, 24, 9, 20)), "a; b"
        )
        assert "a; b" in render(ph, AUDIENCE_SUMMARIZER)

    def test_depth_limit_stubs(self):
        tree = random_tree(seed=3, max_nodes=30)
        root = tree.roots[0]
        text = render(root, AUDIENCE_QA, depth_limit=1)
        lines = text.splitlines()
        assert lines[0].startswith(f"[{root.id}]")
        for child, line in zip(root.children, lines[1:]):
            assert line.strip() == f"[{child.id}] {child.first_line()}"

    def test_qa_never_leaks_short_summaries(self):
        rng = random.Random(7)
        for seed in range(10):
            tree = random_tree(seed=seed, max_nodes=40)
            # tombstone a few nodes with sentinel summaries no parent mentions
            sentinel = 0
            for node in tree.nodes():
                for i, child in enumerate(node.children):
                    if not isinstance(child, (ForgottenPlaceholder, SceneInstant)) and rng.random() < 0.3:
                        child.summary = f"UNIQUE_SECRET_{seed}_{sentinel}"
                        sentinel += 1
                        node.children[i] = forget_node(child)
            secrets = []
            for _, child in tree.walk():
                if isinstance(child, ForgottenPlaceholder) and child.short_summary:
                    secrets.extend(child.short_summary.split("; "))
            assert sentinel == 0 or secrets
            qa_text = "\n".join(render(r, AUDIENCE_QA, depth_limit=10) for r in tree.roots)
            summarizer_text = "\n".join(
                render(r, AUDIENCE_SUMMARIZER, depth_limit=10) for r in tree.roots
            )
            for secret in secrets:
                assert secret not in qa_text
                assert secret in summarizer_text


class TestSnapshot:
    def test_structural_hash_equal(self):
        tree = random_tree(seed=1)
        snap = snapshot(tree)
        assert structural_hash(snap) == structural_hash(tree)
        assert snap.version == tree.version

    def test_isolated_from_mutation(self):
        tree = random_tree(seed=2)
        snap = snapshot(tree)
        before = structural_hash(snap)
        tree.roots[0].summary = "mutated"
        tree.roots[0].children.pop()
        tree.version += 1
        assert structural_hash(snap) == before

    def test_empty_tree(self):
        tree = HistoryTree()
        snap = snapshot(tree)
        assert snap.is_empty() and snap.version == 0


class TestCountNodes:
    def test_empty(self):
        assert count_nodes(HistoryTree()) == 0

    def test_hand_built(self):
        tree = HistoryTree()
        goal_a = make_node(tree, 2, T0, T0 + 100)
        goal_b = make_node(tree, 2, T0 + 200, T0 + 300)
        higher = make_node(tree, 3, T0, T0 + 300, children=[goal_a, goal_b])
        tree.roots = [higher]
        assert count_nodes(tree, min_level=2) == 3

    def test_matches_recursive_oracle(self):
        def oracle(children, min_level):
            total = 0
            for child in children:
                if isinstance(child, ForgottenPlaceholder) or isinstance(child, SceneInstant):
                    continue
                if child.level >= min_level:
                    total += 1
                total += oracle(child.children, min_level)
            return total

        for seed in range(20):
            tree = random_tree(seed=seed)
            for min_level in (0, 1, 2, 3):
                assert count_nodes(tree, min_level) == oracle(tree.roots, min_level)


class TestSpanInvariant:
    def test_parent_spans_cover_children(self):
        for seed in range(10):
            tree = random_tree(seed=seed)
            for node in tree.nodes():
                if not node.children:
                    continue
                starts = [c.span.start for c in node.children]
                ends = [c.span.end for c in node.children]
                assert node.span.start == min(starts)
                assert node.span.end == max(ends)


class TestSerialization:
    def test_round_trip(self):
        tree = random_tree(seed=5, max_nodes=60)
        # add a placeholder for coverage
        goal = tree.nodes(level=2)[0]
        goal.children[0] = forget_node(goal.children[0])
        text = serialize(tree)
        assert text.startswith("emtree/1\n")
        back = deserialize(text)
        assert structural_hash(back) == structural_hash(tree)

    def test_rejects_other_formats(self):
        with pytest.raises(ValueError):
            deserialize("not-a-tree\n{}")

    @given(st.integers(min_value=0, max_value=50))
    @settings(max_examples=20, deadline=None)
    def test_round_trip_random(self, seed):
        tree = random_tree(seed=seed, max_nodes=30)
        assert structural_hash(deserialize(serialize(tree))) == structural_hash(tree)


class TestValidateTree:
    def test_accepts_valid_random_trees(self):
        from emtree.tree import validate_tree

        for seed in range(10):
            validate_tree(random_tree(seed=seed))

    def test_detects_breaks(self):
        from emtree.tree import InvariantViolation, validate_tree

        tree = random_tree(seed=1)
        node = tree.nodes(level=2)[0]
        good_span = node.span
        node.span = TimeSpan(good_span.start, good_span.end + 999)
        with pytest.raises(InvariantViolation):
            validate_tree(tree)
        node.span = good_span
        validate_tree(tree)
        node.level = 3  # breaks the parent/child level step
        with pytest.raises(InvariantViolation):
            validate_tree(tree)
