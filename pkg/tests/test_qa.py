from __future__ import annotations

import random

from emtree.clock import HOUR
from emtree.gateway import LmGateway, PromptKind
from emtree.qa import (
    MODE_FLAT,
    answer_question,
    lexical_search,
    render_exploration_view,
    _tokens,
)
from emtree.scripted import ScriptedBackend, ScriptedRule
from emtree.tree import (
    ForgottenPlaceholder,
    HistoryTree,
    TimeSpan,
    structural_hash,
)

from .conftest import T0, make_node, random_tree


def _single_node_tree(config) -> HistoryTree:
    tree = HistoryTree(max_depth=config.max_depth)
    node = make_node(tree, 2, T0, T0 + HOUR, summary="I placed the knife on the counter", config=config)
    tree.roots = [node]
    tree.version = 1
    return tree


class TestAnswerQuestion:
    def test_single_node_answered_in_one_step(self, config, gateway):
        tree = _single_node_tree(config)
        result = answer_question(tree, "Where did you place the knife?", gateway)
        assert not result.gave_up
        assert "counter" in result.answer
        assert result.steps == 1
        assert result.snapshot_version == 1

    def test_all_forgotten_indicates_no_record(self, config, gateway):
        tree = HistoryTree(max_depth=config.max_depth)
        parent = make_node(
            tree, 2, T0, T0 + HOUR, summary="household chores",
            children=[ForgottenPlaceholder(TimeSpan(T0, T0 + HOUR), "secret")],
            config=config,
        )
        tree.roots = [parent]
        result = answer_question(tree, "Where did you put the knife?", gateway)
        assert result.forgotten_indicated
        assert "no record" in result.answer.lower()

    def test_scripted_path_of_depth_three(self, config):
        # scripted agent expands a known chain, then answers: trace length 4
        tree = HistoryTree(max_depth=config.max_depth)
        leaf = make_node(tree, 0, T0, T0, summary="Pickup(Knife_0) at counter", config=config)
        event = make_node(tree, 1, T0, T0, summary="knife pickup", children=[leaf], config=config)
        goal = make_node(tree, 2, T0, T0, summary="kitchen task", children=[event], config=config)
        top = make_node(tree, 3, T0, T0, summary="morning", children=[goal], config=config)
        tree.roots = [top]
        responses = iter(
            [
                f"Action: expand({top.id})",
                f"Action: expand({goal.id})",
                f"Action: expand({event.id})",
                "Action: answer(The knife was picked up at the counter)",
            ]
        )
        backend = ScriptedBackend(
            rules=[ScriptedRule(PromptKind.QA_AGENT, lambda messages: next(responses))]
        )
        result = answer_question(tree, "Where was the knife?", LmGateway(backend))
        assert result.trace == [
            f"expand({top.id})",
            f"expand({goal.id})",
            f"expand({event.id})",
            "answer(The knife was picked up at the counter)",
        ]

    def test_nonexistent_node_gets_corrective_step(self, config):
        tree = _single_node_tree(config)
        responses = iter(["Action: expand(n999)", "Action: answer(done)"])
        backend = ScriptedBackend(
            rules=[ScriptedRule(PromptKind.QA_AGENT, lambda messages: next(responses))]
        )
        result = answer_question(tree, "anything?", LmGateway(backend))
        assert result.steps == 2
        assert result.answer == "done"

    def test_termination_within_max_steps(self, config):
        tree = _single_node_tree(config)
        backend = ScriptedBackend(
            rules=[ScriptedRule(PromptKind.QA_AGENT, "Action: expand(nowhere)")]
        )
        result = answer_question(tree, "anything?", LmGateway(backend), max_steps=5)
        assert result.gave_up
        assert result.steps == 5

    def test_read_only(self, config, gateway):
        tree = random_tree(seed=4, max_nodes=60)
        before = structural_hash(tree)
        answer_question(tree, "What happened in the kitchen?", gateway, max_steps=6)
        assert structural_hash(tree) == before

    def test_budget_equals_ledger_delta(self, config, gateway):
        tree = random_tree(seed=5, max_nodes=60)
        mark = gateway.ledger.total
        result = answer_question(tree, "What happened with Obj_1?", gateway, max_steps=6)
        delta = gateway.ledger.delta_since(mark)
        assert result.usage == delta

    def test_search_only_in_flat_mode(self, config):
        tree = _single_node_tree(config)
        responses = iter(["Action: search(knife)", "Action: answer(x)"])
        backend = ScriptedBackend(
            rules=[ScriptedRule(PromptKind.QA_AGENT, lambda messages: next(responses))]
        )
        result = answer_question(tree, "anything?", LmGateway(backend), mode="tree")
        assert result.steps == 2  # corrective step consumed


class TestFlatMode:
    def test_search_then_answer(self, config):
        tree = HistoryTree(max_depth=3)
        goals = []
        for i in range(4):
            goals.append(
                make_node(
                    tree, 2, T0 + i * HOUR, T0 + i * HOUR + 600,
                    summary=f"task {i} with Obj_{i}", config=config,
                )
            )
        goals[2].summary = "carried the red toolbox upstairs"
        tree.roots = goals
        responses = iter(
            ["Action: search(toolbox)", f"Action: answer(found the toolbox entry)"]
        )
        backend = ScriptedBackend(
            rules=[ScriptedRule(PromptKind.QA_AGENT, lambda messages: next(responses))]
        )
        result = answer_question(
            tree, "Where is the toolbox?", LmGateway(backend), mode=MODE_FLAT
        )
        assert result.trace[0] == "search(toolbox)"
        assert not result.gave_up


class TestLexicalSearch:
    def test_keyword_hits_first(self, config):
        tree = HistoryTree(max_depth=3)
        a = make_node(tree, 2, T0, T0 + 10, summary="washed the dishes", config=config)
        b = make_node(tree, 2, T0 + 100, T0 + 110, summary="carried the toolbox", config=config)
        tree.roots = [a, b]
        hits = lexical_search(tree, "toolbox")
        assert hits[0][0] == b.id

    def test_no_match_empty(self, config):
        tree = _single_node_tree(config)
        assert lexical_search(tree, "zebra quantum") == []

    def test_score_matches_bruteforce_overlap(self):
        rng = random.Random(9)
        for seed in range(10):
            tree = random_tree(seed=seed, max_nodes=50)
            keywords = f"Action_{rng.randint(0, 30)} Obj_{rng.randint(0, 9)}"
            expected = {}
            for node in tree.nodes():
                overlap = len(_tokens(keywords) & _tokens(node.summary))
                if overlap > 0:
                    expected[node.id] = overlap
            for node_id, score in lexical_search(tree, keywords, limit=100):
                assert expected[node_id] == score

    def test_ties_broken_by_recency(self, config):
        tree = HistoryTree(max_depth=3)
        older = make_node(tree, 2, T0, T0 + 10, summary="toolbox moment", config=config)
        newer = make_node(tree, 2, T0 + HOUR, T0 + HOUR + 10, summary="toolbox again", config=config)
        tree.roots = [older, newer]
        hits = lexical_search(tree, "toolbox")
        assert hits[0][0] == newer.id


class TestExplorationView:
    def test_marks_expandables_and_hides_tombstone_text(self, config):
        tree = HistoryTree(max_depth=config.max_depth)
        leaf = make_node(tree, 1, T0, T0 + 10, summary="visible event", config=config)
        parent = make_node(
            tree, 2, T0, T0 + HOUR, summary="the goal",
            children=[leaf, ForgottenPlaceholder(TimeSpan(T0 + 20, T0 + 30), "hidden text")],
            config=config,
        )
        tree.roots = [parent]
        collapsed = render_exploration_view(tree, expanded=set())
        assert "(contains 2)" in collapsed
        assert "hidden text" not in collapsed
        expanded = render_exploration_view(tree, expanded={parent.id})
        assert "visible event" in expanded
        assert "forgotten:" in expanded
        assert "hidden text" not in expanded
