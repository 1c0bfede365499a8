from __future__ import annotations

import random

import pytest

from emtree.clock import ts
from emtree.config import BuilderConfig
from emtree.forgetting import assign_expiration
from emtree.gateway import LmGateway
from emtree.scripted import ScriptedBackend
from emtree.tree import HistoryTree, SceneInstant, TimeSpan, TreeNode

T0 = ts(2024, 4, 24, 9, 0, 0)


@pytest.fixture
def config() -> BuilderConfig:
    return BuilderConfig(max_depth=6)


@pytest.fixture
def gateway() -> LmGateway:
    return LmGateway(ScriptedBackend())


def scene(at: int, action: str = "Navigate(kitchen)", location: str = "kitchen", **extra) -> SceneInstant:
    attributes = {"action": action, "location": location, **extra}
    return SceneInstant(at=at, attributes=attributes)


def make_node(
    tree: HistoryTree,
    level: int,
    start: int,
    end: int,
    summary: str = "did something",
    children=None,
    config: BuilderConfig | None = None,
) -> TreeNode:
    node = TreeNode(
        id=tree.new_id(),
        level=level,
        span=TimeSpan(start, end),
        summary=summary,
        children=list(children or []),
    )
    if config is not None:
        assign_expiration(node, config)
    return node


def random_tree(seed: int, max_nodes: int = 200, config: BuilderConfig | None = None) -> HistoryTree:
    """Structurally valid random tree: scenes at level 0, full chains above."""
    rng = random.Random(seed)
    config = config or BuilderConfig(max_depth=6)
    tree = HistoryTree(max_depth=config.max_depth)
    t = T0
    budget = rng.randint(5, max_nodes)
    roots = []
    count = 0
    while count < budget:
        goals = []
        for _ in range(rng.randint(1, 3)):
            events = []
            for _ in range(rng.randint(1, 3)):
                scenes = []
                for _ in range(rng.randint(1, 3)):
                    node = make_node(
                        tree, 0, t, t,
                        summary=f"Action_{rng.randint(0, 30)}(Obj_{rng.randint(0, 9)})",
                        config=config,
                    )
                    node.children = [scene(t, action=node.summary)]
                    scenes.append(node)
                    t += rng.randint(20, 90)
                    count += 1
                events.append(_parent(tree, 1, scenes, config))
                count += 1
                t += rng.randint(30, 600)
            goals.append(_parent(tree, 2, events, config))
            count += 1
            t += rng.randint(600, 7200)
        node = _parent(tree, 3, goals, config)
        count += 1
        for level in range(4, config.max_depth):
            node = _parent(tree, level, [node], config)
            count += 1
        roots.append(node)
        t += rng.randint(3600, 90000)
        if count >= budget:
            break
    tree.roots = roots
    tree.version = 1
    return tree


def _parent(tree: HistoryTree, level: int, children: list, config: BuilderConfig) -> TreeNode:
    node = make_node(
        tree,
        level,
        min(c.span.start for c in children),
        max(c.span.end for c in children),
        summary="; ".join(c.summary.splitlines()[0] for c in children)[:200],
        children=children,
    )
    assign_expiration(node, config)
    return node
