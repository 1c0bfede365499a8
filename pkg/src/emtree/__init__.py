"""Hierarchical episodic memory with online construction and learned forgetting."""

from .builder import (
    BuilderConfig,
    GroupingDirective,
    RuleBasedGrouper,
    derive_low_levels,
    offline_build,
    time_based_cluster,
    update_tree,
)
from .clock import Clock, Duration, Timestamp, VirtualClock
from .dialog import DialogManager
from .forgetting import (
    RelevanceScore,
    SweepReport,
    estimate_relevance,
    forgotten_ratio,
    initial_expiration,
    sweep,
)
from .gateway import (
    HttpBackend,
    HttpLmConfig,
    LmExchange,
    LmGateway,
    Message,
    PromptKind,
    TokenUsage,
)
from .qa import QaResult, answer_question, lexical_search
from .rules import RelevanceRuleSet, RuleStore, learn_from_feedback, render_rules
from .scripted import ScriptedBackend, ScriptedRule
from .service import EventRecord, MemoryEngine, MemoryService, ServiceConfig
from .tree import (
    ForgottenPlaceholder,
    HistoryTree,
    SceneInstant,
    TimeSpan,
    TreeNode,
    count_nodes,
    deserialize,
    forget_node,
    merge_adjacent_placeholders,
    render,
    serialize,
    snapshot,
    structural_hash,
)

__version__ = "0.1.0"
