"""Variant matrix execution: replay a history, pause for QA, aggregate metrics."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable

from ..builder import offline_build
from ..clock import VirtualClock
from ..config import BuilderConfig
from ..dialog import DialogManager
from ..forgetting import forgotten_ratio, sweep
from ..gateway import HttpBackend, HttpLmConfig, LmGateway, PromptKind, TokenUsage
from ..qa import MODE_FLAT, MODE_TREE, QaResult
from ..rules import RelevanceRuleSet, RuleStore
from ..scripted import ScriptedBackend
from ..service import (
    FORGETTING_NONE,
    FORGETTING_RELEVANCE,
    FORGETTING_TIME,
    MemoryEngine,
    ServiceConfig,
    record_to_scene,
)
from ..tree import HistoryTree, count_nodes, snapshot, validate_tree
from .episodes import SynthesizedHistory, synthesize_history
from .judge import CATEGORY_RANK, judge
from .qa_gen import QaPair, generate_two_round_qa

logger = logging.getLogger(__name__)

CONSTRUCTION_ONLINE = "online"
CONSTRUCTION_OFFLINE = "offline"
CONSTRUCTION_FLAT = "flat"

LEARNING_NONE = "none"
LEARNING_FORGETTING = "forgetting-only"
LEARNING_SUMMARIZATION = "summarization-only"
LEARNING_BOTH = "both"


@dataclass(frozen=True)
class VariantConfig:
    name: str
    construction: str
    forgetting: str
    learning: str

    def __post_init__(self):
        if self.construction not in (CONSTRUCTION_ONLINE, CONSTRUCTION_OFFLINE, CONSTRUCTION_FLAT):
            raise ValueError(f"unknown construction {self.construction!r}")
        if self.forgetting not in (FORGETTING_NONE, FORGETTING_TIME, FORGETTING_RELEVANCE):
            raise ValueError(f"unknown forgetting mode {self.forgetting!r}")
        if self.learning not in (
            LEARNING_NONE,
            LEARNING_FORGETTING,
            LEARNING_SUMMARIZATION,
            LEARNING_BOTH,
        ):
            raise ValueError(f"unknown learning mode {self.learning!r}")

    @property
    def learns(self) -> bool:
        return self.learning != LEARNING_NONE

    @property
    def learning_for_forgetting(self) -> bool:
        return self.learning in (LEARNING_FORGETTING, LEARNING_BOTH)

    @property
    def learning_for_summarization(self) -> bool:
        # flat histories have no LM summarization to condition
        return self.learning in (LEARNING_SUMMARIZATION, LEARNING_BOTH) and (
            self.construction != CONSTRUCTION_FLAT
        )


VARIANTS: dict[str, VariantConfig] = {
    v.name: v
    for v in (
        VariantConfig("online-full", CONSTRUCTION_ONLINE, FORGETTING_RELEVANCE, LEARNING_BOTH),
        VariantConfig(
            "online-forgetting-learning", CONSTRUCTION_ONLINE, FORGETTING_RELEVANCE, LEARNING_FORGETTING
        ),
        VariantConfig("online-no-learning", CONSTRUCTION_ONLINE, FORGETTING_RELEVANCE, LEARNING_NONE),
        VariantConfig(
            "online-summarization-learning", CONSTRUCTION_ONLINE, FORGETTING_TIME, LEARNING_SUMMARIZATION
        ),
        VariantConfig("online-time-decay", CONSTRUCTION_ONLINE, FORGETTING_TIME, LEARNING_NONE),
        VariantConfig(
            "online-learning-no-forgetting", CONSTRUCTION_ONLINE, FORGETTING_NONE, LEARNING_SUMMARIZATION
        ),
        VariantConfig("online-no-forgetting", CONSTRUCTION_ONLINE, FORGETTING_NONE, LEARNING_NONE),
        VariantConfig("offline-full", CONSTRUCTION_OFFLINE, FORGETTING_RELEVANCE, LEARNING_BOTH),
        VariantConfig("offline-no-learning", CONSTRUCTION_OFFLINE, FORGETTING_RELEVANCE, LEARNING_NONE),
        VariantConfig("offline-time-decay", CONSTRUCTION_OFFLINE, FORGETTING_TIME, LEARNING_NONE),
        VariantConfig("offline-no-forgetting", CONSTRUCTION_OFFLINE, FORGETTING_NONE, LEARNING_NONE),
        VariantConfig("flat-full", CONSTRUCTION_FLAT, FORGETTING_RELEVANCE, LEARNING_BOTH),
        VariantConfig("flat-no-forgetting", CONSTRUCTION_FLAT, FORGETTING_NONE, LEARNING_NONE),
    )
}


@dataclass
class ExperimentReport:
    variant: str
    seed: int
    pairs: int
    s_c: float = 0.0
    s_p: float = 0.0
    s_up: float = 0.0
    s_eq: float = 0.0
    s_c1: float = 0.0
    s_p1: float = 0.0
    s_c2: float = 0.0
    s_p2: float = 0.0
    n_f: float | None = None
    n_avg: float | None = None
    c_qa: int = 0
    c_f: int = 0
    fr_1: float = 0.0
    fr_2: float = 0.0
    detail: list[dict] = None  # per-question records

    def __post_init__(self):
        if self.detail is None:
            self.detail = []


@dataclass
class _Outcome:
    pair_id: str
    round: int
    category: str
    ratio: float | None
    answer: str
    forgotten_indicated: bool


def _kind_total(gateway: LmGateway, kind: PromptKind) -> int:
    usage = gateway.ledger.by_kind().get(kind.value, TokenUsage())
    return usage.total


def scripted_eval_gateway() -> LmGateway:
    """The harness default: deterministic backend with cooperative relevance."""
    return LmGateway(ScriptedBackend(cooperative_relevance_mode=True))


def run_experiment(
    variant: VariantConfig,
    history: SynthesizedHistory,
    pairs: list[QaPair],
    config: BuilderConfig,
    gateway: LmGateway,
    seed: int = 0,
) -> ExperimentReport:
    """Replay one history under one variant and aggregate every metric."""
    records = sorted(history.records, key=lambda r: r.at)
    if not records:
        raise ValueError("history has no events")
    builder = config
    if variant.construction == CONSTRUCTION_FLAT:
        builder = replace(config, max_depth=3)
    clock = VirtualClock(records[0].at)
    rule_store = RuleStore()
    svc_config = ServiceConfig(
        builder=builder,
        forgetting=variant.forgetting,
        learning_for_forgetting=variant.learning_for_forgetting,
        learning_for_summarization=variant.learning_for_summarization,
        qa_mode=MODE_FLAT if variant.construction == CONSTRUCTION_FLAT else MODE_TREE,
    )
    online = variant.construction in (CONSTRUCTION_ONLINE, CONSTRUCTION_FLAT)
    engine = MemoryEngine(svc_config, gateway, rule_store, clock) if online else None

    snap_holder: list[HistoryTree] = [HistoryTree(max_depth=builder.max_depth)]
    manager = DialogManager(
        lambda: snap_holder[0],
        rule_store,
        gateway,
        clock=clock,
        qa_mode=svc_config.qa_mode,
    )

    # interleave events and ask points in time order (events first on ties)
    timeline: list[tuple[int, int, int, object]] = []
    for i, record in enumerate(records):
        timeline.append((record.at, 0, i, record))
    for i, pair in enumerate(pairs):
        timeline.append((pair.ask_1, 1, i, (pair, 1)))
        timeline.append((pair.ask_2, 1, i, (pair, 2)))
    timeline.sort(key=lambda t: (t[0], t[1], t[2]))

    scenes_so_far = []
    node_counts: list[int] = []
    offline_build_usage = 0
    offline_counts: list[int] = []
    outcomes: list[_Outcome] = []
    detail: list[dict] = []

    def sweep_live(now: int) -> None:
        if engine is not None and variant.forgetting != FORGETTING_NONE:
            engine.sweep_now(now=now)

    for at, is_ask, _, payload in timeline:
        if not is_ask:
            clock.set(max(clock.now(), at))
            scene = record_to_scene(payload)
            scenes_so_far.append(scene)
            if engine is not None:
                engine.apply_batch([scene])
                sweep_live(at)
                node_counts.append(count_nodes(engine.tree))
            continue

        pair, round_no = payload
        ask_t = pair.ask_1 if round_no == 1 else pair.ask_2
        clock.set(max(clock.now(), ask_t))
        if engine is not None:
            sweep_live(ask_t)
            validate_tree(engine.tree)  # the harness aborts on invariant breaks
            snap = snapshot(engine.tree)
        else:
            rules = rule_store.current
            before = gateway.ledger.total.total
            snap = offline_build(
                scenes_so_far,
                builder,
                gateway,
                rules=rules if variant.learning_for_summarization and rules.rules else None,
            )
            offline_build_usage += gateway.ledger.total.total - before
            if variant.forgetting != FORGETTING_NONE:
                estimate = variant.forgetting == FORGETTING_RELEVANCE
                sweep(
                    snap,
                    ask_t,
                    rules if estimate and variant.learning_for_forgetting else RelevanceRuleSet(),
                    gateway if estimate else None,
                    builder,
                    estimate=estimate,
                )
            validate_tree(snap)
            offline_counts.append(count_nodes(snap))

        snap_holder[0] = snap
        question = pair.question_1 if round_no == 1 else pair.question_2
        gt = pair.gt_1 if round_no == 1 else pair.gt_2
        span = pair.target_span_1 if round_no == 1 else pair.target_span_2
        ratio = forgotten_ratio(snap, span)
        previous = manager.last_qa
        reply = manager.handle(question)
        result = manager.last_qa if manager.last_qa is not previous else None
        if result is None:
            result = QaResult(answer=reply, usage=TokenUsage(), snapshot_version=snap.version)
        category = judge(question, gt, result.answer, gateway)
        outcomes.append(
            _Outcome(
                pair_id=pair.pair_id,
                round=round_no,
                category=category,
                ratio=ratio,
                answer=result.answer,
                forgotten_indicated=result.forgotten_indicated,
            )
        )
        detail.append(
            {
                "pair": pair.pair_id,
                "round": round_no,
                "question": question,
                "gt": gt,
                "answer": result.answer,
                "category": category,
                "forgotten_ratio": ratio,
                "ask_time": ask_t,
            }
        )
        if round_no == 1 and variant.learns:
            manager.handle(pair.feedback)

    report = ExperimentReport(variant=variant.name, seed=seed, pairs=len(pairs), detail=detail)
    _aggregate(report, outcomes)
    if variant.construction == CONSTRUCTION_ONLINE:
        report.n_f = float(count_nodes(engine.tree))
        report.n_avg = sum(node_counts) / len(node_counts) if node_counts else 0.0
    elif variant.construction == CONSTRUCTION_OFFLINE:
        report.n_f = float(offline_counts[-1]) if offline_counts else 0.0
        report.n_avg = sum(offline_counts) / len(offline_counts) if offline_counts else 0.0
    report.c_qa = _kind_total(gateway, PromptKind.QA_AGENT) + offline_build_usage
    report.c_f = _kind_total(gateway, PromptKind.RELEVANCE)
    return report


def _aggregate(report: ExperimentReport, outcomes: list[_Outcome]) -> None:
    def pct(flags: list[bool]) -> float:
        return 100.0 * sum(flags) / len(flags) if flags else 0.0

    all_rounds = outcomes
    round1 = [o for o in outcomes if o.round == 1]
    round2 = [o for o in outcomes if o.round == 2]
    report.s_c = pct([o.category == "correct" for o in all_rounds])
    report.s_p = pct([o.category in ("correct", "partially-correct") for o in all_rounds])
    report.s_c1 = pct([o.category == "correct" for o in round1])
    report.s_p1 = pct([o.category in ("correct", "partially-correct") for o in round1])
    report.s_c2 = pct([o.category == "correct" for o in round2])
    report.s_p2 = pct([o.category in ("correct", "partially-correct") for o in round2])
    by_pair: dict[str, dict[int, _Outcome]] = {}
    for o in outcomes:
        by_pair.setdefault(o.pair_id, {})[o.round] = o
    ups, eqs = [], []
    for rounds in by_pair.values():
        if 1 in rounds and 2 in rounds:
            r1, r2 = CATEGORY_RANK[rounds[1].category], CATEGORY_RANK[rounds[2].category]
            ups.append(r2 > r1)
            eqs.append(r2 == r1)
    report.s_up = pct(ups)
    report.s_eq = pct(eqs)
    fr1 = [o.ratio for o in round1 if o.ratio is not None]
    fr2 = [o.ratio for o in round2 if o.ratio is not None]
    report.fr_1 = 100.0 * sum(fr1) / len(fr1) if fr1 else 0.0
    report.fr_2 = 100.0 * sum(fr2) / len(fr2) if fr2 else 0.0


# --- matrix execution and reporting -------------------------------------------------


COLUMNS = (
    "variant", "S_c", "S_p", "S_up", "S_eq", "S_c1", "S_p1", "S_c2", "S_p2",
    "N_f", "N_avg", "C_qa[K]", "C_f[K]", "FR1", "FR2",
)


def _fmt(value: float | None, scale: float = 1.0) -> str:
    if value is None:
        return "--"
    return f"{value / scale:.1f}"


def report_table(reports: list[ExperimentReport], variant_order: list[str]) -> str:
    """Tab-separated table, one row per variant, averaged over seeds."""
    lines = ["\t".join(COLUMNS)]
    for name in variant_order:
        rows = [r for r in reports if r.variant == name]
        if not rows:
            continue

        def mean(getter) -> float | None:
            values = [getter(r) for r in rows]
            if any(v is None for v in values):
                return None
            return sum(values) / len(values)

        cells = [
            name,
            _fmt(mean(lambda r: r.s_c)),
            _fmt(mean(lambda r: r.s_p)),
            _fmt(mean(lambda r: r.s_up)),
            _fmt(mean(lambda r: r.s_eq)),
            _fmt(mean(lambda r: r.s_c1)),
            _fmt(mean(lambda r: r.s_p1)),
            _fmt(mean(lambda r: r.s_c2)),
            _fmt(mean(lambda r: r.s_p2)),
            _fmt(mean(lambda r: r.n_f)),
            _fmt(mean(lambda r: r.n_avg)),
            _fmt(mean(lambda r: float(r.c_qa)), scale=1000.0),
            _fmt(mean(lambda r: float(r.c_f)), scale=1000.0),
            _fmt(mean(lambda r: r.fr_1)),
            _fmt(mean(lambda r: r.fr_2)),
        ]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def run_matrix(
    variant_names: list[str],
    seeds: list[int],
    config: BuilderConfig | None = None,
    episodes: int = 5,
    qa_targets: int = 1,
    gateway_factory: Callable[[], LmGateway] | None = None,
    workers: int = 1,
) -> tuple[list[ExperimentReport], str]:
    """Run every (variant, seed) cell with isolated gateways and rule stores."""
    config = config or BuilderConfig()
    gateway_factory = gateway_factory or scripted_eval_gateway
    jobs: list[tuple[VariantConfig, int]] = []
    for name in variant_names:
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}")
        for seed in seeds:
            jobs.append((VARIANTS[name], seed))

    def run(job: tuple[VariantConfig, int]) -> ExperimentReport:
        variant, seed = job
        history = synthesize_history(episodes, seed, targets=qa_targets)
        pairs = generate_two_round_qa(history, seed, config)
        return run_experiment(variant, history, pairs, config, gateway_factory(), seed=seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run, jobs))
    else:
        reports = [run(job) for job in jobs]
    return reports, report_table(reports, variant_names)


def run_from_config(
    data: dict, lm_backend: str = "scripted", with_detail: bool = False
) -> str | tuple[str, list[dict]]:
    """CLI entry: run the matrix described by a config dict, return the table."""
    config = BuilderConfig.from_dict(data.get("builder", {}))
    if lm_backend == "http":
        lm_config = HttpLmConfig.from_dict(data.get("lm", {})) if data.get("lm") else HttpLmConfig.from_env()

        def factory() -> LmGateway:
            return LmGateway(HttpBackend(lm_config))

    else:
        factory = scripted_eval_gateway
    reports, table = run_matrix(
        variant_names=data.get("variants", ["online-full", "online-no-forgetting"]),
        seeds=[int(s) for s in data.get("seeds", [1, 2, 3])],
        config=config,
        episodes=int(data.get("episodes", 5)),
        qa_targets=int(data.get("qa_targets", 1)),
        gateway_factory=factory,
        workers=int(data.get("workers", 1)),
    )
    if not with_detail:
        return table
    detail = [
        {"variant": r.variant, "seed": r.seed, **entry}
        for r in reports
        for entry in r.detail
    ]
    return table, detail
