"""Long-running memory service: event intake, update queue, snapshots, sweeps."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

from .builder import RuleBasedGrouper, update_tree
from .clock import Clock, Duration, Timestamp
from .config import BuilderConfig
from .dialog import DialogManager
from .forgetting import SweepReport, sweep
from .gateway import LmGateway
from .qa import MODE_TREE, QaResult, answer_question
from .rules import RelevanceRuleSet, RuleStore
from .tree import HistoryTree, SceneInstant, count_nodes, deserialize, serialize, snapshot

logger = logging.getLogger(__name__)

FORGETTING_NONE = "none"
FORGETTING_TIME = "time"
FORGETTING_RELEVANCE = "time+relevance"

EVENT_KINDS = ("scene", "speech", "skill-start", "skill-end", "face")

_REQUIRED_ATTRS = {
    "scene": ("action",),
    "speech": ("text",),
    "skill-start": ("skill",),
    "skill-end": ("skill",),
    "face": ("person",),
}


class OutOfOrderError(ValueError):
    pass


@dataclass(frozen=True)
class EventRecord:
    at: Timestamp
    kind: str
    attributes: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        for key in _REQUIRED_ATTRS[self.kind]:
            if not self.attributes.get(key):
                raise ValueError(f"{self.kind} event needs attribute {key!r}")

    def to_line(self) -> str:
        return json.dumps(
            {"at": self.at, "kind": self.kind, "attributes": self.attributes}, sort_keys=True
        )

    @classmethod
    def from_line(cls, line: str) -> "EventRecord":
        rec = json.loads(line)
        return cls(at=int(rec["at"]), kind=rec["kind"], attributes=dict(rec["attributes"]))


def load_event_file(path: str | Path) -> list[EventRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(EventRecord.from_line(line))
    return records


def save_event_file(records: list[EventRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.to_line() + "\n")


def record_to_scene(record: EventRecord) -> SceneInstant:
    """Map an intake event onto the scene-instant attribute schema."""
    if record.kind == "scene":
        attributes = dict(record.attributes)
    elif record.kind == "speech":
        attributes = {"action": "Dialog", "speech": record.attributes["text"]}
    elif record.kind == "skill-start":
        attributes = {"action": record.attributes["skill"], **_extra(record, "skill")}
    elif record.kind == "skill-end":
        attributes = {"action": f"Finish({record.attributes['skill']})", **_extra(record, "skill")}
    else:  # face
        person = record.attributes["person"]
        attributes = {"action": f"MeetPerson({person})", "person": person, **_extra(record, "person")}
    return SceneInstant(at=record.at, attributes=attributes, source_id=record.kind)


def _extra(record: EventRecord, consumed: str) -> dict[str, str]:
    return {k: v for k, v in record.attributes.items() if k != consumed}


@dataclass(frozen=True)
class ServiceConfig:
    builder: BuilderConfig = field(default_factory=BuilderConfig)
    batch_cap: int = 64
    forgetting: str = FORGETTING_RELEVANCE
    learning_for_forgetting: bool = True
    learning_for_summarization: bool = True
    sweep_after_update: bool = True
    nightly_hour: int | None = 3
    idle_sweep_after: Duration | None = 300
    sweep_call_budget: int | None = None
    snapshot_dir: str | None = None
    snapshot_retain: int = 5
    metrics_log: str | None = None
    qa_mode: str = MODE_TREE
    qa_max_steps: int = 12

    @classmethod
    def from_dict(cls, data: dict) -> "ServiceConfig":
        data = dict(data)
        builder = BuilderConfig.from_dict(data.pop("builder", {}))
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in data.items() if k in known and k != "builder"}
        return cls(builder=builder, **kwargs)


class MemoryEngine:
    """Synchronous core shared by the threaded service and the eval harness."""

    def __init__(
        self,
        config: ServiceConfig,
        gateway: LmGateway,
        rule_store: RuleStore | None = None,
        clock: Clock | None = None,
    ):
        self.config = config
        self.gateway = gateway
        self.rule_store = rule_store or RuleStore()
        self.clock = clock or Clock()
        self.tree = HistoryTree(max_depth=config.builder.max_depth)
        self.grouper = (
            RuleBasedGrouper(config.builder) if config.builder.rule_based_low_levels else None
        )
        self.sweep_reports: list[SweepReport] = []

    def apply_batch(self, scenes: list[SceneInstant]) -> int:
        rules = (
            self.rule_store.current
            if self.config.learning_for_summarization and self.rule_store.current.rules
            else None
        )
        self.tree = update_tree(
            self.tree,
            scenes,
            self.config.builder,
            self.gateway,
            rules=rules,
            grouper=self.grouper,
        )
        return self.tree.version

    def sweep_now(
        self,
        now: Timestamp | None = None,
        interrupt: threading.Event | None = None,
    ) -> SweepReport | None:
        if self.config.forgetting == FORGETTING_NONE:
            return None
        now = now if now is not None else self.clock.now()
        estimate = self.config.forgetting == FORGETTING_RELEVANCE
        rules = (
            self.rule_store.current
            if estimate and self.config.learning_for_forgetting
            else RelevanceRuleSet()
        )
        report = sweep(
            self.tree,
            now,
            rules,
            self.gateway if estimate else None,
            self.config.builder,
            interrupt=interrupt,
            call_budget=self.config.sweep_call_budget,
            estimate=estimate,
        )
        if report.forgotten or report.extended:
            self.tree.version += 1
        self.sweep_reports.append(report)
        return report


class MemoryService:
    """Threaded wrapper: concurrent intake, one writer, lock-free snapshot reads.

    The update task and the sweep task share one worker thread, so they never
    run concurrently; arriving events set an interrupt that any in-progress
    sweep observes before its next LM call (writer priority).
    """

    def __init__(
        self,
        config: ServiceConfig,
        gateway: LmGateway,
        clock: Clock | None = None,
        rule_store: RuleStore | None = None,
    ):
        self.config = config
        self.clock = clock or Clock()
        self.gateway = gateway
        self.engine = MemoryEngine(config, gateway, rule_store, self.clock)
        self._cv = threading.Condition()
        self._pending: list[tuple[EventRecord, Timestamp]] = []
        self._received = 0
        self._processed = 0
        self._interrupt = threading.Event()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._snapshot = snapshot(self.engine.tree)
        self._serialized: dict[int, str] = {0: serialize(self._snapshot)}
        self._last_activity = self.clock.now()
        self._idle_swept = True
        self._nightly_done: str | None = None
        self.dialog = DialogManager(
            self.latest_snapshot,
            self.engine.rule_store,
            gateway,
            clock=self.clock,
            qa_mode=config.qa_mode,
            max_steps=config.qa_max_steps,
        )
        if config.snapshot_dir:
            restored = load_latest_snapshot(config.snapshot_dir)
            if restored is not None:
                self.engine.tree = restored
                self._publish()

    # --- intake -------------------------------------------------------------

    def ingest(self, record: EventRecord) -> int:
        """Validate and enqueue one event; returns the queue depth."""
        record.validate()
        with self._cv:
            floor = self._pending[-1][0].at if self._pending else self._last_committed_at()
            if floor is not None and record.at < floor:
                raise OutOfOrderError(
                    f"event at {record.at} precedes accepted timestamp {floor}"
                )
            self._pending.append((record, self.clock.now()))
            self._received += 1
            self._last_activity = self.clock.now()
            self._idle_swept = False
            self._interrupt.set()
            self._cv.notify_all()
            return len(self._pending)

    def _last_committed_at(self) -> Timestamp | None:
        return self.engine.tree.latest_end()

    # --- worker -------------------------------------------------------------

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self.run_update_loop, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._interrupt.set()
        with self._cv:
            self._cv.notify_all()
        if self._thread is not None:
            self._thread.join(timeout=30)
            self._thread = None

    def run_update_loop(self) -> None:
        """Drain batches into tree updates; sweep when the queue goes empty."""
        while not self._stop.is_set():
            with self._cv:
                if not self._pending:
                    self._cv.wait(timeout=0.02)
                batch = [record for record, _ in self._pending[: self.config.batch_cap]]
            if self._stop.is_set():
                return
            if batch:
                self._interrupt.clear()
                try:
                    scenes = [record_to_scene(r) for r in batch]
                    self.engine.apply_batch(scenes)
                except Exception:
                    logger.exception("update failed; dropping batch")
                with self._cv:
                    del self._pending[: len(batch)]
                    self._processed += len(batch)
                    self._last_activity = self.clock.now()
                    queue_empty = not self._pending
                self._publish()
                if queue_empty and self.config.sweep_after_update:
                    self._run_sweep()
                continue
            self._maybe_scheduled_sweep()

    def _run_sweep(self) -> None:
        report = self.engine.sweep_now(now=self.clock.now(), interrupt=self._interrupt)
        if report is None:
            return
        if report.forgotten or report.extended:
            self._publish()
        if self.config.metrics_log:
            with open(self.config.metrics_log, "a", encoding="utf-8") as fh:
                fh.write(
                    json.dumps(
                        {
                            "at": self.clock.now(),
                            "forgotten": report.forgotten,
                            "extended": report.extended,
                            "visited": report.visited,
                            "usage": [report.usage.prompt_tokens, report.usage.completion_tokens],
                            "interrupted": report.interrupted,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )

    def _maybe_scheduled_sweep(self) -> None:
        if self.config.forgetting == FORGETTING_NONE or self.engine.tree.is_empty():
            return
        now = self.clock.now()
        with self._cv:
            if self._pending:
                return
            idle_for = now - self._last_activity
            idle_due = (
                self.config.idle_sweep_after is not None
                and not self._idle_swept
                and idle_for >= self.config.idle_sweep_after
            )
            nightly_due = False
            if self.config.nightly_hour is not None:
                stamp = datetime.fromtimestamp(now, tz=timezone.utc)
                day = stamp.strftime("%Y-%m-%d")
                if stamp.hour >= self.config.nightly_hour and self._nightly_done != day:
                    nightly_due = True
                    self._nightly_done = day
            if idle_due:
                self._idle_swept = True
        if idle_due or nightly_due:
            self._run_sweep()

    # --- reads ----------------------------------------------------------------

    def _publish(self) -> None:
        snap = snapshot(self.engine.tree)
        text = serialize(snap)
        with self._cv:
            self._snapshot = snap
            self._serialized[snap.version] = text
            while len(self._serialized) > max(self.config.snapshot_retain, 1):
                oldest = min(self._serialized)
                if oldest == snap.version:
                    break
                del self._serialized[oldest]
        if self.config.snapshot_dir:
            persist_snapshot(text, snap.version, self.config.snapshot_dir, self.config.snapshot_retain)

    def latest_snapshot(self) -> HistoryTree:
        with self._cv:
            return self._snapshot

    def serialized_snapshot(self, version: int | None = None) -> str | None:
        with self._cv:
            if version is None:
                version = self._snapshot.version
            if version in self._serialized:
                return self._serialized[version]
        if self.config.snapshot_dir:
            path = Path(self.config.snapshot_dir) / _snapshot_name(version)
            if path.exists():
                return path.read_text(encoding="utf-8")
        return None

    def lag_metrics(self) -> tuple[int, int, Duration]:
        """(received, processed, age of the oldest pending record)."""
        with self._cv:
            if self._pending:
                delay = max(self.clock.now() - self._pending[0][1], 0)
            else:
                delay = 0
            return self._received, self._processed, delay

    def queue_state(self) -> tuple[int, int, int]:
        """Atomic (received, processed, pending) triple; received = processed + pending."""
        with self._cv:
            return self._received, self._processed, len(self._pending)

    def metrics(self) -> dict:
        snap = self.latest_snapshot()
        received, processed, pending = self.queue_state()
        _, _, delay = self.lag_metrics()
        reports = self.engine.sweep_reports
        last = reports[-1] if reports else None
        return {
            "received": received,
            "processed": processed,
            "pending": pending,
            "current_delay_seconds": delay,
            "tree_version": snap.version,
            "node_count": len(snap.nodes()),
            "goal_plus_count": count_nodes(snap),
            "rules_version": self.engine.rule_store.current.version,
            "last_sweep": None
            if last is None
            else {
                "forgotten": last.forgotten,
                "extended": last.extended,
                "visited": last.visited,
                "interrupted": last.interrupted,
            },
        }

    # --- dialog-facing helpers ---------------------------------------------------

    def ask(self, text: str) -> QaResult:
        snap = self.latest_snapshot()
        return answer_question(
            snap, text, self.gateway, mode=self.config.qa_mode, max_steps=self.config.qa_max_steps
        )

    def feedback(self, text: str) -> int:
        ruleset = self.engine.rule_store.learn(text, self.gateway, now=self.clock.now())
        return ruleset.version


# --- snapshot files -------------------------------------------------------------


def _snapshot_name(version: int) -> str:
    return f"tree-v{version:08d}.emtree"


_SNAPSHOT_FILE = re.compile(r"^tree-v(\d{8})\.emtree$")


def persist_snapshot(text: str, version: int, directory: str, retain: int) -> None:
    """Atomic write (tmp + rename) so the newest complete file always loads."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    final = root / _snapshot_name(version)
    tmp = final.with_suffix(".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, final)
    versions = sorted(
        int(m.group(1)) for p in root.iterdir() if (m := _SNAPSHOT_FILE.match(p.name))
    )
    for old in versions[:-retain] if retain > 0 else []:
        (root / _snapshot_name(old)).unlink(missing_ok=True)


def load_latest_snapshot(directory: str) -> HistoryTree | None:
    root = Path(directory)
    if not root.is_dir():
        return None
    versions = sorted(
        (int(m.group(1)) for p in root.iterdir() if (m := _SNAPSHOT_FILE.match(p.name))),
        reverse=True,
    )
    for version in versions:
        try:
            return deserialize((root / _snapshot_name(version)).read_text(encoding="utf-8"))
        except (ValueError, json.JSONDecodeError, KeyError):
            logger.warning("skipping unreadable snapshot v%d", version)
    return None
