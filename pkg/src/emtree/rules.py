"""Learned relevance rules: an ordered, versioned set mutated by user feedback."""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass

from .clock import Timestamp
from .gateway import LmGateway, PromptKind
from .prompts import ParseFailure, parse_rule_list, render_rule_learning_prompt

logger = logging.getLogger(__name__)

MAX_RULES = 50

RULES_FILE_HEADER = "emtree-rules/1"


@dataclass(frozen=True)
class RelevanceRuleSet:
    """Immutable snapshot of the rule list; mutations produce a new version."""

    rules: tuple[str, ...] = ()
    version: int = 0
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        if any(not r.strip() or "\n" in r for r in self.rules):
            raise ValueError("rules must be non-empty single lines")
        if len(self.provenance) not in (0, len(self.rules)):
            raise ValueError("provenance must align with rules")

    def with_rules(self, rules: list[str], origin: str) -> "RelevanceRuleSet":
        rules = [r.strip() for r in rules if r.strip()][:MAX_RULES]
        old_origin = dict(zip(self.rules, self.provenance or ("seed",) * len(self.rules)))
        provenance = tuple(old_origin.get(r, origin) for r in rules)
        return RelevanceRuleSet(rules=tuple(rules), version=self.version + 1, provenance=provenance)


def render_rules(ruleset: RelevanceRuleSet) -> str:
    """1-based numbered block; an empty set renders the standing default only."""
    if not ruleset.rules:
        return "(no rules yet; the default action is to forget)"
    return "\n".join(f"{i + 1}. {rule}" for i, rule in enumerate(ruleset.rules))


def parse_rules_block(text: str) -> list[str]:
    try:
        return parse_rule_list(text)
    except ParseFailure:
        return []


def learn_from_feedback(
    ruleset: RelevanceRuleSet, feedback: str, gateway: LmGateway
) -> RelevanceRuleSet:
    """One LM rewrite of the rule list; falls back to appending the feedback."""
    if not feedback.strip():
        raise ValueError("feedback must be non-empty")
    messages = render_rule_learning_prompt(list(ruleset.rules), feedback)
    origin = f"feedback:v{ruleset.version + 1}"
    try:
        response, _ = gateway.complete(PromptKind.RULE_LEARNING, messages)
        new_rules = parse_rule_list(response)
    except ParseFailure:
        logger.warning("rule learning response unparseable; appending feedback verbatim")
        new_rules = list(ruleset.rules) + [feedback.strip()]
    return ruleset.with_rules(new_rules, origin)


@dataclass
class AuditRecord:
    at: Timestamp
    feedback: str
    before_version: int
    after_version: int
    before_rules: tuple[str, ...]
    after_rules: tuple[str, ...]

    def to_line(self) -> str:
        return json.dumps(
            {
                "at": self.at,
                "feedback": self.feedback,
                "before_version": self.before_version,
                "after_version": self.after_version,
                "before_rules": list(self.before_rules),
                "after_rules": list(self.after_rules),
            },
            sort_keys=True,
        )

    @classmethod
    def from_line(cls, line: str) -> "AuditRecord":
        rec = json.loads(line)
        return cls(
            at=rec["at"],
            feedback=rec["feedback"],
            before_version=rec["before_version"],
            after_version=rec["after_version"],
            before_rules=tuple(rec["before_rules"]),
            after_rules=tuple(rec["after_rules"]),
        )


class RuleStore:
    """Copy-on-write holder for the current rule set plus its audit trail.

    Readers pin a version by grabbing `current` once per operation; learning
    swaps in a new immutable set under the lock.
    """

    def __init__(self, seed: RelevanceRuleSet | None = None, audit_path: str | None = None):
        self._lock = threading.Lock()
        self._current = seed or RelevanceRuleSet()
        self.audit: list[AuditRecord] = []
        self._audit_path = audit_path

    @property
    def current(self) -> RelevanceRuleSet:
        with self._lock:
            return self._current

    def learn(self, feedback: str, gateway: LmGateway, now: Timestamp) -> RelevanceRuleSet:
        with self._lock:
            before = self._current
        after = learn_from_feedback(before, feedback, gateway)
        record = AuditRecord(
            at=now,
            feedback=feedback,
            before_version=before.version,
            after_version=after.version,
            before_rules=before.rules,
            after_rules=after.rules,
        )
        with self._lock:
            self._current = after
            self.audit.append(record)
            if self._audit_path:
                with open(self._audit_path, "a", encoding="utf-8") as fh:
                    fh.write(record.to_line() + "\n")
        return after


def replay_audit(seed: RelevanceRuleSet, records: list[AuditRecord]) -> RelevanceRuleSet:
    """Rebuild the current rule set from the seed by replaying audit records."""
    current = seed
    for record in records:
        if record.before_version != current.version or record.before_rules != current.rules:
            raise ValueError(f"audit gap at version {record.before_version}")
        current = current.with_rules(list(record.after_rules), f"feedback:v{record.after_version}")
    return current


def save_rules(ruleset: RelevanceRuleSet, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(RULES_FILE_HEADER + "\n")
        for rule in ruleset.rules:
            fh.write(rule + "\n")


def load_rules(path: str) -> RelevanceRuleSet:
    with open(path, encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    if not lines or lines[0] != RULES_FILE_HEADER:
        raise ValueError("not an emtree-rules/1 file")
    rules = [line for line in lines[1:] if line.strip()]
    return RelevanceRuleSet(rules=tuple(rules), version=0, provenance=("seed",) * len(rules))
