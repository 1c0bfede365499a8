"""Deterministic scripted LM backend: a rule table plus content-derived defaults.

Every response is a pure function of (kind, messages), so recorded sessions
replay exactly and experiment reports are reproducible byte for byte.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Callable

from .gateway import Message, PromptKind
from .prompts import (
    META_RULE,
    extract_current_items,
    extract_feedback,
    extract_judge_fields,
    extract_learned_rules,
    extract_question,
    extract_relevance_item,
    extract_routed_utterance,
    extract_view_entries,
    prompt_text,
)
from .qa import NO_ANSWER, NO_RECORD_ANSWER

_WORD = re.compile(r"[a-z]+")

STOPWORDS = frozenset(
    """a an and are at be but by did do does for from had has have how i in is it its me my of on or
    that the then this to was we were what when where which who why with you your should always
    remember record retain exact time first last ever recently item items details detail never
    forget forgotten important""".split()
)


def content_tokens(text: str) -> set[str]:
    return {w for w in _WORD.findall(text.lower()) if len(w) >= 3 and w not in STOPWORDS}


@dataclass
class ScriptedRule:
    kind: PromptKind
    respond: str | Callable[[list[Message]], str]
    pattern: str | None = None
    matcher: Callable[[list[Message]], bool] | None = None

    def applies(self, kind: PromptKind, messages: list[Message]) -> bool:
        if kind != self.kind:
            return False
        if self.pattern is not None and self.pattern not in prompt_text(messages):
            return False
        if self.matcher is not None and not self.matcher(messages):
            return False
        return True

    def render(self, messages: list[Message]) -> str:
        if callable(self.respond):
            return self.respond(messages)
        return self.respond


def _strip_span(line: str) -> str:
    # item lines look like "<span>: <text>"; the span never contains ": "
    parts = line.split(": ", 1)
    return parts[1] if len(parts) == 2 else line


def _default_grouping(messages: list[Message]) -> str:
    items = extract_current_items(messages)
    if not items:
        return 'Reasoning: nothing new.\nJSON: {"0": ""}'
    hi = max(idx for idx, _ in items)
    lo = min(idx for idx, _ in items)
    summary = "; ".join(_strip_span(text) for _, text in sorted(items, reverse=True))
    key = f"{hi}-{lo}" if hi != lo else f"{lo}"
    return (
        "Reasoning: scripted default, newest items form their own group.\nJSON: "
        + json.dumps({key: summary})
    )


def _default_relevance(messages: list[Message]) -> str:
    return "Reasoning: no rule applies, following the default.\nRelevance: 0"


def cooperative_relevance(messages: list[Message]) -> str:
    """Return inf when a learned rule shares a content word with the item."""
    rules = [r for r in extract_learned_rules(messages) if r != META_RULE]
    item_tokens = content_tokens(extract_relevance_item(messages))
    for rule in rules:
        if content_tokens(rule) & item_tokens:
            return "Reasoning: a learned rule covers this experience.\nRelevance: inf"
    return "Reasoning: no rule applies, following the default.\nRelevance: 0"


def _default_rule_learning(messages: list[Message]) -> str:
    rules = extract_learned_rules(messages)
    feedback = extract_feedback(messages)
    if feedback:
        rules = rules + [feedback]
    if not rules:
        return "1. (no rules)"
    return "\n".join(f"{i + 1}. {rule}" for i, rule in enumerate(rules))


def _default_simple_summarize(messages: list[Message]) -> str:
    lines = []
    for message in messages:
        if message.text.startswith("Items:"):
            lines = [l[2:] for l in message.text.splitlines()[1:] if l.startswith("- ")]
    summary = "; ".join(_strip_span(l) for l in lines)[:200]
    return f"Summary: {summary}"


def _default_qa(messages: list[Message]) -> str:
    question = extract_question(messages)
    entries = extract_view_entries(messages)
    question_tokens = content_tokens(question)
    prior_expands = sum(
        1 for m in messages if m.role == "ai" and "Action: expand(" in m.text
    )
    # "first ..." questions look at the earliest best match, everything else
    # at the most recent one; within a subtree the shallowest entry wins
    prefer_earliest = bool(re.search(r"\b(first|earliest|originally)\b", question.lower()))
    best_score, best_idx = 0, -1
    for i, entry in enumerate(entries):
        if entry.placeholder:
            continue
        score = len(question_tokens & content_tokens(entry.text))
        if score > best_score:
            best_score, best_idx = score, i
        elif score == best_score and score > 0 and not prefer_earliest:
            if entries[best_idx].indent >= entry.indent:
                best_score, best_idx = score, i
    if best_idx < 0 or best_score == 0:
        # nothing matches: probe a couple of collapsed entries, then conclude
        expandable = [e for e in entries if e.child_count > 0]
        if expandable and prior_expands < 2:
            return f"Action: expand({expandable[-1].node_id})"
        if any(e.placeholder for e in entries):
            return f"Action: answer({NO_RECORD_ANSWER})"
        return f"Action: answer({NO_ANSWER})"
    best = entries[best_idx]
    if best.child_count > 0:
        return f"Action: expand({best.node_id})"
    return f"Action: answer({best.text})"


_GREETING = re.compile(r"^\s*(hello|hi|hey|good (morning|evening|afternoon)|thanks|thank you)\b", re.IGNORECASE)
_FEEDBACK_HINT = re.compile(
    r"(should (always )?remember|important to remember|would have been important|remember that)",
    re.IGNORECASE,
)


def _default_routing(messages: list[Message]) -> str:
    utterance, turns = extract_routed_utterance(messages)
    if _GREETING.match(utterance):
        return "reply('Hello! You can ask me about my past activities.')"
    if _FEEDBACK_HINT.search(utterance):
        if len(utterance.split()) >= 5:
            text = utterance
        else:
            last_question = next(
                (t for speaker, t in reversed(turns) if speaker == "user"), utterance
            )
            text = f"It would have been important to remember: {last_question}"
        safe = text.replace("'", "")
        return f"handle_forgetting_feedback('{safe}')"
    text = utterance
    if len(utterance.split()) <= 3 and turns:
        last_question = next((t for speaker, t in reversed(turns) if speaker == "user"), "")
        if last_question:
            text = f"Regarding '{last_question}': {utterance}"
    safe = text.replace("'", "")
    return f"answer_question_about_my_past('{safe}')"


_FORGOT_HINT = re.compile(
    r"(no record|already forgot|forgotten|do not have (a record|information)|no information about|not recorded)",
    re.IGNORECASE,
)
_TIME_TOKEN = re.compile(r"\b(\d{1,2}):(\d{2})(?::\d{2})?\b")


def classify_answer(gt: str, hypothesis: str) -> str:
    """Deterministic judge fallback: normalized matching with time tolerance."""
    hyp = hypothesis.strip()
    if not hyp or NO_ANSWER.lower() in hyp.lower():
        return "no-answer"
    if _FORGOT_HINT.search(hyp):
        return "forgotten-indicated"
    gt_tokens = content_tokens(gt)
    hyp_tokens = content_tokens(hypothesis)
    norm_gt = " ".join(_WORD.findall(gt.lower()))
    norm_hyp = " ".join(_WORD.findall(hypothesis.lower()))
    gt_times = [(int(h), int(m)) for h, m in _TIME_TOKEN.findall(gt)]
    hyp_times = [(int(h), int(m)) for h, m in _TIME_TOKEN.findall(hypothesis)]
    if gt_times:
        # the answer hinges on a clock time: grade by proximity
        if not hyp_times:
            return "wrong"
        best = min(
            abs((gh * 60 + gm) - (hh * 60 + hm))
            for gh, gm in gt_times
            for hh, hm in hyp_times
        )
        if best <= 2 and (not gt_tokens or gt_tokens <= hyp_tokens):
            return "correct"
        if best <= 30:
            return "partially-correct"
        return "wrong"
    if norm_gt and gt_tokens and norm_gt in norm_hyp:
        return "correct"
    if gt_tokens and gt_tokens <= hyp_tokens:
        return "correct"
    if gt_tokens and len(gt_tokens & hyp_tokens) * 2 >= len(gt_tokens):
        return "partially-correct"
    return "wrong"


def _default_judge(messages: list[Message]) -> str:
    _, gt, hypothesis = extract_judge_fields(messages)
    return f"Category: {classify_answer(gt, hypothesis)}"


_DEFAULTS: dict[PromptKind, Callable[[list[Message]], str]] = {
    PromptKind.GROUPING: _default_grouping,
    PromptKind.RELEVANCE: _default_relevance,
    PromptKind.RULE_LEARNING: _default_rule_learning,
    PromptKind.SIMPLE_SUMMARIZE: _default_simple_summarize,
    PromptKind.QA_AGENT: _default_qa,
    PromptKind.DIALOG_ROUTING: _default_routing,
    PromptKind.JUDGE: _default_judge,
}


class ScriptedBackend:
    """Rule table keyed by prompt kind with pattern matches on message content.

    Rules are consulted in order; the first applicable one answers. Without a
    match the kind's default applies: newest items form their own group,
    relevance 0, identity-plus-append rule learning.
    """

    def __init__(self, rules: list[ScriptedRule] | None = None, cooperative_relevance_mode: bool = False):
        self.rules: list[ScriptedRule] = list(rules or [])
        if cooperative_relevance_mode:
            self.rules.append(ScriptedRule(PromptKind.RELEVANCE, cooperative_relevance))

    def add_rule(
        self,
        kind: PromptKind,
        respond: str | Callable[[list[Message]], str],
        pattern: str | None = None,
        matcher: Callable[[list[Message]], bool] | None = None,
        prepend: bool = True,
    ) -> None:
        rule = ScriptedRule(kind=kind, respond=respond, pattern=pattern, matcher=matcher)
        if prepend:
            self.rules.insert(0, rule)
        else:
            self.rules.append(rule)

    def complete(self, kind: PromptKind, messages: list[Message]) -> str:
        for rule in self.rules:
            if rule.applies(kind, messages):
                return rule.render(messages)
        default = _DEFAULTS.get(kind)
        if default is None:
            raise ValueError(f"no scripted behavior for kind {kind}")
        return default(messages)
