"""Prompt templates and response parsing for every LM role in the pipeline."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from .clock import Timestamp, fmt_ts
from .gateway import Message, ROLE_AI, ROLE_HUMAN, ROLE_SYSTEM


class ParseFailure(Exception):
    """Response did not contain the expected structured payload."""


class MissingBinding(Exception):
    """A template binding required for the prompt kind was not provided."""


# --- grouping ------------------------------------------------------------------

GROUPING_SYSTEM = (
    "You are given a list of grouped goals/actions pursued by a humanoid robot, "
    "and a description of the current actions. Group the previous actions with "
    "the new ones into steps or subtasks. Consider whether the current actions "
    "belong to the same step/subtask or starts something new. Also consider the "
    "dates/times, do not merge items that are too far. Do not repeat the "
    "summaries of the previous groups, each group should be distinct. Groups "
    "should be specific, avoid too general terms like \"kitchen activities\", "
    "rather use concrete steps/subtasks such as \"clean the bowl\", \"cut the "
    "onion and put the slices on the plate\" etc."
)

GROUPING_FORMAT_NOTE = (
    "The previous actions are already grouped and provided as a list:\n"
    "# (range) summary 1\n"
    "- n: item 1.1\n"
    "- n-1: item 1.2\n"
    "# (range) summary 2\n"
    "- n-2: item 2.1\n"
    "..."
)

GROUPING_FEWSHOT_NOTE = (
    "The following examples show how groups and their summaries should look like. "
    "Consider the semantics and length of these examples."
)

GROUPING_FEWSHOT: list[tuple[str, str]] = [
    (
        "Items:\n"
        "Pickup(Mug_1), Place(CoffeeMachine), ToggleOn(CoffeeMachine), "
        "ToggleOff(CoffeeMachine), Pickup(Mug_1)",
        "Summary: I brewed a mug of coffee with the coffee machine.",
    ),
    (
        "Items:\n"
        "Open(Fridge), Pickup(Lettuce_2), Close(Fridge), Slice(Lettuce_2), "
        "Place(Bowl_0)",
        "Summary: I took lettuce from the fridge, sliced it, and put it in a bowl.",
    ),
]

GROUPING_INSTRUCTION = (
    "Decide how to group the current actions with the previous ones. Produce a "
    "JSON map of \"item range\": \"short summary\" for the items that should be "
    "modified. E.g. {\"4-0\": \"...\"} to merge the newest item (0) into the "
    "existing group, or {\"0\": \"...\"} if the newest item (0) starts a new "
    "group, or {\"5-3\": \"...\", \"2-0\": \"...\"} to re-group some items "
    "together with the newest one (0). When modifying existing groups, make sure "
    "to properly adjust the summary to match only the items that are now in that "
    "group. Merge previous groups that represent the same step/subtask. Groups "
    "should be no larger than a handful of items, each group should focus on a "
    "single subtask. The summaries should be concise and focus on the main "
    "activity/observation of the humanoid robot. Use first-person perspective of "
    "the robot."
)

GROUPING_TAIL = "Answer like this:\nReasoning: ...\nJSON: ..."

RULES_BLOCK_HEADER = "Rules about what is relevant and what not:"


def _range_label(hi: int, lo: int) -> str:
    return f"{hi} - {lo}" if hi != lo else f"{hi} - {hi}"


def render_grouping_prompt(
    groups: list[tuple[int, int, str, list[tuple[int, list[str]]]]],
    current_items: list[tuple[int, list[str]]],
    rules: list[str] | None = None,
) -> list[Message]:
    """Build the incremental grouping prompt.

    `groups` holds (hi, lo, summary, items) oldest first, `current_items` the
    parentless items; items are (presented index, text lines) with the newest
    item at index 0.
    """
    if not current_items:
        raise MissingBinding("grouping prompt needs at least one current item")
    system = GROUPING_SYSTEM
    if rules:
        numbered = "\n".join(f"{i + 1}. {r}" for i, r in enumerate(rules))
        system += (
            "\nWhen summarizing, preserve details that the user marked as "
            f"relevant.\n{RULES_BLOCK_HEADER}\n{numbered}"
        )
    messages = [Message(ROLE_SYSTEM, system), Message(ROLE_HUMAN, GROUPING_FORMAT_NOTE)]
    messages.append(Message(ROLE_HUMAN, GROUPING_FEWSHOT_NOTE))
    for human, ai in GROUPING_FEWSHOT:
        messages.append(Message(ROLE_HUMAN, human))
        messages.append(Message(ROLE_AI, ai))
    prev_lines = ["Previous actions:"]
    for hi, lo, summary, items in groups:
        prev_lines.append(f"# ({_range_label(hi, lo)}) {summary}")
        for idx, lines in items:
            prev_lines.append(f"- {idx}: {lines[0]}")
            prev_lines.extend(lines[1:])
    if not groups:
        prev_lines.append("(none)")
    messages.append(Message(ROLE_HUMAN, "\n".join(prev_lines)))
    cur_lines = ["Current:"]
    for idx, lines in current_items:
        cur_lines.append(f"- {idx}: {lines[0]}")
        cur_lines.extend(lines[1:])
    messages.append(Message(ROLE_HUMAN, "\n".join(cur_lines)))
    messages.append(Message(ROLE_HUMAN, GROUPING_INSTRUCTION))
    messages.append(Message(ROLE_HUMAN, GROUPING_TAIL))
    return messages


_RANGE_KEY = re.compile(r"^\s*(\d+)\s*(?:-\s*(\d+)\s*)?$")


def parse_grouping_response(text: str) -> dict[tuple[int, int], str]:
    """Extract the {"hi-lo": summary} directive map, tolerating extra prose."""
    marker = text.rfind("JSON")
    search_from = marker if marker >= 0 else 0
    brace = text.find("{", search_from)
    if brace < 0:
        brace = text.find("{")
    if brace < 0:
        raise ParseFailure("no JSON object in grouping response")
    try:
        payload, _ = json.JSONDecoder().raw_decode(text[brace:])
    except (json.JSONDecodeError, ValueError) as exc:
        raise ParseFailure(f"malformed grouping JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ParseFailure("grouping JSON is not an object")
    directives: dict[tuple[int, int], str] = {}
    for key, value in payload.items():
        match = _RANGE_KEY.match(str(key))
        if not match or not isinstance(value, str):
            raise ParseFailure(f"bad directive entry: {key!r}")
        hi = int(match.group(1))
        lo = int(match.group(2)) if match.group(2) is not None else hi
        if lo > hi:
            hi, lo = lo, hi
        directives[(hi, lo)] = value
    if not directives:
        raise ParseFailure("empty directive map")
    return directives


# --- relevance estimation ------------------------------------------------------

RELEVANCE_SYSTEM = (
    "You are a smart assistant keeping a history of what happened. The history "
    "is limited and old items will be forgotten. Your task is to value the "
    "relevance of an item that is expired, in order to decide whether it needs "
    "to be retained or can be forgotten. It is important to follow the rules "
    "provided by your user to decide on the relevance of an item. The parent "
    "item is provided as context only. The default action is to forget "
    "(Relevance: 0) if there is no specific rule to keep it."
)

META_RULE = (
    "Do not be reluctant to forget items. If there is no specific rule telling "
    "you to keep it, or the item is of particular importance, answer with '0'."
)

RELEVANCE_INSTRUCTION = (
    "Estimate the relevance of the mentioned experience, i.e. whether it should "
    "be retained longer. A relevance of 0 means that it can be forgotten now. "
    "Higher integer values keep the item for longer. If the item should be kept "
    "forever, answer with \"inf\"."
)

RELEVANCE_TAIL = "Answer like this:\nReasoning: ...\nRelevance: <number>"


def render_relevance_prompt(
    item_text: str,
    parent_text: str | None,
    rules: list[str],
    now: Timestamp,
) -> list[Message]:
    if not item_text:
        raise MissingBinding("relevance prompt needs an item")
    lines = [RULES_BLOCK_HEADER, f"1. {META_RULE}"]
    lines.extend(f"{i + 2}. {rule}" for i, rule in enumerate(rules))
    item_lines = ["Item for which the relevance needs to be estimated:", item_text, "Additional Context:"]
    if parent_text:
        item_lines.append(f"Parent item: {parent_text}")
    item_lines.append(f"Now: {fmt_ts(now)}")
    return [
        Message(ROLE_SYSTEM, RELEVANCE_SYSTEM),
        Message(ROLE_HUMAN, "\n".join(lines)),
        Message(ROLE_HUMAN, "\n".join(item_lines)),
        Message(ROLE_HUMAN, RELEVANCE_INSTRUCTION),
        Message(ROLE_HUMAN, RELEVANCE_TAIL),
    ]


_RELEVANCE_VALUE = re.compile(r"Relevance:\s*(inf|\d+)", re.IGNORECASE)

RELEVANCE_MAX = 100


def parse_relevance_response(text: str) -> int | float:
    """Return the final "Relevance:" value; "inf" maps to float infinity."""
    matches = _RELEVANCE_VALUE.findall(text)
    if not matches:
        raise ParseFailure("no relevance value in response")
    raw = matches[-1].lower()
    if raw == "inf":
        return float("inf")
    return min(int(raw), RELEVANCE_MAX)


# --- rule learning ---------------------------------------------------------------

RULE_LEARNING_SYSTEM = (
    "You are a smart assistant keeping a history of what happened. The history "
    "is limited and old items will be forgotten. To value the relevance of what "
    "to remember and what to forget, you keep a set of rules based on your "
    "user's feedback. Currently, you just received some new feedback. Modify the "
    "rule set according to the feedback by adding, modifying or removing rules. "
    "Summarize or merge rules that are very similar, without hallucinating too "
    "general rules. Rules should be simple and concise, following the user "
    "feedback, without hallucinating details. Simply copy rules that are not "
    "related to the feedback (they might still be relevant in another context)."
)

RULE_LEARNING_INSTRUCTION = (
    "Produce a modified set of rules as a numbered list with each item on a new line."
)

EXISTING_RULES_HEADER = "Existing set of rules:"
USER_FEEDBACK_PREFIX = "User feedback:"


def render_rule_learning_prompt(rules: list[str], feedback: str) -> list[Message]:
    if not feedback.strip():
        raise MissingBinding("rule learning prompt needs feedback text")
    if rules:
        block = "\n".join(f"{i + 1}. {rule}" for i, rule in enumerate(rules))
    else:
        block = "(none yet)"
    return [
        Message(ROLE_SYSTEM, RULE_LEARNING_SYSTEM),
        Message(ROLE_HUMAN, f"{EXISTING_RULES_HEADER}\n{block}"),
        Message(ROLE_HUMAN, f'{USER_FEEDBACK_PREFIX} "{feedback}"'),
        Message(ROLE_HUMAN, RULE_LEARNING_INSTRUCTION),
    ]


_NUMBERED_LINE = re.compile(r"^\s*\d+[.)]\s+(.*\S)\s*$")


def parse_rule_list(text: str) -> list[str]:
    rules = [m.group(1) for m in (_NUMBERED_LINE.match(line) for line in text.splitlines()) if m]
    if not rules:
        raise ParseFailure("no numbered rules in response")
    return rules


# --- simple summarization --------------------------------------------------------

SIMPLE_SUMMARIZE_SYSTEM = (
    "You keep a concise first-person activity log for a humanoid robot. "
    "Summarize the given list of activities into one short sentence describing "
    "what happened overall. Keep concrete actions and objects; drop repetition."
)

SIMPLE_SUMMARIZE_TAIL = "Answer like this:\nSummary: ..."


def render_simple_summarize_prompt(item_lines: list[str]) -> list[Message]:
    if not item_lines:
        raise MissingBinding("nothing to summarize")
    body = "Items:\n" + "\n".join(f"- {line}" for line in item_lines)
    return [
        Message(ROLE_SYSTEM, SIMPLE_SUMMARIZE_SYSTEM),
        Message(ROLE_HUMAN, body),
        Message(ROLE_HUMAN, SIMPLE_SUMMARIZE_TAIL),
    ]


def parse_summary_response(text: str) -> str:
    marker = text.rfind("Summary:")
    if marker >= 0:
        return text[marker + len("Summary:") :].strip().splitlines()[0].strip()
    line = text.strip().splitlines()
    if not line:
        raise ParseFailure("empty summary response")
    return line[0].strip()


# --- QA exploration agent ---------------------------------------------------------

QA_SYSTEM = (
    "You answer questions about a robot's past by exploring its episodic "
    "memory, shown as summary entries with ids. Expand entries to reveal their "
    "contents until you can answer. Ranges marked as forgotten cannot be "
    "expanded. Answer as soon as the visible information suffices; if the "
    "needed details fall inside forgotten ranges, say that there is no record. "
    "Respond with exactly one action per turn."
)

QA_ACTIONS_TREE = "Available actions: expand(<node-id>), answer(<text>)"
QA_ACTIONS_FLAT = "Available actions: expand(<node-id>), search(<keywords>), answer(<text>)"
QA_TAIL = "Answer like this:\nAction: ..."


def render_qa_prompt(
    question: str,
    view: str,
    mode: str,
    steps: list[tuple[str, str]],
) -> list[Message]:
    """Build the exploration prompt; `steps` holds prior (action, observation)."""
    if not question:
        raise MissingBinding("qa prompt needs a question")
    actions = QA_ACTIONS_FLAT if mode == "flat" else QA_ACTIONS_TREE
    messages = [
        Message(ROLE_SYSTEM, QA_SYSTEM),
        Message(ROLE_HUMAN, f"Question: {question}"),
    ]
    for action, observation in steps:
        messages.append(Message(ROLE_AI, f"Action: {action}"))
        messages.append(Message(ROLE_HUMAN, observation))
    messages.append(Message(ROLE_HUMAN, f"Memory view:\n{view}\n\n{actions}\n{QA_TAIL}"))
    return messages


@dataclass(frozen=True)
class QaAction:
    type: str  # "expand" | "search" | "answer"
    argument: str


_QA_ACTION = re.compile(
    r"Action:\s*(expand|search|answer)\s*\((.*)\)\s*$", re.IGNORECASE | re.DOTALL
)


def parse_qa_action(text: str) -> QaAction:
    matches = list(_QA_ACTION.finditer(text.strip()))
    if not matches:
        raise ParseFailure("no action in QA response")
    match = matches[-1]
    kind = match.group(1).lower()
    argument = match.group(2).strip().strip("'\"")
    return QaAction(kind, argument)


# --- dialog routing ---------------------------------------------------------------

ROUTING_SYSTEM = (
    "You are the dialog manager of a household robot, shown an interactive "
    "Python console. Handle the newest user utterance by writing exactly one "
    "call: answer_question_about_my_past('<question>') for questions about the "
    "robot's experiences, handle_forgetting_feedback('<feedback>') when the "
    "user tells the robot what it should have remembered or gives feedback "
    "about forgotten details, or reply('<text>') for anything else. Rewrite "
    "contextual utterances (e.g. 'why not?') into self-contained arguments "
    "using the previous turns."
)


def render_routing_prompt(utterance: str, context: list[tuple[str, str]]) -> list[Message]:
    if not utterance.strip():
        raise MissingBinding("routing prompt needs an utterance")
    lines = []
    for speaker, text in context:
        label = "# User:" if speaker == "user" else "# LLM:"
        lines.append(label)
        lines.append(f"'{text}'" if speaker == "user" else text)
    lines.extend(["# User:", f"'{utterance}'", "# LLM:"])
    return [
        Message(ROLE_SYSTEM, ROUTING_SYSTEM),
        Message(ROLE_HUMAN, "\n".join(lines)),
    ]


_ROUTE_CALL = re.compile(
    r"(answer_question_about_my_past|handle_forgetting_feedback|reply)\s*\(\s*(['\"])(.*?)\2\s*\)",
    re.DOTALL,
)


def parse_routing_response(text: str) -> tuple[str, str]:
    """Return (function name, argument) of the first routed call."""
    match = _ROUTE_CALL.search(text)
    if not match:
        raise ParseFailure("no routing call in response")
    return match.group(1), match.group(3)


# --- answer judging ---------------------------------------------------------------

JUDGE_SYSTEM = (
    "You grade a robot's answer about its past against the known correct "
    "answer. Classify the model answer into exactly one category: correct "
    "(semantically matches), partially-correct (right direction, detail "
    "slightly off such as a close time or partial list), wrong (contradicts or "
    "misses the answer), no-answer (gives up without referring to forgetting), "
    "or forgotten-indicated (states the information is forgotten or not "
    "recorded)."
)

JUDGE_FEWSHOT: list[tuple[str, str]] = [
    (
        "Question: Where did you put the mug?\nCorrect answer: On the counter\n"
        "Model answer: I placed the mug on the counter.",
        "Category: correct",
    ),
    (
        "Question: When did you see the keys?\nCorrect answer: At 21:38\n"
        "Model answer: Around 21:30 in the evening.",
        "Category: partially-correct",
    ),
    (
        "Question: What did you slice?\nCorrect answer: A potato\n"
        "Model answer: There is no record of me slicing anything in my available history.",
        "Category: forgotten-indicated",
    ),
]

JUDGE_TAIL = (
    "Answer like this:\nCategory: "
    "<correct|partially-correct|wrong|no-answer|forgotten-indicated>"
)

JUDGE_CATEGORIES = ("correct", "partially-correct", "wrong", "no-answer", "forgotten-indicated")


def render_judge_prompt(question: str, gt_answer: str, hypothesis: str) -> list[Message]:
    messages = [Message(ROLE_SYSTEM, JUDGE_SYSTEM)]
    for human, ai in JUDGE_FEWSHOT:
        messages.append(Message(ROLE_HUMAN, human))
        messages.append(Message(ROLE_AI, ai))
    messages.append(
        Message(
            ROLE_HUMAN,
            f"Question: {question}\nCorrect answer: {gt_answer}\nModel answer: {hypothesis}",
        )
    )
    messages.append(Message(ROLE_HUMAN, JUDGE_TAIL))
    return messages


def parse_judge_response(text: str) -> str:
    lowered = text.lower()
    marker = lowered.rfind("category:")
    candidate = lowered[marker + len("category:") :].strip() if marker >= 0 else lowered.strip()
    for category in JUDGE_CATEGORIES:
        if candidate.startswith(category):
            return category
    for category in JUDGE_CATEGORIES:
        if category in candidate:
            return category
    raise ParseFailure(f"no judge category in {text!r}")


# --- prompt introspection (used by the scripted backend) ---------------------------


def prompt_text(messages: list[Message]) -> str:
    return "\n\n".join(m.text for m in messages)


_ITEM_LINE = re.compile(r"^- (\d+): (.*)$")
_GROUP_HEADER = re.compile(r"^# \((\d+)\s*-\s*(\d+)\) (.*)$")


def extract_current_items(messages: list[Message]) -> list[tuple[int, str]]:
    """Pull (index, first line) pairs out of the "Current:" block."""
    items: list[tuple[int, str]] = []
    for message in messages:
        if not message.text.startswith("Current:"):
            continue
        for line in message.text.splitlines()[1:]:
            match = _ITEM_LINE.match(line.strip()) or _ITEM_LINE.match(line)
            if match:
                items.append((int(match.group(1)), match.group(2)))
    return items


def extract_group_headers(messages: list[Message]) -> list[tuple[int, int, str]]:
    headers: list[tuple[int, int, str]] = []
    for message in messages:
        if not message.text.startswith("Previous actions:"):
            continue
        for line in message.text.splitlines()[1:]:
            match = _GROUP_HEADER.match(line)
            if match:
                headers.append((int(match.group(1)), int(match.group(2)), match.group(3)))
    return headers


def extract_learned_rules(messages: list[Message]) -> list[str]:
    """Numbered rules from a relevance or learning prompt, minus the meta rule."""
    rules: list[str] = []
    for message in messages:
        if RULES_BLOCK_HEADER in message.text or message.text.startswith(EXISTING_RULES_HEADER):
            for line in message.text.splitlines():
                match = _NUMBERED_LINE.match(line)
                if match and match.group(1) != META_RULE:
                    rules.append(match.group(1))
    return rules


def extract_relevance_item(messages: list[Message]) -> str:
    for message in messages:
        if message.text.startswith("Item for which the relevance needs to be estimated:"):
            lines = message.text.splitlines()
            body = []
            for line in lines[1:]:
                if line.startswith("Additional Context:"):
                    break
                body.append(line)
            return "\n".join(body)
    return ""


def extract_feedback(messages: list[Message]) -> str:
    for message in messages:
        if message.text.startswith(USER_FEEDBACK_PREFIX):
            raw = message.text[len(USER_FEEDBACK_PREFIX) :].strip()
            return raw.strip('"')
    return ""


def extract_question(messages: list[Message]) -> str:
    for message in messages:
        if message.text.startswith("Question: "):
            return message.text[len("Question: ") :].splitlines()[0]
    return ""


_VIEW_NODE = re.compile(r"^(\s*)\[([^\]]+)\] (.*?)(?: \(contains (\d+)\))?$")
_VIEW_FORGOTTEN = re.compile(r"^(\s*)forgotten: (.*)$")


@dataclass(frozen=True)
class ViewEntry:
    node_id: str | None
    text: str
    child_count: int
    indent: int
    placeholder: bool


def extract_view_entries(messages: list[Message]) -> list[ViewEntry]:
    view = ""
    for message in messages:
        if message.text.startswith("Memory view:"):
            view = message.text
    entries: list[ViewEntry] = []
    for line in view.splitlines():
        node = _VIEW_NODE.match(line)
        if node:
            entries.append(
                ViewEntry(
                    node_id=node.group(2),
                    text=node.group(3),
                    child_count=int(node.group(4)) if node.group(4) else 0,
                    indent=len(node.group(1)) // 2,
                    placeholder=False,
                )
            )
            continue
        forgotten = _VIEW_FORGOTTEN.match(line)
        if forgotten:
            entries.append(
                ViewEntry(
                    node_id=None,
                    text=forgotten.group(2),
                    child_count=0,
                    indent=len(forgotten.group(1)) // 2,
                    placeholder=True,
                )
            )
    return entries


def extract_judge_fields(messages: list[Message]) -> tuple[str, str, str]:
    question = gt = hypothesis = ""
    for message in messages[::-1]:
        if message.text.startswith("Question: ") and "Correct answer:" in message.text:
            for line in message.text.splitlines():
                if line.startswith("Question: "):
                    question = line[len("Question: ") :]
                elif line.startswith("Correct answer: "):
                    gt = line[len("Correct answer: ") :]
                elif line.startswith("Model answer: "):
                    hypothesis = line[len("Model answer: ") :]
            break
    return question, gt, hypothesis


def extract_routed_utterance(messages: list[Message]) -> tuple[str, list[tuple[str, str]]]:
    """Return (newest user utterance, prior (speaker, text) turns)."""
    for message in messages:
        if message.role != ROLE_HUMAN or "# User:" not in message.text:
            continue
        turns: list[tuple[str, str]] = []
        lines = message.text.splitlines()
        i = 0
        while i < len(lines):
            if lines[i] == "# User:" and i + 1 < len(lines):
                turns.append(("user", lines[i + 1].strip().strip("'")))
                i += 2
            elif lines[i] == "# LLM:" and i + 1 < len(lines):
                turns.append(("assistant", lines[i + 1].strip()))
                i += 2
            else:
                i += 1
        if turns and turns[-1][0] == "assistant" and not turns[-1][1]:
            turns.pop()
        if turns:
            utterance = turns[-1][1]
            return utterance, turns[:-1]
    return "", []
