"""Answer judging: LM classification with a deterministic matching fallback."""

from __future__ import annotations

from ..gateway import LmGateway, PromptKind
from ..prompts import ParseFailure, parse_judge_response, render_judge_prompt
from ..scripted import classify_answer

CATEGORY_RANK = {
    "correct": 2,
    "partially-correct": 1,
    "wrong": 0,
    "no-answer": 0,
    "forgotten-indicated": 0,
}


def judge(question: str, gt_answer: str, hypothesis: str, gateway: LmGateway | None = None) -> str:
    """Classify a hypothesis against ground truth into a semantic category."""
    if gateway is None:
        return classify_answer(gt_answer, hypothesis)
    messages = render_judge_prompt(question, gt_answer, hypothesis)
    response, _ = gateway.complete(PromptKind.JUDGE, messages)
    try:
        return parse_judge_response(response)
    except ParseFailure:
        return "wrong"
