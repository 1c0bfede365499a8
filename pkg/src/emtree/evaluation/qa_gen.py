"""Two-round QA pair generation over synthesized histories."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass

from ..clock import HOUR, Timestamp, fmt_ts
from ..config import BuilderConfig
from ..tree import TimeSpan
from .episodes import Occurrence, SynthesizedHistory

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QaPair:
    pair_id: str
    question_1: str
    ask_1: Timestamp
    gt_1: str
    question_2: str
    ask_2: Timestamp
    gt_2: str
    feedback: str
    target_span_1: TimeSpan
    target_span_2: TimeSpan

    def __post_init__(self):
        if self.ask_1 >= self.ask_2:
            raise ValueError("round-1 ask time must precede round 2")


def _verb(action: str) -> str:
    return action.lower()


def _where_pair(action: str, obj: str, first: Occurrence, last: Occurrence) -> tuple[str, str, str, str, str]:
    q1 = f"Where did you first {_verb(action)} the {obj}?"
    q2 = f"Where did you last {_verb(action)} the {obj}?"
    feedback = f"You should always remember where you {_verb(action)} the {obj}"
    return q1, first.location, q2, last.location, feedback

def _when_pair(action: str, obj: str, first: Occurrence, last: Occurrence) -> tuple[str, str, str, str, str]:
    q1 = f"When did you first {_verb(action)} the {obj}?"
    q2 = f"When did you last {_verb(action)} the {obj}?"
    feedback = f"You should always remember the exact time when you {_verb(action)} the {obj}"
    return q1, f"At {fmt_ts(first.start)}", q2, f"At {fmt_ts(last.start)}", feedback


def default_ask_offset(config: BuilderConfig) -> int:
    """Fixed offset past the default leaf lifespan, so round-1 details expire."""
    return config.lifetime(0) + HOUR


def generate_two_round_qa(
    history: SynthesizedHistory,
    seed: int,
    config: BuilderConfig,
    offset: int | None = None,
) -> list[QaPair]:
    """One question pair per repeated target: ask after first/last occurrence.

    Ask times sit `offset` past each occurrence (offset > leaf lifetime), so
    under pure decay the round-1 details are already forgotten by construction.
    """
    rng = random.Random(seed * 7919 + 13)
    offset = offset if offset is not None else default_ask_offset(config)
    pairs: list[QaPair] = []
    for index, (action, obj) in enumerate(history.targets):
        occurrences = history.occurrences_of(action, obj)
        if len(occurrences) < 2:
            logger.warning("target %s(%s) lacks repeated occurrences; skipping", action, obj)
            continue
        first, last = occurrences[0], occurrences[-1]
        if first.end + offset >= last.end:
            logger.warning("target %s(%s) occurrences too close for two rounds", action, obj)
            continue
        template = _where_pair if rng.random() < 0.5 else _when_pair
        q1, gt1, q2, gt2, feedback = template(action, obj, first, last)
        pairs.append(
            QaPair(
                pair_id=f"pair-{index}",
                question_1=q1,
                ask_1=first.end + offset,
                gt_1=gt1,
                question_2=q2,
                ask_2=last.end + offset,
                gt_2=gt2,
                feedback=feedback,
                target_span_1=first.span,
                target_span_2=last.span,
            )
        )
    if not pairs:
        logger.warning("no valid QA targets in history")
    return pairs
