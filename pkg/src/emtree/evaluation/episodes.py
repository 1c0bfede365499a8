"""Synthetic household episode generator and history synthesis.

Stands in for recorded robot corpora: episodes follow a small action/object
grammar, histories concatenate episodes at randomized plausible dates, and a
chosen action/object pair is guaranteed to occur in both the first and the
last episode so two-round QA has a target with a large temporal gap.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..clock import DAY, HOUR, Timestamp, ts
from ..service import EventRecord
from ..tree import TimeSpan

ROOMS = ("kitchen", "living room", "pantry", "laundry area", "hallway")

SURFACES = ("counter", "table", "shelf", "sink", "sideboard")

FOODS = ("Potato", "Lettuce", "Apple", "Bread", "Tomato", "Mug")

# distinctive single-token objects used as QA targets
TARGET_OBJECTS = ("Knife", "Wallet", "Keys", "Medicine", "Umbrella", "Laptop", "Passport")

TASK_TEMPLATES = (
    (
        "prepare a snack",
        (
            ("Navigate", "{room}"),
            ("Open", "Fridge"),
            ("Pickup", "{food}"),
            ("Close", "Fridge"),
            ("Slice", "{food}"),
            ("Place", "{surface}"),
        ),
    ),
    (
        "clean the dishes",
        (
            ("Navigate", "kitchen"),
            ("Pickup", "Plate"),
            ("Wash", "Plate"),
            ("Load", "Dishwasher"),
            ("ToggleOn", "Dishwasher"),
        ),
    ),
    (
        "tidy up",
        (
            ("Navigate", "{room}"),
            ("Pickup", "{food}"),
            ("Navigate", "pantry"),
            ("Place", "shelf"),
        ),
    ),
    (
        "serve a drink",
        (
            ("Navigate", "kitchen"),
            ("Open", "Fridge"),
            ("Pickup", "Mug"),
            ("Pour", "Mug"),
            ("Close", "Fridge"),
            ("Handover", "Mug"),
        ),
    ),
)


@dataclass(frozen=True)
class Occurrence:
    action: str
    obj: str
    location: str
    start: Timestamp
    end: Timestamp

    @property
    def span(self) -> TimeSpan:
        return TimeSpan(self.start, self.end)


@dataclass
class Episode:
    task: str
    records: list[EventRecord]
    occurrences: list[Occurrence]

    def shifted(self, offset: Timestamp) -> "Episode":
        return Episode(
            task=self.task,
            records=[
                EventRecord(at=r.at + offset, kind=r.kind, attributes=dict(r.attributes))
                for r in self.records
            ],
            occurrences=[
                Occurrence(o.action, o.obj, o.location, o.start + offset, o.end + offset)
                for o in self.occurrences
            ],
        )


@dataclass
class SynthesizedHistory:
    records: list[EventRecord]
    episode_spans: list[TimeSpan]
    occurrences: list[Occurrence]
    targets: list[tuple[str, str]] = field(default_factory=list)  # (action, object)

    def occurrences_of(self, action: str, obj: str) -> list[Occurrence]:
        return [o for o in self.occurrences if o.action == action and o.obj == obj]


def _objects_nearby(rng: random.Random) -> str:
    return ", ".join(sorted(rng.sample(FOODS, 3)))


def generate_episode(rng: random.Random, inject: tuple[str, str] | None = None) -> Episode:
    """One task episode with relative timestamps starting at zero.

    `inject` forces an (action, object) step into the episode so histories can
    guarantee repeated targets.
    """
    task, steps = TASK_TEMPLATES[rng.randrange(len(TASK_TEMPLATES))]
    room = rng.choice(ROOMS)
    food = f"{rng.choice(FOODS)}_{rng.randrange(10)}"
    surface = rng.choice(SURFACES)
    records: list[EventRecord] = []
    occurrences: list[Occurrence] = []
    t = 0
    records.append(
        EventRecord(at=t, kind="speech", attributes={"text": f"please {task}"})
    )
    t += rng.randrange(20, 60)

    concrete: list[tuple[str, str]] = []
    for action, target in steps:
        target = target.format(room=room, food=food, surface=surface)
        concrete.append((action, target))
    if inject is not None:
        position = rng.randrange(1, len(concrete) + 1)
        concrete.insert(position, inject)

    location = room
    for action, target in concrete:
        if action == "Navigate":
            location = target
        objects = _objects_nearby(rng)
        start = t
        repeats = rng.randrange(1, 3)
        for _ in range(repeats):
            records.append(
                EventRecord(
                    at=t,
                    kind="scene",
                    attributes={
                        "action": f"{action}({target})",
                        "location": location,
                        "objects": objects,
                    },
                )
            )
            t += rng.randrange(15, 45)
        if action != "Navigate":
            occurrences.append(
                Occurrence(action=action, obj=target.split("_")[0], location=location,
                           start=start, end=records[-1].at)
            )
        t += rng.randrange(10, 40)
    return Episode(task=task, records=records, occurrences=occurrences)


def synthesize_history(
    count: int,
    seed: int,
    episodes: list[Episode] | None = None,
    min_gap: int = 4 * HOUR,
    max_gap: int = 36 * HOUR,
    targets: int = 1,
) -> SynthesizedHistory:
    """Concatenate episodes at randomized dates with a guaranteed repeated target.

    Deterministic under the seed. The chosen target action/object pair occurs
    in both the first and the last episode, separated by the inter-episode
    gaps ("must appear at least twice with a large temporal gap").
    """
    if count < 2:
        raise ValueError("a history needs at least two episodes for the repetition constraint")
    rng = random.Random(seed)
    chosen: list[tuple[str, str]] = []
    pool = list(TARGET_OBJECTS)
    for _ in range(max(targets, 1)):
        obj = pool.pop(rng.randrange(len(pool)))
        action = rng.choice(("Place", "Pickup"))
        chosen.append((action, f"{obj}_{rng.randrange(10)}"))

    if episodes is None:
        episodes = []
        for index in range(count):
            inject = None
            if index == 0 or index == count - 1:
                inject = rng.choice(chosen)
                inject = (inject[0], inject[1])
            episodes.append(generate_episode(rng, inject=inject))
        # make sure every target occurs in both boundary episodes
        for action, obj in chosen:
            for boundary in (0, count - 1):
                if not any(
                    o.action == action and o.obj == obj.split("_")[0]
                    for o in episodes[boundary].occurrences
                ):
                    extra = generate_episode(rng, inject=(action, obj))
                    episodes[boundary] = extra
    if len(episodes) < count:
        raise ValueError("not enough episodes to satisfy the repetition constraint")

    base = ts(2024, 1, 1) + rng.randrange(0, 500) * DAY + rng.randrange(8, 11) * HOUR
    records: list[EventRecord] = []
    episode_spans: list[TimeSpan] = []
    occurrences: list[Occurrence] = []
    offset = base
    for episode in episodes[:count]:
        placed = episode.shifted(offset)
        records.extend(placed.records)
        episode_spans.append(TimeSpan(placed.records[0].at, placed.records[-1].at))
        occurrences.extend(placed.occurrences)
        duration = placed.records[-1].at - placed.records[0].at
        offset = placed.records[0].at + duration + rng.randrange(min_gap, max_gap)
    return SynthesizedHistory(
        records=records,
        episode_spans=episode_spans,
        occurrences=occurrences,
        targets=[(a, o.split("_")[0]) for a, o in chosen],
    )
