"""Class labels, tasks, and the visual-cue definitions that seed every prompt.

Canonical label names are lower-case words separated by single spaces and
double as the enum values, so ``WetnessClass("rainy flooded")`` works.
Cue text lives in ``data/cues.jsonl`` so it can be audited without touching
code.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Union

from .errors import UnknownLabel


class WeatherClass(str, enum.Enum):
    CLEAR = "clear"
    RAINY = "rainy"
    SNOWY = "snowy"


class WetnessClass(str, enum.Enum):
    DRY = "dry"
    RAINY_PARTIALLY_WET = "rainy partially wet"
    RAINY_FULLY_WET = "rainy fully wet"
    RAINY_FLOODED = "rainy flooded"
    SNOWY_PARTIALLY_WET = "snowy partially wet"
    SNOWY_FULLY_WET = "snowy fully wet"
    SNOWY_WET_ICY_WARNING = "snowy wet with icy warning"

    @property
    def regime(self) -> WeatherClass:
        if self is WetnessClass.DRY:
            return WeatherClass.CLEAR
        if self.value.startswith("rainy"):
            return WeatherClass.RAINY
        return WeatherClass.SNOWY


class CongestionLabel(str, enum.Enum):
    CONGESTED = "congested"
    UNOBSTRUCTED = "unobstructed"


class Direction(str, enum.Enum):
    INBOUND = "inbound"
    OUTBOUND = "outbound"

    @property
    def definition(self) -> str:
        if self is Direction.INBOUND:
            return "inbound means traffic approaching the camera"
        return "outbound means traffic heading away from the camera"


Label = Union[WeatherClass, WetnessClass, CongestionLabel]


class TaskKind(str, enum.Enum):
    WEATHER = "weather"
    WETNESS_RAIN = "wetness-rain"
    WETNESS_SNOW = "wetness-snow"
    CONGESTION = "congestion"

    @property
    def is_wetness(self) -> bool:
        return self in (TaskKind.WETNESS_RAIN, TaskKind.WETNESS_SNOW)


@dataclass(frozen=True)
class Task:
    """A task kind plus, for congestion only, the traffic direction assessed."""

    kind: TaskKind
    direction: Direction | None = None

    def __post_init__(self) -> None:
        if self.kind is TaskKind.CONGESTION and self.direction is None:
            raise ValueError("congestion task requires a direction")
        if self.kind is not TaskKind.CONGESTION and self.direction is not None:
            raise ValueError(f"{self.kind.value} task takes no direction")

    @property
    def slug(self) -> str:
        if self.direction is None:
            return self.kind.value
        return f"{self.kind.value}:{self.direction.value}"

    def __str__(self) -> str:
        return self.slug

    @classmethod
    def parse(cls, text: str) -> Task:
        """Parse ``weather``, ``wetness-rain``, ``wetness-snow`` or ``congestion:inbound``."""
        kind_text, _, direction_text = text.strip().lower().partition(":")
        try:
            kind = TaskKind(kind_text)
            direction = Direction(direction_text) if direction_text else None
        except ValueError:
            raise ValueError(f"unknown task {text!r}") from None
        return cls(kind, direction)


WEATHER = Task(TaskKind.WEATHER)
WETNESS_RAIN = Task(TaskKind.WETNESS_RAIN)
WETNESS_SNOW = Task(TaskKind.WETNESS_SNOW)
CONGESTION_INBOUND = Task(TaskKind.CONGESTION, Direction.INBOUND)
CONGESTION_OUTBOUND = Task(TaskKind.CONGESTION, Direction.OUTBOUND)


_LABELS: dict[TaskKind, tuple[Label, ...]] = {
    TaskKind.WEATHER: tuple(WeatherClass),
    TaskKind.WETNESS_RAIN: (
        WetnessClass.DRY,
        WetnessClass.RAINY_PARTIALLY_WET,
        WetnessClass.RAINY_FULLY_WET,
        WetnessClass.RAINY_FLOODED,
    ),
    TaskKind.WETNESS_SNOW: (
        WetnessClass.DRY,
        WetnessClass.SNOWY_PARTIALLY_WET,
        WetnessClass.SNOWY_FULLY_WET,
        WetnessClass.SNOWY_WET_ICY_WARNING,
    ),
    TaskKind.CONGESTION: tuple(CongestionLabel),
}


def _kind(task: Task | TaskKind) -> TaskKind:
    return task.kind if isinstance(task, Task) else task


def labels_for(task: Task | TaskKind) -> list[Label]:
    return list(_LABELS[_kind(task)])


def canonical_name(label: Label) -> str:
    return label.value


_DASHES = re.compile(r"[‐-―−_-]+")
_DECORATION = "*`'\".,;:!?()[]<> \t"


def normalize_label_text(text: str) -> str:
    """Case-fold, map hyphens/dashes to spaces, collapse whitespace, strip markup."""
    folded = _DASHES.sub(" ", text.casefold())
    return " ".join(folded.split()).strip(_DECORATION)


def parse_label(text: str, task: Task | TaskKind) -> Label:
    """Map free text to the task's label with that exact canonical name.

    Only cosmetic differences are forgiven (case, dashes, whitespace, quotes,
    markdown emphasis, trailing punctuation); there is no fuzzy matching.
    """
    if not text or not text.strip():
        raise ValueError("label text must be non-empty")
    key = normalize_label_text(text)
    for label in _LABELS[_kind(task)]:
        if label.value == key:
            return label
    raise UnknownLabel(text, task)


@dataclass(frozen=True)
class CueCard:
    label: Label
    cues: tuple[str, ...]
    source: str

    def render(self) -> str:
        lines = [f"- {self.label.value}:"]
        lines += [f"    * {cue}" for cue in self.cues]
        return "\n".join(lines)


_LABEL_BY_NAME: dict[str, Label] = {
    label.value: label for labels in _LABELS.values() for label in labels
}


@lru_cache(maxsize=1)
def _cue_cards() -> dict[Label, CueCard]:
    text = resources.files("roadscene.data").joinpath("cues.jsonl").read_text("utf-8")
    cards: dict[Label, CueCard] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        label = _LABEL_BY_NAME[record["label"]]
        cues = tuple(record["cues"])
        if not cues or not all(c.strip() for c in cues):
            raise ValueError(f"empty cue list for {label.value!r}")
        cards[label] = CueCard(label, cues, record["source"])
    missing = set(_LABEL_BY_NAME.values()) - set(cards)
    if missing:
        raise ValueError(f"cue data lacks labels: {sorted(m.value for m in missing)}")
    return cards


def cue_card(label: Label) -> CueCard:
    return _cue_cards()[label]


def cue_cards_for(task: Task | TaskKind) -> list[CueCard]:
    return [cue_card(label) for label in labels_for(task)]


# The congested cues double as the feature list counted for visual pressure.
def congestion_features() -> tuple[str, ...]:
    return cue_card(CongestionLabel.CONGESTED).cues


def label_from_value(value: str) -> Label:
    """Inverse of ``label.value`` across all label enums."""
    return _LABEL_BY_NAME[value]
