"""CoT prompt bundles: required anchors, validation, simple baselines, Agent 1 briefs."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from ..errors import ValidationFailed
from ..frames import FrameSequence
from ..gateway import BackendConfig, ModelRequest, ModelResponse, TextPart, build_request, encode_frames
from ..sensors import SensorContext, render_context
from ..taxonomy import CueCard, Task, TaskKind, cue_cards_for, labels_for

if TYPE_CHECKING:
    from .store import PromptStore

FINAL_DIRECTIVE = "FINAL:"
FULLY_WET_THRESHOLD = "over 80% of vehicles per frame"
FLOOD_DIRECTIVE = "always choose flooded"
SENSOR_INSTRUCTION = "use the road weather sensor data"
VISUAL_PRESSURE = "visual_pressure"
FLOW_SLOW = "flow_slow"
PRESSURE_LEVELS = ("strong", "moderate", "weak")
IMPRESSION_STEP = "initial impression"

# Version of the generated simple prompts; bump when their wording changes.
SIMPLE_PROMPT_VERSION = "1.0.0"

_SEMVER = re.compile(r"^\d+\.\d+\.\d+$")


def rule_anchors(task: Task | TaskKind) -> list[str]:
    """Decision-rule phrases a CoT prompt for this task must carry (labels excluded)."""
    kind = task.kind if isinstance(task, Task) else task
    if kind is TaskKind.WETNESS_RAIN:
        return [FULLY_WET_THRESHOLD, FLOOD_DIRECTIVE]
    if kind is TaskKind.WETNESS_SNOW:
        return [SENSOR_INSTRUCTION]
    if kind is TaskKind.CONGESTION:
        return [VISUAL_PRESSURE, FLOW_SLOW, *PRESSURE_LEVELS, IMPRESSION_STEP]
    return []


def required_anchors(task: Task | TaskKind) -> list[str]:
    return [label.value for label in labels_for(task)] + [FINAL_DIRECTIVE] + rule_anchors(task)


def _norm(text: str) -> str:
    return " ".join(text.casefold().split())


@dataclass(frozen=True)
class ValidationResult:
    missing: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.missing

    def __bool__(self) -> bool:
        return self.ok


def validate_cot(task: Task | TaskKind, text: str) -> ValidationResult:
    """Pass iff every required anchor occurs (case- and whitespace-insensitive)."""
    haystack = _norm(text)
    return ValidationResult(tuple(a for a in required_anchors(task) if _norm(a) not in haystack))


class Origin(str, enum.Enum):
    AGENT1_GENERATED = "agent1"
    CURATED_TEMPLATE = "curated"


_SUBJECT = {
    TaskKind.WEATHER: "the weather",
    TaskKind.WETNESS_RAIN: "the pavement surface condition",
    TaskKind.WETNESS_SNOW: "the pavement surface condition",
    TaskKind.CONGESTION: "the traffic flow",
}


def simple_prompt(task: Task | TaskKind) -> str:
    """One-shot label request used as the ablation baseline: labels only, no cues or steps."""
    kind = task.kind if isinstance(task, Task) else task
    names = ", ".join(label.value for label in labels_for(kind))
    direction = task.direction if isinstance(task, Task) else None
    subject = _SUBJECT[kind]
    if kind is TaskKind.CONGESTION:
        if direction is not None:
            subject += f" in the {direction.value} direction ({direction.definition})"
        else:
            subject += " in the indicated direction"
    return (
        f"These are sequential frames from a highway traffic camera clip. "
        f"Classify {subject} as one of: {names}. "
        f'Finish with one line of the form "FINAL: <label>" using one of these labels exactly as written.'
    )


def direction_note(task: Task) -> str:
    if task.direction is None:
        return ""
    return f"Direction to assess: {task.direction.value} ({task.direction.definition})."


def reminder_text(task: Task, with_gating: bool) -> str:
    """Formatting reminder appended when a response could not be parsed."""
    text = "Your previous answer could not be parsed. Reply again and follow the output format exactly. "
    if with_gating and task.kind is TaskKind.CONGESTION:
        text += (
            "End with these lines: IMPRESSION: <smooth|disrupted>, PRESSURE: <level>, "
            "FLOW_SLOW: <true|false>, each on its own line, followed by "
        )
        text += 'one line of the form "FINAL: <label>" where <label> is one of: '
        return text + ", ".join(label.value for label in labels_for(task)) + "."
    names = ", ".join(label.value for label in labels_for(task))
    return text + f'End with one line of the form "FINAL: <label>" where <label> is one of: {names}.'


@dataclass(frozen=True)
class PromptBundle:
    task: TaskKind
    version: str
    origin: Origin
    cot_text: str
    simple_text: str
    anchors: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not _SEMVER.match(self.version):
            raise ValueError(f"version {self.version!r} is not MAJOR.MINOR.PATCH")
        if not self.simple_text.strip():
            raise ValueError("simple_text must be non-empty")
        if not self.anchors:
            object.__setattr__(self, "anchors", tuple(required_anchors(self.task)))
        result = validate_cot(self.task, self.cot_text)
        if not result.ok:
            raise ValidationFailed(list(result.missing))

    @property
    def version_key(self) -> tuple[int, int, int]:
        return version_key(self.version)


def version_key(version: str) -> tuple[int, int, int]:
    major, minor, patch = (int(p) for p in version.split("."))
    return major, minor, patch


_FENCED = re.compile(r"^```[\w-]*\n(.*)\n```$", re.S)


def extract_prompt_text(source: ModelResponse | str) -> str:
    text = source.text if isinstance(source, ModelResponse) else source
    text = text.strip()
    match = _FENCED.match(text)
    return match.group(1).strip() if match else text


def compile_cot(
    task: Task | TaskKind,
    source: ModelResponse | str,
    version: str,
    store: PromptStore | None = None,
) -> PromptBundle:
    """Wrap Agent 1 output (or a curated template) into a validated bundle.

    A ``ModelResponse`` source yields an Agent-1 bundle, a plain string a
    curated one. Failing validation raises; nothing is repaired.
    """
    kind = task.kind if isinstance(task, Task) else task
    text = extract_prompt_text(source)
    if not text:
        raise ValueError("prompt source is empty")
    origin = Origin.AGENT1_GENERATED if isinstance(source, ModelResponse) else Origin.CURATED_TEMPLATE
    result = validate_cot(kind, text)
    if not result.ok:
        raise ValidationFailed(list(result.missing))
    bundle = PromptBundle(kind, version, origin, text, simple_prompt(kind))
    if store is not None:
        store.put(bundle)
    return bundle


AGENT1_META_PROMPT = (
    "You are a transportation domain expert designing instructions for a smaller vision-language model. "
    "Study the attached sequential frames from a highway traffic camera, together with the category "
    "definitions below, and write a reusable step-by-step chain-of-thought prompt that guides the smaller "
    "model through the scene, the road surface, the weather, and vehicle and driver behavior before it "
    "decides. The prompt must work for other clips of the same task, not only this one."
)

_TASK_TITLE = {
    TaskKind.WEATHER: "road weather classification",
    TaskKind.WETNESS_RAIN: "pavement wetness level assessment under rainy conditions",
    TaskKind.WETNESS_SNOW: "pavement wetness level assessment under snowy conditions",
    TaskKind.CONGESTION: "traffic congestion analysis for one direction of travel",
}


def _rule_requirements(kind: TaskKind) -> list[str]:
    if kind is TaskKind.WETNESS_RAIN:
        return [
            f'Define fully wet with the threshold "{FULLY_WET_THRESHOLD}": that share of vehicles must show '
            "water spray, mist or strong reflections throughout the clip.",
            f'Tell the model that when it is uncertain between fully wet and flooded it must "{FLOOD_DIRECTIVE}", '
            "since a missed flood is the costlier error.",
        ]
    if kind is TaskKind.WETNESS_SNOW:
        return [
            f'Include a step telling the model to "{SENSOR_INSTRUCTION}" (temperature, humidity, dew point) '
            "when station readings are attached, and to rely on the frames alone otherwise.",
        ]
    if kind is TaskKind.CONGESTION:
        return [
            "Start with a step where the model states its initial impression of the flow (smooth or "
            "disrupted) as a soft flag that must not decide the label.",
            f"Use two-variable gating with {VISUAL_PRESSURE} (strong, moderate, or weak, from the number "
            f"of visual congestion features present) and {FLOW_SLOW} (true or false, from evidence of flow "
            f"disruption). The label is congested if {VISUAL_PRESSURE} is strong, or moderate with "
            f"{FLOW_SLOW} true; otherwise unobstructed.",
        ]
    return []


def _output_requirement(kind: TaskKind) -> str:
    names = ", ".join(label.value for label in labels_for(kind))
    tail = 'finish with the line "FINAL: <label>"'
    if kind is TaskKind.CONGESTION:
        tail = ('finish with the lines "IMPRESSION: <smooth|disrupted>", "PRESSURE: <strong|moderate|weak>", '
                '"FLOW_SLOW: <true|false>" and "FINAL: <label>"')
    return f"The prompt must end by telling the model to {tail}, with <label> one of: {names}."


@dataclass(frozen=True)
class Agent1Brief:
    task: Task
    frames: FrameSequence | None = None
    sensor: SensorContext | None = None
    allow_sensor: bool = False
    instructions: str = AGENT1_META_PROMPT
    definitions: tuple[CueCard, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.sensor is not None and not (self.task.kind is TaskKind.WETNESS_SNOW or self.allow_sensor):
            raise ValueError("sensor context is only attached to snowy wetness briefs unless allow_sensor is set")
        if not self.definitions:
            object.__setattr__(self, "definitions", tuple(cue_cards_for(self.task)))
        covered = {card.label for card in self.definitions}
        if covered != set(labels_for(self.task)):
            raise ValueError("definitions must cover exactly the task's labels")


def agent1_text(brief: Agent1Brief) -> str:
    kind = brief.task.kind
    sections = [
        brief.instructions,
        f"Task: {_TASK_TITLE[kind]}.",
        "Category definitions (label followed by key visual and contextual cues):\n"
        + "\n".join(card.render() for card in brief.definitions),
    ]
    rules = _rule_requirements(kind)
    rules.append(_output_requirement(kind))
    sections.append("Requirements for the prompt you write:\n" + "\n".join(f"- {r}" for r in rules))
    if brief.sensor is not None:
        sections.append(render_context(brief.sensor))
    if brief.frames is not None:
        stamps = ", ".join(f"{t:.2f}s" for t in brief.frames.timestamps)
        sections.append(f"{len(brief.frames)} frames follow in time order (t = {stamps}).")
    sections.append("Return only the prompt text.")
    return "\n\n".join(sections)


def build_agent1_request(brief: Agent1Brief, backend: BackendConfig, scenario: str | None = None) -> ModelRequest:
    parts: list = [TextPart(agent1_text(brief))]
    if brief.frames is not None:
        parts += encode_frames(brief.frames)
    metadata = {"task": brief.task.kind.value, "agent": "agent1"}
    if scenario:
        metadata["scenario"] = scenario
    return build_request(
        "You write chain-of-thought prompts for traffic scene understanding.", parts, backend, metadata
    )

