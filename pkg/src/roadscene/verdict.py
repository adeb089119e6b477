"""Turn Agent 2 responses into verdicts and apply the deterministic decision rules.

Congestion labels come from a two-variable gate over visual pressure and the
flow_slow flag; the model's own FINAL line is overridden when it disagrees.
Rain-regime wetness ties resolve toward the more hazardous label, with
flooding absorbing every tie it takes part in.
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, field
from typing import Any, Iterable

from .errors import MalformedResponse, MissingGatingFields, UnknownLabel, UnknownVerdictLabel
from .gateway import ModelResponse
from .taxonomy import CongestionLabel, Label, Task, TaskKind, WetnessClass, labels_for, parse_label


class VisualPressure(str, enum.Enum):
    STRONG = "strong"
    MODERATE = "moderate"
    WEAK = "weak"


class Impression(str, enum.Enum):
    SMOOTH = "smooth"
    DISRUPTED = "disrupted"


@dataclass(frozen=True)
class Gating:
    pressure: VisualPressure
    flow_slow: bool
    impression: Impression | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "pressure": self.pressure.value,
            "flow_slow": self.flow_slow,
            "impression": self.impression.value if self.impression else None,
        }


def gate_congestion(pressure: VisualPressure, flow_slow: bool) -> CongestionLabel:
    if pressure is VisualPressure.STRONG or (pressure is VisualPressure.MODERATE and flow_slow):
        return CongestionLabel.CONGESTED
    return CongestionLabel.UNOBSTRUCTED


def classify_pressure(feature_count: int) -> VisualPressure:
    """Pressure level from how many of the congested-cue features were seen."""
    if feature_count < 0:
        raise ValueError("feature_count must be non-negative")
    if feature_count >= 3:
        return VisualPressure.STRONG
    if feature_count >= 1:
        return VisualPressure.MODERATE
    return VisualPressure.WEAK


_WETNESS_ORDER = {
    WetnessClass.DRY: 0,
    WetnessClass.RAINY_PARTIALLY_WET: 1,
    WetnessClass.RAINY_FULLY_WET: 2,
    WetnessClass.RAINY_FLOODED: 3,
}


def apply_flood_priority(candidates: Iterable[WetnessClass]) -> WetnessClass:
    pool = set(candidates)
    if not pool:
        raise ValueError("candidates must be non-empty")
    if not pool <= _WETNESS_ORDER.keys():
        raise ValueError("flood priority applies to rain-regime labels only")
    if WetnessClass.RAINY_FLOODED in pool:
        return WetnessClass.RAINY_FLOODED
    return max(pool, key=_WETNESS_ORDER.__getitem__)


@dataclass(frozen=True)
class Verdict:
    task: Task
    label: Label
    raw: str
    rationale: str = ""
    gating: Gating | None = None
    candidates: frozenset[Label] = field(default_factory=frozenset)
    model_label: Label | None = None
    prompt_version: str = ""

    @property
    def overridden(self) -> bool:
        return self.model_label is not None and self.model_label != self.label

    @property
    def raw_sha256(self) -> str:
        return hashlib.sha256(self.raw.encode("utf-8")).hexdigest()

    def to_record(self, clip_id: str, model_id: str, latency_ms: float | None) -> dict[str, Any]:
        """Line-delimited results format."""
        return {
            "clip_id": clip_id,
            "task": self.task.slug,
            "label": self.label.value,
            "gating": self.gating.to_dict() if self.gating else None,
            "prompt_version": self.prompt_version,
            "model_id": model_id,
            "latency_ms": None if latency_ms is None else round(latency_ms, 3),
            "raw_sha256": self.raw_sha256,
        }


_FIELD_LINE = re.compile(r"^\s*(?:[-*>#]+\s*)?(FINAL|PRESSURE|FLOW_SLOW|IMPRESSION)\s*:\s*(.*?)\s*$", re.I)
_UNCERTAIN = re.compile(r"uncertain between\s+(?:the\s+)?(.+?)\s+and\s+(?:the\s+)?(.+?)(?=[.,;:!?)\n]|$)", re.I)
_TRUE = {"true", "yes", "1"}
_FALSE = {"false", "no", "0"}


def _clean_line(line: str) -> str:
    return line.replace("**", "").replace("__", "").replace("`", "")


def _fields(text: str) -> tuple[dict[str, tuple[int, str]], list[str]]:
    """Last occurrence of each structured field as (line index, value)."""
    lines = text.splitlines()
    found: dict[str, tuple[int, str]] = {}
    for i, line in enumerate(lines):
        m = _FIELD_LINE.match(_clean_line(line))
        if m:
            found[m.group(1).upper()] = (i, m.group(2))
    return found, lines


def _wetness_candidate(text: str, task: Task) -> Label | None:
    options = [text]
    if task.kind is TaskKind.WETNESS_RAIN:
        options.append("rainy " + text)
    elif task.kind is TaskKind.WETNESS_SNOW:
        options.append("snowy " + text)
    for option in options:
        try:
            return parse_label(option, task)
        except (UnknownLabel, ValueError):
            continue
    return None


def find_candidates(rationale: str, task: Task) -> frozenset[Label]:
    found: set[Label] = set()
    for m in _UNCERTAIN.finditer(rationale):
        pair = [_wetness_candidate(m.group(1), task), _wetness_candidate(m.group(2), task)]
        if all(p is not None for p in pair):
            found.update(pair)  # type: ignore[arg-type]
    return frozenset(found)


def _parse_gating(found: dict[str, tuple[int, str]]) -> Gating:
    missing = [name for name in ("PRESSURE", "FLOW_SLOW") if name not in found]
    if missing:
        raise MissingGatingFields(missing)
    pressure_raw = found["PRESSURE"][1].strip(" .*`'\"").lower()
    try:
        pressure = VisualPressure(pressure_raw)
    except ValueError:
        raise MalformedResponse(f"invalid PRESSURE value {found['PRESSURE'][1]!r}") from None
    slow_raw = found["FLOW_SLOW"][1].strip(" .*`'\"").lower()
    if slow_raw in _TRUE:
        slow = True
    elif slow_raw in _FALSE:
        slow = False
    else:
        raise MalformedResponse(f"invalid FLOW_SLOW value {found['FLOW_SLOW'][1]!r}")
    impression = None
    if "IMPRESSION" in found:
        try:
            impression = Impression(found["IMPRESSION"][1].strip(" .*`'\"").lower())
        except ValueError:
            raise MalformedResponse(f"invalid IMPRESSION value {found['IMPRESSION'][1]!r}") from None
    return Gating(pressure, slow, impression)


def parse_verdict(
    task: Task,
    response: ModelResponse | str,
    *,
    require_gating: bool = True,
    prompt_version: str = "",
) -> Verdict:
    """Parse the structured tail of a response and apply the decision rules.

    With ``require_gating`` off (simple-prompt mode) congestion gating fields
    are optional; when both are present the gate still decides the label.
    """
    text = response.text if isinstance(response, ModelResponse) else response
    if not text or not text.strip():
        raise MalformedResponse("empty response")
    found, lines = _fields(text)
    if "FINAL" not in found:
        raise MalformedResponse("no FINAL line in response")
    final_raw = found["FINAL"][1]
    if not final_raw.strip():
        raise MalformedResponse("FINAL line carries no label")
    try:
        model_label = parse_label(final_raw, task)
    except UnknownLabel:
        raise UnknownVerdictLabel(final_raw, task) from None

    gating = None
    if task.kind is TaskKind.CONGESTION:
        if require_gating or ("PRESSURE" in found and "FLOW_SLOW" in found):
            gating = _parse_gating(found)

    tail_start = min(idx for idx, _ in found.values())
    rationale = "\n".join(lines[:tail_start]).strip()
    candidates = find_candidates(rationale, task) if task.kind.is_wetness else frozenset()

    label: Label = model_label
    if gating is not None:
        label = gate_congestion(gating.pressure, gating.flow_slow)
    elif task.kind is TaskKind.WETNESS_RAIN and candidates:
        label = apply_flood_priority({*candidates, model_label})  # type: ignore[arg-type]
    assert label in labels_for(task)
    return Verdict(
        task=task,
        label=label,
        raw=text,
        rationale=rationale,
        gating=gating,
        candidates=candidates,
        model_label=model_label,
        prompt_version=prompt_version,
    )
