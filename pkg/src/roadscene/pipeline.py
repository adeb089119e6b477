"""Single-clip orchestration: sample -> compose -> complete -> parse/gate."""

from __future__ import annotations

import contextlib
import enum
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

from .errors import RoadsceneError, UnknownLabel, VerdictError
from .frames import Decoder, FrameSequence, SamplerConfig, sample_frames
from .gateway import BackendConfig, Gateway, Message, ModelRequest, TextPart, build_request, encode_frames
from .prompts import LATEST, SIMPLE_PROMPT_VERSION, PromptStore, direction_note, reminder_text, simple_prompt
from .sensors import SensorContext, render_context
from .taxonomy import (
    CONGESTION_INBOUND,
    CONGESTION_OUTBOUND,
    WEATHER,
    WETNESS_RAIN,
    WETNESS_SNOW,
    Direction,
    Task,
    WeatherClass,
)
from .verdict import Verdict, parse_verdict

log = logging.getLogger(__name__)

SYSTEM_PROMPT = "You are a careful traffic scene analyst. Base every judgment on the evidence in the frames provided."


class Mode(str, enum.Enum):
    SIMPLE = "simple"
    COT = "cot"


@dataclass(frozen=True)
class AnalysisJob:
    task: Task
    clip: str | Path | None = None
    mode: Mode = Mode.COT
    sensor: SensorContext | None = None
    prompt_version: str = LATEST
    backend: BackendConfig = field(default_factory=BackendConfig)
    clip_id: str | None = None
    scenario: str | None = None
    frames: FrameSequence | None = None
    redact_surface_condition: bool = False

    def __post_init__(self) -> None:
        if self.sensor is not None and not self.task.kind.is_wetness:
            raise ValueError(f"sensor context is not allowed for task {self.task.slug}")
        if self.clip is None and self.frames is None:
            raise ValueError("a job needs a clip or pre-sampled frames")

    @property
    def resolved_clip_id(self) -> str:
        if self.clip_id:
            return self.clip_id
        if self.frames is not None:
            return self.frames.source_id
        return Path(str(self.clip)).stem


@dataclass
class AnalysisResult:
    clip_id: str
    task: Task
    mode: Mode
    verdict: Verdict
    frames_used: int
    sensor_used: bool
    prompt_version: str
    model_id: str
    reasked: bool = False
    latency_ms: float = 0.0
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def label(self):
        return self.verdict.label

    def to_dict(self, include_timings: bool = True) -> dict[str, Any]:
        v = self.verdict
        out: dict[str, Any] = {
            "clip_id": self.clip_id,
            "task": self.task.slug,
            "mode": self.mode.value,
            "label": v.label.value,
            "model_label": v.model_label.value if v.model_label else None,
            "overridden": v.overridden,
            "gating": v.gating.to_dict() if v.gating else None,
            "candidates": sorted(c.value for c in v.candidates),
            "rationale": v.rationale,
            "frames_used": self.frames_used,
            "sensor_used": self.sensor_used,
            "prompt_version": self.prompt_version,
            "model_id": self.model_id,
            "reasked": self.reasked,
            "raw_sha256": v.raw_sha256,
        }
        if include_timings:
            out["latency_ms"] = round(self.latency_ms, 3)
            out["timings_ms"] = {k: round(t, 3) for k, t in self.timings.items()}
        return out


@contextlib.contextmanager
def _stage(name: str, timings: dict[str, float]) -> Iterator[None]:
    start = time.perf_counter()
    try:
        yield
    except RoadsceneError as exc:
        if exc.stage is None:
            exc.stage = name
        raise
    finally:
        timings[name] = timings.get(name, 0.0) + (time.perf_counter() - start) * 1000


class Analyzer:
    """Runs analysis jobs against a gateway; shareable across worker threads."""

    def __init__(
        self,
        gateway: Gateway,
        store: PromptStore | None = None,
        sampler: SamplerConfig | None = None,
        decoder: Decoder | None = None,
        results_path: str | Path | None = None,
    ):
        self.gateway = gateway
        self.store = store or PromptStore()
        self.sampler = sampler or SamplerConfig()
        self.decoder = decoder
        self.results_path = Path(results_path) if results_path else None
        self._results_lock = threading.Lock()

    def sample(self, clip: str | Path, clip_id: str | None = None) -> FrameSequence:
        return sample_frames(clip, self.sampler, decoder=self.decoder, source_id=clip_id)

    def prompt_for(self, job: AnalysisJob) -> tuple[str, str]:
        """Prompt text and the version string recorded with the verdict."""
        if job.mode is Mode.SIMPLE:
            return simple_prompt(job.task), f"simple-{SIMPLE_PROMPT_VERSION}"
        bundle = self.store.get(job.task, job.prompt_version)
        return bundle.cot_text, bundle.version

    def compose(self, job: AnalysisJob, frames: FrameSequence) -> tuple[ModelRequest, str]:
        prompt, version = self.prompt_for(job)
        texts = [prompt]
        note = direction_note(job.task)
        if note:
            texts.append(note)
        if job.sensor is not None:
            texts.append(render_context(job.sensor, redact_surface_condition=job.redact_surface_condition))
        stamps = ", ".join(f"{t:.2f}s" for t in frames.timestamps)
        texts.append(f"{len(frames)} frames follow in time order (t = {stamps}).")
        parts = [TextPart("\n\n".join(texts)), *encode_frames(frames, job.backend.max_payload_bytes)]
        metadata = {"scenario": job.scenario or job.resolved_clip_id, "task": job.task.slug}
        return build_request(SYSTEM_PROMPT, parts, job.backend, metadata), version

    def analyze(self, job: AnalysisJob) -> AnalysisResult:
        timings: dict[str, float] = {}
        clip_id = job.resolved_clip_id
        with _stage("sample", timings):
            frames = job.frames if job.frames is not None else self.sample(job.clip, clip_id)  # type: ignore[arg-type]
        with _stage("compose", timings):
            request, version = self.compose(job, frames)
        with _stage("complete", timings):
            response = self.gateway.complete(request, job.backend)
        require_gating = job.mode is Mode.COT
        reasked = False
        latency = response.latency_ms
        try:
            with _stage("parse", timings):
                verdict = parse_verdict(job.task, response, require_gating=require_gating, prompt_version=version)
        except (VerdictError, UnknownLabel) as first:
            log.info("%s/%s: unparseable response (%s); re-asking once", clip_id, job.task.slug, first)
            reasked = True
            retry = request.with_messages(
                Message.text("assistant", response.text),
                Message.text("user", reminder_text(job.task, require_gating)),
            )
            with _stage("complete", timings):
                response = self.gateway.complete(retry, job.backend)
            latency += response.latency_ms
            with _stage("parse", timings):
                verdict = parse_verdict(job.task, response, require_gating=require_gating, prompt_version=version)
        if verdict.overridden:
            log.info(
                "%s/%s: gate/tie rule changed model label %s -> %s",
                clip_id, job.task.slug, verdict.model_label.value, verdict.label.value,  # type: ignore[union-attr]
            )
        result = AnalysisResult(
            clip_id=clip_id,
            task=job.task,
            mode=job.mode,
            verdict=verdict,
            frames_used=len(frames),
            sensor_used=job.sensor is not None,
            prompt_version=version,
            model_id=response.model_id,
            reasked=reasked,
            latency_ms=latency,
            timings=timings,
        )
        self._append_result(result)
        return result

    def _append_result(self, result: AnalysisResult) -> None:
        if self.results_path is None:
            return
        record = result.verdict.to_record(result.clip_id, result.model_id, result.latency_ms)
        line = json.dumps(record, sort_keys=True, ensure_ascii=False)
        with self._results_lock:
            self.results_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.results_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def analyze_scene(
        self,
        clip: str | Path | None = None,
        sensor: SensorContext | None = None,
        *,
        mode: Mode = Mode.COT,
        backend: BackendConfig | None = None,
        scenario: str | None = None,
        clip_id: str | None = None,
        frames: FrameSequence | None = None,
        tasks: frozenset[str] = frozenset({"weather", "wetness", "congestion"}),
        redact_surface_condition: bool = False,
    ) -> SceneReport:
        """Weather first, then the wetness regime it selects, then congestion both ways.

        Sub-task failures are recorded in the report instead of aborting it.
        """
        backend = backend or BackendConfig()
        if clip is None and frames is None:
            raise ValueError("analyze_scene needs a clip or frames")
        cid = clip_id or (frames.source_id if frames is not None else Path(str(clip)).stem)
        report = SceneReport(clip_id=cid)
        if frames is None:
            try:
                frames = self.sample(clip, cid)  # type: ignore[arg-type]
            except RoadsceneError as exc:
                exc.stage = exc.stage or "sample"
                for name in sorted(tasks):
                    report.errors[name] = _describe(exc)
                return report

        def run(task: Task, with_sensor: SensorContext | None = None) -> AnalysisResult | None:
            job = AnalysisJob(
                task=task, clip=clip, mode=mode, sensor=with_sensor, backend=backend, clip_id=cid,
                scenario=scenario, frames=frames, redact_surface_condition=redact_surface_condition,
            )
            try:
                return self.analyze(job)
            except RoadsceneError as exc:
                report.errors[task.slug] = _describe(exc)
                return None

        weather_needed = "weather" in tasks or "wetness" in tasks
        if weather_needed:
            report.weather = run(WEATHER)
        if "wetness" in tasks:
            if report.weather is None:
                report.errors.setdefault("wetness", "skipped: weather verdict unavailable")
            else:
                wetness_task = WETNESS_SNOW if report.weather.label is WeatherClass.SNOWY else WETNESS_RAIN
                report.wetness = run(wetness_task, sensor)
        if "congestion" in tasks:
            for task in (CONGESTION_INBOUND, CONGESTION_OUTBOUND):
                result = run(task)
                if result is not None:
                    report.congestion[task.direction] = result  # type: ignore[index]
        return report


def _describe(exc: RoadsceneError) -> str:
    stage = f"[{exc.stage}] " if exc.stage else ""
    return f"{stage}{type(exc).__name__}: {exc}"


@dataclass
class SceneReport:
    clip_id: str
    weather: AnalysisResult | None = None
    wetness: AnalysisResult | None = None
    congestion: dict[Direction, AnalysisResult] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)

    def results(self) -> list[AnalysisResult]:
        out = [r for r in (self.weather, self.wetness) if r is not None]
        return out + [self.congestion[d] for d in Direction if d in self.congestion]

    def labels(self) -> dict[str, Any]:
        return {
            "weather": self.weather.label.value if self.weather else None,
            "wetness": self.wetness.label.value if self.wetness else None,
            "wetness_task": self.wetness.task.slug if self.wetness else None,
            "congestion": {d.value: r.label.value for d, r in self.congestion.items()},
        }

    def to_dict(self, include_timings: bool = True) -> dict[str, Any]:
        return {
            "clip_id": self.clip_id,
            **self.labels(),
            "results": [r.to_dict(include_timings) for r in self.results()],
            "errors": dict(sorted(self.errors.items())),
        }

