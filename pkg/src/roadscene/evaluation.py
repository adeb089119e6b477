"""Labeled-manifest evaluation: confusion matrices, per-class accuracy, ablation tables.

Manifest CSV columns::

    clip_id, clip_path, task, ground_truth, direction, sensor_ref, multimodal_kind

``task`` is one of weather, wetness-rain, wetness-snow, congestion; ``direction``
(inbound/outbound) is required for congestion rows and forbidden otherwise.
``sensor_ref`` keys a ``record_id`` in a sensor CSV and must be paired with a
``multimodal_kind`` of partial or full. Relative clip paths resolve against the
manifest's directory.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import ConfigError, EmptyClass, ManifestError, ReportMismatch, RoadsceneError, UnknownLabel
from .gateway import BackendConfig
from .pipeline import AnalysisJob, Analyzer, Mode
from .prompts import LATEST, SIMPLE_PROMPT_VERSION
from .sensors import Schema, SensorContext
from .taxonomy import Direction, Label, Task, TaskKind, label_from_value, labels_for, parse_label

REQUIRED_COLUMNS = ("clip_id", "clip_path", "task", "ground_truth")


class MultimodalKind(str, enum.Enum):
    NONE = "none"
    PARTIAL = "partial"
    FULL = "full"


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    clip_path: Path
    task: Task
    ground_truth: Label
    sensor_ref: str | None = None
    multimodal_kind: MultimodalKind = MultimodalKind.NONE

    @property
    def key(self) -> tuple[str, str]:
        return self.task.slug, self.clip_id


def _entry_from_row(row: Mapping[str, str | None], line: int, base: Path) -> ManifestEntry:
    def cell(name: str) -> str:
        return (row.get(name) or "").strip()

    for name in REQUIRED_COLUMNS:
        if not cell(name):
            raise ManifestError(line, f"empty {name}")
    try:
        kind = TaskKind(cell("task").lower())
    except ValueError:
        raise ManifestError(line, f"unknown task {cell('task')!r}") from None
    direction_text = cell("direction").lower()
    if kind is TaskKind.CONGESTION:
        if not direction_text:
            raise ManifestError(line, "congestion rows need a direction")
        try:
            task = Task(kind, Direction(direction_text))
        except ValueError:
            raise ManifestError(line, f"unknown direction {direction_text!r}") from None
    else:
        if direction_text:
            raise ManifestError(line, f"direction is only valid for congestion rows, got {direction_text!r}")
        task = Task(kind)
    try:
        truth = parse_label(cell("ground_truth"), task)
    except UnknownLabel:
        raise ManifestError(line, f"ground truth {cell('ground_truth')!r} is not a {task.slug} label") from None
    ref = cell("sensor_ref") or None
    kind_text = cell("multimodal_kind").lower() or MultimodalKind.NONE.value
    try:
        mm = MultimodalKind(kind_text)
    except ValueError:
        raise ManifestError(line, f"unknown multimodal_kind {kind_text!r}") from None
    if (ref is None) != (mm is MultimodalKind.NONE):
        raise ManifestError(line, "multimodal_kind must be partial/full exactly when sensor_ref is set")
    path = Path(cell("clip_path"))
    if not path.is_absolute():
        path = base / path
    return ManifestEntry(cell("clip_id"), path, task, truth, ref, mm)


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ManifestError(1, f"header lacks columns {missing}")
        entries: list[ManifestEntry] = []
        seen: set[tuple[str, str]] = set()
        for line, row in enumerate(reader, start=2):
            entry = _entry_from_row(row, line, path.parent)
            if entry.key in seen:
                raise ManifestError(line, f"duplicate clip_id {entry.clip_id!r} for task {entry.task.slug}")
            seen.add(entry.key)
            entries.append(entry)
    return entries


def entry_set_fingerprint(entries: Iterable[ManifestEntry]) -> str:
    keys = sorted(f"{e.task.slug}|{e.clip_id}|{e.ground_truth.value}" for e in entries)
    return hashlib.sha256("\n".join(keys).encode("utf-8")).hexdigest()


def percent(correct: int, total: int) -> Decimal:
    """correct/total*100 rounded half-up to two decimals, in exact arithmetic."""
    if total <= 0:
        raise EmptyClass("no ground-truth clips for this class")
    hundredths = (correct * 20000 + total) // (2 * total)
    return Decimal(hundredths).scaleb(-2)


@dataclass
class ConfusionMatrix:
    task: Task
    labels: list[Label]
    counts: list[list[int]]

    @classmethod
    def empty(cls, task: Task) -> ConfusionMatrix:
        labels = labels_for(task)
        return cls(task, labels, [[0] * len(labels) for _ in labels])

    def add(self, truth: Label, predicted: Label) -> None:
        self.counts[self.labels.index(truth)][self.labels.index(predicted)] += 1

    def row_total(self, label: Label) -> int:
        return sum(self.counts[self.labels.index(label)])

    def correct(self, label: Label) -> int:
        i = self.labels.index(label)
        return self.counts[i][i]

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    def to_dict(self) -> dict[str, Any]:
        return {"labels": [label.value for label in self.labels], "counts": [list(r) for r in self.counts]}

    @classmethod
    def from_dict(cls, task: Task, data: Mapping[str, Any]) -> ConfusionMatrix:
        return cls(task, [label_from_value(v) for v in data["labels"]], [list(r) for r in data["counts"]])


def accuracy(cm: ConfusionMatrix, label: Label) -> Decimal:
    return percent(cm.correct(label), cm.row_total(label))


@dataclass(frozen=True)
class ClassAccuracy:
    task: str
    label: str
    correct: int
    total: int

    @property
    def accuracy(self) -> Decimal | None:
        return percent(self.correct, self.total) if self.total else None


@dataclass
class ClipRecord:
    clip_id: str
    task: str
    ground_truth: str
    predicted: str | None = None
    error: str | None = None
    prompt_version: str = ""
    model_id: str = ""
    sensor_used: bool = False
    overridden: bool = False
    latency_ms: float | None = None

    @property
    def correct(self) -> bool | None:
        return None if self.predicted is None else self.predicted == self.ground_truth

    def to_dict(self, include_timings: bool = True) -> dict[str, Any]:
        out = {
            "clip_id": self.clip_id,
            "task": self.task,
            "ground_truth": self.ground_truth,
            "predicted": self.predicted,
            "correct": self.correct,
            "error": self.error,
            "prompt_version": self.prompt_version,
            "model_id": self.model_id,
            "sensor_used": self.sensor_used,
            "overridden": self.overridden,
        }
        if include_timings:
            out["latency_ms"] = self.latency_ms
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ClipRecord:
        fields_ = {k: data.get(k) for k in (
            "clip_id", "task", "ground_truth", "predicted", "error", "prompt_version", "model_id",
            "sensor_used", "overridden", "latency_ms",
        )}
        fields_["sensor_used"] = bool(fields_["sensor_used"])
        fields_["overridden"] = bool(fields_["overridden"])
        fields_["prompt_version"] = fields_["prompt_version"] or ""
        fields_["model_id"] = fields_["model_id"] or ""
        return cls(**fields_)


@dataclass
class RunConfig:
    mode: Mode = Mode.COT
    modality: str = "video"
    prompt_version: str = LATEST
    backend: BackendConfig = field(default_factory=BackendConfig)
    parallelism: int | None = None
    redact_surface_condition: bool = True
    scenario: str | None = None

    def __post_init__(self) -> None:
        if self.modality not in ("video", "multimodal"):
            raise ConfigError(f"modality must be video or multimodal, not {self.modality!r}")


@dataclass
class EvalReport:
    run: dict[str, Any]
    entry_set: str
    matrices: dict[str, ConfusionMatrix]
    records: list[ClipRecord]

    @property
    def failures(self) -> list[ClipRecord]:
        return [r for r in self.records if r.error is not None]

    @property
    def failure_rate(self) -> float:
        return len(self.failures) / len(self.records) if self.records else 0.0

    def per_class(self) -> list[ClassAccuracy]:
        rows = []
        for slug in sorted(self.matrices):
            cm = self.matrices[slug]
            for label in cm.labels:
                rows.append(ClassAccuracy(slug, label.value, cm.correct(label), cm.row_total(label)))
        return rows

    def overall(self, slug: str) -> Decimal | None:
        cm = self.matrices[slug]
        correct = sum(cm.correct(label) for label in cm.labels)
        return percent(correct, cm.total) if cm.total else None

    def to_dict(self, include_timings: bool = True) -> dict[str, Any]:
        return {
            "run": self.run,
            "entry_set": self.entry_set,
            "entries": len(self.records),
            "failures": len(self.failures),
            "failure_rate": round(self.failure_rate, 6),
            "accuracy": [
                {
                    "task": c.task, "label": c.label, "correct": c.correct, "total": c.total,
                    "accuracy": None if c.accuracy is None else str(c.accuracy),
                }
                for c in self.per_class()
            ],
            "overall": {
                slug: (None if self.overall(slug) is None else str(self.overall(slug))) for slug in sorted(self.matrices)
            },
            "confusion": {slug: self.matrices[slug].to_dict() for slug in sorted(self.matrices)},
            "records": [r.to_dict(include_timings) for r in self.records],
        }

    def to_json(self, include_timings: bool = True) -> str:
        return json.dumps(self.to_dict(include_timings), sort_keys=True, indent=2, ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EvalReport:
        matrices = {
            slug: ConfusionMatrix.from_dict(Task.parse(slug), cm) for slug, cm in data["confusion"].items()
        }
        return cls(
            run=dict(data["run"]),
            entry_set=data["entry_set"],
            matrices=matrices,
            records=[ClipRecord.from_dict(r) for r in data["records"]],
        )

    @classmethod
    def load(cls, path: str | Path) -> EvalReport:
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))


def _pin_versions(analyzer: Analyzer, tasks: Iterable[Task], config: RunConfig) -> dict[str, str]:
    if config.mode is Mode.SIMPLE:
        return {t.kind.value: f"simple-{SIMPLE_PROMPT_VERSION}" for t in tasks}
    pinned = {}
    for task in tasks:
        try:
            pinned[task.kind.value] = analyzer.store.get(task, config.prompt_version).version
        except RoadsceneError as exc:
            raise ConfigError(str(exc)) from exc
    return pinned


def _check_sensors(
    entries: Sequence[ManifestEntry], config: RunConfig, sensors: Mapping[str, SensorContext] | None
) -> None:
    if config.modality != "multimodal":
        return
    refs = [e for e in entries if e.sensor_ref]
    if not refs:
        raise ConfigError("multimodal run requested but no manifest entry has a sensor_ref")
    if not sensors:
        raise ConfigError("multimodal run requested but no sensor records were loaded")
    for e in refs:
        ctx = sensors.get(e.sensor_ref)  # type: ignore[arg-type]
        if ctx is None:
            raise ConfigError(f"{e.clip_id}: sensor_ref {e.sensor_ref!r} not found in sensor records")
        expected = Schema.FULL if e.multimodal_kind is MultimodalKind.FULL else Schema.PARTIAL
        if ctx.schema is not expected:
            raise ConfigError(f"{e.clip_id}: sensor record is {ctx.schema.value}, manifest says {expected.value}")


def evaluate(
    entries: Sequence[ManifestEntry],
    config: RunConfig,
    analyzer: Analyzer,
    sensors: Mapping[str, SensorContext] | None = None,
) -> EvalReport:
    """Analyze every entry and aggregate. Per-clip failures are recorded, not raised."""
    if not entries:
        raise ConfigError("manifest is empty")
    _check_sensors(entries, config, sensors)
    tasks = sorted({e.task for e in entries}, key=lambda t: t.slug)
    pinned = _pin_versions(analyzer, tasks, config)

    def run_one(entry: ManifestEntry) -> ClipRecord:
        sensor = None
        if config.modality == "multimodal" and entry.sensor_ref and entry.task.kind.is_wetness:
            sensor = sensors[entry.sensor_ref]  # type: ignore[index]
        record = ClipRecord(entry.clip_id, entry.task.slug, entry.ground_truth.value)
        try:
            job = AnalysisJob(
                task=entry.task,
                clip=entry.clip_path,
                mode=config.mode,
                sensor=sensor,
                prompt_version=pinned[entry.task.kind.value] if config.mode is Mode.COT else LATEST,
                backend=config.backend,
                clip_id=entry.clip_id,
                scenario=config.scenario,
                redact_surface_condition=config.redact_surface_condition,
            )
            result = analyzer.analyze(job)
        except RoadsceneError as exc:
            stage = f"[{exc.stage}] " if exc.stage else ""
            record.error = f"{stage}{type(exc).__name__}: {exc}"
            return record
        record.predicted = result.label.value
        record.prompt_version = result.prompt_version
        record.model_id = result.model_id
        record.sensor_used = result.sensor_used
        record.overridden = result.verdict.overridden
        record.latency_ms = round(result.latency_ms, 3)
        return record

    workers = config.parallelism or config.backend.parallelism
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(run_one, entries))

    records.sort(key=lambda r: (r.task, r.clip_id))
    matrices = {t.slug: ConfusionMatrix.empty(t) for t in tasks}
    for r in records:
        if r.predicted is None:
            continue
        task = Task.parse(r.task)
        matrices[r.task].add(parse_label(r.ground_truth, task), parse_label(r.predicted, task))
    run = {
        "mode": config.mode.value,
        "modality": config.modality,
        "prompt_versions": dict(sorted(pinned.items())),
        "model_id": config.backend.model_id or next((r.model_id for r in records if r.model_id), ""),
        "backend": config.backend.name,
    }
    return EvalReport(run, entry_set_fingerprint(entries), matrices, records)


def format_pct(value: Decimal | None) -> str:
    return "n/a" if value is None else f"{value:.2f}"


# Deltas smaller than this render as unchanged.
DELTA_EPSILON = Decimal("0.005")


def ablation_cell(baseline: Decimal | None, treatment: Decimal | None) -> str:
    """Treatment percentage with the signed change, e.g. ``95.45 (↑3.03)``."""
    if treatment is None:
        return "n/a"
    if baseline is None:
        return format_pct(treatment)
    delta = treatment - baseline
    if abs(delta) < DELTA_EPSILON:
        return f"{treatment:.2f} (—)"
    arrow = "↑" if delta > 0 else "↓"
    return f"{treatment:.2f} ({arrow}{abs(delta):.2f})"


@dataclass(frozen=True)
class AblationRow:
    task: str
    label: str
    baseline: ClassAccuracy
    treatment: ClassAccuracy

    @property
    def delta(self) -> Decimal | None:
        b, t = self.baseline.accuracy, self.treatment.accuracy
        return None if b is None or t is None else t - b

    @property
    def cell(self) -> str:
        return ablation_cell(self.baseline.accuracy, self.treatment.accuracy)


def _column_title(run: Mapping[str, Any], other: Mapping[str, Any]) -> str:
    if run.get("mode") != other.get("mode"):
        return "Simple Prompt (%)" if run.get("mode") == Mode.SIMPLE.value else "CoT Prompt (%)"
    if run.get("modality") != other.get("modality"):
        return "Video alone (%)" if run.get("modality") == "video" else "Multimodal (Video and Sensor Data) (%)"
    return "Accuracy (%)"


@dataclass
class AblationTable:
    rows: list[AblationRow]
    baseline_title: str
    treatment_title: str

    def render_text(self) -> str:
        header = ["Task", "Condition", self.baseline_title, self.treatment_title, "n"]
        body = [
            [r.task, r.label, format_pct(r.baseline.accuracy), r.cell, str(r.treatment.total)] for r in self.rows
        ]
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(header, widths)).rstrip()]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in body]
        return "\n".join(lines) + "\n"

    def render_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([
            "task", "condition", "baseline_pct", "treatment_pct", "delta", "cell",
            "baseline_correct", "baseline_total", "treatment_correct", "treatment_total",
        ])
        for r in self.rows:
            writer.writerow([
                r.task, r.label, format_pct(r.baseline.accuracy), format_pct(r.treatment.accuracy),
                "" if r.delta is None else f"{r.delta:.2f}", r.cell,
                r.baseline.correct, r.baseline.total, r.treatment.correct, r.treatment.total,
            ])
        return buf.getvalue()


def ablation_table(baseline: EvalReport, treatment: EvalReport) -> AblationTable:
    if baseline.entry_set != treatment.entry_set:
        raise ReportMismatch("reports cover different entry sets")
    if set(baseline.matrices) != set(treatment.matrices):
        raise ReportMismatch("reports cover different tasks")
    treat = {(c.task, c.label): c for c in treatment.per_class()}
    rows = [AblationRow(c.task, c.label, c, treat[(c.task, c.label)]) for c in baseline.per_class()]
    return AblationTable(rows, _column_title(baseline.run, treatment.run), _column_title(treatment.run, baseline.run))


def render_report(report: EvalReport) -> str:
    """Plain per-class accuracy table with raw counts."""
    header = ["Task", "Condition", "Accuracy (%)", "Correct", "Total"]
    body = [
        [c.task, c.label, format_pct(c.accuracy), str(c.correct), str(c.total)] for c in report.per_class()
    ]
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in body]
    run = report.run
    lines.append("")
    lines.append(
        f"mode={run.get('mode')} modality={run.get('modality')} model={run.get('model_id') or '-'} "
        f"failures={len(report.failures)}/{len(report.records)}"
    )
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir: str | Path, stem: str = "report") -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / f"{stem}.json",
        "txt": out_dir / f"{stem}.txt",
        "csv": out_dir / f"{stem}.csv",
    }
    paths["json"].write_text(report.to_json() + "\n", encoding="utf-8")
    paths["txt"].write_text(render_report(report), encoding="utf-8")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task", "condition", "accuracy_pct", "correct", "total"])
    for c in report.per_class():
        writer.writerow([c.task, c.label, format_pct(c.accuracy), c.correct, c.total])
    paths["csv"].write_text(buf.getvalue(), encoding="utf-8")
    return paths
