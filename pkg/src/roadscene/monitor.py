"""Continuous site monitoring with debounced hazard alerts.

Each site has its own scheduler thread that polls a clip source, runs the
scene analysis on a shared worker pool, persists the report and queues
alerts. A dispatcher thread drains the alert queue into the sinks.
"""

from __future__ import annotations

import glob
import json
import logging
import os
import queue
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol

import httpx

from .errors import ConfigError, RoadsceneError, SourceError
from .gateway import BackendConfig, RetryPolicy
from .pipeline import Analyzer, Mode, SceneReport
from .sensors import SensorContext, load_sensor_csv
from .taxonomy import CongestionLabel, Label, WetnessClass, label_from_value

log = logging.getLogger(__name__)

DEFAULT_ALERT_LABELS: frozenset[Label] = frozenset(
    {WetnessClass.RAINY_FLOODED, WetnessClass.SNOWY_WET_ICY_WARNING, CongestionLabel.CONGESTED}
)
ALL_TASKS = frozenset({"weather", "wetness", "congestion"})


@dataclass(frozen=True)
class SiteConfig:
    site_id: str
    source: str
    poll_interval_s: float = 60.0
    tasks: frozenset[str] = ALL_TASKS
    sensor_source: str | None = None
    alert_labels: frozenset[Label] = DEFAULT_ALERT_LABELS
    debounce_s: float = 900.0
    clip_duration_s: float = 7.0
    scenario: str | None = None

    def __post_init__(self) -> None:
        if not self.site_id:
            raise ConfigError("site_id is required")
        if self.poll_interval_s < self.clip_duration_s:
            raise ConfigError(f"{self.site_id}: poll interval shorter than the clip duration")
        if self.debounce_s < 0:
            raise ConfigError(f"{self.site_id}: debounce window must be non-negative")
        unknown = set(self.tasks) - ALL_TASKS
        if unknown:
            raise ConfigError(f"{self.site_id}: unknown tasks {sorted(unknown)}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SiteConfig:
        data = dict(data)
        try:
            if "alert_labels" in data:
                data["alert_labels"] = frozenset(label_from_value(v) for v in data["alert_labels"])
            if "tasks" in data:
                data["tasks"] = frozenset(data["tasks"])
            return cls(**data)
        except KeyError as exc:
            raise ConfigError(f"unknown alert label {exc.args[0]!r}") from None
        except TypeError as exc:
            raise ConfigError(f"bad site entry: {exc}") from None


@dataclass(frozen=True)
class Alert:
    site_id: str
    timestamp: float
    label: Label
    task: str
    report_uri: str
    dedupe_key: str

    def payload(self) -> dict[str, Any]:
        return {
            "site_id": self.site_id,
            "label": self.label.value,
            "task": self.task,
            "timestamp": datetime.fromtimestamp(self.timestamp, timezone.utc).isoformat(),
            "report_uri": self.report_uri,
            "dedupe_key": self.dedupe_key,
        }


class ClipSource(Protocol):
    def fetch(self) -> Path: ...


class DirectorySource:
    """Newest file matching a glob pattern."""

    def __init__(self, pattern: str):
        self.pattern = pattern

    def fetch(self) -> Path:
        matches = [Path(p) for p in glob.glob(self.pattern) if os.path.isfile(p)]
        if not matches:
            raise SourceError(f"no clips match {self.pattern}")
        return max(matches, key=lambda p: (p.stat().st_mtime, p.name))


class HttpClipSource:
    """Downloads the clip served at a URL into a scratch directory."""

    def __init__(self, url: str, client: httpx.Client | None = None, timeout_s: float = 30.0):
        self.url = url
        self._client = client or httpx.Client()
        self.timeout_s = timeout_s
        self._dir = Path(tempfile.mkdtemp(prefix="roadscene-clips-"))

    def fetch(self) -> Path:
        try:
            resp = self._client.get(self.url, timeout=self.timeout_s)
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise SourceError(f"{self.url}: {exc}") from exc
        suffix = Path(httpx.URL(self.url).path).suffix or ".mp4"
        path = self._dir / f"latest{suffix}"
        path.write_bytes(resp.content)
        return path


def make_source(spec: str) -> ClipSource:
    if spec.startswith(("http://", "https://")):
        return HttpClipSource(spec)
    return DirectorySource(spec)


def latest_sensor_context(path: str | Path) -> SensorContext:
    records = load_sensor_csv(path)
    if not records:
        raise SourceError(f"{path}: no sensor records")
    return max(records.values(), key=lambda c: c.record.datetime)


class Debouncer:
    """At most one alert per (site, label) per window."""

    def __init__(self) -> None:
        self._last: dict[tuple[str, Label], float] = {}
        self._lock = threading.Lock()

    def admit(self, site: str, label: Label, now: float, window_s: float) -> str | None:
        key = (site, label)
        with self._lock:
            last = self._last.get(key)
            if last is not None and now - last < window_s:
                return None
            self._last[key] = now
        return f"{site}:{label.value.replace(' ', '-')}:{int(now)}"


class AlertSink(Protocol):
    def emit(self, alert: Alert) -> None: ...


class AlertLogSink:
    """Append-only line-delimited JSON alert log."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def emit(self, alert: Alert) -> None:
        line = json.dumps(alert.payload(), sort_keys=True, ensure_ascii=False)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
                os.fsync(fh.fileno())


class WebhookSink:
    """POSTs alert JSON; retries with backoff. Receivers dedupe on dedupe_key."""

    def __init__(
        self,
        url: str,
        retry: RetryPolicy = RetryPolicy(max_attempts=4, backoff_base_s=1.0),
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        timeout_s: float = 10.0,
    ):
        self.url = url
        self.retry = retry
        self._client = client or httpx.Client()
        self._sleep = sleep
        self.timeout_s = timeout_s

    def emit(self, alert: Alert) -> None:
        last_exc: Exception | None = None
        for attempt in range(1, self.retry.max_attempts + 1):
            try:
                resp = self._client.post(self.url, json=alert.payload(), timeout=self.timeout_s)
                resp.raise_for_status()
                return
            except httpx.HTTPError as exc:
                last_exc = exc
                if attempt < self.retry.max_attempts:
                    self._sleep(self.retry.delay(attempt))
        raise SourceError(f"webhook {self.url} failed after {self.retry.max_attempts} attempts: {last_exc}")


@dataclass
class SiteHealth:
    site_id: str
    last_attempt: float | None = None
    last_success: float | None = None
    consecutive_failures: int = 0
    last_error: str | None = None
    ticks: int = 0
    alerts: int = 0
    queue_depth: int = 0

    def status(self, degraded_after: int) -> str:
        if self.last_attempt is None:
            return "never run"
        if self.consecutive_failures >= degraded_after:
            return "degraded"
        if self.consecutive_failures:
            return "failing"
        return "ok"


def _iso(ts: float | None) -> str | None:
    return None if ts is None else datetime.fromtimestamp(ts, timezone.utc).isoformat()


class MonitorService:
    def __init__(
        self,
        sites: Iterable[SiteConfig],
        analyzer: Analyzer,
        sinks: Iterable[AlertSink],
        report_dir: str | Path,
        backend: BackendConfig | None = None,
        *,
        mode: Mode = Mode.COT,
        clock: Callable[[], float] = time.time,
        degraded_after: int = 3,
        workers: int = 4,
        queue_size: int = 256,
        sources: Mapping[str, ClipSource] | None = None,
    ):
        self.sites = {s.site_id: s for s in sites}
        if not self.sites:
            raise ConfigError("no sites configured")
        self.analyzer = analyzer
        self.sinks = list(sinks)
        self.report_dir = Path(report_dir)
        self.backend = backend or BackendConfig()
        self.mode = mode
        self.clock = clock
        self.degraded_after = degraded_after
        self.workers = max(workers, len(self.sites))
        self.debouncer = Debouncer()
        self.alerts: queue.Queue[Alert] = queue.Queue(maxsize=queue_size)
        self._sources = dict(sources or {})
        self._health = {sid: SiteHealth(sid) for sid in self.sites}
        self._lock = threading.Lock()
        self._stop = threading.Event()

    def _source(self, site: SiteConfig) -> ClipSource:
        if site.site_id not in self._sources:
            self._sources[site.site_id] = make_source(site.source)
        return self._sources[site.site_id]

    def _persist(self, site: SiteConfig, report: SceneReport, now: float) -> Path:
        stamp = datetime.fromtimestamp(now, timezone.utc).strftime("%Y%m%dT%H%M%S")
        path = self.report_dir / site.site_id / f"{stamp}-{report.clip_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        body = {"site_id": site.site_id, "timestamp": _iso(now), **report.to_dict()}
        path.write_text(json.dumps(body, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
        return path

    def _record_failure(self, site_id: str, error: str) -> None:
        with self._lock:
            h = self._health[site_id]
            h.consecutive_failures += 1
            h.last_error = error
        log.warning("site %s tick failed: %s", site_id, error)

    def tick(self, site_id: str, now: float | None = None) -> list[Alert]:
        """One poll of one site. Errors are recorded, never raised."""
        site = self.sites[site_id]
        now = self.clock() if now is None else now
        with self._lock:
            h = self._health[site_id]
            h.last_attempt = now
            h.ticks += 1
        try:
            clip = self._source(site).fetch()
            sensor = latest_sensor_context(site.sensor_source) if site.sensor_source else None
            report = self.analyzer.analyze_scene(
                clip, sensor, mode=self.mode, backend=self.backend, scenario=site.scenario, tasks=site.tasks,
            )
        except (RoadsceneError, OSError) as exc:
            self._record_failure(site_id, f"{type(exc).__name__}: {exc}")
            return []
        if not report.results():
            self._record_failure(site_id, "; ".join(f"{k}: {v}" for k, v in sorted(report.errors.items())))
            return []
        path = self._persist(site, report, now)
        with self._lock:
            h.last_success = now
            h.consecutive_failures = 0
            h.last_error = "; ".join(sorted(report.errors.values())) or None
        alerts = []
        for result in report.results():
            if result.label not in site.alert_labels:
                continue
            key = self.debouncer.admit(site_id, result.label, now, site.debounce_s)
            if key is None:
                continue
            alerts.append(Alert(site_id, now, result.label, result.task.slug, path.resolve().as_uri(), key))
        for alert in alerts:
            self._enqueue(alert)
        return alerts

    def _enqueue(self, alert: Alert) -> None:
        with self._lock:
            self._health[alert.site_id].queue_depth += 1
            self._health[alert.site_id].alerts += 1
        self.alerts.put(alert)

    def _deliver(self, alert: Alert) -> None:
        for sink in self.sinks:
            try:
                sink.emit(alert)
            except Exception as exc:  # a broken sink must not stop delivery to the others
                log.error("alert sink %s failed for %s: %s", type(sink).__name__, alert.dedupe_key, exc)
        with self._lock:
            self._health[alert.site_id].queue_depth -= 1

    def dispatch_pending(self) -> int:
        """Deliver everything queued so far on the calling thread."""
        n = 0
        while True:
            try:
                alert = self.alerts.get_nowait()
            except queue.Empty:
                return n
            self._deliver(alert)
            n += 1

    def health_snapshot(self) -> dict[str, dict[str, Any]]:
        with self._lock:
            return {
                sid: {
                    "status": h.status(self.degraded_after),
                    "last_success": _iso(h.last_success),
                    "last_attempt": _iso(h.last_attempt),
                    "consecutive_failures": h.consecutive_failures,
                    "last_error": h.last_error,
                    "ticks": h.ticks,
                    "alerts": h.alerts,
                    "queue_depth": h.queue_depth,
                }
                for sid, h in sorted(self._health.items())
            }

    def stop(self) -> None:
        self._stop.set()

    def run(self, drain_deadline_s: float = 30.0) -> None:
        """Block until ``stop()``; then finish in-flight ticks and drain alerts."""
        pool = ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="roadscene-analyze")

        def schedule(site: SiteConfig) -> None:
            while not self._stop.is_set():
                started = time.monotonic()
                future = pool.submit(self.tick, site.site_id)
                try:
                    future.result()
                except Exception:
                    log.exception("site %s tick crashed", site.site_id)
                elapsed = time.monotonic() - started
                self._stop.wait(max(0.0, site.poll_interval_s - elapsed))

        def dispatch() -> None:
            while not (self._stop.is_set() and self.alerts.empty()):
                try:
                    alert = self.alerts.get(timeout=0.2)
                except queue.Empty:
                    continue
                self._deliver(alert)

        threads = [
            threading.Thread(target=schedule, args=(s,), name=f"site-{s.site_id}", daemon=True)
            for s in self.sites.values()
        ]
        dispatcher = threading.Thread(target=dispatch, name="alert-dispatch", daemon=True)
        for t in threads:
            t.start()
        dispatcher.start()
        try:
            self._stop.wait()
        finally:
            self._stop.set()
            deadline = time.monotonic() + drain_deadline_s
            for t in threads:
                t.join(max(0.0, deadline - time.monotonic()))
            pool.shutdown(wait=True, cancel_futures=True)
            dispatcher.join(max(0.0, deadline - time.monotonic()))

    def serve_health(self, port: int, host: str = "127.0.0.1") -> ThreadingHTTPServer:
        service = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self) -> None:  # noqa: N802
                if self.path.rstrip("/") not in ("", "/health"):
                    self.send_error(404)
                    return
                body = json.dumps(service.health_snapshot(), indent=2).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, fmt: str, *args: Any) -> None:
                log.debug("health: " + fmt, *args)

        server = ThreadingHTTPServer((host, port), Handler)
        threading.Thread(target=server.serve_forever, name="health-http", daemon=True).start()
        return server


def load_service_config(path: str | Path) -> dict[str, Any]:
    """Read a JSON or TOML service file: ``sites`` plus optional sink/report settings."""
    path = Path(path)
    text = path.read_text("utf-8")
    try:
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    sites = data.get("sites")
    if not sites:
        raise ConfigError(f"{path}: no sites defined")
    data["sites"] = [SiteConfig.from_dict(s) for s in sites]
    return data
