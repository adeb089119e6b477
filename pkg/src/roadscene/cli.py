"""``roadscene`` command line: tune prompts, analyze clips, evaluate, deploy.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import functools
import json
import logging
import signal
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import click

from . import __version__
from .config import CONFIG_ENV, GlobalConfig
from .errors import (
    ConfigError,
    ManifestError,
    PromptStoreError,
    ReportMismatch,
    RoadsceneError,
    SensorError,
    ValidationFailed,
)
from .evaluation import EvalReport, RunConfig, ablation_table, evaluate, load_manifest, render_report, write_report
from .gateway import BackendConfig, Gateway, ScriptedBackend
from .monitor import AlertLogSink, MonitorService, WebhookSink, load_service_config
from .pipeline import AnalysisJob, Analyzer, Mode
from .prompts import Agent1Brief, PromptStore, build_agent1_request, compile_cot, parse_bundle, render_bundle, validate_cot
from .prompts.store import LATEST
from .sensors import SensorContext, load_sensor_csv
from .taxonomy import CONGESTION_INBOUND, Task, TaskKind

log = logging.getLogger("roadscene")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
DEFAULT_PROMPT_DIR = Path("prompts")

BACKEND_HELP = (
    "Model backend. 'http' (default) uses the configured endpoints; "
    "'mock' replays built-in scripted scenarios keyed by clip id; "
    "'mock:scenario=NAME' pins one scenario; 'mock:script=FILE.json' loads a custom script."
)


class Env:
    """Per-invocation state resolved from global options."""

    def __init__(self, config: GlobalConfig, prompt_store: Path | None):
        self.config = config
        self.prompt_dir = prompt_store or config.prompt_store or DEFAULT_PROMPT_DIR

    def store(self) -> PromptStore:
        return PromptStore(self.prompt_dir)

    def backends(self, spec: str | None) -> tuple[Gateway, BackendConfig, BackendConfig]:
        """Gateway plus (agent1, agent2) backend configs for a ``--backend`` value."""
        spec = spec or "http"
        agent1, agent2 = self.config.agent1, replace(self.config.agent2, parallelism=self.config.parallelism)
        if spec == "http":
            return Gateway(), agent1, agent2
        name, _, rest = spec.partition(":")
        if name != "mock":
            raise click.BadParameter(f"unknown backend {spec!r}", param_hint="--backend")
        opts: dict[str, str] = {}
        for item in filter(None, rest.split(",")):
            key, sep, value = item.partition("=")
            if not sep or key not in ("scenario", "script"):
                raise click.BadParameter(f"bad mock option {item!r}", param_hint="--backend")
            opts[key] = value
        if "script" in opts:
            try:
                script = json.loads(Path(opts["script"]).read_text("utf-8"))
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot load mock script: {exc}") from exc
        else:
            script = json.loads(resources.files("roadscene.data").joinpath("scenarios.json").read_text("utf-8"))
        transport = ScriptedBackend(script, scenario=opts.get("scenario"))
        gateway = Gateway({"agent1": transport, "agent2": transport}, sleep=lambda _s: None)
        agent1 = replace(agent1, name="agent1", kind="scripted")
        agent2 = replace(agent2, name="agent2", kind="scripted")
        return gateway, agent1, agent2

    def analyzer(self, gateway: Gateway, results: Path | None = None) -> Analyzer:
        return Analyzer(gateway, store=self.store(), sampler=self.config.sampler, results_path=results)


def _emit(data: Any, as_json: bool, text: str | Callable[[], str]) -> None:
    if as_json:
        click.echo(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False))
    else:
        click.echo(text() if callable(text) else text, nl=False)


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def guarded(fn: Callable[..., Any]) -> Callable[..., Any]:
    """Map library errors onto the exit-code contract."""

    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return fn(*args, **kwargs)
        except (ConfigError, ManifestError, ReportMismatch, SensorError, PromptStoreError) as exc:
            _fail(str(exc), EXIT_USAGE)
        except ValidationFailed as exc:
            _fail(f"prompt failed validation; missing anchors: {', '.join(exc.missing)}", EXIT_RUNTIME)
        except RoadsceneError as exc:
            stage = f"[{exc.stage}] " if exc.stage else ""
            _fail(f"{stage}{type(exc).__name__}: {exc}", EXIT_RUNTIME)

    return wrapper


def common(fn: Callable[..., Any]) -> Callable[..., Any]:
    fn = click.option("--json", "as_json", is_flag=True, help="Machine-readable JSON output.")(fn)
    fn = click.option("--backend", "backend_spec", metavar="SPEC", help=BACKEND_HELP)(fn)
    return fn


def _task_arg(_ctx: click.Context, _param: click.Parameter, value: str | None) -> Task | None:
    if value is None:
        return None
    try:
        return Task.parse(value)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from None


def _kind_arg(_ctx: click.Context, _param: click.Parameter, value: str | None) -> TaskKind | None:
    if value is None:
        return None
    try:
        return TaskKind(value.strip().lower())
    except ValueError:
        raise click.BadParameter(f"unknown task {value!r}") from None


def _pick_sensor(path: Path | None, record_id: str | None) -> SensorContext | None:
    if path is None:
        if record_id:
            raise click.UsageError("--sensor-id requires --sensor")
        return None
    records = load_sensor_csv(path)
    if record_id:
        if record_id not in records:
            raise ConfigError(f"{path}: no record {record_id!r}")
        return records[record_id]
    if len(records) != 1:
        raise click.UsageError(f"{path} holds {len(records)} records; choose one with --sensor-id")
    return next(iter(records.values()))


def _configure_logging(level: str, log_file: Path | None) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", handlers=handlers, force=True)


mode_option = click.option(
    "--mode", type=click.Choice([m.value for m in Mode]), default=Mode.COT.value, show_default=True,
    help="Prompting mode: simple baseline or chain-of-thought bundle.",
)
sensor_options = [
    click.option("--sensor", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                 help="Road weather station CSV (partial or full schema)."),
    click.option("--sensor-id", help="record_id to use when the CSV holds several records."),
]


def with_sensor(fn: Callable[..., Any]) -> Callable[..., Any]:
    for opt in reversed(sensor_options):
        fn = opt(fn)
    return fn


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="roadscene")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), envvar=CONFIG_ENV,
              help=f"TOML or JSON config file (env {CONFIG_ENV}).")
@click.option("--prompt-store", type=click.Path(file_okay=False, path_type=Path),
              help="Prompt bundle directory (default: config value, else ./prompts).")
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              help="Override the configured log level.")
@click.pass_context
def cli(ctx: click.Context, config_path: Path | None, prompt_store: Path | None, log_level: str | None) -> None:
    """Highway scene understanding with a two-agent vision-language pipeline."""
    try:
        config = GlobalConfig.load(config_path)
    except ConfigError as exc:
        _fail(str(exc), EXIT_USAGE)
    _configure_logging((log_level or config.log_level).upper(), config.log_file)
    ctx.obj = Env(config, prompt_store)


@cli.command()
@click.argument("clip", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--task", "task", required=True, callback=_task_arg,
              help="weather, wetness-rain, wetness-snow, congestion:inbound or congestion:outbound.")
@mode_option
@with_sensor
@click.option("--prompt-version", default=LATEST, show_default=True)
@click.option("--timings", is_flag=True, help="Include per-stage timings (not deterministic).")
@common
@click.pass_obj
@guarded
def analyze(env: Env, clip: Path, task: Task, mode: str, sensor: Path | None, sensor_id: str | None,
            prompt_version: str, timings: bool, backend_spec: str | None, as_json: bool) -> None:
    """Classify one clip for one task."""
    ctx_sensor = _pick_sensor(sensor, sensor_id)
    if ctx_sensor is not None and not task.kind.is_wetness:
        raise click.UsageError("sensor data is only used for wetness tasks")
    gateway, _agent1, agent2 = env.backends(backend_spec)
    job = AnalysisJob(task=task, clip=clip, mode=Mode(mode), sensor=ctx_sensor,
                      prompt_version=prompt_version, backend=agent2)
    result = env.analyzer(gateway).analyze(job)
    data = result.to_dict(include_timings=timings)
    _emit(data, as_json, lambda: f"{result.clip_id} {task.slug}: {result.label.value}\n")


@cli.command()
@click.argument("clip", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@mode_option
@with_sensor
@click.option("--timings", is_flag=True, help="Include per-stage timings (not deterministic).")
@common
@click.pass_obj
@guarded
def scene(env: Env, clip: Path, mode: str, sensor: Path | None, sensor_id: str | None, timings: bool,
          backend_spec: str | None, as_json: bool) -> None:
    """Weather, wetness and both congestion directions for one clip."""
    gateway, _agent1, agent2 = env.backends(backend_spec)
    report = env.analyzer(gateway).analyze_scene(clip, _pick_sensor(sensor, sensor_id), mode=Mode(mode), backend=agent2)

    def text() -> str:
        labels = report.labels()
        lines = [f"clip: {report.clip_id}", f"weather: {labels['weather']}", f"wetness: {labels['wetness']}"]
        lines += [f"congestion {d}: {v}" for d, v in sorted(labels["congestion"].items())]
        lines += [f"error {k}: {v}" for k, v in sorted(report.errors.items())]
        return "\n".join(lines) + "\n"

    _emit(report.to_dict(include_timings=timings), as_json, text)
    if report.errors:
        sys.exit(EXIT_RUNTIME)


@cli.command("gen-prompt")
@click.option("--task", "kind", required=True, callback=_kind_arg,
              help="weather, wetness-rain, wetness-snow or congestion.")
@click.option("--clip", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Exemplar clip whose frames are shown to Agent 1.")
@with_sensor
@click.option("--version", "version", help="Version to assign (default: next minor).")
@click.option("--dry-run", is_flag=True, help="Print the bundle; write nothing.")
@click.option("--scenario", help="Scripted scenario name for the mock backend.")
@common
@click.pass_obj
@guarded
def gen_prompt(env: Env, kind: TaskKind, clip: Path | None, sensor: Path | None, sensor_id: str | None,
               version: str | None, dry_run: bool, scenario: str | None, backend_spec: str | None,
               as_json: bool) -> None:
    """Ask Agent 1 for a CoT prompt and store it if it passes validation."""
    gateway, agent1, _agent2 = env.backends(backend_spec)
    store = env.store()
    task = CONGESTION_INBOUND if kind is TaskKind.CONGESTION else Task(kind)
    frames = env.analyzer(gateway).sample(clip) if clip else None
    brief = Agent1Brief(task, frames=frames, sensor=_pick_sensor(sensor, sensor_id))
    response = gateway.complete(build_agent1_request(brief, agent1, scenario), agent1)
    bundle = compile_cot(kind, response, version or store.next_version(kind))
    path = None if dry_run else store.put(bundle)
    data = {"task": kind.value, "version": bundle.version, "origin": bundle.origin.value,
            "dry_run": dry_run, "path": str(path) if path else None}
    if dry_run:
        data["bundle"] = render_bundle(bundle)
    _emit(data, as_json, lambda: render_bundle(bundle) if dry_run else f"wrote {path}\n")


@cli.command("validate-prompt")
@click.argument("bundle_file", required=False, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--task", "kind", callback=_kind_arg, help="Validate a stored bundle of this task.")
@click.option("--version", "version", default=LATEST, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Machine-readable JSON output.")
@click.pass_obj
@guarded
def validate_prompt(env: Env, bundle_file: Path | None, kind: TaskKind | None, version: str, as_json: bool) -> None:
    """Check a prompt bundle (file or stored) for every required anchor."""
    if bundle_file is not None:
        text = bundle_file.read_text("utf-8")
        if text.startswith("---"):
            try:
                bundle = parse_bundle(text, str(bundle_file))
            except ValidationFailed as exc:
                missing = list(exc.missing)
                kind = kind or _front_matter_task(text)
            else:
                kind, missing = bundle.task, []
        else:
            if kind is None:
                raise click.UsageError("plain prompt files need --task")
            missing = list(validate_cot(kind, text).missing)
    else:
        if kind is None:
            raise click.UsageError("give a bundle file or --task")
        bundle = env.store().get(kind, version)
        missing = list(validate_cot(kind, bundle.cot_text).missing)
    data = {"task": kind.value if kind else None, "valid": not missing, "missing": missing}
    _emit(data, as_json, lambda: "ok\n" if not missing else "missing anchors:\n" + "".join(f"  {m}\n" for m in missing))
    if missing:
        sys.exit(EXIT_RUNTIME)


def _front_matter_task(text: str) -> TaskKind | None:
    for line in text.splitlines()[1:]:
        if line.startswith("task:"):
            try:
                return TaskKind(line.split(":", 1)[1].strip().strip("'\""))
            except ValueError:
                return None
    return None


@cli.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@mode_option
@click.option("--modality", type=click.Choice(["video", "multimodal"]), default="video", show_default=True)
@click.option("--sensors", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Sensor CSV keyed by record_id, required for --modality multimodal.")
@click.option("--prompt-version", default=LATEST, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=Path("reports"),
              show_default=True)
@click.option("--stem", help="Report file stem (default: <mode>-<modality>).")
@click.option("--parallelism", type=click.IntRange(min=1), help="Concurrent analyses (default: config).")
@click.option("--max-failure-rate", type=click.FloatRange(0, 1),
              help="Exit 1 when the share of failed clips exceeds this.")
@click.option("--keep-surface-condition", is_flag=True,
              help="Do not redact the station's surface-condition field from multimodal prompts.")
@common
@click.pass_obj
@guarded
def evaluate_cmd(env: Env, manifest: Path, mode: str, modality: str, sensors: Path | None, prompt_version: str,
                 out_dir: Path, stem: str | None, parallelism: int | None, max_failure_rate: float | None,
                 keep_surface_condition: bool, backend_spec: str | None, as_json: bool) -> None:
    """Run a labeled manifest and write JSON, text and CSV reports."""
    entries = load_manifest(manifest)
    records = load_sensor_csv(sensors) if sensors else None
    gateway, _agent1, agent2 = env.backends(backend_spec)
    run = RunConfig(mode=Mode(mode), modality=modality, prompt_version=prompt_version, backend=agent2,
                    parallelism=parallelism or env.config.parallelism,
                    redact_surface_condition=not keep_surface_condition)
    report = evaluate(entries, run, env.analyzer(gateway), records)
    paths = write_report(report, out_dir, stem or f"{mode}-{modality}")
    data = {"report": report.to_dict(include_timings=False), "paths": {k: str(v) for k, v in paths.items()}}
    _emit(data, as_json, lambda: render_report(report) + f"written: {paths['json']}\n")
    if max_failure_rate is not None and report.failure_rate > max_failure_rate:
        click.echo(f"error: failure rate {report.failure_rate:.3f} exceeds {max_failure_rate}", err=True)
        sys.exit(EXIT_RUNTIME)


evaluate_cmd.name = "evaluate"


@cli.command()
@click.argument("baseline", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("treatment", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--csv", "csv_out", type=click.Path(dir_okay=False, path_type=Path), help="Also write the table as CSV.")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable JSON output.")
@guarded
def compare(baseline: Path, treatment: Path, csv_out: Path | None, as_json: bool) -> None:
    """Ablation table: treatment accuracy with the change from baseline."""
    try:
        a, b = EvalReport.load(baseline), EvalReport.load(treatment)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read report: {exc}") from exc
    table = ablation_table(a, b)
    if csv_out is not None:
        csv_out.write_text(table.render_csv(), encoding="utf-8")
    data = {
        "baseline_title": table.baseline_title,
        "treatment_title": table.treatment_title,
        "rows": [
            {"task": r.task, "condition": r.label, "baseline": None if r.baseline.accuracy is None else str(r.baseline.accuracy),
             "treatment": None if r.treatment.accuracy is None else str(r.treatment.accuracy), "cell": r.cell}
            for r in table.rows
        ],
    }
    _emit(data, as_json, table.render_text)


@cli.command()
@click.argument("service_config", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--health-port", type=int, help="Serve JSON health on this local port (overrides config).")
@click.option("--once", is_flag=True, help="Run a single tick per site, deliver alerts and exit.")
@common
@click.pass_obj
@guarded
def serve(env: Env, service_config: Path, health_port: int | None, once: bool, backend_spec: str | None,
          as_json: bool) -> None:
    """Poll camera sites and raise debounced hazard alerts."""
    data = load_service_config(service_config)
    base = service_config.parent
    sinks: list[Any] = []
    if data.get("alert_log"):
        sinks.append(AlertLogSink(base / data["alert_log"]))
    if data.get("webhook_url"):
        sinks.append(WebhookSink(data["webhook_url"]))
    if not sinks:
        raise ConfigError("service config needs alert_log and/or webhook_url")
    gateway, _agent1, agent2 = env.backends(backend_spec)
    service = MonitorService(
        data["sites"], env.analyzer(gateway), sinks, base / data.get("report_dir", "reports"), agent2,
        mode=Mode(data.get("mode", Mode.COT.value)), degraded_after=int(data.get("degraded_after", 3)),
        workers=env.config.parallelism,
    )
    if once:
        alerts = [a.payload() for sid in sorted(service.sites) for a in service.tick(sid)]
        service.dispatch_pending()
        health = service.health_snapshot()
        _emit({"alerts": alerts, "health": health}, as_json,
              lambda: "".join(f"{a['site_id']}: {a['label']} ({a['task']})\n" for a in alerts) or "no alerts\n")
        if any(h["consecutive_failures"] for h in health.values()):
            sys.exit(EXIT_RUNTIME)
        return
    port = health_port if health_port is not None else data.get("health_port")
    if port is not None:
        service.serve_health(int(port))
    signal.signal(signal.SIGTERM, lambda *_: service.stop())
    try:
        service.run(drain_deadline_s=float(data.get("drain_deadline_s", 30)))
    except KeyboardInterrupt:
        service.stop()


@cli.command("export-prompt")
@click.option("--task", "kind", required=True, callback=_kind_arg)
@click.option("--version", "version", default=LATEST, show_default=True)
@click.argument("dest", type=click.Path(path_type=Path))
@click.option("--json", "as_json", is_flag=True, help="Machine-readable JSON output.")
@click.pass_obj
@guarded
def export_prompt(env: Env, kind: TaskKind, version: str, dest: Path, as_json: bool) -> None:
    """Write a stored bundle to a file or directory."""
    path = env.store().export(kind, version, dest)
    _emit({"path": str(path)}, as_json, f"wrote {path}\n")


@cli.command("import-prompt")
@click.argument("bundle_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--json", "as_json", is_flag=True, help="Machine-readable JSON output.")
@click.pass_obj
@guarded
def import_prompt(env: Env, bundle_file: Path, as_json: bool) -> None:
    """Add a validated bundle file to the prompt store."""
    bundle = env.store().import_file(bundle_file)
    _emit({"task": bundle.task.value, "version": bundle.version}, as_json,
          f"imported {bundle.task.value}@{bundle.version}\n")


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="roadscene", standalone_mode=True)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else (0 if code is None else EXIT_RUNTIME)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
