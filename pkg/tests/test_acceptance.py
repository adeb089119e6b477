"""Acceptance criteria 1 to 10, one test each.

Every test records PASS or FAIL in ``ACCEPTANCE_RESULTS``; the session prints
one line per criterion in the terminal summary. Criterion 11 needs real model
endpoints and lives in test_live.py.
"""

from __future__ import annotations

import itertools
import json
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from datetime import datetime, timedelta, timezone
from decimal import Decimal
from pathlib import Path

import pytest

from roadscene.errors import GatewayError, InvariantViolation, MalformedResponse, SourceError, VerdictError
from roadscene.evaluation import RunConfig, ablation_cell, evaluate, load_manifest, percent
from roadscene.frames import SamplerConfig, sample_frames
from roadscene.gateway import BackendConfig, Gateway, ModelResponse, RetryPolicy, ScriptedBackend, TextPart, build_request
from roadscene.monitor import AlertLogSink, MonitorService, SiteConfig
from roadscene.pipeline import AnalysisJob
from roadscene.prompts import PromptStore, required_anchors, validate_cot
from roadscene.prompts.compiler import FLOOD_DIRECTIVE, FULLY_WET_THRESHOLD
from roadscene.sensors import (
    FullSensorRecord,
    IceFlag,
    PartialSensorRecord,
    Schema,
    SensorContext,
    ice_risk_flags,
    parse_record,
    render_context,
    schema_columns,
)
from roadscene.taxonomy import CONGESTION_INBOUND, WETNESS_RAIN, CongestionLabel, TaskKind, WetnessClass
from roadscene.verdict import VisualPressure, apply_flood_priority, gate_congestion, parse_verdict

from .conftest import (
    ACCEPTANCE_RESULTS,
    TWELVE_CLIPS,
    SyntheticDecoder,
    congestion_reply,
    make_analyzer,
    twelve_clip_script,
    write_manifest,
)
from .malformed_corpus import CORPUS

pytestmark = pytest.mark.acceptance


@contextmanager
def criterion(number: int, title: str):
    try:
        yield
    except BaseException:
        ACCEPTANCE_RESULTS[number] = ("FAIL", title)
        print(f"criterion {number}: FAIL  {title}")
        raise
    ACCEPTANCE_RESULTS[number] = ("PASS", title)
    print(f"criterion {number}: PASS  {title}")


# Written out by hand from the decision rule, not computed from it.
GATE_TABLE = {
    ("strong", True): "congested", ("strong", False): "congested",
    ("moderate", True): "congested", ("moderate", False): "unobstructed",
    ("weak", True): "unobstructed", ("weak", False): "unobstructed",
}


def test_criterion_01_gate_table():
    with criterion(1, "gating table exhaustive, 10k monotonicity samples, under 1 s"):
        start = time.perf_counter()
        for (pressure, slow), label in GATE_TABLE.items():
            assert gate_congestion(VisualPressure(pressure), slow).value == label
        rank = {"weak": 0, "moderate": 1, "strong": 2}
        severity = {CongestionLabel.UNOBSTRUCTED: 0, CongestionLabel.CONGESTED: 1}
        rng = random.Random(1)
        levels = list(rank)
        for _ in range(10_000):
            p, q = rng.choice(levels), rng.choice(levels)
            s, t = rng.random() < 0.5, rng.random() < 0.5
            if rank[p] > rank[q]:
                p, q = q, p
            s, t = s and t, s or t
            # raising pressure or slowing flow never un-congests a scene
            assert severity[gate_congestion(VisualPressure(p), s)] <= severity[gate_congestion(VisualPressure(q), t)]
        assert time.perf_counter() - start < 1.0


RAIN = [WetnessClass.DRY, WetnessClass.RAINY_PARTIALLY_WET, WetnessClass.RAINY_FULLY_WET, WetnessClass.RAINY_FLOODED]


def test_criterion_02_flood_priority():
    with criterion(2, "flood priority over all 15 rain candidate sets, under 1 s"):
        start = time.perf_counter()
        subsets = [set(c) for r in range(1, 5) for c in itertools.combinations(RAIN, r)]
        assert len(subsets) == 15
        for pool in subsets:
            chosen = apply_flood_priority(pool)
            assert chosen in pool
            if WetnessClass.RAINY_FLOODED in pool:
                assert chosen is WetnessClass.RAINY_FLOODED
        assert time.perf_counter() - start < 1.0


def test_criterion_03_sampling_determinism():
    with criterion(3, "floor-formula frame indices for 100 clips x k in {1,2,8,16}, stable across runs"):
        rng = random.Random(3)
        lengths = [rng.randint(1, 300) for _ in range(100)]
        clips = {f"clip{i}": (n, 10.0) for i, n in enumerate(lengths)}

        def run() -> dict:
            decoder = SyntheticDecoder(clips)
            out = {}
            for name in clips:
                for k in (1, 2, 8, 16):
                    seq = sample_frames(f"{name}.mp4", SamplerConfig(target_count=k), decoder=decoder)
                    # what the decoder was actually asked for must match what the sequence reports
                    assert decoder.extracted[-1] == seq.indices
                    out[(name, k)] = (seq.indices, tuple(f.data for f in seq.frames))
            return out

        first, second = run(), run()
        assert first == second
        for (name, k), (got, _data) in first.items():
            n = clips[name][0]
            m = min(k, n)
            expected = (0,) if m == 1 else tuple(i * (n - 1) // (m - 1) for i in range(m))
            assert got == expected, (name, n, k)


def delete_anchor(text: str, anchor: str) -> str:
    pattern = r"\s+".join(re.escape(w) for w in anchor.split())
    return re.sub(pattern, "", text, flags=re.I)


def test_criterion_04_anchor_gate():
    with criterion(4, "curated bundles valid; each deleted anchor is named alone"):
        store = PromptStore()
        assert FULLY_WET_THRESHOLD == "over 80% of vehicles per frame"
        assert FLOOD_DIRECTIVE == "always choose flooded"
        assert {FULLY_WET_THRESHOLD, FLOOD_DIRECTIVE} <= set(required_anchors(TaskKind.WETNESS_RAIN))
        for kind in TaskKind:
            text = store.get(kind).cot_text
            assert validate_cot(kind, text).ok, kind
            for anchor in required_anchors(kind):
                mutated = delete_anchor(text, anchor)
                assert mutated != text
                assert validate_cot(kind, mutated).missing == (anchor,), (kind, anchor)


def test_criterion_05_ablation_cells():
    with criterion(5, "ablation cells match published strings byte for byte"):
        cases = [((61, 66), (63, 66), "95.45 (↑3.03)"), ((12, 20), (16, 20), "80.00 (↑20.00)"),
                 ((1, 5), (5, 5), "100.00 (↑80.00)")]
        for base, treat, expected in cases:
            cell = ablation_cell(percent(*base), percent(*treat))
            assert cell.encode("utf-8") == expected.encode("utf-8")
        assert percent(61, 66) == Decimal("92.42")


def test_criterion_06_end_to_end_determinism(tmp_path):
    with criterion(6, "12-clip scripted evaluation JSON identical across runs and orderings"):
        entries = load_manifest(write_manifest(tmp_path / "m.csv", TWELVE_CLIPS))
        assert len(entries) == 12
        assert sorted({e.task.kind.value for e in entries}) == ["congestion", "weather", "wetness-rain", "wetness-snow"]

        def run(order) -> str:
            analyzer, backend, _ = make_analyzer(twelve_clip_script())
            return evaluate(order, RunConfig(backend=backend), analyzer).to_json(include_timings=False)

        outputs = [run(entries) for _ in range(3)]
        rng = random.Random(6)
        for _ in range(3):
            shuffled = entries[:]
            rng.shuffle(shuffled)
            outputs.append(run(shuffled))
        outputs.append(run(entries[::-1]))
        assert len(set(outputs)) == 1
        assert json.loads(outputs[0])["records"]


def test_criterion_07_parser_robustness():
    with criterion(7, "30 malformed outputs raise their errors; re-ask path exercised"):
        assert len(CORPUS) == 30
        for name, task, text, error in CORPUS:
            try:
                parse_verdict(task, text)
            except VerdictError as exc:
                assert isinstance(exc, error), (name, type(exc))
            else:
                raise AssertionError(f"{name}: parsed without error")

        script = {"c1/congestion:inbound": ["No final line here.", congestion_reply("strong", False, "congested")]}
        analyzer, backend, transport = make_analyzer(script)
        result = analyzer.analyze(AnalysisJob(CONGESTION_INBOUND, clip="c1.mp4", backend=backend))
        assert result.reasked and result.label is CongestionLabel.CONGESTED
        assert len(transport.calls) == 2

        analyzer, backend, transport = make_analyzer({"c1/wetness-rain": ["garbled", "still garbled", "FINAL: dry"]})
        with pytest.raises(MalformedResponse):
            analyzer.analyze(AnalysisJob(WETNESS_RAIN, clip="c1.mp4", backend=backend))
        assert len(transport.calls) == 2


def test_criterion_08_gateway_resilience():
    with criterion(8, "retries within policy, non-decreasing backoff, cap held under 64 concurrent requests"):
        transient = [429, 500, 503, {"error": "timeout"}, 408]
        rng = random.Random(8)
        for _ in range(200):
            max_attempts = rng.randint(1, 5)
            failures = [rng.choice(transient) for _ in range(rng.randint(0, 6))]
            sleeps: list[float] = []
            gw = Gateway({"agent2": ScriptedBackend({"s": [*failures, "FINAL: clear"]})}, sleep=sleeps.append)
            backend = BackendConfig(name="agent2", kind="scripted",
                                    retry=RetryPolicy(max_attempts=max_attempts, backoff_base_s=0.5))
            req = build_request("sys", [TextPart("x")], backend, {"scenario": "s"})
            try:
                resp = gw.complete(req, backend)
                assert resp.attempts == len(failures) + 1
            except GatewayError:
                assert len(failures) >= max_attempts
            m = gw.metrics["agent2"]
            assert m.attempts <= max_attempts
            assert len(sleeps) == m.attempts - 1
            assert all(b >= a for a, b in zip(sleeps, sleeps[1:]))

        cap = 4
        lock = threading.Lock()
        active = peak = 0

        class Counting:
            def send(self, req, backend):
                nonlocal active, peak
                with lock:
                    active += 1
                    peak = max(peak, active)
                time.sleep(0.002)
                with lock:
                    active -= 1
                return ModelResponse("FINAL: clear", "m", 1.0)

        gw = Gateway({"agent2": Counting()})
        backend = BackendConfig(name="agent2", kind="scripted", parallelism=cap)
        req = build_request("sys", [TextPart("x")], backend, {"scenario": "s"})
        start = threading.Barrier(64)

        def go(_):
            start.wait()
            return gw.complete(req, backend)

        with ThreadPoolExecutor(64) as pool:
            results = list(pool.map(go, range(64)))
        assert len(results) == 64
        assert peak <= cap
        assert gw.metrics["agent2"].peak_in_flight <= cap


def _row_from_rendered(text: str, schema: Schema) -> dict[str, str]:
    """Invert the rendered block back into CSV-style cells."""
    body = dict(line.split(": ", 1) for line in text.splitlines()[1:] if not line.startswith("Advisory"))
    stamp = datetime.fromisoformat(body["Date/Time"]).strftime("%Y-%m-%d %H:%M")
    unit = re.compile(r" (?:%|mph|°F|mi|ft)$")
    if schema is Schema.PARTIAL:
        high, low = body["Temperature High/Low"].split(" / ")
        return {"datetime": stamp, "current_weather": body["Current Weather"],
                "precipitation": body["Weather Precipitation"], "temp_high": unit.sub("", high),
                "temp_low": unit.sub("", low), "elevation": unit.sub("", body["Elevation"])}
    names = {"Relative Humidity": "relative_humidity", "Wind Speed": "wind_speed", "Wind Direction": "wind_direction",
             "Air Temperature": "air_temp", "Surface Temperature": "surface_temp", "Visibility": "visibility",
             "Dew Point Temperature": "dew_point", "Surface Condition": "surface_condition",
             "Precipitation": "precipitation"}
    row = {col: unit.sub("", body[label]) for label, col in names.items()}
    row["datetime"] = stamp
    return row


def _random_row(rng: random.Random, schema: Schema, i: int) -> dict[str, str]:
    stamp = (datetime(2024, 1, 1) + timedelta(minutes=37 * i)).strftime("%Y-%m-%d %H:%M")
    if schema is Schema.PARTIAL:
        low = round(rng.uniform(-10, 60), 1)
        return {"datetime": stamp, "current_weather": rng.choice(["Snow", "Rain", "Cloudy", "Clear"]),
                "precipitation": rng.choice(["0 in", "0.2 in", "1.1 in"]), "temp_high": str(low + rng.randint(0, 20)),
                "temp_low": str(low), "elevation": str(rng.randint(0, 9000))}
    air = round(rng.uniform(-10, 70), 1)
    return {"datetime": stamp, "relative_humidity": str(rng.randint(0, 100)), "wind_speed": str(round(rng.uniform(0, 40), 1)),
            "wind_direction": rng.choice(["N", "NE", "SW", "W"]), "air_temp": str(air),
            "surface_temp": str(round(air + rng.uniform(-5, 5), 1)), "visibility": str(round(rng.uniform(0, 10), 2)),
            "dew_point": str(round(air - rng.uniform(0, 25), 1)), "surface_condition": rng.choice(["Dry", "Wet", "Ice Warning"]),
            "precipitation": rng.choice(["None", "Light snow", "Rain"])}


def test_criterion_09_sensor_ingestion():
    with criterion(9, "sensor render round trip for 20+20 records, 10k ice-flag perturbations, humidity range"):
        rng = random.Random(9)
        for schema in (Schema.FULL, Schema.PARTIAL):
            for i in range(20):
                row = _random_row(rng, schema, i)
                assert set(row) == set(schema_columns(schema))
                ctx = parse_record(row, schema)
                rendered = render_context(ctx)
                assert rendered == render_context(parse_record(dict(row), schema))
                again = parse_record(_row_from_rendered(rendered, schema), schema)
                assert again.record == ctx.record
                assert render_context(again) == rendered

        order = {IceFlag.FREEZING_SURFACE, IceFlag.HIGH_HUMIDITY_NEAR_DEW}
        for _ in range(10_000):
            air = rng.uniform(-20, 80)
            rec = FullSensorRecord(datetime(2024, 1, 1), rng.uniform(0, 100), 5.0, "N", air, air + rng.uniform(-10, 10),
                                   5.0, air - rng.uniform(0, 20), "Dry", "None")
            colder = FullSensorRecord(
                rec.datetime, min(100.0, rec.relative_humidity + rng.uniform(0, 10)), 5.0, "N", rec.air_temp,
                rec.surface_temp - rng.uniform(0, 10), 5.0, min(rec.air_temp, rec.dew_point + rng.uniform(0, 5)),
                "Dry", "None",
            )
            assert set(ice_risk_flags(rec)) <= set(ice_risk_flags(colder)) <= order
            low = rng.uniform(-20, 80)
            part = PartialSensorRecord(rec.datetime, "Snow", "", low + 5, low, 100.0)
            cooler = PartialSensorRecord(rec.datetime, "Snow", "", low + 5, low - rng.uniform(0, 10), 100.0)
            assert set(ice_risk_flags(part)) <= set(ice_risk_flags(cooler))

        base = _random_row(rng, Schema.FULL, 0)
        for bad in ("101", "-1", "150.5"):
            with pytest.raises(InvariantViolation):
                parse_record({**base, "relative_humidity": bad}, Schema.FULL)
        assert isinstance(parse_record({**base, "relative_humidity": "100"}, Schema.FULL), SensorContext)


class _FlakySource:
    def __init__(self, path: Path, fail_ticks: set[int]):
        self.path, self.fail_ticks, self.n = path, fail_ticks, 0

    def fetch(self) -> Path:
        self.n += 1
        if self.n in self.fail_ticks:
            raise SourceError("camera offline")
        return self.path


def _flooded_service(tmp_path: Path, debounce_s: float, fail_ticks=frozenset()):
    script = {
        "cam/weather": "FINAL: rainy",
        "cam/wetness-rain": "FINAL: rainy flooded",
        "cam/congestion:inbound": congestion_reply("weak", False, "unobstructed"),
        "cam/congestion:outbound": congestion_reply("weak", False, "unobstructed"),
    }
    analyzer, backend, _ = make_analyzer(script)
    log = AlertLogSink(tmp_path / f"alerts-{int(debounce_s)}.jsonl")
    site = SiteConfig("i70", source="unused", poll_interval_s=60, debounce_s=debounce_s)
    svc = MonitorService([site], analyzer, [log], tmp_path / "reports", backend,
                         sources={"i70": _FlakySource(tmp_path / "cam.mp4", set(fail_ticks))})
    return svc, log


def test_criterion_10_monitor_debounce(tmp_path):
    with criterion(10, "10-tick flooded run: one alert per debounce window; health tracks failures"):
        t0 = 1_700_000_000.0
        for window, expected in ((900, [0]), (180, [0, 180, 360, 540]), (60, [60 * i for i in range(10)])):
            svc, log = _flooded_service(tmp_path, window)
            for i in range(10):
                svc.tick("i70", t0 + 60 * i)
            svc.dispatch_pending()
            lines = [json.loads(x) for x in log.path.read_text().splitlines()]
            assert [datetime.fromisoformat(x["timestamp"]).timestamp() - t0 for x in lines] == expected
            assert {x["label"] for x in lines} == {"rainy flooded"}
            assert len({x["dedupe_key"] for x in lines}) == len(lines)

        svc, log = _flooded_service(tmp_path, 900, fail_ticks={2, 3, 4})
        seen = []
        for i in range(6):
            svc.tick("i70", t0 + 60 * i)
            seen.append(svc.health_snapshot()["i70"]["status"])
        assert seen == ["ok", "failing", "failing", "degraded", "ok", "ok"]
        snap = svc.health_snapshot()["i70"]
        assert snap["ticks"] == 6 and snap["consecutive_failures"] == 0
        assert snap["last_success"] == datetime.fromtimestamp(t0 + 300, tz=timezone.utc).isoformat()
