"""Road-weather-station records: CSV parsing, prompt rendering, ice advisories.

Two schemas exist depending on what the nearest station reported. Column
names in CSV files match the field names below; ``record_id`` keys a row for
manifests, ``station_id`` and ``distance_to_camera`` are optional.

Partial: datetime, current_weather, precipitation, temp_high, temp_low, elevation
Full:    datetime, relative_humidity, wind_speed, wind_direction, air_temp,
         surface_temp, visibility, dew_point, surface_condition, precipitation

Units are fixed: °F, mph, miles, feet, percent.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, fields
from datetime import datetime
from pathlib import Path
from typing import Mapping, Union

from .errors import InvariantViolation, MalformedValue, MissingField


class Schema(str, enum.Enum):
    PARTIAL = "partial"
    FULL = "full"


@dataclass(frozen=True)
class PartialSensorRecord:
    datetime: datetime
    current_weather: str
    precipitation: str
    temp_high: float
    temp_low: float
    elevation: float

    def __post_init__(self) -> None:
        if self.temp_low > self.temp_high:
            raise InvariantViolation(f"temp_low {self.temp_low} exceeds temp_high {self.temp_high}")


# Dew point may read slightly above air temperature from sensor noise.
DEW_POINT_TOLERANCE_F = 0.5


@dataclass(frozen=True)
class FullSensorRecord:
    datetime: datetime
    relative_humidity: float
    wind_speed: float
    wind_direction: str
    air_temp: float
    surface_temp: float
    visibility: float
    dew_point: float
    surface_condition: str
    precipitation: str

    def __post_init__(self) -> None:
        if not 0 <= self.relative_humidity <= 100:
            raise InvariantViolation(f"relative_humidity {self.relative_humidity} outside [0, 100]")
        if self.wind_speed < 0:
            raise InvariantViolation(f"wind_speed {self.wind_speed} is negative")
        if self.visibility < 0:
            raise InvariantViolation(f"visibility {self.visibility} is negative")
        if self.dew_point > self.air_temp + DEW_POINT_TOLERANCE_F:
            raise InvariantViolation(f"dew_point {self.dew_point} above air_temp {self.air_temp}")


SensorRecord = Union[PartialSensorRecord, FullSensorRecord]

_RECORD_TYPES = {Schema.PARTIAL: PartialSensorRecord, Schema.FULL: FullSensorRecord}
_TEXT_FIELDS = {"current_weather", "precipitation", "wind_direction", "surface_condition"}


def schema_columns(schema: Schema) -> list[str]:
    return [f.name for f in fields(_RECORD_TYPES[schema])]


@dataclass(frozen=True)
class SensorContext:
    record: SensorRecord
    station_id: str = ""
    distance_to_camera: float | None = None

    @property
    def schema(self) -> Schema:
        return Schema.FULL if isinstance(self.record, FullSensorRecord) else Schema.PARTIAL


_DATETIME_FORMATS = ("%m/%d/%Y %H:%M", "%m/%d/%Y %H:%M:%S", "%m/%d/%Y %I:%M %p", "%Y-%m-%d %H:%M")


def _parse_datetime(raw: str) -> datetime:
    try:
        return datetime.fromisoformat(raw)
    except ValueError:
        pass
    for fmt in _DATETIME_FORMATS:
        try:
            return datetime.strptime(raw, fmt)
        except ValueError:
            continue
    raise MalformedValue("datetime", raw)


def _parse_number(name: str, raw: str) -> float:
    try:
        value = float(raw.strip().rstrip("%"))
    except ValueError:
        raise MalformedValue(name, raw) from None
    if not math.isfinite(value):
        raise MalformedValue(name, raw)
    return value


def parse_record(row: Mapping[str, str | None], schema: Schema | str) -> SensorContext:
    """Build a context from one CSV row (e.g. a ``csv.DictReader`` row)."""
    schema = Schema(schema)
    values: dict[str, object] = {}
    for name in schema_columns(schema):
        raw = row.get(name)
        if raw is None:
            raise MissingField(name)
        if name == "datetime":
            values[name] = _parse_datetime(raw.strip())
        elif name in _TEXT_FIELDS:
            values[name] = raw
        else:
            values[name] = _parse_number(name, raw)
    distance_raw = (row.get("distance_to_camera") or "").strip()
    distance = _parse_number("distance_to_camera", distance_raw) if distance_raw else None
    record = _RECORD_TYPES[schema](**values)
    return SensorContext(record, station_id=(row.get("station_id") or "").strip(), distance_to_camera=distance)


def detect_schema(columns: list[str] | tuple[str, ...]) -> Schema:
    present = set(columns)
    if "relative_humidity" in present or "air_temp" in present:
        return Schema.FULL
    return Schema.PARTIAL


def load_sensor_csv(path: str | Path, schema: Schema | str | None = None) -> dict[str, SensorContext]:
    """Read a sensor CSV into ``{record_id: SensorContext}``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise MissingField("record_id")
        resolved = Schema(schema) if schema else detect_schema(reader.fieldnames)
        if "record_id" not in reader.fieldnames:
            raise MissingField("record_id")
        out: dict[str, SensorContext] = {}
        for row in reader:
            key = (row.get("record_id") or "").strip()
            if not key:
                raise MalformedValue("record_id", "")
            if key in out:
                raise InvariantViolation(f"duplicate record_id {key!r} in {path}")
            out[key] = parse_record(row, resolved)
    return out


def _num(value: float) -> str:
    # repr is the shortest round-tripping form, keeping rendering injective.
    text = repr(float(value))
    return text[:-2] if text.endswith(".0") else text


class IceFlag(str, enum.Enum):
    FREEZING_SURFACE = "FreezingSurface"
    HIGH_HUMIDITY_NEAR_DEW = "HighHumidityNearDew"


@dataclass(frozen=True)
class IceThresholds:
    freezing_f: float = 32.0
    humidity_pct: float = 85.0
    dew_spread_f: float = 3.0


_FLAG_TEXT = {
    IceFlag.FREEZING_SURFACE: "temperature at or below freezing",
    IceFlag.HIGH_HUMIDITY_NEAR_DEW: "high humidity or air temperature near the dew point",
}


def ice_risk_flags(record: SensorRecord, thresholds: IceThresholds = IceThresholds()) -> list[IceFlag]:
    """Advisory ice-risk annotations. These never decide a label."""
    flags: list[IceFlag] = []
    if isinstance(record, FullSensorRecord):
        if min(record.surface_temp, record.air_temp) <= thresholds.freezing_f:
            flags.append(IceFlag.FREEZING_SURFACE)
        if (
            record.relative_humidity >= thresholds.humidity_pct
            or record.air_temp - record.dew_point <= thresholds.dew_spread_f
        ):
            flags.append(IceFlag.HIGH_HUMIDITY_NEAR_DEW)
    elif record.temp_low <= thresholds.freezing_f:
        flags.append(IceFlag.FREEZING_SURFACE)
    return flags


def _record_lines(record: SensorRecord, redact_surface_condition: bool) -> list[str]:
    stamp = record.datetime.isoformat(sep=" ")
    if isinstance(record, PartialSensorRecord):
        return [
            f"Date/Time: {stamp}",
            f"Current Weather: {record.current_weather}",
            f"Weather Precipitation: {record.precipitation}",
            f"Temperature High/Low: {_num(record.temp_high)} °F / {_num(record.temp_low)} °F",
            f"Elevation: {_num(record.elevation)} ft",
        ]
    surface = "[redacted]" if redact_surface_condition else record.surface_condition
    return [
        f"Date/Time: {stamp}",
        f"Relative Humidity: {_num(record.relative_humidity)} %",
        f"Wind Speed: {_num(record.wind_speed)} mph",
        f"Wind Direction: {record.wind_direction}",
        f"Air Temperature: {_num(record.air_temp)} °F",
        f"Surface Temperature: {_num(record.surface_temp)} °F",
        f"Visibility: {_num(record.visibility)} mi",
        f"Dew Point Temperature: {_num(record.dew_point)} °F",
        f"Surface Condition: {surface}",
        f"Precipitation: {record.precipitation}",
    ]


def render_context(
    ctx: SensorContext,
    *,
    redact_surface_condition: bool = False,
    include_advisories: bool = True,
    thresholds: IceThresholds = IceThresholds(),
) -> str:
    """Render a context as a labeled text block, one line per field."""
    where = []
    if ctx.station_id:
        where.append(f"station {ctx.station_id}")
    if ctx.distance_to_camera is not None:
        where.append(f"{_num(ctx.distance_to_camera)} mi from the camera")
    header = f"Road weather station readings ({ctx.schema.value} record"
    header += (", " + ", ".join(where) + "):") if where else "):"
    lines = [header] + _record_lines(ctx.record, redact_surface_condition)
    if include_advisories:
        flags = ice_risk_flags(ctx.record, thresholds)
        if flags:
            notes = "; ".join(f"{f.value} ({_FLAG_TEXT[f]})" for f in flags)
            lines.append(f"Advisory (not a classification): {notes}")
    return "\n".join(lines)
