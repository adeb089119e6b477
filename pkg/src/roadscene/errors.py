"""Exception hierarchy shared by every roadscene module.

Pipeline stages annotate errors in flight by setting ``stage`` so callers can
tell a decoder failure from a backend failure without unwrapping.
"""

from __future__ import annotations


class RoadsceneError(Exception):
    """Base class. ``stage`` is filled in by the pipeline when known."""

    stage: str | None = None


class ConfigError(RoadsceneError):
    pass


# taxonomy


class UnknownLabel(RoadsceneError):
    def __init__(self, text: str, task: object):
        super().__init__(f"unknown label {text!r} for task {task}")
        self.text = text
        self.task = task


# frame sampling


class DecodeFailure(RoadsceneError):
    pass


class EmptyClip(RoadsceneError):
    pass


# sensor ingestion


class SensorError(RoadsceneError):
    pass


class MissingField(SensorError):
    def __init__(self, name: str):
        super().__init__(f"missing field {name!r}")
        self.name = name


class MalformedValue(SensorError):
    def __init__(self, name: str, raw: str):
        super().__init__(f"malformed value for {name!r}: {raw!r}")
        self.name = name
        self.raw = raw


class InvariantViolation(SensorError):
    pass


# prompts


class ValidationFailed(RoadsceneError):
    def __init__(self, missing: list[str]):
        super().__init__("CoT prompt is missing anchors: " + ", ".join(repr(m) for m in missing))
        self.missing = list(missing)


class PromptStoreError(RoadsceneError):
    pass


# gateway


class GatewayError(RoadsceneError):
    retriable = False


class Unauthorized(GatewayError):
    pass


class BadRequest(GatewayError):
    pass


class PayloadTooLarge(BadRequest):
    pass


class RateLimited(GatewayError):
    retriable = True


class Timeout(GatewayError):
    retriable = True


class BackendUnavailable(GatewayError):
    retriable = True


# verdicts


class VerdictError(RoadsceneError):
    pass


class MalformedResponse(VerdictError):
    pass


class MissingGatingFields(VerdictError):
    def __init__(self, missing: list[str]):
        super().__init__("missing gating fields: " + ", ".join(missing))
        self.missing = list(missing)


class UnknownVerdictLabel(VerdictError, UnknownLabel):
    """UnknownLabel raised while parsing a model response."""


# evaluation


class ManifestError(RoadsceneError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"manifest line {line}: {reason}")
        self.line = line
        self.reason = reason


class EmptyClass(RoadsceneError):
    pass


class ReportMismatch(RoadsceneError):
    pass


# monitoring


class SourceError(RoadsceneError):
    pass
