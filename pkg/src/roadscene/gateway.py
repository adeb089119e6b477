"""Chat-completion access for the large (Agent 1) and small (Agent 2) models.

Requests follow the OpenAI-compatible chat-completions shape with images sent
as base64 data URIs. ``Gateway.complete`` handles validation, per-backend
parallelism caps and retries; transports only do one attempt each.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence, Union

import httpx

from .errors import (
    BackendUnavailable,
    BadRequest,
    GatewayError,
    PayloadTooLarge,
    RateLimited,
    Timeout,
    Unauthorized,
)
from .frames import Frame, FrameSequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    media_type: str
    data_b64: str

    @property
    def data_uri(self) -> str:
        return f"data:{self.media_type};base64,{self.data_b64}"

    @property
    def nbytes(self) -> int:
        return len(self.data_b64)


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple[Part, ...]

    @classmethod
    def text(cls, role: str, text: str) -> Message:
        return cls(role, (TextPart(text),))


@dataclass(frozen=True)
class ModelRequest:
    messages: tuple[Message, ...]
    model_id: str = ""
    max_output_tokens: int = 1024
    temperature: float = 0.0
    # Routing hints for transports (scripted scenario keys); never sent on the wire.
    metadata: Mapping[str, str] = field(default_factory=dict)

    def texts(self) -> list[str]:
        return [p.text for m in self.messages for p in m.parts if isinstance(p, TextPart)]

    def full_text(self) -> str:
        return "\n".join(self.texts())

    def images(self) -> list[ImagePart]:
        return [p for m in self.messages for p in m.parts if isinstance(p, ImagePart)]

    def payload_bytes(self) -> int:
        return sum(len(t.encode("utf-8")) for t in self.texts()) + sum(i.nbytes for i in self.images())

    def with_messages(self, *extra: Message) -> ModelRequest:
        return replace(self, messages=self.messages + tuple(extra))


@dataclass
class ModelResponse:
    text: str
    model_id: str
    latency_ms: float
    token_usage: dict[str, int] | None = None
    truncated: bool = False
    attempts: int = 1
    backoff_delays: tuple[float, ...] = ()

    @property
    def retries(self) -> int:
        return self.attempts - 1


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base_s: float = 1.0
    backoff_factor: float = 2.0
    max_backoff_s: float = 30.0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.backoff_base_s < 0 or self.backoff_factor < 1:
            raise ValueError("backoff must be non-negative and non-shrinking")

    def delay(self, retry_number: int) -> float:
        """Sleep before retry ``retry_number`` (1-based); non-decreasing in it."""
        return min(self.max_backoff_s, self.backoff_base_s * self.backoff_factor ** (retry_number - 1))


@dataclass(frozen=True)
class BackendConfig:
    name: str = "agent2"
    kind: str = "http"
    endpoint: str = "https://api.openai.com/v1"
    path: str = "/chat/completions"
    model_id: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"
    timeout_s: float = 60.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    parallelism: int = 4
    max_images: int = 32
    max_payload_bytes: int = 20_000_000
    max_output_tokens: int = 1024
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> BackendConfig:
        data = dict(data)
        if "api_key" in data:
            raise ValueError("credentials must be referenced via api_key_env, not inlined")
        retry = data.pop("retry", None)
        if isinstance(retry, Mapping):
            data["retry"] = RetryPolicy(**retry)
        return cls(**data)


def validate_request(req: ModelRequest, backend: BackendConfig) -> None:
    """Reject requests a backend would refuse, before any network traffic."""
    if not any(t.strip() for t in req.texts()):
        raise BadRequest("request needs at least one non-empty text part")
    n_images = len(req.images())
    if n_images > backend.max_images:
        raise BadRequest(f"{n_images} images exceed the backend limit of {backend.max_images}")
    size = req.payload_bytes()
    if size > backend.max_payload_bytes:
        raise PayloadTooLarge(f"payload of {size} bytes exceeds cap {backend.max_payload_bytes}")


def encode_frames(frames: FrameSequence | Sequence[Frame], max_bytes: int | None = None) -> list[ImagePart]:
    seq = frames.frames if isinstance(frames, FrameSequence) else tuple(frames)
    if not seq:
        raise ValueError("cannot encode an empty frame sequence")
    parts = [ImagePart(f.media_type, base64.b64encode(f.data).decode("ascii")) for f in seq]
    total = sum(p.nbytes for p in parts)
    if max_bytes is not None and total > max_bytes:
        raise PayloadTooLarge(f"encoded frames take {total} bytes, cap is {max_bytes}")
    return parts


class Transport(Protocol):
    def send(self, req: ModelRequest, backend: BackendConfig) -> ModelResponse: ...


def error_for_status(status: int, detail: str = "") -> GatewayError:
    msg = f"HTTP {status}" + (f": {detail}" if detail else "")
    if status in (401, 403):
        return Unauthorized(msg)
    if status == 413:
        return PayloadTooLarge(msg)
    if status == 429:
        return RateLimited(msg)
    if status == 408:
        return Timeout(msg)
    if status >= 500:
        return BackendUnavailable(msg)
    return BadRequest(msg)


def to_chat_payload(req: ModelRequest, backend: BackendConfig) -> dict[str, Any]:
    messages = []
    for m in req.messages:
        if len(m.parts) == 1 and isinstance(m.parts[0], TextPart):
            messages.append({"role": m.role, "content": m.parts[0].text})
            continue
        content = []
        for p in m.parts:
            if isinstance(p, TextPart):
                content.append({"type": "text", "text": p.text})
            else:
                content.append({"type": "image_url", "image_url": {"url": p.data_uri}})
        messages.append({"role": m.role, "content": content})
    return {
        "model": req.model_id or backend.model_id,
        "messages": messages,
        "max_tokens": req.max_output_tokens,
        "temperature": req.temperature,
    }


def redact_payload(payload: dict[str, Any]) -> dict[str, Any]:
    """Copy of a chat payload with image data replaced by a size note."""
    out = json.loads(json.dumps(payload))
    for m in out.get("messages", []):
        if isinstance(m.get("content"), list):
            for part in m["content"]:
                if part.get("type") == "image_url":
                    url = part["image_url"]["url"]
                    part["image_url"]["url"] = f"<{url.split(';', 1)[0]} {len(url)} chars>"
    return out


class HttpTransport:
    """One attempt against an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(self, client: httpx.Client | None = None):
        self._client = client or httpx.Client()

    def send(self, req: ModelRequest, backend: BackendConfig) -> ModelResponse:
        key = os.environ.get(backend.api_key_env, "") if backend.api_key_env else ""
        headers = {"Content-Type": "application/json"}
        if backend.api_key_env:
            if not key:
                raise Unauthorized(f"credential variable {backend.api_key_env} is not set")
            headers[backend.auth_header] = f"{backend.auth_scheme} {key}".strip()
        payload = to_chat_payload(req, backend)
        if log.isEnabledFor(logging.DEBUG):
            log.debug("request %s", json.dumps({"backend": backend.name, "body": redact_payload(payload)}))
        url = backend.endpoint.rstrip("/") + backend.path
        start = time.perf_counter()
        try:
            resp = self._client.post(url, json=payload, headers=headers, timeout=backend.timeout_s)
        except httpx.TimeoutException as exc:
            raise Timeout(f"{backend.name}: {exc}") from exc
        except httpx.TransportError as exc:
            raise BackendUnavailable(f"{backend.name}: {exc}") from exc
        latency = (time.perf_counter() - start) * 1000
        if resp.status_code >= 400:
            raise error_for_status(resp.status_code, resp.text[:200])
        try:
            body = resp.json()
            choice = body["choices"][0]
            content = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"{backend.name}: unexpected response shape") from exc
        if isinstance(content, list):
            content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
        if log.isEnabledFor(logging.DEBUG):
            log.debug("response %s", json.dumps({"backend": backend.name, "status": resp.status_code, "body": body}))
        usage = body.get("usage")
        return ModelResponse(
            text=content or "",
            model_id=body.get("model") or req.model_id or backend.model_id,
            latency_ms=latency,
            token_usage={k: v for k, v in usage.items() if isinstance(v, int)} if isinstance(usage, dict) else None,
            truncated=choice.get("finish_reason") == "length",
        )


ScriptItem = Union[str, int, Mapping[str, Any]]


class ScriptedBackend:
    """Replays canned responses keyed by scenario, for tests and offline demos.

    The scenario comes from ``req.metadata["scenario"]`` unless the backend was
    built with a fixed one. Lookup tries ``scenario/agent/task``,
    ``scenario/task``, then ``scenario``. A value may be a list, replayed in
    order with the last item repeating; integers and ``{"status": n}`` raise
    the matching HTTP error and ``{"error": "timeout"}`` raises Timeout.
    """

    def __init__(
        self,
        script: Mapping[str, ScriptItem | Sequence[ScriptItem]],
        scenario: str | None = None,
        delay_s: float = 0.0,
        model_id: str = "scripted",
    ):
        if not script:
            raise ValueError("script must not be empty")
        self._script = {k: list(v) if isinstance(v, (list, tuple)) else [v] for k, v in script.items()}
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()
        self.scenario = scenario
        self.delay_s = delay_s
        self.model_id = model_id
        self.calls: list[str] = []

    def resolve_key(self, req: ModelRequest) -> str:
        scenario = self.scenario or req.metadata.get("scenario")
        if not scenario:
            raise BadRequest("scripted backend: request carries no scenario key")
        task = req.metadata.get("task")
        agent = req.metadata.get("agent")
        candidates = []
        if task and agent:
            candidates.append(f"{scenario}/{agent}/{task}")
        if task:
            candidates.append(f"{scenario}/{task}")
        candidates.append(scenario)
        for key in candidates:
            if key in self._script:
                return key
        raise BadRequest(f"scripted backend: unknown scenario {candidates[0]!r}")

    def send(self, req: ModelRequest, backend: BackendConfig) -> ModelResponse:
        key = self.resolve_key(req)
        with self._lock:
            items = self._script[key]
            pos = self._cursor.get(key, 0)
            self._cursor[key] = pos + 1
            self.calls.append(key)
        item = items[min(pos, len(items) - 1)]
        start = time.perf_counter()
        if self.delay_s:
            time.sleep(self.delay_s)
        if isinstance(item, int):
            raise error_for_status(item, "scripted")
        if isinstance(item, Mapping):
            if item.get("error") == "timeout":
                raise Timeout("scripted timeout")
            if "status" in item:
                raise error_for_status(int(item["status"]), "scripted")
            item = str(item["text"])
        return ModelResponse(
            text=item,
            model_id=req.model_id or backend.model_id or self.model_id,
            latency_ms=(time.perf_counter() - start) * 1000,
        )


def scripted_backend(script: Mapping[str, Any], **kwargs: Any) -> ScriptedBackend:
    return ScriptedBackend(script, **kwargs)


@dataclass
class BackendMetrics:
    in_flight: int = 0
    peak_in_flight: int = 0
    requests: int = 0
    attempts: int = 0
    retries: int = 0
    failures: int = 0


class Gateway:
    """Shared entry point for all model calls; safe to use from many threads."""

    def __init__(
        self,
        transports: Mapping[str, Transport] | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._transports: dict[str, Transport] = dict(transports or {})
        self._sleep = sleep
        self._lock = threading.Lock()
        self._semaphores: dict[str, threading.BoundedSemaphore] = {}
        self.metrics: dict[str, BackendMetrics] = {}
        self._http: HttpTransport | None = None

    def register(self, name: str, transport: Transport) -> None:
        with self._lock:
            self._transports[name] = transport

    def transport_for(self, backend: BackendConfig) -> Transport:
        with self._lock:
            if backend.name in self._transports:
                return self._transports[backend.name]
            if backend.kind != "http":
                raise BadRequest(f"no transport registered for backend {backend.name!r}")
            if self._http is None:
                self._http = HttpTransport()
            return self._http

    def _slot(self, backend: BackendConfig) -> tuple[threading.BoundedSemaphore, BackendMetrics]:
        with self._lock:
            sem = self._semaphores.get(backend.name)
            if sem is None:
                sem = self._semaphores[backend.name] = threading.BoundedSemaphore(backend.parallelism)
            metrics = self.metrics.setdefault(backend.name, BackendMetrics())
        return sem, metrics

    def complete(self, req: ModelRequest, backend: BackendConfig) -> ModelResponse:
        validate_request(req, backend)
        transport = self.transport_for(backend)
        sem, metrics = self._slot(backend)
        policy = backend.retry
        delays: list[float] = []
        with sem:
            with self._lock:
                metrics.in_flight += 1
                metrics.requests += 1
                metrics.peak_in_flight = max(metrics.peak_in_flight, metrics.in_flight)
            try:
                for attempt in range(1, policy.max_attempts + 1):
                    with self._lock:
                        metrics.attempts += 1
                    try:
                        response = transport.send(req, backend)
                    except GatewayError as exc:
                        if not exc.retriable or attempt == policy.max_attempts:
                            with self._lock:
                                metrics.failures += 1
                            exc.attempts = attempt  # type: ignore[attr-defined]
                            raise
                        delay = max(policy.delay(attempt), delays[-1] if delays else 0.0)
                        delays.append(delay)
                        with self._lock:
                            metrics.retries += 1
                        log.info("%s attempt %d failed (%s); retrying in %.2fs", backend.name, attempt, exc, delay)
                        self._sleep(delay)
                        continue
                    response.attempts = attempt
                    response.backoff_delays = tuple(delays)
                    return response
                raise AssertionError("unreachable")
            finally:
                with self._lock:
                    metrics.in_flight -= 1


def build_request(
    system: str,
    user_parts: Iterable[Part],
    backend: BackendConfig,
    metadata: Mapping[str, str] | None = None,
) -> ModelRequest:
    return ModelRequest(
        messages=(Message.text("system", system), Message("user", tuple(user_parts))),
        model_id=backend.model_id,
        max_output_tokens=backend.max_output_tokens,
        temperature=backend.temperature,
        metadata=dict(metadata or {}),
    )
