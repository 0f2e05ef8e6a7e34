"""Provider-agnostic structured completion with retries and rate limiting."""
from __future__ import annotations

import collections
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import httpx
import jsonschema

log = logging.getLogger(__name__)

ROLES = ("extractor", "reference", "judge", "baseline")
KINDS = ("http_provider", "stub")
WIRE_FORMATS = ("openai_chat", "anthropic_messages")

MAX_REPAIRS = 2
MAX_TRANSPORT_RETRIES = 3


class GatewayError(Exception):
    kind = "gateway"

    def __init__(self, message: str, role_tag: str | None = None, backend_id: str | None = None):
        super().__init__(message)
        self.role_tag = role_tag
        self.backend_id = backend_id


class TransportError(GatewayError):
    kind = "transport"


class AuthenticationError(GatewayError):
    kind = "authentication"


class SchemaError(GatewayError):
    """Output still invalid after the repair budget was spent."""

    kind = "schema"


class GatewayTimeout(GatewayError):
    kind = "timeout"


@dataclass(frozen=True)
class BackendDescriptor:
    id: str
    kind: str
    model_name: str
    endpoint: str | None = None
    credential_env_var: str | None = None
    wire_format: str = "openai_chat"
    temperature: float = 0.0
    max_output_tokens: int = 4096
    rate_limit: float = 60.0
    timeout: float = 120.0
    options: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http_provider":
            if not self.endpoint or not self.credential_env_var:
                raise ValueError(f"http backend {self.id!r} needs endpoint and credential_env_var")
            if self.wire_format not in WIRE_FORMATS:
                raise ValueError(f"unknown wire format {self.wire_format!r}")
        if self.rate_limit <= 0:
            raise ValueError("rate_limit must be positive")

    @classmethod
    def from_mapping(cls, backend_id: str, data: Mapping) -> "BackendDescriptor":
        fields = dict(data)
        if "api_key" in fields or "credential" in fields:
            raise ValueError("credentials are read from environment variables only")
        return cls(id=backend_id, **fields)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "model_name": self.model_name,
            "endpoint": self.endpoint,
            "credential_env_var": self.credential_env_var,
            "wire_format": self.wire_format,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "rate_limit": self.rate_limit,
            "timeout": self.timeout,
            "options": dict(self.options),
        }


@dataclass(frozen=True)
class StructuredRequest:
    system_prompt: str
    user_content: str
    output_schema: Mapping[str, Any]
    role_tag: str

    def __post_init__(self):
        if self.role_tag not in ROLES:
            raise ValueError(f"unknown role {self.role_tag!r}")
        jsonschema.Draft202012Validator.check_schema(self.output_schema)

    def digest(self) -> str:
        blob = json.dumps(
            [self.system_prompt, self.user_content, self.output_schema, self.role_tag],
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class StructuredResponse:
    payload: Any
    raw_text: str
    attempts: int
    latency: float
    token_usage: Mapping[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class RequestRecord:
    backend_id: str
    role_tag: str
    digest: str
    attempts: int


class RateLimiter:
    """Sliding 60-second window; blocks until a slot is free."""

    def __init__(self, per_minute: float, clock=time.monotonic, sleep=time.sleep):
        self.capacity = max(1, int(per_minute))
        self.window = 60.0
        self._stamps: collections.deque[float] = collections.deque()
        self._lock = threading.Lock()
        self._clock = clock
        self._sleep = sleep

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= self.window:
                    self._stamps.popleft()
                if len(self._stamps) < self.capacity:
                    self._stamps.append(now)
                    return
                # floor keeps float residue from spinning without advancing time
                wait = max(self.window - (now - self._stamps[0]), 1e-3)
            self._sleep(wait)


def _strip_fences(text: str) -> str:
    m = re.search(r"```(?:json)?\s*(.*?)```", text, re.S)
    return m.group(1) if m else text


def _schema_problem(payload, schema) -> str | None:
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(payload), key=str)
    if not errors:
        return None
    e = errors[0]
    path = "/".join(str(p) for p in e.absolute_path) or "$"
    return f"{path}: {e.message}"


def repair_message(problem: str) -> str:
    return (
        "Your previous reply did not satisfy the required JSON schema "
        f"({problem}). Reply again with only a JSON object that satisfies the schema."
    )


StubHandler = Callable[[StructuredRequest, Mapping[str, Any]], Any]


class Gateway:
    """Structured completions over stub or HTTP backends.

    One instance may be shared across threads. Calls per ``(backend, role)``
    are counted in :attr:`calls` and every call is appended to
    :attr:`request_log`.
    """

    def __init__(
        self,
        client: httpx.Client | None = None,
        max_repairs: int = MAX_REPAIRS,
        clock=time.monotonic,
        sleep=time.sleep,
        env: Mapping[str, str] | None = None,
    ):
        self._client = client
        self.max_repairs = max_repairs
        self._clock = clock
        self._sleep = sleep
        self._env = env if env is not None else os.environ
        self._limiters: dict[str, RateLimiter] = {}
        self._lock = threading.Lock()
        self.calls: collections.Counter = collections.Counter()
        self.request_log: list[RequestRecord] = []

    @property
    def client(self) -> httpx.Client:
        if self._client is None:
            self._client = httpx.Client()
        return self._client

    def _limiter(self, backend: BackendDescriptor) -> RateLimiter:
        with self._lock:
            lim = self._limiters.get(backend.id)
            if lim is None:
                lim = RateLimiter(backend.rate_limit, self._clock, self._sleep)
                self._limiters[backend.id] = lim
            return lim

    def complete_structured(self, backend: BackendDescriptor, req: StructuredRequest) -> StructuredResponse:
        started = time.perf_counter()
        messages = [{"role": "user", "content": req.user_content}]
        usage: collections.Counter = collections.Counter()
        attempts = 0
        problem = None
        raw = ""
        try:
            for _ in range(self.max_repairs + 1):
                attempts += 1
                if backend.kind == "stub":
                    raw = self._stub(backend, req)
                else:
                    raw, used = self._http(backend, req, messages)
                    usage.update(used)
                try:
                    payload = json.loads(_strip_fences(raw))
                except json.JSONDecodeError as exc:
                    problem = f"$: invalid JSON ({exc.msg})"
                else:
                    problem = _schema_problem(payload, req.output_schema)
                    if problem is None:
                        return StructuredResponse(
                            payload, raw, attempts, time.perf_counter() - started, dict(usage)
                        )
                log.info("%s/%s attempt %d invalid: %s", backend.id, req.role_tag, attempts, problem)
                messages = messages + [
                    {"role": "assistant", "content": raw},
                    {"role": "user", "content": repair_message(problem)},
                ]
            raise SchemaError(
                f"output invalid after {attempts} attempts: {problem}", req.role_tag, backend.id
            )
        except GatewayError as exc:
            exc.role_tag = exc.role_tag or req.role_tag
            exc.backend_id = exc.backend_id or backend.id
            raise
        finally:
            with self._lock:
                self.calls[(backend.id, req.role_tag)] += 1
                self.request_log.append(RequestRecord(backend.id, req.role_tag, req.digest(), attempts))

    def _stub(self, backend: BackendDescriptor, req: StructuredRequest) -> str:
        from .stubs import STUB_HANDLERS

        handler = STUB_HANDLERS.get(backend.options.get("handler", req.role_tag))
        if handler is None:
            raise GatewayError(f"no stub handler for role {req.role_tag!r}")
        payload = handler(req, backend.options)
        return json.dumps(payload, sort_keys=True)

    def _http(self, backend: BackendDescriptor, req: StructuredRequest, messages) -> tuple[str, dict]:
        key = self._env.get(backend.credential_env_var or "")
        if not key:
            raise AuthenticationError(f"environment variable {backend.credential_env_var} is not set")
        if backend.wire_format == "anthropic_messages":
            headers = {"x-api-key": key, "anthropic-version": "2023-06-01"}
            body = {
                "model": backend.model_name,
                "system": req.system_prompt,
                "messages": messages,
                "max_tokens": backend.max_output_tokens,
                "temperature": backend.temperature,
            }
        else:
            headers = {"Authorization": f"Bearer {key}"}
            body = {
                "model": backend.model_name,
                "messages": [{"role": "system", "content": req.system_prompt}, *messages],
                "temperature": backend.temperature,
                "max_tokens": backend.max_output_tokens,
                "response_format": {
                    "type": "json_schema",
                    "json_schema": {"name": req.role_tag, "schema": req.output_schema},
                },
            }

        delay = 1.0
        for attempt in range(MAX_TRANSPORT_RETRIES + 1):
            self._limiter(backend).acquire()
            try:
                resp = self.client.post(backend.endpoint, json=body, headers=headers,
                                        timeout=backend.timeout)
            except httpx.TimeoutException as exc:
                raise GatewayTimeout(f"request timed out after {backend.timeout}s: {exc}") from exc
            except httpx.TransportError as exc:
                raise TransportError(str(exc)) from exc
            if resp.status_code in (401, 403):
                raise AuthenticationError(f"HTTP {resp.status_code} from {backend.endpoint}")
            if resp.status_code == 429 or resp.status_code >= 500:
                if attempt == MAX_TRANSPORT_RETRIES:
                    raise TransportError(f"HTTP {resp.status_code} after {attempt + 1} tries")
                retry_after = resp.headers.get("Retry-After")
                try:
                    wait = max(delay, float(retry_after)) if retry_after else delay
                except ValueError:
                    wait = delay
                self._sleep(wait)
                delay = min(delay * 2, 30.0)
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                data = resp.json()
            except ValueError as exc:
                raise TransportError(f"response is not JSON: {exc}") from exc
            return _read_completion(backend.wire_format, data)
        raise TransportError("unreachable")  # pragma: no cover


def _read_completion(wire_format: str, data: Mapping) -> tuple[str, dict]:
    try:
        if wire_format == "anthropic_messages":
            text = "".join(b.get("text", "") for b in data["content"] if b.get("type") == "text")
            u = data.get("usage", {})
            usage = {"input": u.get("input_tokens", 0), "output": u.get("output_tokens", 0)}
        else:
            text = data["choices"][0]["message"]["content"] or ""
            u = data.get("usage", {})
            usage = {"input": u.get("prompt_tokens", 0), "output": u.get("completion_tokens", 0)}
    except (KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"unexpected response shape: {exc}") from exc
    return text, usage


_default = None


def default_gateway() -> Gateway:
    global _default
    if _default is None:
        _default = Gateway()
    return _default


def complete_structured(backend: BackendDescriptor, req: StructuredRequest) -> StructuredResponse:
    return default_gateway().complete_structured(backend, req)
