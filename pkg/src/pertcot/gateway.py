"""Client for chat-completions endpoints with caching, retries, and a mock.

One gateway instance is shareable across threads: batch calls bound the
number of in-flight requests, results come back in input order, and the
on-disk cache is written atomically (temp file + rename). Successful
results are cached by a content digest of the request, so interrupted
runs resume without re-spending endpoint calls.
"""

from __future__ import annotations

import json
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import httpx

from .errors import (
    ConfigError,
    GatewayAuthError,
    GatewayError,
    GatewayExhaustedError,
    GatewayProtocolError,
)
from .io import atomic_write_text, canonical_json, sha256_hex

# Sampling defaults: diverse explanations for distillation, reproducible
# decisions for grading and prediction. Call sites may override.
GENERATION_TEMPERATURE = 1.0
DECISION_TEMPERATURE = 0.0

RETRYABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})
AUTH_STATUS = frozenset({401, 403})


@dataclass(frozen=True)
class ChatRequest:
    model_name: str
    system_text: str
    user_text: str
    temperature: float = DECISION_TEMPERATURE
    max_output_tokens: int = 2048
    seed_hint: int | None = None

    def __post_init__(self) -> None:
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")
        if not (self.temperature >= 0.0 and self.temperature == self.temperature):
            raise ValueError("temperature must be finite and >= 0")

    def cache_key(self) -> str:
        """Stable digest; any byte change in the prompts changes the key.

        seed_hint joins the digest only when set, so resampled attempts get
        their own cache entries while the default path keeps the plain key.
        """
        fields = {
            "model": self.model_name,
            "system": self.system_text,
            "user": self.user_text,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
        }
        if self.seed_hint is not None:
            fields["seed_hint"] = self.seed_hint
        return sha256_hex(canonical_json(fields))


@dataclass(frozen=True)
class ChatResult:
    raw_text: str
    finish_reason: str  # "stop" | "length" | "error"
    latency_ms: float
    from_cache: bool
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.finish_reason != "error"


@dataclass(frozen=True)
class GatewayConfig:
    base_url: str = "http://localhost:8000"
    api_key_env_var: str = "PERTCOT_API_KEY"
    max_in_flight: int = 8
    retry_budget: int = 4
    backoff_base_ms: float = 250.0
    cache_dir: str | Path | None = None
    requests_per_minute: float | None = None
    timeout_s: float = 120.0

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.retry_budget < 0:
            raise ValueError("retry_budget must be >= 0")


@dataclass
class BatchProgress:
    total: int
    done: int = 0
    failed: int = 0
    cached: int = 0


class Transport(Protocol):
    def send(self, request: ChatRequest) -> tuple[str, str]:
        """Return (raw_text, finish_reason) or raise a GatewayError."""


class _TransientFailure(Exception):
    """Internal marker for failures worth retrying."""


class HttpTransport:
    """POSTs the chat-completions wire shape to `{base_url}/v1/chat/completions`."""

    def __init__(self, config: GatewayConfig, client: httpx.Client | None = None):
        self._config = config
        self._client = client if client is not None else httpx.Client(timeout=config.timeout_s)

    def send(self, request: ChatRequest) -> tuple[str, str]:
        payload: dict = {
            "model": request.model_name,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.seed_hint is not None:
            payload["seed"] = request.seed_hint
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self._config.api_key_env_var)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        url = self._config.base_url.rstrip("/") + "/v1/chat/completions"
        try:
            response = self._client.post(url, json=payload, headers=headers)
        except httpx.TimeoutException as exc:
            raise _TransientFailure(f"timeout: {exc}") from exc
        except httpx.HTTPError as exc:
            raise _TransientFailure(f"transport error: {exc}") from exc
        if response.status_code in AUTH_STATUS:
            raise GatewayAuthError(f"authentication rejected (HTTP {response.status_code})")
        if response.status_code in RETRYABLE_STATUS:
            raise _TransientFailure(f"HTTP {response.status_code}")
        if response.status_code != 200:
            raise GatewayProtocolError(f"HTTP {response.status_code}: {response.text[:500]}")
        try:
            body = response.json()
            choice = body["choices"][0]
            content = choice["message"]["content"]
            finish = choice.get("finish_reason") or "stop"
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise GatewayProtocolError(f"malformed endpoint response: {exc}") from exc
        if not isinstance(content, str):
            raise GatewayProtocolError("malformed endpoint response: content is not text")
        return content, "length" if finish == "length" else "stop"


class MockTransport:
    """Deterministic test double scripted by a fixture table or a callable.

    Responses are a pure function of (system_text, user_text, temperature).
    Tracks the peak number of concurrent in-flight sends for concurrency
    assertions, and supports per-call delays to shake out ordering bugs.
    """

    def __init__(
        self,
        script: Callable[[str, str, float], str | None] | "MockFixture",
        default: str | None = None,
        delay_s: Callable[[str], float] | float | None = None,
    ):
        self._script = script
        self._default = default
        self._delay_s = delay_s
        self._lock = threading.Lock()
        self.calls = 0
        self.in_flight = 0
        self.peak_in_flight = 0

    def send(self, request: ChatRequest) -> tuple[str, str]:
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
        try:
            if self._delay_s is not None:
                delay = self._delay_s if isinstance(self._delay_s, (int, float)) \
                    else self._delay_s(request.user_text)
                time.sleep(delay)
            if isinstance(self._script, MockFixture):
                text = self._script.lookup(request.system_text, request.user_text)
            else:
                text = self._script(request.system_text, request.user_text, request.temperature)
            if text is None:
                text = self._default
            if text is None:
                raise ConfigError(
                    f"mock fixture has no entry for user text {request.user_text[:80]!r} "
                    "and no default"
                )
            return text, "stop"
        finally:
            with self._lock:
                self.in_flight -= 1


@dataclass
class MockRule:
    """First-match-wins scripted response; absent conditions match anything."""

    text: str
    user_contains: str | None = None
    system_contains: str | None = None

    def matches(self, system_text: str, user_text: str) -> bool:
        if self.user_contains is not None and self.user_contains not in user_text:
            return False
        if self.system_contains is not None and self.system_contains not in system_text:
            return False
        return True


@dataclass
class MockFixture:
    rules: list[MockRule] = field(default_factory=list)
    default: str | None = None

    def lookup(self, system_text: str, user_text: str) -> str | None:
        for rule in self.rules:
            if rule.matches(system_text, user_text):
                return rule.text
        return self.default

    @classmethod
    def from_file(cls, path: str | Path) -> "MockFixture":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load mock fixture {path}: {exc}") from exc
        rules = [
            MockRule(
                text=entry["text"],
                user_contains=entry.get("user_contains"),
                system_contains=entry.get("system_contains"),
            )
            for entry in data.get("rules", [])
        ]
        return cls(rules=rules, default=data.get("default"))


class _RateLimiter:
    """Serializes request starts to a minimum interval (requests-per-minute cap)."""

    def __init__(self, requests_per_minute: float):
        self._interval = 60.0 / requests_per_minute
        self._lock = threading.Lock()
        self._next_start = 0.0

    def wait(self) -> None:
        with self._lock:
            now = time.monotonic()
            start_at = max(now, self._next_start)
            self._next_start = start_at + self._interval
        delay = start_at - now
        if delay > 0:
            time.sleep(delay)


class Gateway:
    """complete()/complete_batch() over a transport, with cache and retries."""

    def __init__(self, config: GatewayConfig, transport: Transport | None = None):
        self.config = config
        self._transport: Transport = transport if transport is not None else HttpTransport(config)
        self._cache_dir = Path(config.cache_dir) if config.cache_dir else None
        self._limiter = (
            _RateLimiter(config.requests_per_minute) if config.requests_per_minute else None
        )
        self._rng = random.Random()

    # -- cache ---------------------------------------------------------------

    def _cache_path(self, key: str) -> Path | None:
        if self._cache_dir is None:
            return None
        return self._cache_dir / key[:2] / f"{key}.json"

    def _cache_read(self, request: ChatRequest) -> ChatResult | None:
        path = self._cache_path(request.cache_key())
        if path is None or not path.exists():
            return None
        try:
            stored = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            return None  # unreadable entries behave like misses
        return ChatResult(
            raw_text=stored["raw_text"],
            finish_reason=stored["finish_reason"],
            latency_ms=0.0,
            from_cache=True,
        )

    def _cache_write(self, request: ChatRequest, result: ChatResult) -> None:
        path = self._cache_path(request.cache_key())
        if path is None:
            return
        entry = {
            "model": request.model_name,
            "system": request.system_text,
            "user": request.user_text,
            "temperature": request.temperature,
            "max_output_tokens": request.max_output_tokens,
            "raw_text": result.raw_text,
            "finish_reason": result.finish_reason,
        }
        atomic_write_text(path, json.dumps(entry, ensure_ascii=False, sort_keys=True))

    # -- single call ---------------------------------------------------------

    def complete(self, request: ChatRequest) -> ChatResult:
        """One request with retries; cache hits skip the network entirely."""
        cached = self._cache_read(request)
        if cached is not None:
            return cached

        attempts = self.config.retry_budget + 1
        last_failure: str | None = None
        for attempt in range(attempts):
            if self._limiter is not None:
                self._limiter.wait()
            started = time.monotonic()
            try:
                raw_text, finish_reason = self._transport.send(request)
            except _TransientFailure as exc:
                last_failure = str(exc)
                if attempt + 1 < attempts:
                    backoff = self.config.backoff_base_ms * (2 ** attempt)
                    jitter = self._rng.uniform(0, self.config.backoff_base_ms)
                    time.sleep((backoff + jitter) / 1000.0)
                continue
            latency_ms = (time.monotonic() - started) * 1000.0
            result = ChatResult(
                raw_text=raw_text,
                finish_reason=finish_reason,
                latency_ms=latency_ms,
                from_cache=False,
            )
            self._cache_write(request, result)
            return result
        raise GatewayExhaustedError(
            f"retry budget of {self.config.retry_budget} exhausted; last failure: {last_failure}"
        )

    # -- batch ---------------------------------------------------------------

    def complete_batch(
        self,
        requests: list[ChatRequest],
        on_progress: Callable[[BatchProgress], None] | None = None,
    ) -> list[ChatResult]:
        """All requests with bounded concurrency; results in input order.

        Per-item failures are embedded as error results rather than
        aborting the batch.
        """
        progress = BatchProgress(total=len(requests))
        progress_lock = threading.Lock()

        def run_one(request: ChatRequest) -> ChatResult:
            try:
                result = self.complete(request)
            except (GatewayError, ConfigError) as exc:
                result = ChatResult(
                    raw_text="",
                    finish_reason="error",
                    latency_ms=0.0,
                    from_cache=False,
                    error=f"{type(exc).__name__}: {exc}",
                )
            with progress_lock:
                progress.done += 1
                if not result.ok:
                    progress.failed += 1
                if result.from_cache:
                    progress.cached += 1
                if on_progress is not None:
                    on_progress(progress)
            return result

        if not requests:
            return []
        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            return list(pool.map(run_one, requests))


def mock_gateway(
    script: Callable[[str, str, float], str | None] | MockFixture | dict[str, str],
    default: str | None = None,
    config: GatewayConfig | None = None,
    delay_s: Callable[[str], float] | float | None = None,
) -> tuple[Gateway, MockTransport]:
    """Gateway over a deterministic scripted backend, for tests and dry runs.

    A plain dict script is treated as exact-match on user text.
    """
    if isinstance(script, dict):
        table = dict(script)
        script = lambda system, user, temperature: table.get(user)  # noqa: E731
    transport = MockTransport(script, default=default, delay_s=delay_s)
    gateway_config = config if config is not None else GatewayConfig(retry_budget=0)
    return Gateway(gateway_config, transport=transport), transport
