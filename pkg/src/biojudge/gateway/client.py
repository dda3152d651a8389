"""Rate-limited, retrying chat client over a pluggable provider.

Wire format (``HttpProvider``) is the chat-completions convention::

    POST <endpoint_url>
    Authorization: Bearer <credential>
    {"model": ..., "temperature": ..., "max_tokens": ...,
     "messages": [{"role": "user", "content": [
         {"type": "text", "text": ...},
         {"type": "image_url", "image_url": {"url": "data:<media>;base64,..."}}]}]}

and the reply text is read from ``choices[0].message.content``. Providers
with a different shape override :meth:`HttpProvider.build_payload` and
:meth:`HttpProvider.parse_payload`.
"""

from __future__ import annotations

import base64
import collections
import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Protocol

import httpx

from biojudge.errors import (
    AuthError,
    ProviderContractError,
    ProviderError,
    RetryableError,
    TransportError,
)
from biojudge.gateway.cache import ResponseCache
from biojudge.gateway.request import (
    DEFAULT_MAX_IMAGE_BYTES,
    ChatRequest,
    ChatResponse,
    FinishReason,
    TextPart,
    cache_key,
)

log = logging.getLogger(__name__)

WINDOW_S = 60.0
_EPS = 1e-6  # float slack so a sleep that lands a hair early still frees the slot


@dataclass(frozen=True)
class ProviderConfig:
    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    credential_env: str = "OPENAI_API_KEY"
    max_retries: int = 3
    backoff_base_ms: int = 500
    requests_per_minute: int = 60
    timeout_s: float = 120.0
    max_image_bytes: int = DEFAULT_MAX_IMAGE_BYTES

    def __post_init__(self) -> None:
        if self.requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def credential(self) -> str:
        """Read the secret from the environment; it is never stored on the config."""
        value = os.environ.get(self.credential_env)
        if not value:
            raise AuthError(f"environment variable {self.credential_env} is not set")
        return value


class Provider(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


class RateLimiter:
    """Sliding-window limiter: at most ``per_minute`` acquisitions in any 60 s window."""

    def __init__(self, per_minute: int, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep) -> None:
        self.per_minute = per_minute
        self.clock = clock
        self.sleep = sleep
        self._stamps: collections.deque[float] = collections.deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            while True:
                now = self.clock()
                while self._stamps and self._stamps[0] <= now - WINDOW_S + _EPS:
                    self._stamps.popleft()
                if len(self._stamps) < self.per_minute:
                    self._stamps.append(now)
                    return
                self.sleep(self._stamps[0] + WINDOW_S - now)


_FINISH = {
    "stop": FinishReason.STOP,
    "end_turn": FinishReason.STOP,
    "length": FinishReason.LENGTH,
    "max_tokens": FinishReason.LENGTH,
    "content_filter": FinishReason.FILTERED,
}


class HttpProvider:
    def __init__(self, config: ProviderConfig, transport: httpx.BaseTransport | None = None) -> None:
        self.config = config
        self._client = httpx.Client(timeout=config.timeout_s, transport=transport)

    def build_payload(self, request: ChatRequest) -> dict[str, Any]:
        content = []
        for part in request.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                b64 = base64.b64encode(part.data).decode("ascii")
                content.append({"type": "image_url", "image_url": {"url": f"data:{part.media_type};base64,{b64}"}})
        return {
            "model": request.model_id,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        }

    def parse_payload(self, data: Any) -> tuple[str, FinishReason]:
        try:
            choice = data["choices"][0]
            message = choice.get("message") or {}
            content = message.get("content")
            reason = _FINISH.get(choice.get("finish_reason") or "", FinishReason.OTHER)
        except (KeyError, IndexError, TypeError, AttributeError):
            raise ProviderContractError("response has no choices[0]") from None
        if isinstance(content, list):
            content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
        if content is None:
            if reason is FinishReason.STOP:
                raise ProviderContractError("response carries no message text")
            content = ""
        if not isinstance(content, str):
            raise ProviderContractError(f"message content has type {type(content).__name__}")
        return content, reason

    def complete(self, request: ChatRequest) -> ChatResponse:
        headers = {"Authorization": f"Bearer {self.config.credential()}"}
        try:
            resp = self._client.post(self.config.endpoint_url, json=self.build_payload(request), headers=headers)
        except httpx.TimeoutException as exc:
            raise RetryableError(f"timeout: {exc}") from None
        except httpx.TransportError as exc:
            raise RetryableError(f"transport: {exc}") from None
        status = resp.status_code
        if status in (401, 403):
            raise AuthError(f"HTTP {status}: credential rejected")
        if status == 429 or status >= 500:
            retry_after = None
            try:
                retry_after = float(resp.headers.get("retry-after", ""))
            except ValueError:
                pass
            raise RetryableError(f"HTTP {status}", status=status, retry_after=retry_after)
        if status >= 400:
            raise ProviderError(f"HTTP {status}: {resp.text[:200]}")
        try:
            data = resp.json()
        except ValueError:
            raise ProviderContractError("response body is not JSON") from None
        text, reason = self.parse_payload(data)
        return ChatResponse(text=text, finish_reason=reason)

    def close(self) -> None:
        self._client.close()


class Gateway:
    """Sends requests through one provider, sharing a rate limiter and cache."""

    def __init__(self, provider: Provider, config: ProviderConfig | None = None,
                 cache: ResponseCache | None = None, limiter: RateLimiter | None = None,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep) -> None:
        self.provider = provider
        self.config = config or ProviderConfig()
        self.cache = cache
        self.clock = clock
        self.sleep = sleep
        self.limiter = limiter or RateLimiter(self.config.requests_per_minute, clock=clock, sleep=sleep)

    def backoff_s(self, attempt: int) -> float:
        return self.config.backoff_base_ms * (2 ** attempt) / 1000.0

    def send(self, request: ChatRequest) -> ChatResponse:
        request.check_payload(self.config.max_image_bytes)
        attempts: list[str] = []
        for attempt in range(self.config.max_retries + 1):
            self.limiter.acquire()
            started = self.clock()
            try:
                resp = self.provider.complete(request)
            except RetryableError as exc:
                attempts.append(str(exc))
                if attempt == self.config.max_retries:
                    break
                delay = max(self.backoff_s(attempt), exc.retry_after or 0.0)
                log.warning("retryable provider error (%s); retrying in %.2fs", exc, delay)
                self.sleep(delay)
                continue
            latency = max(0, int(round((self.clock() - started) * 1000)))
            return ChatResponse(resp.text, resp.finish_reason, latency, from_cache=False)
        raise TransportError("retries exhausted", attempts)

    def send_cached(self, request: ChatRequest, cache: ResponseCache | None = None) -> ChatResponse:
        cache = self.cache if cache is None else cache
        if cache is None:
            return self.send(request)
        key = cache_key(request)
        hit = cache.get(key)
        if hit is not None:
            return hit
        resp = self.send(request)
        cache.put(key, resp)
        return resp
