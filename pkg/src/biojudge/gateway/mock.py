"""Deterministic scripted provider used as the pipeline's test oracle."""

from __future__ import annotations

import hashlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Union

from biojudge.errors import AuthError, ProviderError, RetryableError, UnscriptedRequestError
from biojudge.gateway.request import ChatRequest, ChatResponse, ImagePart, TextPart, cache_key

# str -> reply text; int -> HTTP status (200 replies with ""); (status, text);
# an exception instance is raised; a ChatResponse is returned as-is.
ScriptItem = Union[str, int, tuple, BaseException, ChatResponse]

_MISSING = object()


@dataclass(frozen=True)
class Invocation:
    seq: int
    key: str


def _status_error(status: int) -> BaseException:
    if status in (401, 403):
        return AuthError(f"HTTP {status}: credential rejected")
    if status == 429 or status >= 500:
        return RetryableError(f"HTTP {status}", status=status)
    return ProviderError(f"HTTP {status}")


class MockProvider:
    """Replies from a script keyed by request (``cache_key`` unless ``route`` is given).

    A list value is consumed in order per key; its last item repeats once
    the list runs out.
    """

    def __init__(self, script: Mapping[str, ScriptItem | Sequence[ScriptItem]] | None = None,
                 default: ScriptItem = _MISSING, route: Callable[[ChatRequest], str] | None = None) -> None:
        self.script = dict(script or {})
        self.default = default
        self.route = route or cache_key
        self.invocations: list[Invocation] = []
        self._cursor: dict[str, int] = {}
        self._seq = itertools.count()
        self._lock = threading.Lock()

    def _next_item(self, key: str) -> ScriptItem:
        if key in self.script:
            entry = self.script[key]
            if isinstance(entry, list):
                i = self._cursor.get(key, 0)
                self._cursor[key] = i + 1
                return entry[min(i, len(entry) - 1)]
            return entry
        if self.default is _MISSING:
            raise UnscriptedRequestError(key)
        return self.default

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = self.route(request)
        with self._lock:
            self.invocations.append(Invocation(next(self._seq), key))
            item = self._next_item(key)
        if isinstance(item, ChatResponse):
            return item
        if isinstance(item, BaseException):
            raise item
        if isinstance(item, str):
            return ChatResponse(item)
        if isinstance(item, tuple):
            status, text = item
            if status != 200:
                raise _status_error(status)
            return ChatResponse(text)
        if isinstance(item, int):
            if item != 200:
                raise _status_error(item)
            return ChatResponse("")
        raise TypeError(f"unsupported script item {item!r}")

    @property
    def call_count(self) -> int:
        return len(self.invocations)


def route_by_images(request: ChatRequest) -> str:
    """Script key from the attached images alone: their SHA-256 digests joined by ``+``.

    Text-only requests (judge calls) route to ``text:<sha256 of the prompt text>``.
    Handy for hand-written scripts, which then survive prompt template edits.
    """
    digests = [p.digest for p in request.parts if isinstance(p, ImagePart)]
    if digests:
        return "+".join(digests)
    text = "\n".join(p.text for p in request.parts if isinstance(p, TextPart))
    return "text:" + hashlib.sha256(text.encode("utf-8")).hexdigest()


ROUTES: dict[str, Callable[[ChatRequest], str]] = {"cache_key": cache_key, "images": route_by_images}


def mock_provider(script: Mapping[str, ScriptItem | Sequence[ScriptItem]] | None = None,
                  default: ScriptItem = _MISSING, route: Callable[[ChatRequest], str] | None = None) -> MockProvider:
    return MockProvider(script, default, route)
