"""Provider-agnostic chat request/response types and the cache identity."""

from __future__ import annotations

import enum
import hashlib
import mimetypes
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

DEFAULT_MAX_IMAGE_BYTES = 20 * 1024 * 1024
DEFAULT_TEMPERATURE = 0.0
DEFAULT_MAX_TOKENS = 512

_KEY_VERSION = b"biojudge.chat/1"


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    media_type: str
    data: bytes = field(repr=False)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.data).hexdigest()

    @classmethod
    def from_path(cls, path: str | Path) -> ImagePart:
        path = Path(path)
        media_type = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
        return cls(media_type, path.read_bytes())


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class Decoding:
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    parts: tuple[Part, ...]
    decoding: Decoding = Decoding()

    def __post_init__(self) -> None:
        object.__setattr__(self, "parts", tuple(self.parts))
        if not any(isinstance(p, TextPart) for p in self.parts):
            raise ValueError("a chat request needs at least one text part")

    @property
    def image_bytes(self) -> int:
        return sum(len(p.data) for p in self.parts if isinstance(p, ImagePart))

    def check_payload(self, limit: int = DEFAULT_MAX_IMAGE_BYTES) -> None:
        if self.image_bytes > limit:
            raise ValueError(f"image payload {self.image_bytes} bytes exceeds limit {limit}")


class FinishReason(str, enum.Enum):
    STOP = "stop"
    LENGTH = "length"
    FILTERED = "filtered"
    OTHER = "other"


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: FinishReason = FinishReason.STOP
    latency_ms: int = 0
    from_cache: bool = False


def _field(h: "hashlib._Hash", tag: bytes, payload: bytes) -> None:
    h.update(tag)
    h.update(len(payload).to_bytes(8, "big"))
    h.update(payload)


def cache_key(request: ChatRequest) -> str:
    """SHA-256 over model, decoding and every part in order (images by content digest).

    Each field is tagged and length-prefixed so no two distinct requests can
    serialize to the same byte stream.
    """
    h = hashlib.sha256()
    h.update(_KEY_VERSION)
    _field(h, b"M", request.model_id.encode("utf-8"))
    _field(h, b"T", repr(float(request.decoding.temperature)).encode("ascii"))
    _field(h, b"N", str(request.decoding.max_tokens).encode("ascii"))
    for part in request.parts:
        if isinstance(part, TextPart):
            _field(h, b"t", part.text.encode("utf-8"))
        else:
            _field(h, b"i", f"{part.media_type}:{part.digest}".encode("ascii"))
    return h.hexdigest()
