from biojudge.gateway.cache import ResponseCache
from biojudge.gateway.client import Gateway, HttpProvider, ProviderConfig, RateLimiter
from biojudge.gateway.mock import ROUTES, MockProvider, mock_provider, route_by_images
from biojudge.gateway.request import (
    ChatRequest,
    ChatResponse,
    Decoding,
    FinishReason,
    ImagePart,
    TextPart,
    cache_key,
)

__all__ = [
    "ChatRequest",
    "ChatResponse",
    "Decoding",
    "FinishReason",
    "Gateway",
    "HttpProvider",
    "ImagePart",
    "MockProvider",
    "ProviderConfig",
    "ROUTES",
    "RateLimiter",
    "ResponseCache",
    "TextPart",
    "cache_key",
    "mock_provider",
    "route_by_images",
]
