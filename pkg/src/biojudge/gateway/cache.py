"""On-disk response cache: one JSON file per key under ``ab/cd/<key>.json``."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from pathlib import Path

from biojudge.gateway.request import ChatResponse, FinishReason

log = logging.getLogger(__name__)


class ResponseCache:
    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    def path_for(self, key: str) -> Path:
        return self.root / key[:2] / key[2:4] / f"{key}.json"

    def get(self, key: str) -> ChatResponse | None:
        path = self.path_for(key)
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            self.misses += 1
            return None
        try:
            data = json.loads(raw)
            if data.get("key") != key:
                raise ValueError("key mismatch")
            resp = ChatResponse(
                text=data["text"],
                finish_reason=FinishReason(data["finish_reason"]),
                latency_ms=int(data["latency_ms"]),
                from_cache=True,
            )
            if not isinstance(resp.text, str):
                raise ValueError("text is not a string")
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("ignoring corrupt cache entry %s: %s", path, exc)
            self.misses += 1
            return None
        self.hits += 1
        return resp

    def put(self, key: str, response: ChatResponse) -> Path:
        """Persist atomically (temp file + rename); concurrent writers converge."""
        path = self.path_for(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.dumps(
            {
                "key": key,
                "text": response.text,
                "finish_reason": response.finish_reason.value,
                "latency_ms": response.latency_ms,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
            raise
        return path

    def __len__(self) -> int:
        return sum(1 for _ in self.root.glob("*/*/*.json")) if self.root.exists() else 0
