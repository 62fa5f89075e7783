"""Content-addressed persistence of model responses.

Responses are stored one file per request fingerprint, with a digest of
the stored payload so silent corruption is detected instead of replayed.
Wrapping any backend in CachingBackend makes repeat runs free and, with a
warm cache, fully offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Optional

from .gateway import Backend, ModelRequest, ModelResponse, fingerprint

logger = logging.getLogger(__name__)


def _payload_digest(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ResponseStore:
    """Directory of {fingerprint}.json response files with integrity digests."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    def _path(self, fp: str) -> Path:
        return self.directory / f"{fp}.json"

    def get(self, fp: str) -> Optional[ModelResponse]:
        path = self._path(fp)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            payload = doc["payload"]
            stored = doc["sha256"]
        except FileNotFoundError:
            self.misses += 1
            return None
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            logger.warning("unreadable cache entry %s (%s); refetching", path.name, exc)
            self.misses += 1
            return None
        if _payload_digest(payload) != stored:
            logger.warning("cache entry %s failed its integrity check; refetching", path.name)
            self.misses += 1
            return None
        self.hits += 1
        return ModelResponse(
            text=payload.get("text"),
            vector=payload.get("vector"),
            usage=dict(payload.get("usage") or {}),
            from_cache=True,
        )

    def put(self, fp: str, resp: ModelResponse) -> None:
        payload = {"text": resp.text, "vector": resp.vector, "usage": resp.usage}
        doc = {"payload": payload, "sha256": _payload_digest(payload)}
        # write-then-rename so readers never see a half-written entry
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, ensure_ascii=False)
            os.replace(tmp, self._path(fp))
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise

    def __contains__(self, fp: str) -> bool:
        return self._path(fp).exists()

    def __len__(self) -> int:
        return sum(1 for _ in self.directory.glob("*.json"))


class CachingBackend:
    """Serve hits from a ResponseStore; delegate misses and store the result."""

    def __init__(self, inner: Backend, store: ResponseStore):
        self.inner = inner
        self.store = store

    def send(self, req: ModelRequest) -> ModelResponse:
        fp = fingerprint(req)
        cached = self.store.get(fp)
        if cached is not None:
            return cached
        resp = self.inner.send(req)
        self.store.put(fp, resp)
        return resp
