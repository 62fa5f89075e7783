"""Uniform access to model capabilities over pluggable backends.

Three capabilities are exposed through one request/response shape: vision
description, text classification, and embedding (text or image). Two backends
implement it: a deterministic scripted backend that replays a transcript keyed
by request fingerprints, and an OpenAI-compatible HTTP backend for live runs.
Retries, rate limiting, and call recording all live here so callers never
deal with transport concerns.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Optional, Protocol

import requests

from .errors import BackendFailure, RateLimited, SchemaViolation, TranscriptMiss

KIND_DESCRIBE = "describe"
KIND_CLASSIFY = "classify"
KIND_EMBED_TEXT = "embed-text"
KIND_EMBED_IMAGE = "embed-image"

ALL_KINDS = (KIND_DESCRIBE, KIND_CLASSIFY, KIND_EMBED_TEXT, KIND_EMBED_IMAGE)
IMAGE_KINDS = frozenset({KIND_DESCRIBE, KIND_EMBED_IMAGE})
EMBED_KINDS = frozenset({KIND_EMBED_TEXT, KIND_EMBED_IMAGE})

API_KEY_ENV = "GVL_API_KEY"


@dataclass(frozen=True)
class Decoding:
    """Decoding parameters that are part of a request's identity."""

    temperature: float = 0.0
    max_output_tokens: int = 512

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")


@dataclass(frozen=True)
class ModelRequest:
    kind: str
    prompt: str
    model_id: str
    decoding: Decoding = Decoding()
    image: Optional[bytes] = None
    media_type: Optional[str] = None

    def validate(self) -> None:
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown request kind {self.kind!r}")
        if self.kind in IMAGE_KINDS and self.image is None:
            raise ValueError(f"{self.kind} requests require an image payload")
        if self.kind not in IMAGE_KINDS and self.image is not None:
            raise ValueError(f"{self.kind} requests must not carry an image")
        if self.image is not None and not self.media_type:
            raise ValueError("image payloads require a media type")


@dataclass
class ModelResponse:
    text: Optional[str] = None
    vector: Optional[list[float]] = None
    usage: dict[str, int] = field(default_factory=dict)
    latency: float = 0.0
    retries: int = 0
    from_cache: bool = False

    def matches_kind(self, kind: str) -> bool:
        if kind in EMBED_KINDS:
            return self.vector is not None and self.text is None
        return self.text is not None and self.vector is None


def fingerprint(req: ModelRequest) -> str:
    """Stable digest of a request's identity.

    Sensitive to kind, prompt, model id, decoding, and image bytes;
    insensitive to construction order. Stable across processes and platforms.
    """
    payload = {
        "kind": req.kind,
        "prompt": req.prompt,
        "model_id": req.model_id,
        "temperature": float(req.decoding.temperature),
        "max_output_tokens": int(req.decoding.max_output_tokens),
        "image_sha256": hashlib.sha256(req.image).hexdigest() if req.image is not None else None,
        "media_type": req.media_type if req.image is not None else None,
    }
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Backend(Protocol):
    def send(self, req: ModelRequest) -> ModelResponse:  # pragma: no cover - protocol
        ...


# --------------------------------------------------------------------------
# Scripted backend
# --------------------------------------------------------------------------


def _entry_to_payload(entry: object, path: str) -> dict:
    if not isinstance(entry, dict):
        raise SchemaViolation(path, "transcript entry must be an object")
    has_text = "text" in entry
    has_vector = "vector" in entry
    if has_text == has_vector:
        raise SchemaViolation(path, "transcript entry needs exactly one of 'text' or 'vector'")
    if has_text and not isinstance(entry["text"], str):
        raise SchemaViolation(path, "'text' must be a string")
    if has_vector:
        vec = entry["vector"]
        if not isinstance(vec, list) or not all(isinstance(x, (int, float)) for x in vec):
            raise SchemaViolation(path, "'vector' must be a list of numbers")
    return {"text": entry.get("text"), "vector": entry.get("vector")}


class ScriptedTranscript:
    """Canned responses keyed by request fingerprint.

    An entry may be a single response or an ordered list of responses;
    successive lookups of the same fingerprint consume the list in order and
    stick on the last element, so retry sequences can be scripted.
    """

    def __init__(self, entries: Optional[dict[str, list[dict]]] = None):
        self._entries: dict[str, list[dict]] = entries or {}
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_dict(cls, data: dict) -> "ScriptedTranscript":
        if not isinstance(data, dict):
            raise SchemaViolation("$", "transcript document must be an object")
        entries: dict[str, list[dict]] = {}
        for fp, value in data.items():
            seq = value if isinstance(value, list) else [value]
            if not seq:
                raise SchemaViolation(fp, "transcript entry list must not be empty")
            entries[fp] = [_entry_to_payload(item, f"{fp}[{i}]") for i, item in enumerate(seq)]
        return cls(entries)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedTranscript":
        raw = Path(path).read_text(encoding="utf-8")
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(str(path), f"not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def add(self, fp: str, *, text: Optional[str] = None, vector: Optional[list[float]] = None) -> None:
        if (text is None) == (vector is None):
            raise ValueError("exactly one of text or vector is required")
        self._entries.setdefault(fp, []).append({"text": text, "vector": vector})

    def add_for(self, req: ModelRequest, *, text: Optional[str] = None,
                vector: Optional[list[float]] = None) -> str:
        """Script a response for a concrete request; returns its fingerprint."""
        fp = fingerprint(req)
        self.add(fp, text=text, vector=vector)
        return fp

    def to_dict(self) -> dict:
        out: dict[str, object] = {}
        for fp, seq in self._entries.items():
            payloads = [
                {"text": p["text"]} if p["text"] is not None else {"vector": p["vector"]}
                for p in seq
            ]
            out[fp] = payloads[0] if len(payloads) == 1 else payloads
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )

    def next_payload(self, fp: str) -> dict:
        with self._lock:
            if fp not in self._entries:
                raise TranscriptMiss(f"no transcript entry for fingerprint {fp}")
            seq = self._entries[fp]
            i = self._cursor.get(fp, 0)
            self._cursor[fp] = min(i + 1, len(seq) - 1)
            return seq[i]

    def reset(self) -> None:
        with self._lock:
            self._cursor.clear()

    def __len__(self) -> int:
        return len(self._entries)


class ScriptedBackend:
    """Deterministic backend replaying a transcript; counts every send."""

    def __init__(self, transcript: ScriptedTranscript):
        self.transcript = transcript
        self.calls = 0
        self.calls_by_fingerprint: dict[str, int] = {}
        self._lock = threading.Lock()

    def send(self, req: ModelRequest) -> ModelResponse:
        fp = fingerprint(req)
        with self._lock:
            self.calls += 1
            self.calls_by_fingerprint[fp] = self.calls_by_fingerprint.get(fp, 0) + 1
        payload = self.transcript.next_payload(fp)
        resp = ModelResponse(text=payload["text"], vector=payload["vector"])
        if not resp.matches_kind(req.kind):
            raise SchemaViolation(fp, f"transcript entry does not fit a {req.kind} request")
        return resp


# --------------------------------------------------------------------------
# HTTP backend (OpenAI-compatible wire shape)
# --------------------------------------------------------------------------


class TransportError(Exception):
    """Internal: a retryable transport-level failure."""

    def __init__(self, message: str, *, rate_limited: bool = False):
        super().__init__(message)
        self.rate_limited = rate_limited


class RateLimiter:
    """Global in-flight cap plus per-backend request pacing.

    Share one instance across backends for a global in-flight cap; give each
    backend its own instance for an independent requests-per-second cap.
    """

    def __init__(self, max_in_flight: Optional[int] = None,
                 requests_per_second: Optional[float] = None):
        self._sem = threading.Semaphore(max_in_flight) if max_in_flight else None
        self._interval = 1.0 / requests_per_second if requests_per_second else 0.0
        self._pace_lock = threading.Lock()
        self._next_time = 0.0

    def __enter__(self):
        if self._sem is not None:
            self._sem.acquire()
        if self._interval:
            with self._pace_lock:
                now = time.monotonic()
                wait = self._next_time - now
                if wait > 0:
                    time.sleep(wait)
                    now = time.monotonic()
                self._next_time = max(self._next_time, now) + self._interval
        return self

    def __exit__(self, *exc):
        if self._sem is not None:
            self._sem.release()
        return False


def _data_url(image: bytes, media_type: str) -> str:
    return f"data:{media_type};base64," + base64.b64encode(image).decode("ascii")


class HttpBackend:
    """OpenAI-compatible HTTP backend.

    Chat requests go to POST {base}/v1/chat/completions with message content
    mixing text and image parts (images as base64 data URLs). Embedding
    requests go to POST {base}/v1/embeddings with {model, input}; image
    embeddings send the data URL as the input string. Auth is a bearer token
    from the GVL_API_KEY environment variable unless given explicitly.
    """

    def __init__(self, base_url: str, *, api_key: Optional[str] = None,
                 timeout: float = 60.0, limiter: Optional[RateLimiter] = None,
                 session: Optional[requests.Session] = None):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout = timeout
        self.limiter = limiter
        self._session = session or requests.Session()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def send(self, req: ModelRequest) -> ModelResponse:
        if req.kind in EMBED_KINDS:
            url = f"{self.base_url}/v1/embeddings"
            if req.kind == KIND_EMBED_IMAGE:
                payload_input = _data_url(req.image, req.media_type)
            else:
                payload_input = req.prompt
            body = {"model": req.model_id, "input": payload_input}
        else:
            url = f"{self.base_url}/v1/chat/completions"
            if req.image is not None:
                content: object = [
                    {"type": "text", "text": req.prompt},
                    {"type": "image_url", "image_url": {"url": _data_url(req.image, req.media_type)}},
                ]
            else:
                content = req.prompt
            body = {
                "model": req.model_id,
                "messages": [{"role": "user", "content": content}],
                "temperature": req.decoding.temperature,
                "max_tokens": req.decoding.max_output_tokens,
            }

        limiter = self.limiter
        try:
            if limiter is not None:
                with limiter:
                    http = self._session.post(url, json=body, headers=self._headers(),
                                              timeout=self.timeout)
            else:
                http = self._session.post(url, json=body, headers=self._headers(),
                                          timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"request to {url} failed: {exc}") from exc

        if http.status_code == 429:
            raise TransportError("backend answered 429", rate_limited=True)
        if http.status_code >= 500:
            raise TransportError(f"backend answered {http.status_code}")
        if http.status_code >= 400:
            raise BackendFailure(f"backend rejected request: {http.status_code} {http.text[:200]}")

        try:
            data = http.json()
            usage = {k: int(v) for k, v in (data.get("usage") or {}).items()
                     if isinstance(v, (int, float))}
            if req.kind in EMBED_KINDS:
                vector = [float(x) for x in data["data"][0]["embedding"]]
                return ModelResponse(vector=vector, usage=usage)
            text = data["choices"][0]["message"]["content"]
            if not isinstance(text, str):
                raise KeyError("message content is not a string")
            return ModelResponse(text=text, usage=usage)
        except (KeyError, IndexError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise BackendFailure(f"could not parse backend response: {exc}") from exc


# --------------------------------------------------------------------------
# invoke + retry policy
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RetryPolicy:
    """Bounded exponential backoff for transport failures."""

    max_attempts: int = 3
    backoff_base: float = 0.5
    backoff_cap: float = 8.0
    sleep: Callable[[float], None] = time.sleep

    def delay(self, attempt: int) -> float:
        return min(self.backoff_cap, self.backoff_base * (2 ** attempt))


@dataclass(frozen=True)
class CallRecord:
    fingerprint: str
    kind: str
    model_id: str
    latency: float
    retries: int
    cache_hit: bool = False


Recorder = Callable[[CallRecord], None]
DEFAULT_RETRY = RetryPolicy()


def invoke(req: ModelRequest, backend: Backend, *, retry: RetryPolicy = DEFAULT_RETRY,
           recorder: Optional[Recorder] = None) -> ModelResponse:
    """Send a request with retries; the only entry point callers should use.

    Transport failures are retried with exponential backoff up to the policy
    budget, then surfaced as BackendFailure (or RateLimited when the final
    failure was a 429 so callers can throttle). Request invariants are
    checked before any transport happens.
    """
    req.validate()
    started = time.perf_counter()
    last: Optional[TransportError] = None
    for attempt in range(retry.max_attempts):
        try:
            resp = backend.send(req)
        except TransportError as exc:
            last = exc
            if attempt + 1 < retry.max_attempts:
                retry.sleep(retry.delay(attempt))
            continue
        resp.latency = time.perf_counter() - started
        resp.retries = attempt
        if not resp.matches_kind(req.kind):
            raise BackendFailure(f"backend returned wrong payload for a {req.kind} request")
        if recorder is not None:
            recorder(CallRecord(fingerprint(req), req.kind, req.model_id,
                                resp.latency, resp.retries, resp.from_cache))
        return resp
    assert last is not None
    if last.rate_limited:
        raise RateLimited(f"gave up after {retry.max_attempts} attempts: {last}")
    raise BackendFailure(f"gave up after {retry.max_attempts} attempts: {last}")


@dataclass
class ModelHandle:
    """A concrete model behind a backend: transport + model id + decoding."""

    backend: Backend
    model_id: str
    decoding: Decoding = Decoding()
    retry: RetryPolicy = DEFAULT_RETRY
    recorder: Optional[Recorder] = None

    def request(self, kind: str, prompt: str, *, image: Optional[bytes] = None,
                media_type: Optional[str] = None) -> ModelRequest:
        return ModelRequest(kind=kind, prompt=prompt, model_id=self.model_id,
                            decoding=self.decoding, image=image, media_type=media_type)

    def run(self, req: ModelRequest) -> ModelResponse:
        return invoke(req, self.backend, retry=self.retry, recorder=self.recorder)

    def text(self, kind: str, prompt: str, *, image: Optional[bytes] = None,
             media_type: Optional[str] = None) -> str:
        resp = self.run(self.request(kind, prompt, image=image, media_type=media_type))
        return resp.text or ""

    def vector(self, kind: str, prompt: str, *, image: Optional[bytes] = None,
               media_type: Optional[str] = None) -> list[float]:
        resp = self.run(self.request(kind, prompt, image=image, media_type=media_type))
        return list(resp.vector or [])

    def with_recorder(self, recorder: Optional[Recorder]) -> "ModelHandle":
        return replace(self, recorder=recorder)


def iter_kinds() -> Iterator[str]:
    return iter(ALL_KINDS)
