"""Provenance record written next to every run's outputs.

The manifest ties outputs back to their inputs: a digest of the config
file, the backend and model identities, the seed, a digest per output
file, and one entry per model call with its cache status. The split
between real calls and cache hits is what lets a replay prove it never
touched a backend.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .gateway import CallRecord

MANIFEST_NAME = "run_manifest.json"


@dataclass
class RunManifest:
    command: str
    config_digest: str
    backend_mode: str
    models: dict[str, str]
    seed: int
    calls: list[CallRecord] = field(default_factory=list)
    outputs: dict[str, str] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record(self, call: CallRecord) -> None:
        with self._lock:
            self.calls.append(call)

    @property
    def model_calls(self) -> int:
        return sum(1 for c in self.calls if not c.cache_hit)

    @property
    def cache_hits(self) -> int:
        return sum(1 for c in self.calls if c.cache_hit)

    def add_output(self, path: str | Path) -> None:
        p = Path(path)
        self.outputs[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()

    def to_dict(self) -> dict:
        with self._lock:
            calls = [
                {
                    "fingerprint": c.fingerprint,
                    "kind": c.kind,
                    "model_id": c.model_id,
                    "latency": round(c.latency, 6),
                    "retries": c.retries,
                    "cache_hit": c.cache_hit,
                }
                for c in self.calls
            ]
        return {
            "command": self.command,
            "written_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "config_digest": self.config_digest,
            "backend_mode": self.backend_mode,
            "models": dict(self.models),
            "seed": self.seed,
            "model_calls": self.model_calls,
            "cache_hits": self.cache_hits,
            "outputs": dict(sorted(self.outputs.items())),
            "calls": calls,
        }

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n",
                        encoding="utf-8")
        return path


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
