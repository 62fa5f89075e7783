"""Run configuration: a TOML file mapped onto one validated object.

Relative paths inside the file resolve against the file's own directory,
so a config travels with its data. Every validation problem is reported
with the dotted field path that caused it.
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):  # pragma: no cover - version shim
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .gateway import Decoding
from .pipeline import (
    DEFAULT_CLASSIFIER_TEMPLATE,
    DEFAULT_CONTEXT_LINE,
    DEFAULT_DIRECTIVE,
    DEFAULT_FALLBACK_TEMPLATE,
    PromptConfig,
)

MODE_SCRIPTED = "scripted"
MODE_HTTP = "http"


@dataclass
class RunConfig:
    config_path: Path
    config_digest: str
    dataset_manifest: Optional[Path]
    grid: tuple[int, int]
    split: Optional[str]
    class_names: Optional[list[str]]
    taxonomy_path: Optional[Path]
    prompt: PromptConfig
    backend_mode: str
    transcript_path: Optional[Path]
    base_url: Optional[str]
    describer_model: str
    classifier_model: str
    embedder_model: str
    cluster_model: str
    decoding: Decoding
    retries: int
    requests_per_second: Optional[float]
    max_in_flight: Optional[int]
    seed: int
    cache_dir: Path
    output_dir: Path
    workers: int
    cluster_sizes: Optional[list[int]]


class _Section:
    """Typed accessors over one TOML table with dotted error paths."""

    def __init__(self, data: dict, name: str):
        if not isinstance(data, dict):
            raise ConfigError(name, "must be a table")
        self.data = data
        self.name = name

    def _field(self, key: str) -> str:
        return f"{self.name}.{key}" if self.name else key

    def _get(self, key: str, kind, kind_name: str, default):
        if key not in self.data:
            return default
        value = self.data[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
            raise ConfigError(self._field(key), f"must be {kind_name}")
        return value

    def str_(self, key: str, default: Optional[str] = None) -> Optional[str]:
        return self._get(key, str, "a string", default)

    def bool_(self, key: str, default: bool = False) -> bool:
        return self._get(key, bool, "a boolean", default)

    def int_(self, key: str, default: Optional[int] = None,
             minimum: Optional[int] = None) -> Optional[int]:
        value = self._get(key, int, "an integer", default)
        if value is not None and minimum is not None and value < minimum:
            raise ConfigError(self._field(key), f"must be >= {minimum}")
        return value

    def float_(self, key: str, default: Optional[float] = None) -> Optional[float]:
        return self._get(key, float, "a number", default)

    def str_list(self, key: str) -> Optional[list[str]]:
        value = self._get(key, list, "an array of strings", None)
        if value is None:
            return None
        if not value or not all(isinstance(x, str) and x.strip() for x in value):
            raise ConfigError(self._field(key), "must be a non-empty array of non-empty strings")
        return list(value)

    def int_list(self, key: str, minimum: int = 1) -> Optional[list[int]]:
        value = self._get(key, list, "an array of integers", None)
        if value is None:
            return None
        ok = value and all(isinstance(x, int) and not isinstance(x, bool) and x >= minimum
                           for x in value)
        if not ok:
            raise ConfigError(self._field(key), f"must be a non-empty array of integers >= {minimum}")
        return list(value)

    def unknown_keys(self, known: set[str]) -> list[str]:
        return sorted(set(self.data) - known)


def _section(raw: dict, name: str) -> _Section:
    return _Section(raw.get(name, {}), name)


def load_run_config(path: str | Path, *, seed_override: Optional[int] = None,
                    out_override: Optional[str] = None) -> RunConfig:
    p = Path(path)
    try:
        blob = p.read_bytes()
    except OSError as exc:
        raise ConfigError(str(p), f"cannot read config: {exc}") from exc
    try:
        raw = tomllib.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(str(p), f"not valid TOML: {exc}") from exc

    base = p.parent

    def resolve(rel: Optional[str]) -> Optional[Path]:
        return (base / rel) if rel is not None else None

    dataset = _section(raw, "dataset")
    manifest = resolve(dataset.str_("manifest"))
    grid_list = dataset.int_list("grid") or [3, 3]
    if len(grid_list) != 2:
        raise ConfigError("dataset.grid", "must be [rows, cols]")
    split = dataset.str_("split")

    classes = _section(raw, "classes")
    names = classes.str_list("names")
    taxonomy_path = resolve(classes.str_("taxonomy"))
    if names is not None and taxonomy_path is not None:
        raise ConfigError("classes", "give 'names' or 'taxonomy', not both")
    if names is None and taxonomy_path is None:
        raise ConfigError("classes", "one of 'names' or 'taxonomy' is required")

    prompt = _section(raw, "prompt")
    try:
        prompt_cfg = PromptConfig(
            context_line=prompt.str_("context_line", DEFAULT_CONTEXT_LINE),
            directive=prompt.str_("directive", DEFAULT_DIRECTIVE),
            include_classes=prompt.bool_("include_classes", False),
            include_geo_context=prompt.bool_("include_geo_context", False),
            strict_geo_context=prompt.bool_("strict_geo_context", False),
            classifier_template=prompt.str_("classifier_template", DEFAULT_CLASSIFIER_TEMPLATE),
            fallback_template=prompt.str_("fallback_template", DEFAULT_FALLBACK_TEMPLATE),
        )
    except ValueError as exc:
        raise ConfigError("prompt", str(exc)) from exc

    backends = _section(raw, "backends")
    mode = backends.str_("mode", MODE_SCRIPTED)
    if mode not in (MODE_SCRIPTED, MODE_HTTP):
        raise ConfigError("backends.mode", f"must be '{MODE_SCRIPTED}' or '{MODE_HTTP}'")
    transcript = resolve(backends.str_("transcript"))
    base_url = backends.str_("base_url")
    if mode == MODE_SCRIPTED and transcript is None:
        raise ConfigError("backends.transcript", "required when mode is 'scripted'")
    if mode == MODE_HTTP and not base_url:
        raise ConfigError("backends.base_url", "required when mode is 'http'")

    classifier_model = backends.str_("classifier_model", "classifier")
    temperature = backends.float_("temperature", 0.0)
    max_tokens = backends.int_("max_output_tokens", 512, minimum=1)
    try:
        decoding = Decoding(temperature=temperature, max_output_tokens=max_tokens)
    except ValueError as exc:
        raise ConfigError("backends", str(exc)) from exc
    rps = backends.float_("requests_per_second")
    if rps is not None and rps <= 0:
        raise ConfigError("backends.requests_per_second", "must be > 0")
    max_in_flight = backends.int_("max_in_flight", minimum=1)

    run = _section(raw, "run")
    seed = run.int_("seed", 0, minimum=0)
    output_dir = resolve(run.str_("output_dir")) or base / "out"
    cache_dir = resolve(run.str_("cache_dir")) or base / "cache"
    workers = run.int_("workers", 4, minimum=1)
    cluster_sizes = run.int_list("cluster_sizes")

    if seed_override is not None:
        seed = seed_override
    if out_override is not None:
        output_dir = Path(out_override)

    return RunConfig(
        config_path=p,
        config_digest=hashlib.sha256(blob).hexdigest(),
        dataset_manifest=manifest,
        grid=(grid_list[0], grid_list[1]),
        split=split,
        class_names=names,
        taxonomy_path=taxonomy_path,
        prompt=prompt_cfg,
        backend_mode=mode,
        transcript_path=transcript,
        base_url=base_url,
        describer_model=backends.str_("describer_model", "describer"),
        classifier_model=classifier_model,
        embedder_model=backends.str_("embedder_model", "embedder"),
        cluster_model=backends.str_("cluster_model", classifier_model),
        decoding=decoding,
        retries=backends.int_("retries", 3, minimum=1),
        requests_per_second=rps,
        max_in_flight=max_in_flight,
        seed=seed,
        cache_dir=cache_dir,
        output_dir=output_dir,
        workers=workers,
        cluster_sizes=cluster_sizes,
    )
