"""Command-line entry point.

Five subcommands share one config file: describe (vision descriptions
only), classify (flat two-stage classification), cluster (build a class
taxonomy), run-hier (routed classification over a taxonomy), and evaluate
(score an earlier run against dataset ground truth). Every command writes
deterministic artifacts plus a run manifest into the output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Sequence, TypeVar

from .cache import CachingBackend, ResponseStore
from .config import MODE_HTTP, RunConfig, load_run_config
from .errors import BackendFailure, ConfigError, GvlError, SchemaViolation
from .evaluation import emit_report, score, score_hierarchical, write_per_depth_csv
from .gateway import (
    Backend,
    HttpBackend,
    ModelHandle,
    RateLimiter,
    RetryPolicy,
    ScriptedBackend,
    ScriptedTranscript,
)
from .hierarchy import HierarchicalOutcome, classify_hierarchical, truth_path
from .imaging import (
    ImagePatch,
    label_patch,
    load_mask,
    load_scene,
    pick_timestamp,
    read_dataset_manifest,
    tile,
)
from .manifest import RunManifest
from .pipeline import SOURCE_FALLBACK, classify_patch, obtain_description
from .taxonomy import (
    ClassLabel,
    ClusterSpec,
    Taxonomy,
    build_hierarchy,
    load_taxonomy,
    save_taxonomy,
    unique_labels,
)

T = TypeVar("T")
U = TypeVar("U")


class Runtime:
    """Backends, handles, and shared state assembled from one config."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.manifest = RunManifest(
            command=command,
            config_digest=cfg.config_digest,
            backend_mode=cfg.backend_mode,
            models={
                "describer": cfg.describer_model,
                "classifier": cfg.classifier_model,
                "embedder": cfg.embedder_model,
                "cluster": cfg.cluster_model,
            },
            seed=cfg.seed,
        )
        self.backend = self._build_backend()
        retry = RetryPolicy(max_attempts=cfg.retries)

        def handle(model_id: str) -> ModelHandle:
            return ModelHandle(backend=self.backend, model_id=model_id,
                               decoding=cfg.decoding, retry=retry,
                               recorder=self.manifest.record)

        self.describer = handle(cfg.describer_model)
        self.classifier = handle(cfg.classifier_model)
        self.embedder = handle(cfg.embedder_model)
        self.cluster = handle(cfg.cluster_model)

    def _build_backend(self) -> Backend:
        cfg = self.cfg
        if cfg.backend_mode == MODE_HTTP:
            limiter = None
            if cfg.max_in_flight or cfg.requests_per_second:
                limiter = RateLimiter(max_in_flight=cfg.max_in_flight,
                                      requests_per_second=cfg.requests_per_second)
            base: Backend = HttpBackend(cfg.base_url or "", limiter=limiter)
        else:
            base = ScriptedBackend(ScriptedTranscript.from_file(cfg.transcript_path))
        return CachingBackend(base, ResponseStore(cfg.cache_dir))

    @property
    def out_dir(self) -> Path:
        self.cfg.output_dir.mkdir(parents=True, exist_ok=True)
        return self.cfg.output_dir

    def classes(self) -> list[ClassLabel]:
        if self.cfg.class_names is not None:
            return unique_labels(self.cfg.class_names)
        return self.taxonomy().leaf_labels()

    def taxonomy(self) -> Taxonomy:
        if self.cfg.taxonomy_path is None:
            raise ConfigError("classes.taxonomy", "this command needs a taxonomy file")
        return load_taxonomy(self.cfg.taxonomy_path)

    def patches(self) -> list[ImagePatch]:
        cfg = self.cfg
        if cfg.dataset_manifest is None:
            raise ConfigError("dataset.manifest", "this command needs a dataset")
        rows = read_dataset_manifest(cfg.dataset_manifest)
        if cfg.split is not None:
            rows = [r for r in rows if r.split == cfg.split]
            if not rows:
                raise ConfigError("dataset.split", f"no scenes in split {cfg.split!r}")
        base = cfg.dataset_manifest.parent
        order: list[str] = []
        versions: dict[str, list] = {}
        for row in rows:
            if row.scene_id not in versions:
                order.append(row.scene_id)
            versions.setdefault(row.scene_id, []).append(row)

        patches: list[ImagePatch] = []
        for scene_id in order:
            group = versions[scene_id]
            if len(group) > 1:
                chosen_path = pick_timestamp(scene_id, [r.path for r in group], cfg.seed)
                row = next(r for r in group if r.path == chosen_path)
                timestamp = Path(row.path).stem
            else:
                row, timestamp = group[0], None
            scene = load_scene(base / row.path, scene_id=scene_id, timestamp=timestamp)
            tiles = tile(scene, cfg.grid)
            if row.mask_path is not None:
                mask = load_mask(base / row.mask_path)
                for patch in tiles:
                    patch.ground_truth = label_patch(patch, mask)
            elif row.class_name is not None:
                truth = ClassLabel(row.class_name)
                for patch in tiles:
                    patch.ground_truth = truth
            patches.extend(tiles)
        patches.sort(key=lambda p: (p.scene_id, p.grid_pos))
        return patches

    def map_patches(self, fn: Callable[[T], U], items: Sequence[T]) -> list[U]:
        if self.cfg.workers <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
            return list(pool.map(fn, items))

    def finish(self, *outputs: Path) -> None:
        for path in outputs:
            self.manifest.add_output(path)
        self.manifest.write(self.out_dir)


def write_jsonl(path: Path, rows: Sequence[dict]) -> Path:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":"), ensure_ascii=False) + "\n")
    return path


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_describe(rt: Runtime) -> int:
    classes = rt.classes()
    patches = rt.patches()

    def one(patch: ImagePatch) -> dict:
        description, digest = obtain_description(patch, classes, rt.cfg.prompt, rt.describer)
        return {
            "patch_id": patch.patch_id,
            "scene_id": patch.scene_id,
            "grid_pos": list(patch.grid_pos),
            "model_id": rt.cfg.describer_model,
            "prompt_digest": digest,
            "text": description.text if description is not None else "",
        }

    rows = rt.map_patches(one, patches)
    out = write_jsonl(rt.out_dir / "descriptions.jsonl", rows)
    rt.finish(out)
    return 0


def _outcome_row(outcome) -> dict:
    row = {
        "patch_id": outcome.patch_id,
        "scene_id": outcome.scene_id,
        "grid_pos": list(outcome.grid_pos),
        "label": outcome.label.name,
        "source": outcome.source,
        "description_digest": outcome.description_digest,
        "raw_output": outcome.raw_output,
    }
    if outcome.source == SOURCE_FALLBACK:
        row["scores"] = outcome.scores
    return row


def cmd_classify(rt: Runtime) -> int:
    classes = rt.classes()
    patches = rt.patches()

    def one(patch: ImagePatch):
        return classify_patch(patch, classes, rt.cfg.prompt,
                              rt.describer, rt.classifier, rt.embedder)

    outcomes = rt.map_patches(one, patches)
    out = write_jsonl(rt.out_dir / "predictions.jsonl", [_outcome_row(o) for o in outcomes])
    written = [out]
    truths = {p.patch_id: p.ground_truth for p in patches}
    if all(t is not None for t in truths.values()):
        pairs = [(o.label, truths[o.patch_id]) for o in outcomes]
        written.extend(emit_report(score(pairs, classes), rt.out_dir))
    rt.finish(*written)
    return 0


def cmd_cluster(rt: Runtime) -> int:
    if rt.cfg.class_names is None:
        raise ConfigError("classes.names", "clustering starts from a flat class list")
    if rt.cfg.cluster_sizes is None:
        raise ConfigError("run.cluster_sizes", "clustering needs per-level group counts")
    labels = unique_labels(rt.cfg.class_names)
    spec = ClusterSpec(tuple(rt.cfg.cluster_sizes))
    taxonomy = build_hierarchy(labels, spec, rt.cluster)
    out = rt.out_dir / "taxonomy.json"
    save_taxonomy(taxonomy, out)
    rt.finish(out)
    return 0


def cmd_run_hier(rt: Runtime) -> int:
    taxonomy = rt.taxonomy()
    patches = rt.patches()

    def one(patch: ImagePatch) -> HierarchicalOutcome:
        outcome = classify_hierarchical(patch, taxonomy, rt.cfg.prompt,
                                        rt.describer, rt.classifier, rt.embedder)
        if patch.ground_truth is not None:
            outcome.truth_path = truth_path(patch.ground_truth, taxonomy)
        return outcome

    outcomes = rt.map_patches(one, patches)
    rows = []
    for o in outcomes:
        row = {
            "patch_id": o.patch_id,
            "scene_id": o.scene_id,
            "grid_pos": list(o.grid_pos),
            "path": o.path,
            "sources": o.sources,
        }
        if o.truth_path is not None:
            row["truth_path"] = o.truth_path
        rows.append(row)
    out = write_jsonl(rt.out_dir / "hierarchical.jsonl", rows)
    written = [out]
    if outcomes and all(o.truth_path is not None for o in outcomes):
        per_depth = score_hierarchical(outcomes, taxonomy)
        per_depth_path = rt.out_dir / "per_depth_oa.csv"
        write_per_depth_csv(per_depth, per_depth_path)
        written.append(per_depth_path)
    rt.finish(*written)
    return 0


def cmd_evaluate(rt: Runtime, predictions: Optional[str] = None) -> int:
    patches = rt.patches()
    truths = {p.patch_id: p.ground_truth for p in patches}
    if any(t is None for t in truths.values()):
        raise ConfigError("dataset.manifest", "evaluation needs ground truth for every scene")

    hierarchical = rt.cfg.taxonomy_path is not None
    default_name = "hierarchical.jsonl" if hierarchical else "predictions.jsonl"
    pred_path = Path(predictions) if predictions else rt.cfg.output_dir / default_name
    if not pred_path.exists():
        raise ConfigError("run.output_dir", f"no predictions at {pred_path}")

    rows = []
    with pred_path.open(encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SchemaViolation(f"{pred_path}:line {i + 1}", f"not valid JSON: {exc}") from exc
    missing = [r.get("patch_id") for r in rows if r.get("patch_id") not in truths]
    if missing:
        raise SchemaViolation(str(pred_path), f"unknown patch ids: {missing[:3]}")

    if hierarchical:
        taxonomy = rt.taxonomy()
        outcomes = [
            HierarchicalOutcome(
                patch_id=r["patch_id"], scene_id=r.get("scene_id", ""),
                grid_pos=tuple(r.get("grid_pos", (0, 0))), path=list(r["path"]),
                sources=list(r.get("sources", [])),
                truth_path=truth_path(truths[r["patch_id"]], taxonomy))
            for r in rows
        ]
        per_depth = score_hierarchical(outcomes, taxonomy)
        per_depth_path = rt.out_dir / "per_depth_oa.csv"
        write_per_depth_csv(per_depth, per_depth_path)
        pairs = [(o.path[-1], truths[o.patch_id]) for o in outcomes]
        report = score(pairs, taxonomy.leaf_labels())
        report.per_depth_accuracy = per_depth
        written = emit_report(report, rt.out_dir) + [per_depth_path]
    else:
        classes = rt.classes()
        pairs = [(r["label"], truths[r["patch_id"]]) for r in rows]
        written = emit_report(score(pairs, classes), rt.out_dir)
    rt.finish(*written)
    return 0


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gvl",
        description="Zero-shot satellite image classification via model descriptions")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "describe": "write a vision description for every patch",
        "classify": "classify every patch against the flat class list",
        "cluster": "group the class list into a taxonomy",
        "run-hier": "classify every patch by routing through a taxonomy",
        "evaluate": "score an earlier run against dataset ground truth",
    }
    for name, help_text in specs.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the TOML run config")
        cmd.add_argument("--seed", type=int, default=None, help="override [run].seed")
        cmd.add_argument("--out", default=None, help="override [run].output_dir")
        if name == "evaluate":
            cmd.add_argument("--predictions", default=None,
                             help="score this file instead of the run's default output")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, seed_override=args.seed, out_override=args.out)
        rt = Runtime(cfg, command=args.command)
        if args.command == "describe":
            return cmd_describe(rt)
        if args.command == "classify":
            return cmd_classify(rt)
        if args.command == "cluster":
            return cmd_cluster(rt)
        if args.command == "run-hier":
            return cmd_run_hier(rt)
        return cmd_evaluate(rt, predictions=args.predictions)
    except ConfigError as exc:
        print(f"gvl: config error: {exc}", file=sys.stderr)
        return 2
    except BackendFailure as exc:
        print(f"gvl: backend failure: {exc}", file=sys.stderr)
        return 3
    except GvlError as exc:
        print(f"gvl: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
