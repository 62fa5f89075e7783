"""Scenes, patch tiling, footprint masks, and dataset manifests.

Scenes are RGB pixel grids. Tiling splits a scene into a rows-by-cols grid
of contiguous patches whose strip widths differ by at most one pixel, so
the patches exactly cover the scene. Binary footprint masks turn patches
into presence/absence ground truth. A small manifest format (CSV or JSONL)
lists scene files with either a class name or a mask path.
"""

from __future__ import annotations

import csv
import io
import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import GridTooFine, MaskMismatch, SchemaViolation, UnsupportedImage
from .taxonomy import ClassLabel

BUILDINGS = ClassLabel("Buildings")
NO_BUILDINGS = ClassLabel("No Buildings")

PNG_MEDIA_TYPE = "image/png"

GEO_RE = re.compile(r"L\d+-\d+E-\d+N")


@dataclass
class Scene:
    """One source image plus identity metadata."""

    id: str
    pixels: np.ndarray
    filename: str = ""
    timestamp: Optional[str] = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError("scene pixels must be an HxWx3 uint8 array")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("scene must have at least one pixel")
        self.pixels = px


@dataclass
class ImagePatch:
    scene_id: str
    grid_pos: tuple[int, int]
    pixels: np.ndarray
    origin: tuple[int, int]
    geo_context: Optional[str] = None
    ground_truth: Optional[ClassLabel] = None
    timestamp: Optional[str] = None
    _png: Optional[bytes] = field(default=None, repr=False, compare=False)

    @property
    def patch_id(self) -> str:
        row, col = self.grid_pos
        return f"{self.scene_id}:{row}-{col}"

    def png_bytes(self) -> bytes:
        if self._png is None:
            buf = io.BytesIO()
            Image.fromarray(self.pixels, mode="RGB").save(buf, format="PNG")
            self._png = buf.getvalue()
        return self._png


@dataclass
class FootprintMask:
    """Binary per-pixel presence mask aligned with a scene."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError("mask pixels must be a 2-D array")
        self.pixels = px.astype(bool)


def _axis_splits(total: int, parts: int) -> list[int]:
    """Split a length into near-equal strips, longer strips first."""
    q, r = divmod(total, parts)
    return [q + 1] * r + [q] * (parts - r)


def extract_geo_context(filename: str) -> Optional[str]:
    """Leftmost grid-cell token like L15-2044E-0928N in a filename, if any."""
    m = GEO_RE.search(filename)
    return m.group(0) if m else None


def tile(scene: Scene, grid: tuple[int, int]) -> list[ImagePatch]:
    """Cut a scene into a rows x cols grid of patches, row-major order.

    Strip widths along each axis differ by at most one pixel and cover the
    axis exactly. A grid finer than the pixel count cannot produce
    non-empty patches and is rejected.
    """
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise GridTooFine(f"grid {rows}x{cols} is not positive")
    height, width = scene.pixels.shape[:2]
    if rows > height or cols > width:
        raise GridTooFine(f"grid {rows}x{cols} exceeds scene size {height}x{width}")
    row_sizes = _axis_splits(height, rows)
    col_sizes = _axis_splits(width, cols)
    geo = extract_geo_context(scene.filename)
    patches: list[ImagePatch] = []
    y = 0
    for r, rh in enumerate(row_sizes):
        x = 0
        for c, cw in enumerate(col_sizes):
            patches.append(ImagePatch(
                scene_id=scene.id,
                grid_pos=(r, c),
                pixels=np.ascontiguousarray(scene.pixels[y:y + rh, x:x + cw]),
                origin=(y, x),
                geo_context=geo,
                timestamp=scene.timestamp,
            ))
            x += cw
        y += rh
    return patches


def label_patch(patch: ImagePatch, mask: FootprintMask) -> ClassLabel:
    """Buildings when any mask pixel under the patch is set, else No Buildings."""
    y, x = patch.origin
    h, w = patch.pixels.shape[:2]
    mh, mw = mask.pixels.shape
    if y + h > mh or x + w > mw:
        raise MaskMismatch(
            f"patch {patch.patch_id} spans [{y}:{y + h}, {x}:{x + w}] "
            f"outside mask of size {mh}x{mw}")
    window = mask.pixels[y:y + h, x:x + w]
    return BUILDINGS if bool(window.any()) else NO_BUILDINGS


def _pick_index(seed: int, scene_id: str, n: int) -> int:
    return random.Random(f"{seed}:{scene_id}").randrange(n)


def pick_timestamp(scene_id: str, versions: Sequence[str], seed: int) -> str:
    """Deterministically pick one of a scene's capture versions.

    The draw depends only on (seed, scene_id), so every run with the same
    seed sees the same version regardless of iteration order, and the
    choices are near-uniform across versions.
    """
    if not versions:
        raise ValueError("at least one version is required")
    return versions[_pick_index(seed, scene_id, len(versions))]


# --------------------------------------------------------------------------
# File loading
# --------------------------------------------------------------------------


def load_scene(path: str | Path, *, scene_id: Optional[str] = None,
               timestamp: Optional[str] = None) -> Scene:
    p = Path(path)
    try:
        img = Image.open(p)
        img.load()
    except (OSError, ValueError) as exc:
        raise UnsupportedImage(f"cannot read image {p}: {exc}") from exc
    if img.mode == "RGBA":
        img = img.convert("RGB")
    if img.mode != "RGB":
        raise UnsupportedImage(f"{p} has mode {img.mode}; only RGB or RGBA input is supported")
    return Scene(
        id=scene_id if scene_id is not None else p.stem,
        pixels=np.asarray(img, dtype=np.uint8),
        filename=p.name,
        timestamp=timestamp,
    )


def load_mask(path: str | Path) -> FootprintMask:
    p = Path(path)
    try:
        img = Image.open(p)
        img.load()
    except (OSError, ValueError) as exc:
        raise UnsupportedImage(f"cannot read mask {p}: {exc}") from exc
    if img.mode not in ("1", "L", "I", "I;16"):
        raise UnsupportedImage(f"{p} has mode {img.mode}; masks must be single-channel")
    return FootprintMask(np.asarray(img) > 0)


# --------------------------------------------------------------------------
# Dataset manifests
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    """One scene entry: image path plus either a class name or a mask path."""

    path: str
    scene_id: str
    class_name: Optional[str] = None
    mask_path: Optional[str] = None
    split: Optional[str] = None


def _row_from_mapping(data: dict, where: str) -> ManifestRow:
    path = (data.get("path") or "").strip()
    if not path:
        raise SchemaViolation(where, "'path' is required")
    scene_id = (data.get("scene_id") or "").strip() or Path(path).stem
    class_name = (data.get("class") or data.get("class_name") or "").strip() or None
    mask_path = (data.get("mask_path") or "").strip() or None
    if class_name and mask_path:
        raise SchemaViolation(where, "give 'class' or 'mask_path', not both")
    split = (data.get("split") or "").strip() or None
    return ManifestRow(path=path, scene_id=scene_id, class_name=class_name,
                       mask_path=mask_path, split=split)


def read_dataset_manifest(path: str | Path) -> list[ManifestRow]:
    """Read a scene manifest; CSV or JSONL chosen by file extension."""
    p = Path(path)
    rows: list[ManifestRow] = []
    if p.suffix.lower() == ".csv":
        with p.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "path" not in reader.fieldnames:
                raise SchemaViolation(str(p), "CSV manifest needs a 'path' column")
            for i, raw in enumerate(reader):
                data = {k: v for k, v in raw.items() if k is not None and v is not None}
                rows.append(_row_from_mapping(data, f"{p}:row {i + 2}"))
    elif p.suffix.lower() in (".jsonl", ".ndjson"):
        with p.open(encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                if not line.strip():
                    continue
                where = f"{p}:line {i + 1}"
                try:
                    data = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise SchemaViolation(where, f"not valid JSON: {exc}") from exc
                if not isinstance(data, dict):
                    raise SchemaViolation(where, "each line must be a JSON object")
                rows.append(_row_from_mapping(data, where))
    else:
        raise SchemaViolation(str(p), f"unsupported manifest extension {p.suffix!r}")
    if not rows:
        raise SchemaViolation(str(p), "manifest lists no scenes")
    return rows
