"""Two-stage zero-shot patch classification with an embedding fallback.

A vision model describes a patch, a text model maps the description to one
of the user's classes, and when the text model never produces a usable
class name the patch is ranked against the classes by embedding cosine
similarity instead. Every outcome records which route produced it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import BackendFailure, DegenerateEmbedding, MissingGeoContext
from .gateway import (
    KIND_CLASSIFY,
    KIND_DESCRIBE,
    KIND_EMBED_IMAGE,
    KIND_EMBED_TEXT,
    ModelHandle,
    fingerprint,
)
from .imaging import PNG_MEDIA_TYPE, ImagePatch
from .taxonomy import ClassLabel, match_key

SOURCE_PRIMARY = "primary"
SOURCE_FALLBACK = "fallback"

DEFAULT_CONTEXT_LINE = "This is a satellite image"
DEFAULT_DIRECTIVE = "Describe this image in detail."
DEFAULT_CLASSIFIER_TEMPLATE = (
    "You are given a description of a satellite image. Description: {description}. "
    "Choose exactly one class from: {classes}. Answer with the class name only."
)
DEFAULT_FALLBACK_TEMPLATE = "a satellite photo of {class}"
REMINDER_SUFFIX = (
    " Remember: answer with exactly one class name from the list and nothing else."
)


@dataclass(frozen=True)
class PromptConfig:
    """Knobs for the vision prompt and both classification templates."""

    context_line: str = DEFAULT_CONTEXT_LINE
    directive: str = DEFAULT_DIRECTIVE
    include_classes: bool = False
    include_geo_context: bool = False
    strict_geo_context: bool = False
    classifier_template: str = DEFAULT_CLASSIFIER_TEMPLATE
    fallback_template: str = DEFAULT_FALLBACK_TEMPLATE

    def __post_init__(self):
        for slot in ("{description}", "{classes}"):
            if slot not in self.classifier_template:
                raise ValueError(f"classifier template must contain {slot}")
        if "{class}" not in self.fallback_template:
            raise ValueError("fallback template must contain {class}")


@dataclass(frozen=True)
class Description:
    patch_id: str
    text: str
    prompt_digest: str
    model_id: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("description text must be non-empty")

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


@dataclass
class ClassificationOutcome:
    patch_id: str
    scene_id: str
    grid_pos: tuple[int, int]
    label: ClassLabel
    source: str
    raw_output: Optional[str] = None
    scores: Optional[list[float]] = None
    description_digest: Optional[str] = None


def _as_sentence(text: str) -> str:
    stripped = text.strip()
    if stripped and stripped[-1] not in ".!?":
        stripped += "."
    return stripped


def build_vision_prompt(patch: ImagePatch, classes: Sequence[ClassLabel],
                        cfg: PromptConfig) -> str:
    """Compose the description prompt as a sequence of sentences.

    Optional parts: a sentence naming the patch's map grid cell (the token
    appears verbatim), and a closing sentence listing the possible classes.
    A strict geo-context request on a patch without one is an error; a
    non-strict one just omits the sentence.
    """
    parts = [_as_sentence(cfg.context_line)]
    if cfg.include_geo_context:
        if patch.geo_context is None:
            if cfg.strict_geo_context:
                raise MissingGeoContext(f"patch {patch.patch_id} has no map grid cell")
        else:
            parts.append(f"It covers map grid cell {patch.geo_context}.")
    parts.append(_as_sentence(cfg.directive))
    if cfg.include_classes:
        names = ", ".join(lbl.name for lbl in classes)
        parts.append(f"The possible classes are: {names}.")
    return " ".join(parts)


def resolve_class(raw: str, classes: Sequence[ClassLabel]) -> Optional[ClassLabel]:
    """Map a model's raw answer to one of the classes, or None.

    An exact (cleaned, case-insensitive) match wins. Otherwise classes whose
    cleaned name and the cleaned answer contain one another either way are
    candidates; a single candidate is accepted, and among several the
    strictly longest class name wins so a negated class beats its substring.
    Anything else is unresolvable.
    """
    key = match_key(raw)
    if not key:
        return None
    by_key = {match_key(lbl.name): lbl for lbl in classes}
    if key in by_key:
        return by_key[key]
    candidates = [(nk, lbl) for nk, lbl in by_key.items() if nk in key or key in nk]
    if len(candidates) == 1:
        return candidates[0][1]
    if len(candidates) > 1:
        candidates.sort(key=lambda p: len(p[0]), reverse=True)
        if len(candidates[0][0]) > len(candidates[1][0]):
            return candidates[0][1]
    return None


def classify_description(text: str, classes: Sequence[ClassLabel], handle: ModelHandle,
                         *, template: str = DEFAULT_CLASSIFIER_TEMPLATE
                         ) -> tuple[Optional[ClassLabel], str]:
    """One text-model attempt at picking a class for a description."""
    prompt = template.format_map({
        "description": text,
        "classes": ", ".join(lbl.name for lbl in classes),
    })
    raw = handle.text(KIND_CLASSIFY, prompt)
    return resolve_class(raw, classes), raw


def rank_by_cosine(image_vec: Sequence[float],
                   class_vecs: Sequence[Sequence[float]]) -> tuple[int, list[float]]:
    """Index of the most cosine-similar class vector, plus all similarities.

    Similarity is scale-invariant; a zero-length vector has no direction
    and is rejected. Ties go to the lowest index.
    """
    img = np.asarray(image_vec, dtype=np.float64)
    mat = np.asarray(class_vecs, dtype=np.float64)
    if img.ndim != 1 or mat.ndim != 2 or mat.shape[0] < 1 or mat.shape[1] != img.shape[0]:
        raise ValueError("need one image vector and a matching non-empty set of class vectors")
    img_norm = np.linalg.norm(img)
    norms = np.linalg.norm(mat, axis=1)
    if img_norm == 0.0 or np.any(norms == 0.0):
        raise DegenerateEmbedding("zero-length embedding has no direction")
    scores = (mat @ img) / (norms * img_norm)
    return int(np.argmax(scores)), [float(s) for s in scores]


def fallback_classify(patch: ImagePatch, classes: Sequence[ClassLabel],
                      embedder: ModelHandle, *,
                      template: str = DEFAULT_FALLBACK_TEMPLATE,
                      image_bytes: Optional[bytes] = None) -> tuple[ClassLabel, list[float]]:
    """Pick the class whose templated text embeds closest to the image."""
    png = image_bytes if image_bytes is not None else patch.png_bytes()
    image_vec = embedder.vector(KIND_EMBED_IMAGE, "", image=png, media_type=PNG_MEDIA_TYPE)
    class_vecs = [
        embedder.vector(KIND_EMBED_TEXT, template.format_map({"class": lbl.name}))
        for lbl in classes
    ]
    best, scores = rank_by_cosine(image_vec, class_vecs)
    return classes[best], scores


def obtain_description(patch: ImagePatch, classes: Sequence[ClassLabel], cfg: PromptConfig,
                       describer: ModelHandle, *, retries: int = 1
                       ) -> tuple[Optional[Description], str]:
    """Ask the vision model to describe a patch; re-ask when it says nothing.

    Returns the description (None when every attempt came back blank) and
    the digest identifying the describe request.
    """
    prompt = build_vision_prompt(patch, classes, cfg)
    req = describer.request(KIND_DESCRIBE, prompt,
                            image=patch.png_bytes(), media_type=PNG_MEDIA_TYPE)
    digest = fingerprint(req)
    for _ in range(retries + 1):
        text = describer.run(req).text or ""
        if text.strip():
            return Description(patch_id=patch.patch_id, text=text,
                               prompt_digest=digest, model_id=describer.model_id), digest
    return None, digest


def classify_patch(patch: ImagePatch, classes: Sequence[ClassLabel], cfg: PromptConfig,
                   describer: ModelHandle, classifier: ModelHandle,
                   embedder: ModelHandle) -> ClassificationOutcome:
    """Full route for one patch: describe, classify, re-ask, then fall back.

    The text model gets one plain attempt and one attempt with a reminder
    appended; only when both fail to name a class, or the primary backends
    fail outright, does the embedding fallback run. A transport failure
    inside the fallback itself propagates.
    """
    raw: Optional[str] = None
    digest: Optional[str] = None
    try:
        description, digest = obtain_description(patch, classes, cfg, describer)
        if description is not None:
            label, raw = classify_description(description.text, classes, classifier,
                                              template=cfg.classifier_template)
            if label is None:
                label, raw = classify_description(
                    description.text, classes, classifier,
                    template=cfg.classifier_template + REMINDER_SUFFIX)
            if label is not None:
                return ClassificationOutcome(
                    patch_id=patch.patch_id, scene_id=patch.scene_id,
                    grid_pos=patch.grid_pos, label=label, source=SOURCE_PRIMARY,
                    raw_output=raw, description_digest=digest)
    except BackendFailure:
        pass
    label, scores = fallback_classify(patch, classes, embedder, template=cfg.fallback_template)
    return ClassificationOutcome(
        patch_id=patch.patch_id, scene_id=patch.scene_id, grid_pos=patch.grid_pos,
        label=label, source=SOURCE_FALLBACK, raw_output=raw, scores=scores,
        description_digest=digest)
