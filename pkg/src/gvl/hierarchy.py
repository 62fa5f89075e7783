"""Routed classification over a class taxonomy.

A patch is described once, then walked down the tree: at every node the
text model chooses among that node's groups (or classes, at the bottom),
and the choice decides which subtree handles the next level. Levels with a
single option are forced without a model call. Each level's decision
records whether the text route or the embedding fallback produced it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import BackendFailure, PathMismatch, UnknownLabel
from .gateway import ModelHandle
from .imaging import ImagePatch
from .pipeline import (
    SOURCE_FALLBACK,
    SOURCE_PRIMARY,
    PromptConfig,
    classify_description,
    fallback_classify,
    obtain_description,
)
from .pipeline import REMINDER_SUFFIX
from .taxonomy import ClassLabel, Taxonomy, TaxonomyNode


@dataclass
class HierarchicalOutcome:
    """One patch's route through the tree: chosen names, top level first."""

    patch_id: str
    scene_id: str
    grid_pos: tuple[int, int]
    path: list[str]
    sources: list[str]
    description_digest: Optional[str] = None
    truth_path: Optional[list[str]] = field(default=None)


def truth_path(label: ClassLabel | str, taxonomy: Taxonomy) -> list[str]:
    """Node names from just below the root down to the given class."""
    target = label.key if isinstance(label, ClassLabel) else label.strip().casefold()

    def walk(node: TaxonomyNode, prefix: list[str]) -> Optional[list[str]]:
        for leaf in node.leaves:
            if leaf.key == target:
                return prefix + [leaf.name]
        for child in node.children:
            found = walk(child, prefix + [child.name])
            if found is not None:
                return found
        return None

    found = walk(taxonomy.root, [])
    if found is None:
        name = label.name if isinstance(label, ClassLabel) else label
        raise UnknownLabel(f"class {name!r} is not a leaf of the taxonomy")
    return found


def validate_path(path: Sequence[str], taxonomy: Taxonomy) -> None:
    """Check that a path follows tree edges from the root down to a class."""
    if not path:
        raise PathMismatch("empty path")
    node = taxonomy.root
    for i, name in enumerate(path):
        key = name.strip().casefold()
        last = i == len(path) - 1
        if node.children:
            match = next(
                (c for c in node.children if c.name.strip().casefold() == key), None)
            if match is None:
                raise PathMismatch(f"{name!r} is not a group under {node.name!r}")
            if last:
                raise PathMismatch(f"path stops at group {name!r} before reaching a class")
            node = match
        else:
            if not last:
                raise PathMismatch(f"path continues past the class level at {name!r}")
            if not any(leaf.key == key for leaf in node.leaves):
                raise PathMismatch(f"{name!r} is not a class under {node.name!r}")


def _choose(description_text: Optional[str], options: Sequence[ClassLabel],
            cfg: PromptConfig, classifier: ModelHandle) -> Optional[ClassLabel]:
    if description_text is None:
        return None
    try:
        label, _ = classify_description(description_text, options, classifier,
                                        template=cfg.classifier_template)
        if label is None:
            label, _ = classify_description(description_text, options, classifier,
                                            template=cfg.classifier_template + REMINDER_SUFFIX)
        return label
    except BackendFailure:
        return None


def classify_hierarchical(patch: ImagePatch, taxonomy: Taxonomy, cfg: PromptConfig,
                          describer: ModelHandle, classifier: ModelHandle,
                          embedder: ModelHandle) -> HierarchicalOutcome:
    """Walk a patch down the tree, one decision per level.

    The description is produced once and reused at every level; the class
    list shown to the vision model (when enabled) is the full leaf set. A
    level falls back to embeddings when the text route cannot name one of
    its options; a failed describe call pushes every level onto the
    fallback. Fallback transport failures propagate.
    """
    leaves = taxonomy.leaf_labels()
    description_text: Optional[str] = None
    digest: Optional[str] = None
    try:
        description, digest = obtain_description(patch, leaves, cfg, describer)
        if description is not None:
            description_text = description.text
    except BackendFailure:
        pass

    path: list[str] = []
    sources: list[str] = []
    node = taxonomy.root
    while True:
        at_leaf_level = not node.children
        if at_leaf_level:
            options = list(node.leaves)
        else:
            options = [ClassLabel(c.name) for c in node.children]
        if len(options) == 1:
            choice = options[0]
            sources.append(SOURCE_PRIMARY)
        else:
            choice = _choose(description_text, options, cfg, classifier)
            if choice is not None:
                sources.append(SOURCE_PRIMARY)
            else:
                choice, _scores = fallback_classify(patch, options, embedder,
                                                    template=cfg.fallback_template)
                sources.append(SOURCE_FALLBACK)
        path.append(choice.name)
        if at_leaf_level:
            break
        node = next(c for c in node.children
                    if c.name.strip().casefold() == choice.key)

    return HierarchicalOutcome(
        patch_id=patch.patch_id, scene_id=patch.scene_id, grid_pos=patch.grid_pos,
        path=path, sources=sources, description_digest=digest)
