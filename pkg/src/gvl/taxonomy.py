"""Class labels and model-driven grouping of labels into a tree.

A flat list of class names is grouped level by level: the model proposes up
to K group names for a label set, then assigns each label to one of them.
Labels the model cannot place land in an Unknown bucket. Recursing over a
per-level size list yields a tree whose leaves are exactly the input labels,
which later drives routed classification.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .errors import MalformedModelOutput, SchemaViolation
from .gateway import KIND_CLASSIFY, ModelHandle

ROOT_NAME = "root"
UNKNOWN_NAME = "Unknown"

_WS_RE = re.compile(r"\s+")


def clean_name(raw: str) -> str:
    """Normalize a display name: punctuation becomes space, spaces collapse."""
    chars = [" " if unicodedata.category(c).startswith("P") else c for c in raw]
    return _WS_RE.sub(" ", "".join(chars)).strip()


def match_key(raw: str) -> str:
    """Case-insensitive comparison key for cleaned names."""
    return clean_name(raw).casefold()


@dataclass(frozen=True)
class ClassLabel:
    """A user-facing class name; whitespace-trimmed and non-empty."""

    name: str

    def __post_init__(self):
        stripped = self.name.strip()
        if not stripped:
            raise ValueError("class label must be non-empty")
        object.__setattr__(self, "name", stripped)

    @property
    def key(self) -> str:
        return self.name.casefold()


def unique_labels(names: Sequence[str]) -> list[ClassLabel]:
    """Build labels from names, rejecting case-insensitive duplicates."""
    seen: set[str] = set()
    out: list[ClassLabel] = []
    for name in names:
        label = ClassLabel(name)
        if label.key in seen:
            raise ValueError(f"duplicate class label {label.name!r}")
        seen.add(label.key)
        out.append(label)
    return out


@dataclass(frozen=True)
class ClusterSpec:
    """Target group counts per level, outermost first."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        if not self.sizes:
            raise ValueError("cluster spec needs at least one level")
        if any(k < 1 for k in self.sizes):
            raise ValueError("cluster sizes must be >= 1")

    @property
    def depth(self) -> int:
        return len(self.sizes)


@dataclass
class TaxonomyNode:
    """Internal node: either has child nodes or holds leaf labels, not both."""

    name: str
    children: list["TaxonomyNode"] = field(default_factory=list)
    leaves: list[ClassLabel] = field(default_factory=list)


@dataclass
class Taxonomy:
    root: TaxonomyNode

    def leaf_labels(self) -> list[ClassLabel]:
        out: list[ClassLabel] = []

        def walk(node: TaxonomyNode) -> None:
            out.extend(node.leaves)
            for child in node.children:
                walk(child)

        walk(self.root)
        return out

    def depth(self) -> int:
        """Length of the longest root-to-leaf path, counting edges."""

        def walk(node: TaxonomyNode) -> int:
            if node.leaves:
                base = 1
            else:
                base = 0
            if not node.children:
                return base
            return max(base, 1 + max(walk(c) for c in node.children))

        return walk(self.root)

    def validate(self, labels: Optional[Sequence[ClassLabel]] = None,
                 spec: Optional[ClusterSpec] = None) -> None:
        """Check structural invariants; raises SchemaViolation naming the node.

        Every node holds children or leaves but never both, sibling names are
        case-insensitively unique, and each leaf appears exactly once in the
        tree. With `labels` the leaf set must equal it; with `spec` each
        level's width must stay within the target plus an Unknown slot.
        """
        seen_leaves: dict[str, str] = {}

        def walk(node: TaxonomyNode, path: str, level: int) -> None:
            if node.children and node.leaves:
                raise SchemaViolation(path, "node holds both children and leaves")
            if not node.children and not node.leaves:
                raise SchemaViolation(path, "node holds neither children nor leaves")
            if spec is not None and node.children:
                limit = spec.sizes[level] + 1 if level < len(spec.sizes) else None
                if limit is not None and len(node.children) > limit:
                    raise SchemaViolation(
                        path, f"{len(node.children)} groups exceed the level budget of {limit}")
            names: set[str] = set()
            for child in node.children:
                key = child.name.strip().casefold()
                if not key:
                    raise SchemaViolation(f"{path}/{child.name}", "empty group name")
                if key in names:
                    raise SchemaViolation(f"{path}/{child.name}", "duplicate sibling group name")
                names.add(key)
                walk(child, f"{path}/{child.name}", level + 1)
            for leaf in node.leaves:
                if leaf.key in seen_leaves:
                    raise SchemaViolation(
                        path, f"class {leaf.name!r} appears more than once in the tree")
                seen_leaves[leaf.key] = leaf.name

        walk(self.root, self.root.name, 0)
        if labels is not None:
            want = {lbl.key: lbl.name for lbl in labels}
            if set(want) != set(seen_leaves):
                missing = sorted(set(want) - set(seen_leaves))
                extra = sorted(set(seen_leaves) - set(want))
                parts = []
                if missing:
                    parts.append("missing " + ", ".join(want[k] for k in missing))
                if extra:
                    parts.append("unexpected " + ", ".join(seen_leaves[k] for k in extra))
                raise SchemaViolation(self.root.name, "leaf set mismatch: " + "; ".join(parts))


# --------------------------------------------------------------------------
# Prompts and output parsing
# --------------------------------------------------------------------------

CLUSTER_LINE_RE = re.compile(r"^\s*cluster[\s_]*(\d+)\s*:\s*(.*\S)\s*$", re.IGNORECASE)
ASSIGN_LINE_RE = re.compile(r"cluster(?:[\s_]*\d+)?\s*:\s*(.+)", re.IGNORECASE)


def step1_prompt(labels: Sequence[ClassLabel], k: int) -> str:
    names = ", ".join(lbl.name for lbl in labels)
    return (
        f"Suggest {k} non-overlapping category names for the following labels "
        "based on semantic similarity. Output in the form Cluster_1: [Name], "
        f"..., Cluster_{k}: [Name].\n"
        f"Labels: {names}"
    )


def step2_prompt(label: ClassLabel, meta_names: Sequence[str]) -> str:
    names = ", ".join(meta_names)
    return (
        f"Assign this label to one of the categories: {names}. "
        "Output in the form Cluster: [Name].\n"
        f"Label: {label.name}"
    )


def parse_cluster_name_line(line: str) -> Optional[tuple[int, str]]:
    """Parse one `Cluster_i: Name` line; None when it does not fit.

    Bracket wrappers and trailing punctuation are absorbed by name cleaning,
    so `cluster_2: [Bodies of Water].` yields (2, "Bodies of Water").
    """
    m = CLUSTER_LINE_RE.match(line)
    if not m:
        return None
    name = clean_name(m.group(2))
    if not name:
        return None
    return int(m.group(1)), name


def _words(key: str) -> set[str]:
    return set(key.split())


def generate_meta_class_names(labels: Sequence[ClassLabel], k: int,
                              handle: ModelHandle, *, retries: int = 2) -> list[str]:
    """Step 1: ask for up to k group names for a label set.

    Parseable lines are kept in index order, deduplicated case-insensitively
    keeping the first spelling, and truncated to k. Responses with no
    parseable line at all are re-asked; a model that never produces one
    raises MalformedModelOutput.
    """
    prompt = step1_prompt(labels, k)
    attempts = retries + 1
    last = ""
    for _ in range(attempts):
        last = handle.text(KIND_CLASSIFY, prompt)
        parsed = [p for p in (parse_cluster_name_line(ln) for ln in last.splitlines()) if p]
        if not parsed:
            continue
        parsed.sort(key=lambda p: p[0])
        out: list[str] = []
        seen: set[str] = set()
        for _, name in parsed:
            key = name.casefold()
            if key in seen:
                continue
            seen.add(key)
            out.append(name)
            if len(out) == k:
                break
        return out
    raise MalformedModelOutput(
        f"no Cluster_i lines in model output after {attempts} attempts: {last[:200]!r}")


def _assignment_candidates(response: str, meta_names: Sequence[str]) -> list[str]:
    """Group names plausibly referenced by a free-form response.

    A group is a candidate when its cleaned name and the cleaned response
    contain one another either way, or share at least one word.
    """
    key = match_key(response)
    if not key:
        return []
    key_words = _words(key)
    out = []
    for name in meta_names:
        nk = match_key(name)
        if nk in key or key in nk or (_words(nk) & key_words):
            out.append(name)
    return out


def assign_label(label: ClassLabel, meta_names: Sequence[str],
                 handle: ModelHandle, *, retries: int = 2) -> str:
    """Step 2: place one label into one of the proposed groups.

    An exact (cleaned, case-insensitive) `Cluster: Name` answer wins. A
    recognizable but inexact answer falls back to the candidate heuristic
    over the whole response: a single candidate is accepted, several mean
    the answer was ambiguous and the label goes to Unknown. Only responses
    with no parse and no candidates are re-asked; when the budget runs out
    the label goes to Unknown rather than aborting the build.
    """
    known = {match_key(n): n for n in meta_names}
    prompt = step2_prompt(label, meta_names)
    for _ in range(retries + 1):
        response = handle.text(KIND_CLASSIFY, prompt)
        m = ASSIGN_LINE_RE.search(response)
        if m:
            exact = known.get(match_key(m.group(1)))
            if exact is not None:
                return exact
        candidates = _assignment_candidates(response, meta_names)
        if len(candidates) == 1:
            return candidates[0]
        if len(candidates) > 1 or m:
            return UNKNOWN_NAME
    return UNKNOWN_NAME


def build_level(labels: Sequence[ClassLabel], k: int,
                handle: ModelHandle) -> list[tuple[str, list[ClassLabel]]]:
    """One clustering round: propose groups, assign every label, drop empties.

    Groups keep proposal order; an Unknown bucket, when occupied, comes last.
    """
    meta_names = generate_meta_class_names(labels, k, handle)
    groups: dict[str, list[ClassLabel]] = {match_key(n): [] for n in meta_names}
    display = {match_key(n): n for n in meta_names}
    unknown: list[ClassLabel] = []
    for label in labels:
        name = assign_label(label, meta_names, handle)
        if name == UNKNOWN_NAME and match_key(UNKNOWN_NAME) not in groups:
            unknown.append(label)
        else:
            groups[match_key(name)].append(label)
    out = [(display[key], members) for key, members in groups.items() if members]
    if unknown:
        out.append((UNKNOWN_NAME, unknown))
    return out


def build_hierarchy(labels: Sequence[ClassLabel], spec: ClusterSpec,
                    handle: ModelHandle) -> Taxonomy:
    """Recursive grouping over a per-level size list.

    Each group is re-clustered with the next level's size; recursion stops
    when the size list is exhausted or a group holds a single label, at
    which point the labels become leaves of the current node.
    """

    def expand(node: TaxonomyNode, members: Sequence[ClassLabel], sizes: tuple[int, ...]) -> None:
        if not sizes or len(members) == 1:
            node.leaves = list(members)
            return
        for name, group in build_level(members, sizes[0], handle):
            child = TaxonomyNode(name=name)
            expand(child, group, sizes[1:])
            node.children.append(child)

    root = TaxonomyNode(name=ROOT_NAME)
    expand(root, list(labels), spec.sizes)
    taxonomy = Taxonomy(root)
    taxonomy.validate(labels=labels, spec=spec)
    return taxonomy


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def _node_to_obj(node: TaxonomyNode) -> dict:
    obj: dict[str, object] = {"name": node.name}
    if node.children:
        obj["children"] = [_node_to_obj(c) for c in node.children]
    else:
        obj["leaves"] = [leaf.name for leaf in node.leaves]
    return obj


def serialize_taxonomy(taxonomy: Taxonomy) -> str:
    return json.dumps(_node_to_obj(taxonomy.root), indent=2, ensure_ascii=False) + "\n"


def _node_from_obj(obj: object, path: str) -> TaxonomyNode:
    if not isinstance(obj, dict):
        raise SchemaViolation(path, "node must be an object")
    name = obj.get("name")
    if not isinstance(name, str) or not name.strip():
        raise SchemaViolation(path, "node needs a non-empty 'name'")
    has_children = "children" in obj
    has_leaves = "leaves" in obj
    if has_children == has_leaves:
        raise SchemaViolation(path, "node needs exactly one of 'children' or 'leaves'")
    unknown = set(obj) - {"name", "children", "leaves"}
    if unknown:
        raise SchemaViolation(path, f"unknown keys: {', '.join(sorted(unknown))}")
    node = TaxonomyNode(name=name)
    if has_children:
        children = obj["children"]
        if not isinstance(children, list) or not children:
            raise SchemaViolation(f"{path}.children", "must be a non-empty array")
        node.children = [_node_from_obj(c, f"{path}.children[{i}]")
                         for i, c in enumerate(children)]
    else:
        leaves = obj["leaves"]
        if not isinstance(leaves, list) or not leaves:
            raise SchemaViolation(f"{path}.leaves", "must be a non-empty array")
        for i, leaf in enumerate(leaves):
            if not isinstance(leaf, str) or not leaf.strip():
                raise SchemaViolation(f"{path}.leaves[{i}]", "must be a non-empty string")
            node.leaves.append(ClassLabel(leaf))
    return node


def deserialize_taxonomy(text: str) -> Taxonomy:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation("$", f"not valid JSON: {exc}") from exc
    taxonomy = Taxonomy(_node_from_obj(data, "$"))
    taxonomy.validate()
    return taxonomy


def load_taxonomy(path: str | Path) -> Taxonomy:
    return deserialize_taxonomy(Path(path).read_text(encoding="utf-8"))


def save_taxonomy(taxonomy: Taxonomy, path: str | Path) -> None:
    Path(path).write_text(serialize_taxonomy(taxonomy), encoding="utf-8")
