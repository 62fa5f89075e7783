"""Shared test data and transcript-building helpers.

Golden trees are expressed as nested (name, members) tuples; helpers turn
them into expected Taxonomy objects and into scripted transcripts that
drive build_hierarchy to reproduce them.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from gvl import (
    ClassLabel,
    ImagePatch,
    ModelHandle,
    ScriptedBackend,
    ScriptedTranscript,
    Taxonomy,
    TaxonomyNode,
    clean_name,
    step1_prompt,
    step2_prompt,
)
from gvl.gateway import KIND_CLASSIFY
from gvl.taxonomy import ROOT_NAME

# verdict lines collected by the acceptance tests, replayed after the run
ACCEPTANCE_VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)


UCM_CLASSES = [
    "agricultural", "airplane", "baseballdiamond", "beach", "buildings",
    "chaparral", "denseresidential", "forest", "freeway", "golfcourse",
    "harbor", "intersection", "mediumresidential", "mobilehomepark",
    "overpass", "parkinglot", "river", "runway", "sparseresidential",
    "storagetanks", "tenniscourt",
]

RESISC_CLASSES = [
    "airplane", "airport", "baseball_diamond", "basketball_court", "beach",
    "bridge", "chaparral", "church", "circular_farmland", "cloud",
    "commercial_area", "dense_residential", "desert", "forest", "freeway",
    "golf_course", "ground_track_field", "harbor", "industrial_area",
    "intersection", "island", "lake", "meadow", "medium_residential",
    "mobile_home_park", "mountain", "overpass", "palace", "parking_lot",
    "railway", "railway_station", "rectangular_farmland", "river",
    "roundabout", "runway", "sea_ice", "ship", "snowberg",
    "sparse_residential", "stadium", "storage_tank", "tennis_court",
    "terrace", "thermal_power_station", "wetland",
]

# (group name, members); members are leaf names or nested (name, members) pairs
UCM_TREE = [
    ("Natural Landscapes", ["agricultural", "beach", "chaparral", "forest", "river"]),
    ("Recreational Areas", ["baseballdiamond", "golfcourse", "tenniscourt"]),
    ("Residential Areas", ["denseresidential", "mediumresidential",
                           "mobilehomepark", "sparseresidential"]),
    ("Transportation", ["airplane", "freeway", "harbor", "intersection",
                        "overpass", "parkinglot", "runway"]),
    ("Urban Infrastructure", ["buildings", "storagetanks"]),
]

# several group names are proposed with ampersands that name cleaning drops
RESISC_RAW_NAMES = {
    "Transportation Infrastructure@top": "Transportation & Infrastructure",
    "Commercial Industrial Zones": "Commercial & Industrial Zones",
    "Public Historic Buildings": "Public & Historic Buildings",
}

RESISC_TREE = [
    ("Natural Landscapes", [
        ("Agricultural and Terrain", ["circular_farmland", "rectangular_farmland"]),
        ("Aquatic and Water Bodies", ["lake", "river", "sea_ice", "wetland"]),
        ("Natural Landscape and Vegetation", ["beach", "chaparral", "cloud", "desert",
                                              "forest", "island", "meadow", "mountain",
                                              "snowberg"]),
    ]),
    ("Recreational Facilities", [
        ("Ball Sports", ["baseball_diamond", "basketball_court", "stadium", "tennis_court"]),
        ("Golf", ["golf_course"]),
        ("Track and Field", ["ground_track_field"]),
    ]),
    ("Transportation Infrastructure", [
        ("Industrial Facilities", ["ship", "storage_tank", "thermal_power_station"]),
        ("Traffic Structures", ["bridge", "intersection", "overpass", "roundabout"]),
        ("Transportation Infrastructure", ["airplane", "airport", "freeway", "harbor",
                                           "parking_lot", "railway", "railway_station",
                                           "runway"]),
    ]),
    ("Urban Structures", [
        ("Commercial Industrial Zones", ["commercial_area", "industrial_area"]),
        ("Public Historic Buildings", ["church", "palace"]),
        ("Residential Areas", ["dense_residential", "medium_residential",
                               "mobile_home_park", "sparse_residential", "terrace"]),
    ]),
]


def make_cluster_handle(model_id: str = "cluster-model"):
    transcript = ScriptedTranscript()
    backend = ScriptedBackend(transcript)
    handle = ModelHandle(backend=backend, model_id=model_id)
    return transcript, backend, handle


def _is_leaf_group(sub: Sequence) -> bool:
    return all(isinstance(x, str) for x in sub)


def _flat_members(sub: Sequence) -> list[str]:
    if _is_leaf_group(sub):
        return list(sub)
    out: list[str] = []
    for _, child in sub:
        out.extend(_flat_members(child))
    return out


def script_tree(transcript: ScriptedTranscript, handle: ModelHandle,
                labels: Sequence[ClassLabel], sizes: tuple[int, ...],
                tree: Sequence[tuple], *, raw_names: Optional[dict[str, str]] = None,
                depth: int = 0) -> None:
    """Script one clustering of `labels` into `tree`, recursing as needed.

    `raw_names` may map "<clean name>@top" (top level) or "<clean name>" to
    the spelling the proposing model should emit; cleaning must map it back.
    """
    if not sizes or len(labels) == 1:
        assert _is_leaf_group(tree) or len(labels) == 1
        return
    k = sizes[0]
    names = [name for name, _ in tree]
    assert len(names) <= k
    raw_names = raw_names or {}

    def raw_of(name: str) -> str:
        key = f"{name}@top" if depth == 0 else name
        raw = raw_names.get(key, raw_names.get(name, name))
        assert clean_name(raw) == name
        return raw

    step1 = "\n".join(f"Cluster_{i + 1}: {raw_of(n)}" for i, n in enumerate(names))
    transcript.add_for(handle.request(KIND_CLASSIFY, step1_prompt(labels, k)), text=step1)

    group_of: dict[str, str] = {}
    for name, sub in tree:
        for member in _flat_members(sub):
            group_of[ClassLabel(member).key] = name
    for label in labels:
        transcript.add_for(
            handle.request(KIND_CLASSIFY, step2_prompt(label, names)),
            text=f"Cluster: {group_of[label.key]}")

    by_key = {lbl.key: lbl for lbl in labels}
    for name, sub in tree:
        member_keys = {ClassLabel(m).key for m in _flat_members(sub)}
        members = [by_key[lbl.key] for lbl in labels if lbl.key in member_keys]
        if _is_leaf_group(sub):
            # only valid where the recursion actually stops
            assert len(members) == 1 or len(sizes) == 1, name
        else:
            script_tree(transcript, handle, members, sizes[1:], sub,
                        raw_names=raw_names, depth=depth + 1)


def tree_to_taxonomy(tree: Sequence[tuple]) -> Taxonomy:
    def node(name: str, sub) -> TaxonomyNode:
        n = TaxonomyNode(name=name)
        if _is_leaf_group(sub):
            n.leaves = [ClassLabel(x) for x in sub]
        else:
            n.children = [node(nm, s) for nm, s in sub]
        return n

    root = TaxonomyNode(name=ROOT_NAME)
    root.children = [node(nm, s) for nm, s in tree]
    return Taxonomy(root)


def make_patch(i: int, scene_id: str = "s", size: int = 2) -> ImagePatch:
    """A tiny patch with pixels unique to `i`, so request digests differ."""
    px = np.zeros((size, size, 3), dtype=np.uint8)
    px[0, 0] = [i % 256, (i >> 8) % 256, 7]
    return ImagePatch(scene_id=scene_id, grid_pos=(0, i), pixels=px, origin=(0, 0))


def write_scene_png(path, h: int, w: int, seed: int) -> None:
    from PIL import Image

    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    Image.fromarray(pixels, mode="RGB").save(path)


def write_mask_png(path, mask: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray((mask.astype(np.uint8)) * 255, mode="L").save(path)
