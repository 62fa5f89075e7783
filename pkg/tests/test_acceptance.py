"""Acceptance suite: one test per release criterion.

Every test prints an `ACCEPTANCE <n> <name>: PASS|FAIL` verdict on the real
stdout so the lines stay visible under pytest's output capture, and each
asserts its runtime budget alongside the behavior itself.
"""

import contextlib
import itertools
import json
import math
import os
import random
import sys
import time
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from conftest import (
    ACCEPTANCE_VERDICTS,
    RESISC_CLASSES,
    RESISC_RAW_NAMES,
    RESISC_TREE,
    UCM_CLASSES,
    UCM_TREE,
    make_cluster_handle,
    make_patch,
    script_tree,
    tree_to_taxonomy,
    write_mask_png,
    write_scene_png,
)

from gvl import (
    ClassLabel,
    ClusterSpec,
    DegenerateEmbedding,
    ModelHandle,
    PromptConfig,
    Scene,
    ScriptedBackend,
    ScriptedTranscript,
    Taxonomy,
    TaxonomyNode,
    build_hierarchy,
    build_level,
    build_vision_prompt,
    classify_patch,
    format_ratio,
    rank_by_cosine,
    score,
    score_hierarchical,
    serialize_taxonomy,
    tile,
    truth_path,
    unique_labels,
)
from gvl.cli import Runtime, main
from gvl.config import load_run_config
from gvl.gateway import KIND_CLASSIFY, KIND_DESCRIBE, KIND_EMBED_IMAGE, KIND_EMBED_TEXT
from gvl.hierarchy import HierarchicalOutcome
from gvl.imaging import PNG_MEDIA_TYPE
from gvl.manifest import read_manifest
from gvl.pipeline import (
    DEFAULT_CLASSIFIER_TEMPLATE,
    REMINDER_SUFFIX,
    SOURCE_FALLBACK,
)
from gvl.taxonomy import UNKNOWN_NAME, step1_prompt, step2_prompt


@contextlib.contextmanager
def criterion(number, name, budget_seconds):
    started = time.perf_counter()
    status = "FAIL"
    try:
        yield
        elapsed = time.perf_counter() - started
        assert elapsed < budget_seconds, \
            f"criterion {number} took {elapsed:.2f}s, budget {budget_seconds}s"
        status = "PASS"
    finally:
        elapsed = time.perf_counter() - started
        line = f"ACCEPTANCE {number} {name}: {status} ({elapsed:.2f}s)"
        ACCEPTANCE_VERDICTS.append(line)
        print(line, file=sys.__stdout__, flush=True)


def classify_prompt(description, names, template=DEFAULT_CLASSIFIER_TEMPLATE):
    return template.format_map({"description": description, "classes": ", ".join(names)})


def test_acceptance_1_golden_taxonomies():
    with criterion(1, "golden taxonomies", 1.0):
        labels = unique_labels(UCM_CLASSES)
        transcript, _, handle = make_cluster_handle()
        script_tree(transcript, handle, labels, (5,), UCM_TREE)
        got = build_hierarchy(labels, ClusterSpec((5,)), handle)
        assert serialize_taxonomy(got) == serialize_taxonomy(tree_to_taxonomy(UCM_TREE))

        labels = unique_labels(RESISC_CLASSES)
        transcript, _, handle = make_cluster_handle()
        script_tree(transcript, handle, labels, (4, 3), RESISC_TREE,
                    raw_names=RESISC_RAW_NAMES)
        got = build_hierarchy(labels, ClusterSpec((4, 3)), handle)
        assert serialize_taxonomy(got) == serialize_taxonomy(tree_to_taxonomy(RESISC_TREE))


def test_acceptance_2_partition_invariants():
    rng = random.Random(0xA2)
    with criterion(2, "partition invariants", 10.0):
        for trial in range(1000):
            n = rng.randint(1, 12)
            labels = unique_labels([f"lbl{trial}x{i}" for i in range(n)])
            k = rng.randint(1, 5)
            meta = [f"meta{trial}g{j}" for j in range(rng.randint(1, k))]

            transcript, _, handle = make_cluster_handle()
            lines = [f"Cluster_{j + 1}: {m}" for j, m in enumerate(meta)]
            if rng.random() < 0.3:
                lines.insert(rng.randrange(len(lines) + 1), "some chatter first")
            transcript.add_for(handle.request(KIND_CLASSIFY, step1_prompt(labels, k)),
                               text="\n".join(lines))

            expected = {m: [] for m in meta}
            unknown = []
            for label in labels:
                roll = rng.random()
                target = rng.choice(meta)
                if roll < 0.55:
                    text = f"Cluster: {target}"
                    expected[target].append(label.name)
                elif roll < 0.70:
                    text = f"cluster_1: [{target}]."
                    expected[target].append(label.name)
                elif roll < 0.80:
                    text = f"i would say {target} fits best"
                    expected[target].append(label.name)
                elif roll < 0.90 and len(meta) >= 2:
                    pair = rng.sample(meta, 2)
                    text = f"both {pair[0]} and {pair[1]} could fit"
                    unknown.append(label.name)
                else:
                    text = "zzz qqq unhelpful"
                    unknown.append(label.name)
                transcript.add_for(handle.request(KIND_CLASSIFY, step2_prompt(label, meta)),
                                   text=text)

            groups = build_level(labels, k, handle)
            members = [m.name for _, group in groups for m in group]
            assert sorted(members) == sorted(lbl.name for lbl in labels)
            assert len(groups) <= k + 1
            assert all(group for _, group in groups)
            names = [name for name, _ in groups]
            assert len({nm.casefold() for nm in names}) == len(names)
            if unknown:
                assert names[-1] == UNKNOWN_NAME
                assert [m.name for m in groups[-1][1]] == unknown
            for name, group in groups[:-1] if unknown else groups:
                assert [m.name for m in group] == expected[name]


def test_acceptance_3_totality():
    rng = random.Random(0xA3)
    classes = unique_labels(["Buildings", "No Buildings"])
    valid = {
        "Buildings": ["Buildings", "buildings", "**Buildings**"],
        "No Buildings": ["No Buildings", "no buildings",
                         "The image shows no buildings."],
    }
    with criterion(3, "classification totality", 10.0):
        transcript = ScriptedTranscript()
        backend = ScriptedBackend(transcript)
        vis = ModelHandle(backend=backend, model_id="vis")
        txt = ModelHandle(backend=backend, model_id="txt")
        emb = ModelHandle(backend=backend, model_id="emb")
        cfg = PromptConfig()
        transcript.add_for(emb.request(KIND_EMBED_TEXT, "a satellite photo of Buildings"),
                           vector=[1.0, 0.0])
        transcript.add_for(emb.request(KIND_EMBED_TEXT, "a satellite photo of No Buildings"),
                           vector=[0.0, 1.0])

        cases = []
        for i in range(1000):
            # three adversarial regimes: always, half, and never invalid
            p = 1.0 if i < 334 else (0.5 if i < 667 else 0.0)
            patch = make_patch(i)
            describe_req = vis.request(
                KIND_DESCRIBE, build_vision_prompt(patch, classes, cfg),
                image=patch.png_bytes(), media_type=PNG_MEDIA_TYPE)
            blank = rng.random() < 0.05
            description = "" if blank else f"Description number {i}."
            transcript.add_for(describe_req, text=description)
            expect_fallback = blank
            if not blank:
                chosen = rng.choice(classes).name
                first_invalid = rng.random() < p
                answer = "zzz unresolvable" if first_invalid else rng.choice(valid[chosen])
                transcript.add_for(
                    txt.request(KIND_CLASSIFY, classify_prompt(
                        description, [c.name for c in classes])),
                    text=answer)
                if first_invalid:
                    second_invalid = rng.random() < p
                    answer = "qqq still nothing" if second_invalid \
                        else rng.choice(valid[chosen])
                    transcript.add_for(
                        txt.request(KIND_CLASSIFY, classify_prompt(
                            description, [c.name for c in classes],
                            template=DEFAULT_CLASSIFIER_TEMPLATE + REMINDER_SUFFIX)),
                        text=answer)
                    expect_fallback = second_invalid
            if expect_fallback:
                transcript.add_for(
                    emb.request(KIND_EMBED_IMAGE, "", image=patch.png_bytes(),
                                media_type=PNG_MEDIA_TYPE),
                    vector=[rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0)])
            cases.append((patch, expect_fallback))

        for patch, expect_fallback in cases:
            outcome = classify_patch(patch, classes, cfg, vis, txt, emb)
            assert outcome.label in classes
            assert (outcome.source == SOURCE_FALLBACK) == expect_fallback


def test_acceptance_4_metric_oracle():
    rng = random.Random(0xA4)
    with criterion(4, "metric oracle", 10.0):
        for _ in range(10_000):
            names = [f"c{j}" for j in range(rng.randint(2, 6))]
            classes = unique_labels(names)
            n = rng.randint(1, 30)
            pairs = [(rng.choice(names), rng.choice(names)) for _ in range(n)]

            report = score(pairs, classes)
            correct = sum(1 for predicted, truth in pairs if predicted == truth)
            assert report.overall_accuracy == Fraction(correct, n)

            confusion = report.confusion
            truth_counts = Counter(t for _, t in pairs)
            pred_counts = Counter(p for p, _ in pairs)
            assert confusion.total() == n
            assert confusion.correct() == correct
            assert confusion.truth_totals() == [truth_counts[c] for c in names]
            assert confusion.prediction_totals() == [pred_counts[c] for c in names]


def test_acceptance_5_tiling():
    rng = random.Random(0xA5)
    with criterion(5, "tiling exactness", 5.0):
        gen = np.random.default_rng(0xA5)
        for _ in range(300):
            h, w = rng.randint(1, 64), rng.randint(1, 64)
            rows, cols = rng.randint(1, min(8, h)), rng.randint(1, min(8, w))
            scene = Scene(id="s", pixels=gen.integers(0, 256, (h, w, 3), dtype=np.uint8))
            patches = tile(scene, (rows, cols))
            assert len(patches) == rows * cols
            rebuilt = np.zeros_like(scene.pixels)
            covered = np.zeros((h, w), dtype=int)
            for patch in patches:
                y, x = patch.origin
                ph, pw = patch.pixels.shape[:2]
                assert abs(ph - h // rows) <= 1 and abs(pw - w // cols) <= 1
                rebuilt[y:y + ph, x:x + pw] = patch.pixels
                covered[y:y + ph, x:x + pw] += 1
            assert np.array_equal(rebuilt, scene.pixels)
            assert (covered == 1).all()

        big = Scene(id="big", pixels=np.zeros((1024, 1024, 3), dtype=np.uint8))
        sizes = sorted({p.pixels.shape[0] for p in tile(big, (3, 3))}, reverse=True)
        assert sizes == [342, 341]
        first_column = [p.pixels.shape[0] for p in tile(big, (3, 3))][::3]
        assert first_column == [342, 341, 341]

        total = 0
        for i in range(59):
            scene = Scene(id=f"s{i}", pixels=gen.integers(0, 256, (12, 12, 3),
                                                          dtype=np.uint8))
            total += len(tile(scene, (3, 3)))
        assert total == 531


def _random_taxonomy(rng):
    labels = [f"leaf{i}" for i in range(rng.randint(2, 10))]
    counter = itertools.count()

    def build(node, members, levels):
        if levels == 0 or len(members) == 1:
            node.leaves = [ClassLabel(m) for m in members]
            return
        k = rng.randint(1, min(4, len(members)))
        shuffled = members[:]
        rng.shuffle(shuffled)
        cuts = sorted(rng.sample(range(1, len(members)), k - 1)) if k > 1 else []
        bounds = [0] + cuts + [len(members)]
        for a, b in zip(bounds, bounds[1:]):
            child = TaxonomyNode(name=f"G{next(counter)}")
            build(child, shuffled[a:b], levels - 1)
            node.children.append(child)

    root = TaxonomyNode(name="root")
    build(root, labels, rng.randint(1, 3))
    taxonomy = Taxonomy(root)
    taxonomy.validate()
    return taxonomy, labels


def test_acceptance_6_hierarchical_monotonicity():
    rng = random.Random(0xA6)
    with criterion(6, "per-depth monotonicity", 5.0):
        for i in range(1000):
            taxonomy, labels = _random_taxonomy(rng)
            outcomes = []
            for j in range(rng.randint(1, 20)):
                pred = truth_path(rng.choice(labels), taxonomy)
                true = truth_path(rng.choice(labels), taxonomy)
                outcomes.append(HierarchicalOutcome(
                    patch_id=f"p{j}", scene_id="s", grid_pos=(0, j),
                    path=pred, sources=["primary"] * len(pred), truth_path=true))
            per_depth = score_hierarchical(outcomes, taxonomy)
            assert len(per_depth) == taxonomy.depth()
            assert all(0 <= oa <= 1 for oa in per_depth)
            assert all(a >= b for a, b in zip(per_depth, per_depth[1:]))


def test_acceptance_7_fallback_math():
    rng = random.Random(0xA7)
    with criterion(7, "fallback ranking math", 5.0):
        for trial in range(1000):
            dim = rng.randint(2, 8)
            count = rng.randint(2, 6)
            image = [rng.uniform(-2.0, 2.0) for _ in range(dim)]
            image[0] += 2.5  # keep the norm clearly above zero
            matrix = []
            for _ in range(count):
                vec = [rng.uniform(-2.0, 2.0) for _ in range(dim)]
                vec[-1] += 2.5
                matrix.append(vec)

            best, scores = rank_by_cosine(image, matrix)
            norm_img = math.sqrt(sum(x * x for x in image))
            for vec, got in zip(matrix, scores):
                dot = sum(a * b for a, b in zip(image, vec))
                brute = dot / (norm_img * math.sqrt(sum(x * x for x in vec)))
                assert abs(got - brute) < 1e-12
            assert best == scores.index(max(scores))

            # power-of-two scaling leaves every similarity bit-identical
            factor = rng.choice([0.25, 0.5, 2.0, 8.0])
            best_scaled, scores_scaled = rank_by_cosine(
                [x * factor for x in image], matrix)
            assert best_scaled == best
            assert scores_scaled == scores

            # any positive factor keeps the winner, barring genuine near-ties
            ranked = sorted(scores, reverse=True)
            if ranked[0] - ranked[1] > 1e-9:
                stretch = rng.uniform(0.1, 10.0)
                best_any, _ = rank_by_cosine(
                    [x * stretch for x in image], matrix)
                assert best_any == best

            # ties built exactly: integer coordinates make every dot product
            # and squared norm an exact integer, so a power-of-two duplicate
            # of a class direction reproduces its score bit for bit and the
            # earlier index must keep winning
            int_img = [float(rng.randint(-5, 5)) for _ in range(dim)]
            int_img[0] = 3.0
            int_mat = []
            for _ in range(count):
                vec = [float(rng.randint(-5, 5)) for _ in range(dim)]
                vec[-1] = 2.0
                int_mat.append(vec)
            best_int, scores_int = rank_by_cosine(int_img, int_mat)
            j = best_int if trial % 2 else rng.randrange(count)
            appended = int_mat + [[x * 2.0 for x in int_mat[j]]]
            best_tied, scores_tied = rank_by_cosine(int_img, appended)
            assert scores_tied[:-1] == scores_int
            assert scores_tied[-1] == scores_int[j]
            assert best_tied == best_int

            if trial % 100 == 0:
                with pytest.raises(DegenerateEmbedding):
                    rank_by_cosine([0.0] * dim, matrix)


# --------------------------------------------------------------------------
# Criterion 8: end-to-end replay on a 531-patch fixture
# --------------------------------------------------------------------------

HIER_CONFIG = """\
[dataset]
manifest = "scenes.csv"
grid = [3, 3]

[classes]
taxonomy = "taxonomy.json"

[backends]
transcript = "transcript.json"
describer_model = "vis-1"
classifier_model = "txt-1"
embedder_model = "emb-1"

[run]
seed = 0
workers = 4
"""

HIER_TAXONOMY = """\
{
  "name": "root",
  "children": [
    {"name": "Built Area", "leaves": ["Buildings"]},
    {"name": "Open Area", "leaves": ["No Buildings"]}
  ]
}
"""


def _build_replay_fixture(root):
    """59 masked 12x12 scenes, a binary taxonomy, and a full transcript.

    Returns (config path, expected overall accuracy as a Fraction).
    """
    rng = random.Random(0xA8)
    gen = np.random.default_rng(0xA8)
    lines = ["path,scene_id,mask_path"]
    for i in range(59):
        write_scene_png(root / f"scene{i:02d}.png", 12, 12, seed=1000 + i)
        mask = np.zeros((12, 12), dtype=bool)
        if i % 2 == 0:
            for _ in range(rng.randint(1, 3)):
                y, x = int(gen.integers(0, 9)), int(gen.integers(0, 9))
                mask[y:y + int(gen.integers(1, 4)), x:x + int(gen.integers(1, 4))] = True
        write_mask_png(root / f"scene{i:02d}_mask.png", mask)
        lines.append(f"scene{i:02d}.png,scene{i:02d},scene{i:02d}_mask.png")
    (root / "scenes.csv").write_text("\n".join(lines) + "\n")
    (root / "taxonomy.json").write_text(HIER_TAXONOMY)
    config_path = root / "run.toml"
    config_path.write_text(HIER_CONFIG)
    (root / "transcript.json").write_text("{}\n")

    cfg = load_run_config(config_path)
    rt = Runtime(cfg, command="run-hier")
    taxonomy = rt.taxonomy()
    leaves = taxonomy.leaf_labels()
    patches = rt.patches()
    assert len(patches) == 531

    transcript = ScriptedTranscript()
    transcript.add_for(rt.embedder.request(KIND_EMBED_TEXT,
                                           "a satellite photo of Built Area"),
                       vector=[1.0, 0.0])
    transcript.add_for(rt.embedder.request(KIND_EMBED_TEXT,
                                           "a satellite photo of Open Area"),
                       vector=[0.0, 1.0])
    options = ["Built Area", "Open Area"]
    correct = 0
    for patch in patches:
        built = patch.ground_truth.name == "Buildings"
        description = f"Patch {patch.patch_id} looks " + \
            ("built up." if built else "open.")
        transcript.add_for(
            rt.describer.request(KIND_DESCRIBE,
                                 build_vision_prompt(patch, leaves, cfg.prompt),
                                 image=patch.png_bytes(), media_type=PNG_MEDIA_TYPE),
            text=description)
        roll = rng.random()
        truth_option = "Built Area" if built else "Open Area"
        if roll < 0.90:
            answer, is_correct = truth_option, True
        elif roll < 0.94:
            answer, is_correct = ("Open Area" if built else "Built Area"), False
        else:
            answer, is_correct = None, True  # routed through the fallback
        if answer is not None:
            transcript.add_for(
                rt.classifier.request(KIND_CLASSIFY,
                                      classify_prompt(description, options)),
                text=answer)
        else:
            transcript.add_for(
                rt.classifier.request(KIND_CLASSIFY,
                                      classify_prompt(description, options)),
                text="cannot say")
            transcript.add_for(
                rt.classifier.request(KIND_CLASSIFY, classify_prompt(
                    description, options,
                    template=DEFAULT_CLASSIFIER_TEMPLATE + REMINDER_SUFFIX)),
                text="still cannot say")
            transcript.add_for(
                rt.embedder.request(KIND_EMBED_IMAGE, "", image=patch.png_bytes(),
                                    media_type=PNG_MEDIA_TYPE),
                vector=[1.0, 0.0] if built else [0.0, 1.0])
        correct += is_correct
    transcript.save(root / "transcript.json")
    return config_path, Fraction(correct, len(patches))


def test_acceptance_8_replay(tmp_path):
    with criterion(8, "end-to-end replay", 30.0):
        config_path, expected_oa = _build_replay_fixture(tmp_path)

        assert main(["run-hier", "--config", str(config_path),
                     "--out", str(tmp_path / "run1")]) == 0
        assert main(["run-hier", "--config", str(config_path),
                     "--out", str(tmp_path / "run2")]) == 0

        for name in ("hierarchical.jsonl", "per_depth_oa.csv"):
            first = (tmp_path / "run1" / name).read_bytes()
            second = (tmp_path / "run2" / name).read_bytes()
            assert first == second, f"{name} differs between runs"

        rows = (tmp_path / "run1" / "hierarchical.jsonl").read_text().splitlines()
        assert len(rows) == 531
        parsed = [json.loads(row) for row in rows]
        assert all(len(row["path"]) == 2 for row in parsed)

        oa = format_ratio(expected_oa)
        assert (tmp_path / "run1" / "per_depth_oa.csv").read_text() == \
            f"depth,overall_accuracy\n0,{oa}\n1,{oa}\n"

        first_manifest = read_manifest(tmp_path / "run1" / "run_manifest.json")
        second_manifest = read_manifest(tmp_path / "run2" / "run_manifest.json")
        assert first_manifest["model_calls"] > 0
        assert second_manifest["model_calls"] == 0, \
            "replay must be served entirely from the response cache"
        assert second_manifest["cache_hits"] > 0


LIVE_ENV = "GVL_LIVE_BASE_URL"


def test_acceptance_9_live_smoke(tmp_path):
    base_url = os.environ.get(LIVE_ENV)
    if not base_url:
        line = f"ACCEPTANCE 9 live endpoint smoke: SKIP (set {LIVE_ENV} to enable)"
        ACCEPTANCE_VERDICTS.append(line)
        print(line, file=sys.__stdout__, flush=True)
        pytest.skip(f"{LIVE_ENV} not set")
    with criterion(9, "live endpoint smoke", 600.0):
        vision = os.environ.get("GVL_LIVE_VISION_MODEL", "gpt-4o-mini")
        text = os.environ.get("GVL_LIVE_TEXT_MODEL", "gpt-4o-mini")
        embed = os.environ.get("GVL_LIVE_EMBED_MODEL", "text-embedding-3-small")
        write_scene_png(tmp_path / "scene.png", 8, 8, seed=9)
        (tmp_path / "scenes.csv").write_text("path,scene_id\nscene.png,scene\n")
        (tmp_path / "run.toml").write_text(f"""\
[dataset]
manifest = "scenes.csv"
grid = [2, 2]

[classes]
names = ["Buildings", "No Buildings"]

[backends]
mode = "http"
base_url = "{base_url}"
describer_model = "{vision}"
classifier_model = "{text}"
embedder_model = "{embed}"
""")
        assert main(["classify", "--config", str(tmp_path / "run.toml")]) == 0
        rows = [json.loads(line) for line in
                (tmp_path / "out" / "predictions.jsonl").read_text().splitlines()]
        assert len(rows) == 4
        assert all(row["label"] in ("Buildings", "No Buildings") for row in rows)
