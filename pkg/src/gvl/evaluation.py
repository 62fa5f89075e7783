"""Accuracy scoring and report emission.

Overall accuracy is kept as an exact rational until rendering, so equality
checks in tests and comparisons between runs never hinge on float rounding.
Routed runs are scored per depth by path-prefix agreement, which makes the
per-depth accuracies non-increasing by construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal, localcontext
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

from .errors import UnknownLabel
from .hierarchy import HierarchicalOutcome, validate_path
from .taxonomy import ClassLabel, Taxonomy

LabelLike = Union[ClassLabel, str]


def _key(label: LabelLike) -> str:
    name = label.name if isinstance(label, ClassLabel) else label
    return name.strip().casefold()


def format_ratio(value: Fraction, places: int = 3) -> str:
    """Render an exact ratio with fixed decimals, ties to even."""
    with localcontext() as ctx:
        ctx.prec = 50
        dec = Decimal(value.numerator) / Decimal(value.denominator)
        return str(dec.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_EVEN))


@dataclass
class ConfusionMatrix:
    """Counts indexed [truth][prediction], classes in caller order."""

    classes: list[ClassLabel]
    counts: list[list[int]]

    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def correct(self) -> int:
        return sum(self.counts[i][i] for i in range(len(self.classes)))

    def truth_totals(self) -> list[int]:
        return [sum(row) for row in self.counts]

    def prediction_totals(self) -> list[int]:
        return [sum(row[j] for row in self.counts) for j in range(len(self.classes))]


@dataclass
class EvaluationReport:
    overall_accuracy: Fraction
    confusion: Optional[ConfusionMatrix] = None
    per_depth_accuracy: Optional[list[Fraction]] = None
    run_manifest_ref: Optional[str] = None
    notes: dict[str, str] = field(default_factory=dict)


def score(pairs: Sequence[tuple[LabelLike, LabelLike]],
          classes: Sequence[ClassLabel]) -> EvaluationReport:
    """Exact overall accuracy plus a confusion matrix over the class list.

    Every predicted and true label must name one of the classes
    (case-insensitively); anything else means the caller mixed up class
    sets and is an error, not a miss.
    """
    if not pairs:
        raise ValueError("cannot score an empty prediction set")
    index = {lbl.key: i for i, lbl in enumerate(classes)}
    n = len(classes)
    counts = [[0] * n for _ in range(n)]
    for predicted, truth in pairs:
        pk, tk = _key(predicted), _key(truth)
        if pk not in index:
            raise UnknownLabel(f"predicted label {predicted!r} is not in the class list")
        if tk not in index:
            raise UnknownLabel(f"true label {truth!r} is not in the class list")
        counts[index[tk]][index[pk]] += 1
    confusion = ConfusionMatrix(classes=list(classes), counts=counts)
    return EvaluationReport(
        overall_accuracy=Fraction(confusion.correct(), confusion.total()),
        confusion=confusion)


def score_hierarchical(outcomes: Sequence[HierarchicalOutcome],
                       taxonomy: Taxonomy) -> list[Fraction]:
    """Per-depth overall accuracy for routed outcomes with known truths.

    Depth d counts an outcome as correct when the first d+1 components of
    its predicted and true paths agree (shorter paths compare whole). Both
    paths must be valid root-to-class routes through the tree.
    """
    if not outcomes:
        raise ValueError("cannot score an empty outcome set")
    depth = taxonomy.depth()
    correct = [0] * depth
    for outcome in outcomes:
        if outcome.truth_path is None:
            raise UnknownLabel(f"outcome {outcome.patch_id} has no true path")
        validate_path(outcome.path, taxonomy)
        validate_path(outcome.truth_path, taxonomy)
        pred = [_key(p) for p in outcome.path]
        true = [_key(p) for p in outcome.truth_path]
        for d in range(depth):
            if pred[:d + 1] == true[:d + 1]:
                correct[d] += 1
    total = len(outcomes)
    return [Fraction(c, total) for c in correct]


# --------------------------------------------------------------------------
# CSV emission
# --------------------------------------------------------------------------


def emit_report(report: EvaluationReport, out_dir: str | Path) -> list[Path]:
    """Write oa_summary.csv (and confusion_matrix.csv when present)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    summary = out / "oa_summary.csv"
    with summary.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        writer.writerow(["overall_accuracy", format_ratio(report.overall_accuracy)])
        if report.per_depth_accuracy is not None:
            for d, oa in enumerate(report.per_depth_accuracy):
                writer.writerow([f"overall_accuracy_depth_{d}", format_ratio(oa)])
        if report.run_manifest_ref:
            writer.writerow(["run_manifest", report.run_manifest_ref])
    written.append(summary)

    if report.confusion is not None:
        matrix = out / "confusion_matrix.csv"
        with matrix.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            names = [lbl.name for lbl in report.confusion.classes]
            writer.writerow([""] + names)
            for name, row in zip(names, report.confusion.counts):
                writer.writerow([name] + row)
        written.append(matrix)
    return written


def write_per_depth_csv(per_depth: Sequence[Fraction], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["depth", "overall_accuracy"])
        for d, oa in enumerate(per_depth):
            writer.writerow([d, format_ratio(oa)])


@dataclass(frozen=True)
class RunSummary:
    """One run's coordinates in a benchmark grid, plus its accuracy."""

    classifier: str
    vision_model: str
    include_classes: bool
    include_geo_context: bool
    overall_accuracy: Fraction

    @property
    def variant(self) -> str:
        tag = self.vision_model
        if self.include_classes:
            tag += "+classes"
        if self.include_geo_context:
            tag += "+geo"
        return tag


def emit_comparison(entries: Sequence[RunSummary], path: str | Path) -> None:
    """Grid CSV: one row per classifier, one column per vision variant.

    Rows and columns keep first-seen order; cells without a run stay blank.
    """
    classifiers: list[str] = []
    variants: list[str] = []
    cells: dict[tuple[str, str], str] = {}
    for entry in entries:
        if entry.classifier not in classifiers:
            classifiers.append(entry.classifier)
        if entry.variant not in variants:
            variants.append(entry.variant)
        cells[(entry.classifier, entry.variant)] = format_ratio(entry.overall_accuracy)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["classifier"] + variants)
        for clf in classifiers:
            writer.writerow([clf] + [cells.get((clf, v), "") for v in variants])
