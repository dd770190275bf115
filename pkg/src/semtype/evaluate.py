"""Macro precision/recall/F1 with abstain semantics, flat or hierarchical."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .annotate import AnnotationRun
from .core import (
    Abstain,
    Label,
    Ontology,
    SemtypeError,
    SourceTable,
    UnmappedLabel,
    is_correct,
    normalize_label,
)

FLAT = "flat"
HIERARCHICAL = "hierarchical"


class MissingGroundTruth(SemtypeError, KeyError):
    pass


class ModeMismatch(SemtypeError, ValueError):
    pass


class DatasetMismatch(SemtypeError, ValueError):
    pass


GroundTruth = Mapping[tuple[str, int], str]


def ground_truth_of(tables: Sequence[SourceTable]) -> dict[tuple[str, int], str]:
    out = {}
    for t in tables:
        for col, label in (t.ground_truth or {}).items():
            out[(t.table_id, col)] = label
    return out


@dataclass(frozen=True)
class ClassScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass(frozen=True)
class MetricsReport:
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: dict[str, ClassScore] = field(default_factory=dict)
    truth_classes: tuple[str, ...] = ()
    abstain_count: int = 0
    mode: str = FLAT
    dataset: str = ""

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "dataset": self.dataset,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "abstain_count": self.abstain_count,
            "truth_classes": list(self.truth_classes),
            "per_class": {
                c: {"tp": s.tp, "fp": s.fp, "fn": s.fn, "precision": s.precision,
                    "recall": s.recall, "f1": s.f1}
                for c, s in sorted(self.per_class.items())
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricsReport":
        per_class = {
            c: ClassScore(v["tp"], v["fp"], v["fn"]) for c, v in data.get("per_class", {}).items()
        }
        return cls(data["macro_precision"], data["macro_recall"], data["macro_f1"], per_class,
                   tuple(data.get("truth_classes", ())), data.get("abstain_count", 0),
                   data.get("mode", FLAT), data.get("dataset", ""))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def render(self, name: str = "") -> str:
        rows = [
            ("Precision P", f"{self.macro_precision * 100:.1f}%"),
            ("Recall R", f"{self.macro_recall * 100:.1f}%"),
            ("F1 Score", f"{self.macro_f1:.2f}"),
        ]
        head = f"{'Metric':<12}  {name or self.mode:>10}"
        return "\n".join([head] + [f"{k:<12}  {v:>10}" for k, v in rows])


def evaluate(run: AnnotationRun, ground_truth: GroundTruth, mode: str = FLAT,
             ontology: Optional[Ontology] = None, dataset: str = "") -> MetricsReport:
    """Score a run.

    A correct prediction is a tp for the truth class. A wrong label is an
    fp for the predicted class and an fn for the truth class. An abstain is
    only an fn. Hierarchical classes are ontology node paths.
    """
    if mode not in (FLAT, HIERARCHICAL):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == HIERARCHICAL and ontology is None:
        raise ValueError("hierarchical mode needs an ontology")
    counts: dict[str, list[int]] = {}
    truth_classes: dict[str, None] = {}
    abstains = 0

    def bump(cls: str, idx: int) -> None:
        counts.setdefault(cls, [0, 0, 0])[idx] += 1

    for pred in run.predictions:
        key = (pred.table_id, pred.column_index)
        if key not in ground_truth:
            raise MissingGroundTruth(f"no ground truth for {key}")
        raw_truth = ground_truth[key]
        if mode == FLAT:
            truth_cls = normalize_label(raw_truth)
        else:
            truth_node = ontology.mapped_node(raw_truth)
            truth_cls = ontology.path_str(truth_node)
        truth_classes.setdefault(truth_cls)
        counts.setdefault(truth_cls, [0, 0, 0])
        outcome = pred.outcome
        if isinstance(outcome, Abstain):
            abstains += 1
            bump(truth_cls, 2)
            continue
        if mode == FLAT:
            pred_cls = normalize_label(outcome.label)
            correct = pred_cls == truth_cls
        else:
            pred_node = _prediction_node(outcome, ontology)
            pred_cls = ontology.path_str(pred_node)
            correct = is_correct(pred_node, truth_node, ontology)
        if correct:
            bump(truth_cls, 0)
        else:
            bump(pred_cls, 1)
            bump(truth_cls, 2)

    per_class = {c: ClassScore(*v) for c, v in counts.items()}
    classes = tuple(truth_classes)
    n = len(classes)
    if n:
        mp = sum(per_class[c].precision for c in classes) / n
        mr = sum(per_class[c].recall for c in classes) / n
        mf = sum(per_class[c].f1 for c in classes) / n
    else:
        mp = mr = mf = 0.0
    return MetricsReport(mp, mr, mf, per_class, classes, abstains, mode, dataset)


def _prediction_node(outcome: Label, ontology: Ontology) -> int:
    if outcome.node_id is not None:
        ontology.node(outcome.node_id)
        return outcome.node_id
    label = normalize_label(outcome.label)
    if label in ontology.gt_mapping:
        return ontology.gt_mapping[label]
    hits = ontology.find_by_name(label)
    if len(hits) == 1:
        return hits[0]
    raise UnmappedLabel(f"predicted label {outcome.label!r} has no unique ontology node")


# -- comparison reports -------------------------------------------------------


@dataclass(frozen=True)
class GapReport:
    name_a: str
    name_b: str
    a: MetricsReport
    b: MetricsReport
    precision_pp: float
    recall_pp: float
    f1: float

    def render(self) -> str:
        rows = [
            ("Precision P", f"{self.a.macro_precision * 100:.1f}%",
             f"{self.b.macro_precision * 100:.1f}%", f"{self.precision_pp:.1f} pp"),
            ("Recall R", f"{self.a.macro_recall * 100:.1f}%",
             f"{self.b.macro_recall * 100:.1f}%", f"{self.recall_pp:.1f} pp"),
            ("F1 Score", f"{self.a.macro_f1:.2f}", f"{self.b.macro_f1:.2f}", f"{self.f1:.2f}"),
        ]
        header = ("Metric", self.name_a, self.name_b, "Difference")
        return _table([header] + rows)

    def to_dict(self) -> dict:
        return {"a": self.name_a, "b": self.name_b, "precision_pp": self.precision_pp,
                "recall_pp": self.recall_pp, "f1": self.f1}


def gap_report(a: MetricsReport, b: MetricsReport, name_a: str = "A",
               name_b: str = "B") -> GapReport:
    if a.mode != b.mode:
        raise ModeMismatch(f"cannot compare {a.mode} with {b.mode} metrics")
    # Rounded to absorb binary floating-point noise in the subtraction.
    return GapReport(
        name_a, name_b, a, b,
        round(abs(a.macro_precision - b.macro_precision) * 100, 9),
        round(abs(a.macro_recall - b.macro_recall) * 100, 9),
        round(abs(a.macro_f1 - b.macro_f1), 9),
    )


@dataclass(frozen=True)
class ComparisonRow:
    strategy: str
    report: MetricsReport
    delta_f1: float


@dataclass(frozen=True)
class Comparison:
    baseline: str
    rows: tuple[ComparisonRow, ...]

    def order(self) -> list[str]:
        return [r.strategy for r in self.rows]

    def render(self) -> str:
        lines = [("Strategy", "P", "R", "F1", f"dF1 vs {self.baseline}")]
        for r in self.rows:
            lines.append((r.strategy, f"{r.report.macro_precision * 100:.1f}%",
                          f"{r.report.macro_recall * 100:.1f}%", f"{r.report.macro_f1:.2f}",
                          f"{r.delta_f1:+.2f}"))
        return _table(lines)

    def to_dict(self) -> dict:
        return {"baseline": self.baseline, "rows": [
            {"strategy": r.strategy, "macro_precision": r.report.macro_precision,
             "macro_recall": r.report.macro_recall, "macro_f1": r.report.macro_f1,
             "delta_f1": r.delta_f1} for r in self.rows]}


def strategy_comparison(runs: Sequence[tuple[str, MetricsReport]],
                        baseline: str = "flat") -> Comparison:
    """Order strategies by macro F1 (ties by name) with deltas to ``baseline``."""
    if len(runs) < 2:
        raise DatasetMismatch("need at least two runs to compare")
    datasets = {r.dataset for _, r in runs}
    if len(datasets) > 1:
        raise DatasetMismatch(f"runs come from different datasets: {sorted(datasets)}")
    modes = {r.mode for _, r in runs}
    if len(modes) > 1:
        raise ModeMismatch(f"runs use different modes: {sorted(modes)}")
    names = [s for s, _ in runs]
    if baseline not in names:
        baseline = names[0]
    base_f1 = dict(runs)[baseline].macro_f1
    rows = [ComparisonRow(s, r, round(r.macro_f1 - base_f1, 9)) for s, r in runs]
    rows.sort(key=lambda row: (-row.report.macro_f1, row.strategy))
    return Comparison(baseline, tuple(rows))


def _table(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    out = []
    for j, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        out.append("  ".join(cells).rstrip())
        if j == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out)
