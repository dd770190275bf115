"""Iterative data-dictionary construction and coverage against ground truth."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .core import EmptyLabel, SemanticLabel, SemtypeError, SourceTable, normalize_label
from .ingest import DEFAULT_SAMPLE_K, ColumnSample, EmptyColumn, sample_values
from .llm import Backend, BackendError, CompletionRequest

log = logging.getLogger(__name__)

SEED_PROVENANCE = "seed"
DEFAULT_SEED_CLASSES = ("name", "date", "identifier")
NEW_SENTINEL = "NEW:"


class LearnError(SemtypeError):
    """Backend failure mid-run. Carries what was learned so far."""

    def __init__(self, cause: Exception, dictionary: "DataDictionary", trace: "LearnTrace") -> None:
        super().__init__(f"dictionary learning aborted: {cause}")
        self.cause = cause
        self.dictionary = dictionary
        self.trace = trace


@dataclass(frozen=True)
class LearnerConfig:
    seed_classes: tuple[str, ...] = DEFAULT_SEED_CLASSES
    sample_k: int = DEFAULT_SAMPLE_K
    quiescence_window: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.quiescence_window < 1:
            raise ValueError("quiescence_window must be >= 1")
        if self.sample_k < 1:
            raise ValueError("sample_k must be >= 1")
        object.__setattr__(self, "seed_classes", tuple(self.seed_classes))


class DataDictionary:
    """Ordered set of classes keyed by canonical form, with provenance."""

    def __init__(self) -> None:
        self._classes: dict[str, SemanticLabel] = {}
        self.provenance: dict[str, object] = {}

    @classmethod
    def from_seeds(cls, seeds: Iterable[str]) -> "DataDictionary":
        d = cls()
        for s in seeds:
            d.add(s, SEED_PROVENANCE)
        return d

    def add(self, raw: str, provenance: object) -> bool:
        label = SemanticLabel(raw)
        if label.canonical in self._classes:
            return False
        self._classes[label.canonical] = label
        self.provenance[label.canonical] = provenance
        return True

    def __contains__(self, name: str) -> bool:
        try:
            return normalize_label(name) in self._classes
        except EmptyLabel:
            return False

    def __len__(self) -> int:
        return len(self._classes)

    def __iter__(self):
        return iter(self._classes)

    @property
    def classes(self) -> list[SemanticLabel]:
        return list(self._classes.values())

    def names(self) -> list[str]:
        return list(self._classes)

    def copy(self) -> "DataDictionary":
        d = DataDictionary()
        d._classes = dict(self._classes)
        d.provenance = dict(self.provenance)
        return d

    def to_json(self) -> str:
        entries = []
        for name, label in self._classes.items():
            prov = self.provenance[name]
            if isinstance(prov, tuple):
                prov = {"table_id": prov[0], "column_index": prov[1]}
            entries.append({"name": name, "raw": label.raw, "provenance": prov})
        return json.dumps({"classes": entries}, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DataDictionary":
        d = cls()
        for e in json.loads(text)["classes"]:
            prov = e["provenance"]
            if isinstance(prov, dict):
                prov = (prov["table_id"], prov["column_index"])
            d.add(e.get("raw", e["name"]), prov)
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DataDictionary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Existing:
    label: str


@dataclass(frozen=True)
class New:
    label: str
    raw: str = ""


@dataclass(frozen=True)
class Skipped:
    response: str


Decision = Existing | New | Skipped


DICT_INSTRUCTION = (
    "You are building a data dictionary for a collection of tables. "
    "Decide which semantic class describes the column below."
)
DICT_RULES = (
    "If one of the known classes fits, reply with that class exactly as written. "
    f"Otherwise reply with `{NEW_SENTINEL} <label>` proposing a short new class name."
)


def dictionary_prompt(sample: ColumnSample, dictionary: DataDictionary) -> str:
    known = "\n".join(f"- {name}" for name in dictionary.names())
    return (
        f"{DICT_INSTRUCTION}\n"
        f"KNOWN CLASSES:\n{known}\n"
        f"COL-NAME: `{sample.column_name}`\n"
        f"VALUES: {', '.join(sample.values)}\n"
        f"{DICT_RULES}\n"
        "ANSWER:"
    )


def parse_decision(response: str, dictionary: DataDictionary) -> Decision:
    lines = response.strip().splitlines()
    first = lines[0].strip().strip("`'\"").strip() if lines else ""
    if first.upper().startswith(NEW_SENTINEL):
        proposal = first[len(NEW_SENTINEL):].strip().rstrip(".").strip().strip("`'\"").strip()
        try:
            canonical = normalize_label(proposal)
        except EmptyLabel:
            return Skipped(response)
        if canonical in dictionary:
            return Existing(canonical)
        return New(canonical, proposal)
    try:
        canonical = normalize_label(first.rstrip("."))
    except EmptyLabel:
        return Skipped(response)
    if canonical in dictionary:
        return Existing(canonical)
    return Skipped(response)


def classify_or_create(backend: Backend, sample: ColumnSample,
                       dictionary: DataDictionary) -> Decision:
    """Ask the model whether a column fits a known class or needs a new one."""
    if not len(dictionary):
        raise ValueError("dictionary must contain at least one class")
    response = backend.complete(CompletionRequest(dictionary_prompt(sample, dictionary)))
    return parse_decision(response, dictionary)


@dataclass(frozen=True)
class TraceEntry:
    table_id: str
    new_labels: int
    dictionary_size: int
    skipped_columns: int = 0


@dataclass
class LearnTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    quiesced: bool = False

    @property
    def exhausted(self) -> bool:
        """True when the stream ran out before the quiescence condition."""
        return not self.quiesced

    def to_lines(self) -> str:
        out = ["table_id\tnew_labels\tdictionary_size\tskipped_columns"]
        for e in self.entries:
            out.append(f"{e.table_id}\t{e.new_labels}\t{e.dictionary_size}\t{e.skipped_columns}")
        return "\n".join(out) + "\n"


def learn_dictionary(backend: Backend, stream: Iterable[SourceTable],
                     config: LearnerConfig = LearnerConfig()) -> tuple[DataDictionary, LearnTrace]:
    """Grow a dictionary column by column until ``quiescence_window``
    consecutive tables create no new class, or the stream ends.
    """
    dictionary = DataDictionary.from_seeds(config.seed_classes)
    if not len(dictionary):
        raise ValueError("at least one seed class is required")
    trace = LearnTrace()
    quiet = 0
    seen_any = False
    for table in stream:
        seen_any = True
        created = skipped = 0
        for col in range(table.n_cols):
            try:
                sample = sample_values(table, col, config.sample_k, config.seed)
            except EmptyColumn:
                skipped += 1
                continue
            try:
                decision = classify_or_create(backend, sample, dictionary)
            except BackendError as exc:
                trace.entries.append(TraceEntry(table.table_id, created, len(dictionary), skipped))
                raise LearnError(exc, dictionary, trace) from exc
            if isinstance(decision, New):
                if dictionary.add(decision.raw or decision.label, (table.table_id, col)):
                    created += 1
            elif isinstance(decision, Skipped):
                skipped += 1
                log.info("unparsable answer for %s[%d]: %r", table.table_id, col,
                         decision.response[:80])
        trace.entries.append(TraceEntry(table.table_id, created, len(dictionary), skipped))
        quiet = quiet + 1 if created == 0 else 0
        if quiet == config.quiescence_window:
            trace.quiesced = True
            break
    if not seen_any:
        raise ValueError("table stream is empty")
    if not trace.quiesced:
        log.warning("table stream exhausted after %d tables before quiescence",
                    len(trace.entries))
    return dictionary, trace


# -- coverage -----------------------------------------------------------------


class Bucket(str, Enum):
    EXACT = "exact_match"
    SEMANTIC = "semantic_match"
    NONE = "no_match"


# A matcher gets one ground-truth canonical label and the dictionary's
# canonical class names; it returns (bucket, matched class or None).
Matcher = Callable[[str, Sequence[str]], tuple[Bucket, Optional[str]]]


def equality_matcher(gt: str, classes: Sequence[str]) -> tuple[Bucket, Optional[str]]:
    return (Bucket.EXACT, gt) if gt in classes else (Bucket.NONE, None)


class SynonymMatcher:
    """Fixture matcher: explicit equivalence and containment tables.

    ``exact`` maps a ground-truth label to classes judged equivalent;
    ``broader`` maps it to coarser classes that subsume it. Canonical
    equality always counts as exact.
    """

    def __init__(self, exact: Mapping[str, Iterable[str]] = (),
                 broader: Mapping[str, Iterable[str]] = ()) -> None:
        self.exact = _canon_table(exact)
        self.broader = _canon_table(broader)

    def __call__(self, gt: str, classes: Sequence[str]) -> tuple[Bucket, Optional[str]]:
        if gt in classes:
            return Bucket.EXACT, gt
        for c in classes:
            if c in self.exact.get(gt, ()):
                return Bucket.EXACT, c
        for c in classes:
            if c in self.broader.get(gt, ()):
                return Bucket.SEMANTIC, c
        return Bucket.NONE, None


def _canon_table(table) -> dict[str, set[str]]:
    table = dict(table)
    return {normalize_label(k): {normalize_label(v) for v in vs} for k, vs in table.items()}


class LLMJudgeMatcher:
    """Asks the backend to judge each ground-truth label against the classes.

    Expected reply: ``EXACT <class>``, ``BROADER <class>`` or ``NONE``.
    """

    def __init__(self, backend: Backend) -> None:
        self.backend = backend

    def __call__(self, gt: str, classes: Sequence[str]) -> tuple[Bucket, Optional[str]]:
        if gt in classes:
            return Bucket.EXACT, gt
        prompt = (
            "Compare a reference column label with a list of learned classes.\n"
            f"REFERENCE: {gt}\nCLASSES: {', '.join(classes)}\n"
            "Reply `EXACT <class>` if a class means the same thing, `BROADER <class>` if a "
            "class is a more general category containing it, or `NONE`.\nJUDGEMENT:"
        )
        reply = self.backend.complete(CompletionRequest(prompt)).strip().splitlines()
        words = reply[0].split(None, 1) if reply else []
        if len(words) == 2:
            try:
                cls = normalize_label(words[1])
            except EmptyLabel:
                cls = ""
            if cls in classes:
                if words[0].upper() == "EXACT":
                    return Bucket.EXACT, cls
                if words[0].upper() == "BROADER":
                    return Bucket.SEMANTIC, cls
        return Bucket.NONE, None


@dataclass(frozen=True)
class CoverageReport:
    assignments: dict[str, tuple[Bucket, Optional[str]]]
    fractions: dict[Bucket, float]

    @property
    def coverage(self) -> float:
        # Only exact matches count as recovered; coarser matches are a
        # granularity miss and are reported in their own bucket.
        return self.fractions[Bucket.EXACT]

    def to_dict(self) -> dict:
        return {
            "coverage": self.coverage,
            "fractions": {b.value: f for b, f in self.fractions.items()},
            "assignments": {
                gt: {"bucket": b.value, "matched": m} for gt, (b, m) in self.assignments.items()
            },
        }


def coverage(dictionary: DataDictionary | Sequence[str], gt_labels: Iterable[str],
             matcher: Matcher = equality_matcher) -> CoverageReport:
    classes = dictionary.names() if isinstance(dictionary, DataDictionary) else [
        normalize_label(c) for c in dictionary
    ]
    gts = list(dict.fromkeys(normalize_label(g) for g in gt_labels))
    if not gts:
        raise ValueError("no ground-truth labels")
    assignments = {gt: matcher(gt, classes) for gt in gts}
    counts = {b: 0 for b in Bucket}
    for bucket, _ in assignments.values():
        counts[bucket] += 1
    fractions = {b: counts[b] / len(gts) for b in Bucket}
    return CoverageReport(assignments, fractions)
