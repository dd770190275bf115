"""Superclass induction over a data dictionary, ground-truth mapping, and
the ``ROOT::SUPER::LEAF`` line format used to show and store a tree.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .core import (
    PATH_SEP,
    ROOT_NAME,
    EmptyLabel,
    InvalidOntology,
    Ontology,
    SemtypeError,
    normalize_label,
)
from .dictionary import DataDictionary
from .llm import Backend, CompletionRequest

log = logging.getLogger(__name__)


class DepthExceeded(SemtypeError):
    pass


class InconsistentPaths(SemtypeError, ValueError):
    pass


@dataclass(frozen=True)
class BatchConfig:
    batch_size: int = 8
    max_depth: int = 3

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.max_depth < 2:
            raise ValueError("max_depth must be >= 2")


# -- serialization ------------------------------------------------------------


def serialize_tree(ontology: Ontology) -> list[str]:
    """One upper-case root-to-node path per node, in pre-order."""
    return [PATH_SEP.join(p.upper() for p in ontology.path(n)) for n in ontology.preorder()]


def parse_serialized(lines: Iterable[str]) -> Ontology:
    """Inverse of :func:`serialize_tree`. Ids follow first appearance."""
    entries: list[tuple[str, Optional[int]]] = []
    index: dict[tuple[str, ...], int] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            parts = tuple(normalize_label(p) for p in line.split(PATH_SEP))
        except EmptyLabel as exc:
            raise InconsistentPaths(f"line {lineno}: empty path segment in {line!r}") from exc
        if not entries:
            if len(parts) != 1:
                raise InconsistentPaths(f"line {lineno}: first line must be the root alone")
            entries.append((parts[0], None))
            index[parts] = 0
            continue
        if parts[0] != entries[0][0]:
            raise InconsistentPaths(f"line {lineno}: second root {parts[0]!r}")
        if parts in index:
            continue
        parent = index.get(parts[:-1])
        if parent is None:
            raise InconsistentPaths(f"line {lineno}: parent of {line!r} not declared earlier")
        index[parts] = len(entries)
        entries.append((parts[-1], parent))
    if not entries:
        raise InconsistentPaths("no paths given")
    return Ontology.from_parents(entries)


def save_ontology(ontology: Ontology, path: str | Path) -> None:
    Path(path).write_text("\n".join(serialize_tree(ontology)) + "\n", encoding="utf-8")


def load_ontology(path: str | Path) -> Ontology:
    return parse_serialized(Path(path).read_text(encoding="utf-8").splitlines())


def save_mapping(ontology: Ontology, path: str | Path) -> None:
    lines = ["label\tnode"]
    for label, nid in sorted(ontology.gt_mapping.items()):
        lines.append(f"{label}\t{PATH_SEP.join(p.upper() for p in ontology.path(nid))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_mapping(ontology: Ontology, path: str | Path) -> Ontology:
    mapping = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        if not line.strip():
            continue
        label, node_path = line.split("\t")
        nid = ontology.find_path([normalize_label(p) for p in node_path.split(PATH_SEP)])
        if nid is None:
            raise InconsistentPaths(f"mapping target {node_path!r} not in ontology")
        mapping[label] = nid
    return ontology.with_mapping(mapping)


# -- building -----------------------------------------------------------------


class _TreeBuilder:
    def __init__(self, root_name: str) -> None:
        self.entries: list[tuple[str, Optional[int]]] = [(root_name, None)]
        self.children: dict[int, dict[str, int]] = {0: {}}

    def child(self, parent: int, name: str) -> int:
        existing = self.children[parent].get(name)
        if existing is not None:
            return existing
        nid = len(self.entries)
        self.entries.append((name, parent))
        self.children[parent][name] = nid
        self.children[nid] = {}
        return nid

    def build(self) -> Ontology:
        return Ontology.from_parents(self.entries)


SUPERCLASS_INSTRUCTION = (
    "You are organizing semantic column classes into a hierarchy. "
    "Assign every class below to a broader superclass. Reuse an existing "
    "superclass when one fits; otherwise invent a short new one."
)


def superclass_prompt(batch: Sequence[str], superclasses: Sequence[str]) -> str:
    existing = "\n".join(f"- {s}" for s in superclasses) or "(none yet)"
    leaves = "\n".join(f"- {leaf}" for leaf in batch)
    return (
        f"{SUPERCLASS_INSTRUCTION}\n"
        f"EXISTING SUPERCLASSES:\n{existing}\n"
        f"CLASSES:\n{leaves}\n"
        "Reply with one line per class in the form `<class> -> <superclass>`.\n"
        "ASSIGNMENTS:"
    )


def parse_assignments(response: str) -> dict[str, list[str]]:
    """``leaf -> super`` lines to {leaf: superclass path}. Bad lines are dropped."""
    out: dict[str, list[str]] = {}
    for line in response.splitlines():
        line = line.strip().lstrip("-*").strip()
        if "->" not in line:
            continue
        leaf, _, sup = line.partition("->")
        try:
            leaf_c = normalize_label(leaf.strip("`'\" "))
            path = [normalize_label(p.strip("`'\" ")) for p in sup.split(PATH_SEP)]
        except EmptyLabel:
            continue
        if path and path[0] == ROOT_NAME:
            path = path[1:]
        if path:
            out.setdefault(leaf_c, path)
    return out


@dataclass
class BuildReport:
    warnings: list[str] = field(default_factory=list)
    requests: int = 0


def build_ontology(backend: Backend, dictionary: DataDictionary | Sequence[str],
                   config: BatchConfig = BatchConfig(),
                   report: Optional[BuildReport] = None) -> Ontology:
    """Group dictionary classes under model-proposed superclasses.

    Classes are sent in batches of ``config.batch_size``; the set of known
    superclasses grows as batches are processed. A class the model leaves
    unassigned is attached directly under the root.
    """
    names = dictionary.names() if isinstance(dictionary, DataDictionary) else [
        normalize_label(n) for n in dictionary
    ]
    names = list(dict.fromkeys(names))
    if not names:
        raise ValueError("dictionary has no classes")
    report = report if report is not None else BuildReport()
    tree = _TreeBuilder(ROOT_NAME)
    superclasses: list[str] = []
    placement: dict[str, list[str]] = {}
    for start in range(0, len(names), config.batch_size):
        batch = names[start:start + config.batch_size]
        response = backend.complete(CompletionRequest(superclass_prompt(batch, superclasses)))
        report.requests += 1
        assigned = parse_assignments(response)
        if not assigned:
            report.warnings.append(f"empty superclass answer for batch {batch}; attached to root")
        for leaf in batch:
            path = assigned.get(leaf)
            if path is None:
                if assigned:
                    report.warnings.append(f"class {leaf!r} unassigned; attached to root")
                placement[leaf] = []
                continue
            if len(path) + 2 > config.max_depth:
                raise DepthExceeded(
                    f"{leaf!r} -> {'::'.join(path)} needs depth {len(path) + 2} "
                    f"> {config.max_depth}"
                )
            placement[leaf] = path
            joined = PATH_SEP.join(path)
            if joined not in superclasses:
                superclasses.append(joined)
        for extra in set(assigned) - set(batch):
            report.warnings.append(f"answer mentions {extra!r} which is not in the batch")

    # Superclasses first so a root-level leaf sharing a superclass name can
    # be folded under it instead of clashing with it.
    for leaf in names:
        parent = 0
        for part in placement[leaf]:
            parent = tree.child(parent, part)
    for leaf in names:
        parent = 0
        for part in placement[leaf]:
            parent = tree.child(parent, part)
        if leaf in tree.children[parent] and tree.children[tree.children[parent][leaf]]:
            parent = tree.children[parent][leaf]
            report.warnings.append(f"class {leaf!r} nested under its same-named superclass")
        tree.child(parent, leaf)
    for w in report.warnings:
        log.warning(w)
    return tree.build()


# -- ground-truth mapping -----------------------------------------------------


@dataclass(frozen=True)
class MappingResult:
    mapping: dict[str, int]
    unmapped: tuple[str, ...]
    requests: int

    @property
    def coverage(self) -> float:
        total = len(self.mapping) + len(self.unmapped)
        return len(self.mapping) / total if total else 1.0

    @property
    def total(self) -> bool:
        return not self.unmapped


MAPPING_INSTRUCTION = (
    "Below is a class hierarchy, one path per line. Choose the single path "
    "that best accommodates the given column label. Reply with the path only."
)


def mapping_prompt(label: str, lines: Sequence[str]) -> str:
    return (
        f"{MAPPING_INSTRUCTION}\nCLASSES:\n" + "\n".join(lines) +
        f"\nLABEL: {label}\nPATH:"
    )


def resolve_reference(text: str, ontology: Ontology) -> tuple[Optional[int], str]:
    """Resolve a path, path suffix, or bare node name to a node id.

    Returns ``(node_id, "")`` or ``(None, reason)`` where reason is
    ``"ambiguous"`` or ``"not_found"``.
    """
    parts = []
    for p in text.strip().split(PATH_SEP):
        try:
            parts.append(normalize_label(p.strip("`'\" .")))
        except EmptyLabel:
            return None, "not_found"
    if not parts:
        return None, "not_found"
    nid = ontology.find_path(parts)
    if nid is not None:
        return nid, ""
    matches = [
        n for n in ontology.preorder()
        if ontology.path(n)[-len(parts):] == parts
    ]
    if len(matches) == 1:
        return matches[0], ""
    return None, "ambiguous" if matches else "not_found"


def map_ground_truth(backend: Optional[Backend], ontology: Ontology,
                     gt_labels: Iterable[str], workers: Optional[int] = None) -> MappingResult:
    """Place every ground-truth label on an ontology node.

    A label whose canonical form names exactly one node is mapped without
    asking the backend.
    """
    labels = list(dict.fromkeys(normalize_label(g) for g in gt_labels))
    mapping: dict[str, int] = {}
    pending = []
    for label in labels:
        hits = ontology.find_by_name(label)
        if len(hits) == 1:
            mapping[label] = hits[0]
        else:
            pending.append(label)
    lines = serialize_tree(ontology)
    unmapped = []
    requests = 0
    if pending and backend is None:
        unmapped = pending
    elif pending:
        def ask(label: str) -> str:
            return backend.complete(CompletionRequest(mapping_prompt(label.upper(), lines)))

        n = workers or backend.concurrency
        with ThreadPoolExecutor(max_workers=max(1, n)) as pool:
            answers = list(pool.map(ask, pending))
        requests = len(pending)
        for label, answer in zip(pending, answers):
            first = answer.strip().splitlines()[0] if answer.strip() else ""
            nid, _ = resolve_reference(first, ontology) if first else (None, "")
            if nid is None:
                unmapped.append(label)
            else:
                mapping[label] = nid
    ordered = {label: mapping[label] for label in labels if label in mapping}
    if unmapped:
        log.warning("%d ground-truth labels could not be mapped: %s", len(unmapped), unmapped)
    return MappingResult(ordered, tuple(unmapped), requests)


def require_total(result: MappingResult) -> None:
    if not result.total:
        raise InvalidOntology(f"unmappable labels: {', '.join(result.unmapped)}")
