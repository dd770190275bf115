"""Domain types shared across the pipeline, plus hierarchical correctness."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Optional, Sequence, Union

ROOT_NAME = "property"
PATH_SEP = "::"

_SEPARATORS = re.compile(r"[._\- ]+")


class SemtypeError(Exception):
    """Base class for all errors raised by this package."""


class EmptyLabel(SemtypeError, ValueError):
    pass


class UnknownNode(SemtypeError, KeyError):
    pass


class InvalidOntology(SemtypeError, ValueError):
    pass


def normalize_label(raw: str) -> str:
    """Canonical comparison form of a label.

    Lowercases and collapses runs of ``.``, ``_``, ``-`` and spaces into a
    single underscore. Leading/trailing separators are dropped.

    >>> normalize_label("LOC1.ADDRESS")
    'loc1_address'
    """
    text = raw.strip()
    if not text:
        raise EmptyLabel(f"label is empty: {raw!r}")
    canonical = _SEPARATORS.sub("_", text.lower()).strip("_")
    if not canonical:
        raise EmptyLabel(f"label has no content besides separators: {raw!r}")
    return canonical


@dataclass(frozen=True)
class SemanticLabel:
    raw: str
    canonical: str = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "canonical", normalize_label(self.raw))


@dataclass(frozen=True)
class SourceTable:
    table_id: str
    column_names: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]
    ground_truth: Optional[Mapping[int, str]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "column_names", tuple(self.column_names))
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        width = len(self.column_names)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise ValueError(
                    f"table {self.table_id}: row {i} has {len(row)} values, expected {width}"
                )
        if self.ground_truth is not None:
            for idx in self.ground_truth:
                if not 0 <= idx < width:
                    raise ValueError(f"table {self.table_id}: ground truth for bad column {idx}")
            object.__setattr__(self, "ground_truth", dict(self.ground_truth))

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_cols(self) -> int:
        return len(self.column_names)

    def column(self, index: int) -> list[str]:
        return [row[index] for row in self.rows]


@dataclass(frozen=True)
class OntologyNode:
    node_id: int
    name: str
    parent: Optional[int]
    children: tuple[int, ...] = ()


class Ontology:
    """Rooted class tree with an optional ground-truth label mapping.

    Instances are immutable; use :meth:`from_parents` or
    :func:`semtype.ontology.parse_serialized` to build one.
    """

    __slots__ = ("_nodes", "_root", "_gt_mapping", "_depth")

    def __init__(
        self,
        nodes: Mapping[int, OntologyNode],
        root: int,
        gt_mapping: Optional[Mapping[str, int]] = None,
    ) -> None:
        self._nodes = dict(nodes)
        self._root = root
        self._gt_mapping = dict(gt_mapping or {})
        self._validate()
        self._depth = {}
        for nid in self._preorder():
            node = self._nodes[nid]
            self._depth[nid] = 0 if node.parent is None else self._depth[node.parent] + 1

    @classmethod
    def from_parents(
        cls,
        entries: Iterable[tuple[str, Optional[int]]],
        gt_mapping: Optional[Mapping[str, int]] = None,
    ) -> "Ontology":
        """Build from ``(name, parent_index)`` pairs; ids are list positions.

        Parents must precede their children. Entry 0 is the root.
        """
        entries = list(entries)
        children: dict[int, list[int]] = {i: [] for i in range(len(entries))}
        for i, (_, parent) in enumerate(entries):
            if parent is not None:
                if not 0 <= parent < i:
                    raise InvalidOntology(f"entry {i} has parent {parent} not preceding it")
                children[parent].append(i)
        nodes = {
            i: OntologyNode(i, name, parent, tuple(children[i]))
            for i, (name, parent) in enumerate(entries)
        }
        return cls(nodes, 0, gt_mapping)

    def _validate(self) -> None:
        if self._root not in self._nodes:
            raise InvalidOntology("root id missing")
        roots = [n.node_id for n in self._nodes.values() if n.parent is None]
        if roots != [self._root]:
            raise InvalidOntology(f"expected exactly one parentless node, got {roots}")
        for node in self._nodes.values():
            if not node.name or ":" in node.name or "\n" in node.name or '"' in node.name:
                raise InvalidOntology(f"bad node name {node.name!r}")
            if node.parent is not None:
                parent = self._nodes.get(node.parent)
                if parent is None or node.node_id not in parent.children:
                    raise InvalidOntology(f"node {node.node_id} not listed by its parent")
            names = set()
            for cid in node.children:
                child = self._nodes.get(cid)
                if child is None or child.parent != node.node_id:
                    raise InvalidOntology(f"child link {node.node_id}->{cid} inconsistent")
                if child.name in names:
                    raise InvalidOntology(f"duplicate sibling name {child.name!r}")
                names.add(child.name)
        seen = set(self._preorder())
        if len(seen) != len(self._nodes):
            raise InvalidOntology("tree is not connected")
        for label, target in self._gt_mapping.items():
            if target not in self._nodes:
                raise InvalidOntology(f"gt label {label!r} maps to missing node {target}")

    def _preorder(self) -> Iterator[int]:
        stack = [self._root]
        visited = set()
        while stack:
            nid = stack.pop()
            if nid in visited:
                raise InvalidOntology("cycle detected")
            visited.add(nid)
            yield nid
            stack.extend(reversed(self._nodes[nid].children))

    # accessors

    @property
    def root(self) -> int:
        return self._root

    @property
    def nodes(self) -> Mapping[int, OntologyNode]:
        return self._nodes

    @property
    def gt_mapping(self) -> Mapping[str, int]:
        return self._gt_mapping

    def __len__(self) -> int:
        return len(self._nodes)

    def __contains__(self, node_id: object) -> bool:
        return node_id in self._nodes

    def node(self, node_id: int) -> OntologyNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def parent(self, node_id: int) -> Optional[int]:
        return self.node(node_id).parent

    def children(self, node_id: int) -> tuple[int, ...]:
        return self.node(node_id).children

    def depth(self, node_id: int) -> int:
        self.node(node_id)
        return self._depth[node_id]

    def height(self) -> int:
        """Largest node depth (root alone has height 0)."""
        return max(self._depth.values())

    def is_leaf(self, node_id: int) -> bool:
        return not self.node(node_id).children

    def preorder(self) -> list[int]:
        return list(self._preorder())

    def leaves(self) -> list[int]:
        return [nid for nid in self._preorder() if not self._nodes[nid].children]

    def ancestors(self, node_id: int) -> list[int]:
        """Chain from ``node_id`` (inclusive) up to the root."""
        chain = [node_id]
        parent = self.node(node_id).parent
        while parent is not None:
            chain.append(parent)
            parent = self._nodes[parent].parent
        return chain

    def path(self, node_id: int) -> list[str]:
        return [self._nodes[n].name for n in reversed(self.ancestors(node_id))]

    def path_str(self, node_id: int) -> str:
        return PATH_SEP.join(self.path(node_id))

    def find_by_name(self, name: str) -> list[int]:
        return [nid for nid in self._preorder() if self._nodes[nid].name == name]

    def find_path(self, names: Sequence[str]) -> Optional[int]:
        """Resolve a full root-to-node name path, or None."""
        if not names or names[0] != self._nodes[self._root].name:
            return None
        current = self._root
        for name in names[1:]:
            for cid in self._nodes[current].children:
                if self._nodes[cid].name == name:
                    current = cid
                    break
            else:
                return None
        return current

    def structure(self) -> tuple:
        """Id-free nested ``(name, children)`` form for structural equality."""

        def build(nid: int) -> tuple:
            node = self._nodes[nid]
            return (node.name, tuple(build(c) for c in node.children))

        return build(self._root)

    def with_mapping(self, gt_mapping: Mapping[str, int]) -> "Ontology":
        return Ontology(self._nodes, self._root, gt_mapping)

    def mapped_node(self, gt_label: str) -> int:
        canonical = normalize_label(gt_label)
        try:
            return self._gt_mapping[canonical]
        except KeyError:
            raise UnmappedLabel(gt_label) from None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Ontology):
            return NotImplemented
        return (
            self._nodes == other._nodes
            and self._root == other._root
            and self._gt_mapping == other._gt_mapping
        )

    def __hash__(self) -> int:
        return hash((self.structure(), tuple(sorted(self._gt_mapping.items()))))

    def __repr__(self) -> str:
        return f"Ontology({len(self._nodes)} nodes, root={self._nodes[self._root].name!r})"


class UnmappedLabel(SemtypeError, KeyError):
    """A ground-truth label has no node in the ontology mapping."""


@dataclass(frozen=True)
class Label:
    """A committed prediction. ``node_id`` is set for ontology-backed strategies."""

    label: str
    node_id: Optional[int] = None


@dataclass(frozen=True)
class Abstain:
    reason: str


Outcome = Union[Label, Abstain]


@dataclass(frozen=True)
class Prediction:
    table_id: str
    column_index: int
    outcome: Outcome

    @property
    def abstained(self) -> bool:
        return isinstance(self.outcome, Abstain)


def mrca(a: int, b: int, ontology: Ontology) -> int:
    """Deepest node that is an ancestor-or-self of both ``a`` and ``b``."""
    da, db = ontology.depth(a), ontology.depth(b)
    while da > db:
        a = ontology.parent(a)
        da -= 1
    while db > da:
        b = ontology.parent(b)
        db -= 1
    while a != b:
        a = ontology.parent(a)
        b = ontology.parent(b)
    return a


def is_correct(pred: int, truth: int, ontology: Ontology) -> bool:
    """Hierarchical correctness: exact match, or the MRCA is pred's parent."""
    ontology.node(pred)
    ontology.node(truth)
    if pred == truth:
        return True
    parent = ontology.parent(pred)
    return parent is not None and mrca(pred, truth, ontology) == parent
