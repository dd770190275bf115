"""Table loading, manifests, value sampling and dataset statistics.

Manifest schema (YAML; JSON is accepted too)::

    name: mini-goby
    label_space: labels.txt          # optional, one raw label per line
    tables:
      - table_id: t01
        path: tables/t01.csv
        ground_truth_path: gt/t01.csv   # optional, header "column,label"

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import yaml

from .core import SemtypeError, SourceTable

log = logging.getLogger(__name__)

DEFAULT_SAMPLE_K = 5
DEFAULT_SEED = 0


class ParseError(SemtypeError, ValueError):
    pass


class ManifestError(SemtypeError, ValueError):
    pass


class EmptyColumn(SemtypeError, ValueError):
    pass


class TableLoadError(SemtypeError):
    """A table in a manifest failed to load; wraps the underlying error."""

    def __init__(self, table_id: str, cause: Exception) -> None:
        super().__init__(f"table {table_id}: {cause}")
        self.table_id = table_id
        self.cause = cause


@dataclass(frozen=True)
class TableEntry:
    table_id: str
    path: Path
    ground_truth_path: Optional[Path] = None


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    tables: tuple[TableEntry, ...]
    label_space: Optional[Path] = None
    delimiter: str = ","

    @classmethod
    def load(cls, path: str | Path, delimiter: Optional[str] = None) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ManifestError(f"manifest {path} is not valid YAML/JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ManifestError(f"manifest {path} must be a mapping")
        base = path.parent
        tables = raw.get("tables") or []
        if not tables:
            raise ManifestError(f"manifest {path} lists no tables")
        entries = []
        seen = set()
        for i, item in enumerate(tables):
            try:
                table_id = str(item["table_id"])
                tpath = base / item["path"]
            except (KeyError, TypeError) as exc:
                raise ManifestError(f"manifest table entry {i} malformed: {item!r}") from exc
            if table_id in seen:
                raise ManifestError(f"duplicate table_id {table_id!r}")
            seen.add(table_id)
            gt = item.get("ground_truth_path")
            gt_path = base / gt if gt else None
            for p in (tpath, gt_path):
                if p is not None and not p.is_file():
                    raise ManifestError(f"table {table_id}: missing file {p}")
            entries.append(TableEntry(table_id, tpath, gt_path))
        label_space = raw.get("label_space")
        label_path = base / label_space if label_space else None
        if label_path is not None and not label_path.is_file():
            raise ManifestError(f"missing label space file {label_path}")
        return cls(
            name=str(raw.get("name", path.stem)),
            tables=tuple(entries),
            label_space=label_path,
            delimiter=delimiter or raw.get("delimiter", ","),
        )

    def table_ids(self) -> list[str]:
        return [t.table_id for t in self.tables]

    def labels(self) -> list[str]:
        """Raw label space from the sidecar file, in file order."""
        if self.label_space is None:
            return []
        lines = self.label_space.read_text(encoding="utf-8").splitlines()
        return [line.strip() for line in lines if line.strip()]


@dataclass(frozen=True)
class ColumnSample:
    table_id: str
    column_index: int
    column_name: str
    values: tuple[str, ...]
    k: int


@dataclass(frozen=True)
class DatasetStats:
    table_count: int
    total_rows: int
    total_columns: int
    avg_rows_per_table: float
    avg_cols_per_table: float

    def display_rows(self) -> list[tuple[str, str]]:
        # Average rows are truncated and average columns rounded half-up;
        # the raw means stay available on the dataclass.
        return [
            ("# Tables", f"{self.table_count:,}"),
            ("Avg. Rows / Table", f"{math.floor(self.avg_rows_per_table):,}"),
            ("Avg. Col / Table", f"{math.floor(self.avg_cols_per_table + 0.5):,}"),
            ("Total Rows", f"{self.total_rows:,}"),
            ("Total Columns", f"{self.total_columns:,}"),
        ]

    def render(self) -> str:
        rows = self.display_rows()
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>12}" for k, v in rows)


def load_table(
    path: str | Path,
    table_id: str,
    delimiter: str = ",",
    ground_truth_path: str | Path | None = None,
) -> SourceTable:
    """Read a delimiter-separated file with a header row."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh, delimiter=delimiter)
            try:
                header = next(reader)
            except StopIteration:
                raise ParseError(f"{path}: empty file, no header row") from None
            rows = []
            for row in reader:
                if len(row) != len(header):
                    raise ParseError(
                        f"{path}: row {reader.line_num} has {len(row)} fields, "
                        f"expected {len(header)}"
                    )
                rows.append(tuple(row))
    except csv.Error as exc:
        raise ParseError(f"{path}: {exc}") from exc
    ground_truth = None
    if ground_truth_path is not None:
        ground_truth = _load_ground_truth(Path(ground_truth_path), header)
    return SourceTable(table_id, tuple(header), tuple(rows), ground_truth)


def _load_ground_truth(path: Path, header: list[str]) -> dict[int, str]:
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            return {}
        records = list(reader)
        if [c.strip().lower() for c in first] != ["column", "label"]:
            records.insert(0, first)
    index = {name: i for i, name in enumerate(header)}
    mapping = {}
    for rec in records:
        if len(rec) != 2:
            raise ParseError(f"{path}: ground truth rows need 2 fields, got {rec!r}")
        column, label = rec
        if column not in index:
            raise ParseError(f"{path}: ground truth names unknown column {column!r}")
        mapping[index[column]] = label
    return mapping


def load_entry(entry: TableEntry, delimiter: str = ",") -> SourceTable:
    try:
        return load_table(entry.path, entry.table_id, delimiter, entry.ground_truth_path)
    except (OSError, ParseError, ValueError) as exc:
        raise TableLoadError(entry.table_id, exc) from exc


def sample_values(table: SourceTable, column_index: int, k: int = DEFAULT_SAMPLE_K,
                  seed: int = DEFAULT_SEED) -> ColumnSample:
    """Uniform sample of up to ``k`` distinct non-empty values from a column."""
    if not 0 <= column_index < table.n_cols:
        raise IndexError(f"column {column_index} out of range for {table.table_id}")
    if k < 1:
        raise ValueError("k must be >= 1")
    distinct = list(dict.fromkeys(v for v in table.column(column_index) if v != ""))
    if not distinct:
        raise EmptyColumn(f"{table.table_id}[{column_index}] has no non-empty values")
    if len(distinct) <= k:
        values = distinct
    else:
        rng = random.Random(f"{seed}:{table.table_id}:{column_index}")
        values = rng.sample(distinct, k)
    return ColumnSample(table.table_id, column_index, table.column_names[column_index],
                        tuple(values), k)


def table_order(manifest: DatasetManifest, seed: int = DEFAULT_SEED) -> list[TableEntry]:
    entries = list(manifest.tables)
    random.Random(seed).shuffle(entries)
    return entries


def table_stream(manifest: DatasetManifest, seed: int = DEFAULT_SEED) -> Iterator[SourceTable]:
    """Lazily yield tables in a seeded uniform random order."""
    for entry in table_order(manifest, seed):
        yield load_entry(entry, manifest.delimiter)


def load_all(manifest: DatasetManifest, workers: int = 4) -> list[SourceTable]:
    """Load every table in manifest order, in parallel."""
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(lambda e: load_entry(e, manifest.delimiter), manifest.tables))


def dataset_stats(manifest: DatasetManifest, workers: int = 4) -> DatasetStats:
    if not manifest.tables:
        raise ManifestError("no tables")
    total_rows = total_cols = 0
    for table in load_all(manifest, workers):
        total_rows += table.n_rows
        total_cols += table.n_cols
    n = len(manifest.tables)
    return DatasetStats(n, total_rows, total_cols, total_rows / n, total_cols / n)
