"""Column annotation strategies: flat label list, serialized tree,
step-by-step descent, and grammar-constrained decoding.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from .core import (
    PATH_SEP,
    Abstain,
    EmptyLabel,
    Label,
    Ontology,
    Prediction,
    SourceTable,
    normalize_label,
)
from .grammar import DecodeConfig, decode_constrained, emit_gbnf, parse_answer, parse_gbnf
from .ingest import DEFAULT_SAMPLE_K, DEFAULT_SEED, ColumnSample, EmptyColumn, sample_values
from .llm import Backend, BackendError, CapabilityUnsupported, CompletionRequest, fingerprint
from .ontology import resolve_reference, serialize_tree

log = logging.getLogger(__name__)

STRATEGIES = ("flat", "tree", "step", "gcd")

INSTRUCTION = (
    "You are a data analysis assistant. Pick the semantic type of the column "
    "described below from the listed classes. Answer with one class only."
)
STEP_INSTRUCTION = (
    "You are a data analysis assistant. We will narrow down the semantic type "
    "of the column below one level at a time. At each step, answer with "
    "exactly one of the options offered."
)
PREFIX = "SEMANTIC-TYPE:"


@dataclass(frozen=True)
class PromptTemplate:
    """Named prompt slots rendered in a fixed order; empty slots are skipped."""

    instruction: str = ""
    task_knowledge: str = ""
    table_serialization: str = ""
    column_metadata: str = ""
    values: str = ""
    prefix: str = ""

    SLOTS = ("instruction", "task_knowledge", "table_serialization",
             "column_metadata", "values", "prefix")

    def render(self) -> str:
        parts = [getattr(self, s) for s in self.SLOTS]
        return "\n".join(p for p in parts if p)


def column_slots(table: SourceTable, sample: ColumnSample) -> dict[str, str]:
    return {
        "table_serialization": f"TABLE: {table.table_id} (columns: {', '.join(table.column_names)})",
        "column_metadata": f"COL-NAME: `{sample.column_name}`",
        "values": f"VALUES: {', '.join(sample.values)}",
    }


def flat_prompt(table: SourceTable, sample: ColumnSample, label_space: Sequence[str]) -> str:
    knowledge = "CLASSES:\n" + "\n".join(label_space)
    return PromptTemplate(INSTRUCTION, knowledge, prefix=PREFIX,
                          **column_slots(table, sample)).render()


def tree_prompt(table: SourceTable, sample: ColumnSample, tree_lines: Sequence[str]) -> str:
    knowledge = "CLASSES:\n" + "\n".join(tree_lines)
    return PromptTemplate(INSTRUCTION, knowledge, prefix=PREFIX,
                          **column_slots(table, sample)).render()


@dataclass(frozen=True)
class Exchange:
    fingerprint: str
    prompt: str
    response: str


@dataclass
class AnnotationRun:
    strategy: str
    config: dict
    predictions: list[Prediction] = field(default_factory=list)
    request_count: int = 0
    trace: list[Exchange] = field(default_factory=list)
    prompt_fingerprints: dict[tuple[str, int], str] = field(default_factory=dict)

    def extend(self, other: "AnnotationRun") -> None:
        self.predictions.extend(other.predictions)
        self.request_count += other.request_count
        self.trace.extend(other.trace)
        self.prompt_fingerprints.update(other.prompt_fingerprints)

    def records(self, ontology: Optional[Ontology] = None) -> list[dict]:
        out = []
        for p in self.predictions:
            rec = {
                "table_id": p.table_id,
                "column_index": p.column_index,
                "strategy": self.strategy,
                "prompt_fingerprint": self.prompt_fingerprints.get((p.table_id, p.column_index)),
            }
            if isinstance(p.outcome, Abstain):
                rec["outcome"] = {"abstain": p.outcome.reason}
            else:
                label = p.outcome.label
                if p.outcome.node_id is not None and ontology is not None:
                    label = ontology.path_str(p.outcome.node_id)
                rec["outcome"] = {"label": label}
            out.append(rec)
        return out

    def save(self, path: str | Path, ontology: Optional[Ontology] = None) -> None:
        header = {"strategy": self.strategy, "config": self.config,
                  "request_count": self.request_count}
        lines = [json.dumps({"run": header}, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.records(ontology)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, ontology: Optional[Ontology] = None) -> "AnnotationRun":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        header = json.loads(lines[0])["run"]
        run = cls(header["strategy"], header["config"], request_count=header["request_count"])
        for line in lines[1:]:
            rec = json.loads(line)
            outcome = rec["outcome"]
            if "abstain" in outcome:
                out = Abstain(outcome["abstain"])
            else:
                label = outcome["label"]
                node = None
                if ontology is not None and PATH_SEP in label:
                    node = ontology.find_path(label.split(PATH_SEP))
                    if node is not None:
                        label = ontology.node(node).name
                out = Label(label, node)
            run.predictions.append(Prediction(rec["table_id"], rec["column_index"], out))
            run.prompt_fingerprints[(rec["table_id"], rec["column_index"])] = \
                rec.get("prompt_fingerprint")
        return run


class _Session:
    """Per-run request cache and bookkeeping shared by worker threads."""

    def __init__(self, backend: Backend, max_tokens: int = 64) -> None:
        self.backend = backend
        self.max_tokens = max_tokens
        self.cache: dict[str, str] = {}
        self.trace: list[Exchange] = []
        self.requests = 0
        self._lock = threading.Lock()

    def ask(self, prompt: str) -> str:
        key = fingerprint(prompt)
        with self._lock:
            if key in self.cache:
                return self.cache[key]
        response = self.backend.complete(CompletionRequest(prompt, max_tokens=self.max_tokens))
        with self._lock:
            self.cache.setdefault(key, response)
            self.requests += 1
            self.trace.append(Exchange(key, prompt, response))
        return response


def _first_line(response: str) -> str:
    for line in response.strip().splitlines():
        line = line.strip()
        if line:
            if line.upper().startswith(PREFIX):
                line = line[len(PREFIX):].strip()
            return line.strip("`'\"").rstrip(".").strip()
    return ""


def _looks_like_label(text: str) -> bool:
    # A bare token (no internal whitespace) reads as an attempted label;
    # anything longer is treated as prose.
    return bool(text) and len(text.split()) == 1


def parse_flat_response(response: str, label_space: Sequence[str]) -> Label | Abstain:
    """Map a reply onto the label space, case- and separator-insensitively."""
    canon_space = {normalize_label(l): l for l in label_space}
    text = _first_line(response)
    if not text:
        return Abstain("unparsable")
    try:
        canonical = normalize_label(text)
    except EmptyLabel:
        return Abstain("unparsable")
    if canonical in canon_space:
        return Label(canonical)
    if _looks_like_label(text):
        return Abstain("invalid_label")
    mentioned = [c for c in canon_space if re.search(rf"(?<![a-z0-9]){re.escape(c)}(?![a-z0-9])",
                                                     canonical)]
    if len(mentioned) == 1:
        return Label(mentioned[0])
    if len(mentioned) > 1:
        return Abstain("ambiguous")
    return Abstain("unparsable")


def parse_tree_response(response: str, ontology: Ontology) -> Label | Abstain:
    text = _first_line(response)
    if not text:
        return Abstain("unparsable")
    nid, reason = resolve_reference(text, ontology)
    if nid is not None:
        return Label(ontology.node(nid).name, nid)
    if reason == "ambiguous":
        return Abstain("ambiguous")
    if _looks_like_label(text):
        return Abstain("invalid_label")
    return Abstain("unparsable")


# -- shared column driver -----------------------------------------------------


def _annotate_columns(table: SourceTable, backend: Backend, strategy: str, config: dict,
                      sample_k: int, seed: int,
                      first_prompt: Callable[[ColumnSample], str],
                      solve: Callable[[ColumnSample, str], Prediction | tuple]) -> AnnotationRun:
    """Run ``solve`` once per distinct first prompt, in parallel.

    Columns with identical first prompts share one result, so request
    counts do not depend on thread scheduling.
    """
    run = AnnotationRun(strategy, dict(config))
    jobs: dict[str, tuple[ColumnSample, str]] = {}
    column_keys: list[Optional[str]] = []
    for col in range(table.n_cols):
        try:
            sample = sample_values(table, col, sample_k, seed)
        except EmptyColumn:
            column_keys.append(None)
            continue
        prompt = first_prompt(sample)
        key = fingerprint(prompt)
        jobs.setdefault(key, (sample, prompt))
        column_keys.append(key)
        run.prompt_fingerprints[(table.table_id, col)] = key

    def work(item: tuple[str, tuple[ColumnSample, str]]):
        key, (sample, prompt) = item
        try:
            return key, solve(sample, prompt)
        except CapabilityUnsupported:
            raise
        except BackendError as exc:
            log.warning("%s[%d]: backend error %s", table.table_id, sample.column_index, exc)
            return key, Abstain("transport")

    workers = max(1, min(backend.concurrency, len(jobs) or 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = dict(pool.map(work, sorted(jobs.items())))
    for col, key in enumerate(column_keys):
        outcome = Abstain("empty_column") if key is None else results[key]
        run.predictions.append(Prediction(table.table_id, col, outcome))
    return run


def annotate_flat(backend: Backend, table: SourceTable, label_space: Sequence[str],
                  sample_k: int = DEFAULT_SAMPLE_K, seed: int = DEFAULT_SEED,
                  session: Optional[_Session] = None) -> AnnotationRun:
    """Baseline: the model chooses from the flat list of valid labels."""
    if not label_space:
        raise ValueError("label space is empty")
    labels = list(dict.fromkeys(label_space))
    session = session or _Session(backend)
    run = _annotate_columns(
        table, backend, "flat", {"sample_k": sample_k, "seed": seed}, sample_k, seed,
        lambda s: flat_prompt(table, s, labels),
        lambda s, p: parse_flat_response(session.ask(p), labels),
    )
    run.request_count, run.trace = session.requests, sorted(session.trace, key=_trace_key)
    return run


def annotate_tree_serialized(backend: Backend, table: SourceTable, ontology: Ontology,
                             sample_k: int = DEFAULT_SAMPLE_K,
                             seed: int = DEFAULT_SEED,
                             session: Optional[_Session] = None) -> AnnotationRun:
    """The whole tree, one path per line, is part of every prompt."""
    lines = serialize_tree(ontology)
    session = session or _Session(backend)
    run = _annotate_columns(
        table, backend, "tree", {"sample_k": sample_k, "seed": seed}, sample_k, seed,
        lambda s: tree_prompt(table, s, lines),
        lambda s, p: parse_tree_response(session.ask(p), ontology),
    )
    run.request_count, run.trace = session.requests, sorted(session.trace, key=_trace_key)
    return run


def step_turn(ontology: Ontology, node: int) -> str:
    options = "\n".join(ontology.node(c).name.upper() for c in ontology.children(node))
    where = PATH_SEP.join(p.upper() for p in ontology.path(node))
    return f"CURRENT: {where}\nOPTIONS:\n{options}\n{PREFIX}"


def annotate_step_by_step(backend: Backend, table: SourceTable, ontology: Ontology,
                          sample_k: int = DEFAULT_SAMPLE_K,
                          seed: int = DEFAULT_SEED,
                          session: Optional[_Session] = None) -> AnnotationRun:
    """Descend from the root one level per turn, never backtracking.

    Each turn's prompt is the whole conversation so far plus the new
    options, so all turns share one growing context.
    """
    session = session or _Session(backend)
    max_turns = ontology.height()

    def opening(sample: ColumnSample) -> str:
        header = PromptTemplate(STEP_INSTRUCTION, **column_slots(table, sample)).render()
        return header + "\n" + step_turn(ontology, ontology.root)

    def descend(sample: ColumnSample, prompt: str):
        node = ontology.root
        transcript = prompt
        for _ in range(max_turns):
            reply = session.ask(transcript)
            choice = _first_line(reply)
            chosen = None
            try:
                canonical = normalize_label(choice.split(PATH_SEP)[-1]) if choice else ""
            except EmptyLabel:
                canonical = ""
            for cid in ontology.children(node):
                if ontology.node(cid).name == canonical:
                    chosen = cid
                    break
            if chosen is None:
                return Abstain("invalid_choice")
            node = chosen
            if ontology.is_leaf(node):
                return Label(ontology.node(node).name, node)
            transcript = f"{transcript} {reply.strip()}\n{step_turn(ontology, node)}"
        return Abstain("max_turns")

    run = _annotate_columns(
        table, backend, "step", {"sample_k": sample_k, "seed": seed}, sample_k, seed,
        opening, descend,
    )
    run.request_count, run.trace = session.requests, sorted(session.trace, key=_trace_key)
    return run


def annotate_gcd(backend: Backend, table: SourceTable, ontology: Ontology,
                 config: DecodeConfig = DecodeConfig(), sample_k: int = DEFAULT_SAMPLE_K,
                 seed: int = DEFAULT_SEED, include_tree: bool = False) -> AnnotationRun:
    """Decode each answer under the grammar compiled from ``ontology``.

    The prompt lists leaf class names like the flat baseline; with
    ``include_tree`` it shows the serialized tree instead.
    """
    if not backend.supports_distribution:
        raise CapabilityUnsupported(
            f"{type(backend).__name__} does not expose token probabilities; "
            "grammar-constrained decoding needs a local or mock model"
        )
    grammar = parse_gbnf(emit_gbnf(ontology))
    leaves = [ontology.node(n).name for n in ontology.leaves()]
    lines = serialize_tree(ontology)
    counter = {"n": 0}
    lock = threading.Lock()

    def first_prompt(sample: ColumnSample) -> str:
        if include_tree:
            return tree_prompt(table, sample, lines)
        return flat_prompt(table, sample, leaves)

    def solve(sample: ColumnSample, prompt: str):
        text = decode_constrained(backend, prompt, grammar, config)
        with lock:
            counter["n"] += 1
        node = parse_answer(text, ontology)
        if node is None:  # unreachable for a sound decoder
            raise AssertionError(f"decoder produced non-member {text!r}")
        return Label(ontology.node(node).name, node)

    run_config = {"sample_k": sample_k, "seed": seed, "strategy": config.strategy,
                  "beam_width": config.beam_width, "max_tokens": config.max_tokens,
                  "temperature": config.temperature, "include_tree": include_tree}
    run = _annotate_columns(table, backend, "gcd", run_config, sample_k, seed, first_prompt, solve)
    run.request_count = counter["n"]
    return run


def _trace_key(x: Exchange) -> tuple:
    return (x.prompt, x.response)


def annotate(strategy: str, backend: Backend, tables: Sequence[SourceTable], *,
             label_space: Sequence[str] = (), ontology: Optional[Ontology] = None,
             decode: DecodeConfig = DecodeConfig(), sample_k: int = DEFAULT_SAMPLE_K,
             seed: int = DEFAULT_SEED, include_tree: bool = False) -> AnnotationRun:
    """Run one strategy over several tables and merge the results."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy != "flat" and ontology is None:
        raise ValueError(f"strategy {strategy!r} needs an ontology")
    if strategy == "gcd" and not backend.supports_distribution:
        raise CapabilityUnsupported(
            f"{type(backend).__name__} does not expose token probabilities"
        )
    merged: Optional[AnnotationRun] = None
    session = _Session(backend)
    for table in tables:
        if strategy == "flat":
            run = annotate_flat(backend, table, label_space, sample_k, seed, session)
        elif strategy == "tree":
            run = annotate_tree_serialized(backend, table, ontology, sample_k, seed, session)
        elif strategy == "step":
            run = annotate_step_by_step(backend, table, ontology, sample_k, seed, session)
        else:
            run = annotate_gcd(backend, table, ontology, decode, sample_k, seed, include_tree)
        if merged is None:
            merged = run
        else:
            merged.extend(run)
    if merged is None:
        raise ValueError("no tables to annotate")
    if strategy != "gcd":
        # The session is shared across tables; take its totals once.
        merged.request_count = session.requests
        merged.trace = sorted(session.trace, key=_trace_key)
    return merged
