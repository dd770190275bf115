"""GBNF subset, incremental recognition, token masks and constrained decoding.

Supported syntax is literals and alternation only::

    name ::= "lit" other-rule | "lit2"

Terminals are double-quoted (``\\"``, ``\\\\``, ``\\n``, ``\\t`` escapes),
nonterminals are identifiers that may contain hyphens, ``#`` starts a
comment. A line that begins with whitespace or ``|`` continues the previous
rule. No repetition, grouping or character classes.

The recognizer keeps the full set of viable parse positions (a frontier)
rather than backtracking, so "is there any continuation" questions needed
for masking are answered directly. Left-recursive grammars are rejected.
"""

from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .core import PATH_SEP, Ontology, SemtypeError
from .llm import Backend, CapabilityUnsupported, Vocabulary, log_softmax

ANSWER_PREFIX = "Semantic-type::"
MAX_ONTOLOGY_DEPTH = 3


class GrammarError(SemtypeError):
    pass


class GrammarSyntaxError(GrammarError):
    def __init__(self, message: str, line: int, column: int) -> None:
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class UndefinedNonterminal(GrammarError):
    pass


class DepthUnsupported(GrammarError):
    pass


class NoValidContinuation(GrammarError):
    pass


class MaxTokensExceeded(GrammarError):
    pass


@dataclass(frozen=True)
class Terminal:
    text: str


@dataclass(frozen=True)
class NonTerminal:
    name: str


Symbol = Union[Terminal, NonTerminal]


@dataclass(frozen=True)
class Grammar:
    rules: dict[str, tuple[tuple[Symbol, ...], ...]]
    start: str = "root"

    def __post_init__(self) -> None:
        if self.start not in self.rules:
            raise UndefinedNonterminal(f"start rule {self.start!r} is not defined")
        for name, alts in self.rules.items():
            if not alts:
                raise GrammarError(f"rule {name!r} has no alternatives")
            for alt in alts:
                if not alt:
                    raise GrammarError(f"rule {name!r} has an empty alternative")
                for sym in alt:
                    if isinstance(sym, NonTerminal) and sym.name not in self.rules:
                        raise UndefinedNonterminal(
                            f"rule {name!r} references undefined {sym.name!r}"
                        )

    def __hash__(self) -> int:
        return hash((self.start, tuple(self.rules.items())))

    def to_text(self) -> str:
        lines = []
        for name, alts in self.rules.items():
            body = " | ".join(" ".join(_format_symbol(s) for s in alt) for alt in alts)
            lines.append(f"{name} ::= {body}")
        return "\n".join(lines) + "\n"


def _format_symbol(sym: Symbol) -> str:
    if isinstance(sym, NonTerminal):
        return sym.name
    escaped = (sym.text.replace("\\", "\\\\").replace('"', '\\"')
               .replace("\n", "\\n").replace("\t", "\\t"))
    return f'"{escaped}"'


# -- parsing ------------------------------------------------------------------

_IDENT = re.compile(r"[A-Za-z][A-Za-z0-9_-]*")
_HEAD = re.compile(r"^\s*([A-Za-z][A-Za-z0-9_-]*)\s*::=")
_ESCAPES = {'"': '"', "\\": "\\", "n": "\n", "t": "\t"}


def parse_gbnf(text: str) -> Grammar:
    logical: list[tuple[int, int, str, str]] = []  # (line, body col, name, body)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw, lineno)
        if not line.strip():
            continue
        head = _HEAD.match(line)
        if head:
            logical.append((lineno, head.end() + 1, head.group(1), line[head.end():]))
        elif logical and (line[0].isspace() or line.lstrip().startswith("|")):
            ln, col, name, body = logical[-1]
            logical[-1] = (ln, col, name, body + " " + line)
        else:
            col = len(line) - len(line.lstrip()) + 1
            raise GrammarSyntaxError("expected `name ::= ...`", lineno, col)

    rules: dict[str, tuple[tuple[Symbol, ...], ...]] = {}
    for lineno, col, name, body in logical:
        if name in rules:
            raise GrammarSyntaxError(f"rule {name!r} defined twice", lineno, 1)
        rules[name] = _parse_body(body, lineno, col)
    if not rules:
        raise GrammarSyntaxError("grammar is empty", 1, 1)
    return Grammar(rules)


def _strip_comment(line: str, lineno: int) -> str:
    in_string = False
    i = 0
    while i < len(line):
        ch = line[i]
        if in_string:
            if ch == "\\":
                i += 1
            elif ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
        elif ch == "#":
            return line[:i]
        i += 1
    if in_string:
        raise GrammarSyntaxError("unterminated string literal", lineno, len(line))
    return line


def _parse_body(body: str, lineno: int, offset: int) -> tuple[tuple[Symbol, ...], ...]:
    alts: list[tuple[Symbol, ...]] = []
    current: list[Symbol] = []
    i = 0
    while True:
        while i < len(body) and body[i].isspace():
            i += 1
        col = offset + i
        if i >= len(body) or body[i] == "|":
            if not current:
                raise GrammarSyntaxError("empty alternative (use \"\" for epsilon)", lineno, col)
            alts.append(tuple(current))
            current = []
            if i >= len(body):
                break
            i += 1
            continue
        ch = body[i]
        if ch == '"':
            j = i + 1
            out = []
            while j < len(body) and body[j] != '"':
                if body[j] == "\\":
                    if j + 1 >= len(body) or body[j + 1] not in _ESCAPES:
                        raise GrammarSyntaxError("bad escape in literal", lineno, offset + j)
                    out.append(_ESCAPES[body[j + 1]])
                    j += 2
                else:
                    out.append(body[j])
                    j += 1
            if j >= len(body):
                raise GrammarSyntaxError("unterminated string literal", lineno, col)
            current.append(Terminal("".join(out)))
            i = j + 1
            continue
        if body.startswith("...", i):
            raise GrammarSyntaxError("elided alternatives (`...`) are not allowed", lineno, col)
        m = _IDENT.match(body, i)
        if not m:
            raise GrammarSyntaxError(f"unexpected character {ch!r}", lineno, col)
        current.append(NonTerminal(m.group(0)))
        i = m.end()
    return tuple(alts)


# -- emission -----------------------------------------------------------------


def _ident(name: str) -> str:
    ident = re.sub(r"[^A-Za-z0-9-]+", "-", name.replace("_", "-")).strip("-").lower()
    if not ident or not ident[0].isalpha():
        ident = "n-" + ident
    return ident


def emit_gbnf(ontology: Ontology) -> str:
    """Compile an ontology into GBNF text.

    The language is ``ANSWER_PREFIX`` + every root-to-leaf path in upper
    case, e.g. ``Semantic-type::PROPERTY::LOCATION::ZIP``. Output is
    byte-stable for a given ontology.
    """
    root = ontology.root
    if not ontology.children(root):
        raise DepthUnsupported("ontology has no classes below the root")
    if ontology.height() > MAX_ONTOLOGY_DEPTH:
        raise DepthUnsupported(
            f"ontology depth {ontology.height()} exceeds {MAX_ONTOLOGY_DEPTH} below the root"
        )
    used = {"root", "answer"}
    rule_names: dict[int, str] = {}

    def claim(base: str) -> str:
        name, n = base, 2
        while name in used:
            name = f"{base}-{n}"
            n += 1
        used.add(name)
        return name

    internal = [n for n in ontology.preorder() if not ontology.is_leaf(n)]
    for nid in internal:
        ident = _ident(ontology.node(nid).name)
        rule_names[nid] = claim(ident if nid == root else "sub" + ident)

    root_path = ontology.node(root).name.upper()
    lines = [
        "root ::= answer",
        f"answer ::= {_format_symbol(Terminal(ANSWER_PREFIX + root_path + PATH_SEP))} "
        f"{rule_names[root]}",
    ]
    for nid in internal:
        alts = []
        for cid in ontology.children(nid):
            upper = ontology.node(cid).name.upper()
            if ontology.is_leaf(cid):
                alts.append(_format_symbol(Terminal(upper)))
            else:
                alts.append(f"{_format_symbol(Terminal(upper + PATH_SEP))} {rule_names[cid]}")
        lines.append(f"{rule_names[nid]} ::= " + " | ".join(alts))
    return "\n".join(lines) + "\n"


def parse_answer(text: str, ontology: Ontology) -> Optional[int]:
    """Map ``Semantic-type::ROOT::...::LEAF`` back to a node id."""
    if not text.startswith(ANSWER_PREFIX):
        return None
    parts = [p.lower() for p in text[len(ANSWER_PREFIX):].split(PATH_SEP)]
    return ontology.find_path(parts)


# -- recognition --------------------------------------------------------------

# A parse position is (stack, offset). The stack holds (rule, alt, index)
# frames, innermost last; the innermost frame points at a terminal and
# offset is how many of its bytes are matched. ACCEPT marks a completed
# start rule.
ACCEPT: tuple = ((), 0)


class Recognizer:
    """Compiled grammar with memoized frontier transitions."""

    def __init__(self, grammar: Grammar) -> None:
        self.grammar = grammar
        names = list(grammar.rules)
        self._index = {n: i for i, n in enumerate(names)}
        self.alts: list[list[tuple]] = []
        for name in names:
            compiled = []
            for alt in grammar.rules[name]:
                syms = []
                for s in alt:
                    if isinstance(s, Terminal):
                        if s.text:
                            syms.append(s.text.encode("utf-8"))
                    else:
                        syms.append(self._index[s.name])
                compiled.append(tuple(syms))
            self.alts.append(compiled)
        self.start = self._index[grammar.start]
        self._check_left_recursion()
        initial: set = set()
        for a in range(len(self.alts[self.start])):
            self._expand(((self.start, a, 0),), initial)
        self.initial_frontier = frozenset(initial)
        self._step_cache: dict[tuple[frozenset, int], frozenset] = {}
        self._mask_cache: dict[tuple[int, frozenset], np.ndarray] = {}

    def _check_left_recursion(self) -> None:
        n = len(self.alts)
        nullable = [False] * n
        changed = True
        while changed:
            changed = False
            for r in range(n):
                if not nullable[r] and any(
                    all(isinstance(s, int) and nullable[s] for s in alt) for alt in self.alts[r]
                ):
                    nullable[r] = changed = True
        left: list[set[int]] = [set() for _ in range(n)]
        for r in range(n):
            for alt in self.alts[r]:
                for s in alt:
                    if isinstance(s, bytes):
                        break
                    left[r].add(s)
                    if not nullable[s]:
                        break
        names = list(self.grammar.rules)
        for r in range(n):
            seen, todo = set(), list(left[r])
            while todo:
                x = todo.pop()
                if x == r:
                    raise GrammarError(f"rule {names[r]!r} is left-recursive")
                if x not in seen:
                    seen.add(x)
                    todo.extend(left[x])

    def _expand(self, stack: tuple, out: set) -> None:
        while True:
            if not stack:
                out.add(ACCEPT)
                return
            r, a, i = stack[-1]
            syms = self.alts[r][a]
            if i < len(syms):
                break
            stack = stack[:-1]
            if not stack:
                out.add(ACCEPT)
                return
            pr, pa, pi = stack[-1]
            stack = stack[:-1] + ((pr, pa, pi + 1),)
        sym = syms[i]
        if isinstance(sym, bytes):
            out.add((stack, 0))
            return
        for alt in range(len(self.alts[sym])):
            self._expand(stack + ((sym, alt, 0),), out)

    def step(self, frontier: frozenset, byte: int) -> frozenset:
        key = (frontier, byte)
        cached = self._step_cache.get(key)
        if cached is not None:
            return cached
        out: set = set()
        for stack, offset in frontier:
            if not stack:
                continue
            r, a, i = stack[-1]
            term = self.alts[r][a][i]
            if term[offset] != byte:
                continue
            if offset + 1 < len(term):
                out.add((stack, offset + 1))
            else:
                self._expand(stack[:-1] + ((r, a, i + 1),), out)
        result = frozenset(out)
        self._step_cache[key] = result
        return result

    def initial(self) -> "RecognizerState":
        return RecognizerState(self, self.initial_frontier, 0)


@functools.lru_cache(maxsize=128)
def recognizer_for(grammar: Grammar) -> Recognizer:
    return Recognizer(grammar)


@dataclass(frozen=True)
class RecognizerState:
    recognizer: Recognizer = field(repr=False, compare=False)
    frontier: frozenset
    consumed: int

    @property
    def rejected(self) -> bool:
        return not self.frontier

    @property
    def accepting(self) -> bool:
        return ACCEPT in self.frontier


def initial_state(grammar: Grammar | Recognizer) -> RecognizerState:
    rec = grammar if isinstance(grammar, Recognizer) else recognizer_for(grammar)
    return rec.initial()


def advance(state: RecognizerState, data: str | bytes) -> RecognizerState:
    """Consume ``data``; the result has ``rejected`` set if no parse survives."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    rec = state.recognizer
    frontier = state.frontier
    for byte in data:
        if not frontier:
            break
        frontier = rec.step(frontier, byte)
    return RecognizerState(rec, frontier, state.consumed + len(data))


def accepts(grammar: Grammar, text: str | bytes) -> bool:
    return advance(initial_state(grammar), text).accepting


class _Trie:
    __slots__ = ("children", "ids")

    def __init__(self) -> None:
        self.children: dict[int, _Trie] = {}
        self.ids: list[int] = []


_TRIES: dict[int, tuple[Vocabulary, _Trie]] = {}


def _vocab_trie(vocab: Vocabulary) -> _Trie:
    hit = _TRIES.get(id(vocab))
    if hit is not None and hit[0] is vocab:
        return hit[1]
    root = _Trie()
    for tid, text in enumerate(vocab.tokens):
        if tid == vocab.eos_id or not text:
            continue
        node = root
        for b in text:
            node = node.children.setdefault(b, _Trie())
        node.ids.append(tid)
    _TRIES[id(vocab)] = (vocab, root)
    return root


def valid_mask(state: RecognizerState, vocabulary: Vocabulary) -> np.ndarray:
    """Boolean vector: which tokens keep the parse alive.

    EOS is allowed exactly in accepting states. Tokens with empty text
    other than EOS are never allowed.
    """
    rec = state.recognizer
    key = (id(vocabulary), state.frontier)
    cached = rec._mask_cache.get(key)
    if cached is not None:
        return cached.copy()
    mask = np.zeros(len(vocabulary), dtype=bool)
    stack = [(_vocab_trie(vocabulary), state.frontier)]
    while stack:
        node, frontier = stack.pop()
        for byte, child in node.children.items():
            nxt = rec.step(frontier, byte)
            if nxt:
                if child.ids:
                    mask[child.ids] = True
                if child.children:
                    stack.append((child, nxt))
    mask[vocabulary.eos_id] = state.accepting
    rec._mask_cache[key] = mask
    return mask.copy()


# -- decoding -----------------------------------------------------------------


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "beam"  # "greedy" or "beam"
    beam_width: int = 4
    max_tokens: int = 256
    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in ("greedy", "beam"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


def decode_constrained(backend: Backend, prompt: str, grammar: Grammar,
                       config: DecodeConfig = DecodeConfig()) -> str:
    """Generate a string of ``grammar``'s language from the backend's model.

    ``max_tokens`` bounds the number of model steps, the EOS step included.
    """
    if not backend.supports_distribution or backend.vocabulary is None:
        raise CapabilityUnsupported(
            f"{type(backend).__name__} cannot provide next-token distributions"
        )
    vocab = backend.vocabulary
    context = vocab.tokenize(prompt)
    state = initial_state(grammar)
    if config.strategy == "greedy":
        ids = _greedy(backend, vocab, context, state, config)
    else:
        ids = _beam(backend, vocab, context, state, config)
    return vocab.detokenize(ids)


def _scaled(logits: np.ndarray, temperature: float) -> np.ndarray:
    return logits / temperature if temperature > 0 else logits


def _greedy(backend, vocab, context, state, config) -> list[int]:
    rng = np.random.default_rng(config.seed)
    out: list[int] = []
    for _ in range(config.max_tokens):
        mask = valid_mask(state, vocab)
        if not mask.any():
            raise NoValidContinuation(f"no token can extend {vocab.detokenize_bytes(out)!r}")
        logits = backend.next_token_distribution(context + out).logits
        masked = np.where(mask, _scaled(logits, config.temperature), -np.inf)
        if config.temperature > 0:
            p = np.exp(log_softmax(masked))
            tid = int(rng.choice(len(p), p=p))
        else:
            tid = int(np.argmax(masked))
        if tid == vocab.eos_id:
            return out
        out.append(tid)
        state = advance(state, vocab.text(tid))
    raise MaxTokensExceeded(f"no complete answer within {config.max_tokens} tokens")


def _beam(backend, vocab, context, state, config) -> list[int]:
    # Scores are cumulative log-probabilities under the unmasked model, so a
    # finished hypothesis bounds every live one that scores below it.
    beams: list[tuple[float, list[int], RecognizerState]] = [(0.0, [], state)]
    best: Optional[tuple[float, list[int]]] = None
    for _ in range(config.max_tokens):
        candidates: list[tuple[float, list[int], int, RecognizerState]] = []
        for score, ids, st in beams:
            mask = valid_mask(st, vocab)
            if not mask.any():
                continue
            logits = backend.next_token_distribution(context + ids).logits
            lp = log_softmax(_scaled(logits, config.temperature))
            for tid in np.flatnonzero(mask):
                s = score + float(lp[tid])
                if tid == vocab.eos_id:
                    if best is None or s > best[0]:
                        best = (s, ids)
                else:
                    candidates.append((s, ids, int(tid), st))
        if best is not None:
            candidates = [c for c in candidates if c[0] > best[0]]
        if not candidates:
            break
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        beams = [
            (s, ids + [tid], advance(st, vocab.text(tid)))
            for s, ids, tid, st in candidates[: config.beam_width]
        ]
    else:
        if best is None:
            raise MaxTokensExceeded(f"no complete answer within {config.max_tokens} tokens")
    if best is None:
        raise NoValidContinuation("every hypothesis died before reaching an accepting state")
    return best[1]


def sequence_log_prob(backend: Backend, prompt: str, text: str) -> float:
    """Cumulative log-probability of ``text`` followed by EOS, given ``prompt``."""
    vocab = backend.vocabulary
    context = vocab.tokenize(prompt)
    ids = vocab.tokenize(text) + [vocab.eos_id]
    total = 0.0
    for i, tid in enumerate(ids):
        lp = backend.next_token_distribution(context + ids[:i]).log_probs()
        total += float(lp[tid])
    return total if math.isfinite(total) else -math.inf
