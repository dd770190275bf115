"""Brute-force reference implementations used to check the real code paths.

Nothing here calls into the recognizer, mask, or mrca code under test.
"""

from __future__ import annotations

import functools
import itertools
import random
import string

from semtype.core import Ontology
from semtype.grammar import Grammar, NonTerminal, Terminal


def ancestor_set(ontology: Ontology, node: int) -> list[int]:
    chain = [node]
    while ontology.nodes[chain[-1]].parent is not None:
        chain.append(ontology.nodes[chain[-1]].parent)
    return chain


def brute_mrca(ontology: Ontology, a: int, b: int) -> int:
    common = set(ancestor_set(ontology, a)) & set(ancestor_set(ontology, b))
    return max(common, key=lambda n: len(ancestor_set(ontology, n)))


def brute_is_correct(ontology: Ontology, pred: int, truth: int) -> bool:
    if pred == truth:
        return True
    parent = ontology.nodes[pred].parent
    return parent is not None and brute_mrca(ontology, pred, truth) == parent


def enumerate_language(grammar: Grammar) -> set[str]:
    """All strings of an acyclic grammar, by expanding rules directly."""

    @functools.lru_cache(maxsize=None)
    def lang(name: str) -> frozenset[str]:
        out = set()
        for alt in grammar.rules[name]:
            parts = [
                {sym.text} if isinstance(sym, Terminal) else lang(sym.name) for sym in alt
            ]
            for combo in itertools.product(*parts):
                out.add("".join(combo))
        return frozenset(out)

    return set(lang(grammar.start))


def random_tree(rng: random.Random, n_nodes: int) -> Ontology:
    """Arbitrary-shape tree; parents precede children, sibling names unique."""
    entries = [("root", None)]
    sibling_names: dict[int, set[str]] = {0: set()}
    for i in range(1, n_nodes):
        parent = rng.randrange(i)
        name = f"n{i}"
        sibling_names[parent].add(name)
        sibling_names[i] = set()
        entries.append((name, parent))
    return Ontology.from_parents(entries)


_WORDS = ["title", "date", "zip", "city", "state", "lat", "long", "url", "phone", "email",
          "rating", "venue", "price", "name", "id", "street", "country", "hours", "tag",
          "image", "code", "status", "type", "count"]


def random_name(rng: random.Random) -> str:
    words = rng.sample(_WORDS, rng.randint(1, 2))
    if rng.random() < 0.2:
        words.append(str(rng.randint(1, 9)))
    return "_".join(words)


def random_ontology(rng: random.Random, max_leaves: int = 40, max_supers: int = 6,
                    root_leaves: bool = True) -> Ontology:
    """Depth <= 3 tree: root, superclasses, leaves, plus some leaves on the root."""
    entries: list = [("property", None)]
    budget = rng.randint(1, max_leaves)
    used_root: set[str] = set()
    n_supers = rng.randint(1, max_supers)
    for _ in range(n_supers):
        if budget <= 0:
            break
        name = random_name(rng)
        while name in used_root:
            name = random_name(rng)
        used_root.add(name)
        sup = len(entries)
        entries.append((name, 0))
        used: set[str] = set()
        for _ in range(rng.randint(1, min(8, budget))):
            leaf = random_name(rng)
            if leaf in used:
                continue
            used.add(leaf)
            entries.append((leaf, sup))
            budget -= 1
    if root_leaves and budget > 0 and rng.random() < 0.4:
        for _ in range(rng.randint(1, min(3, budget))):
            leaf = random_name(rng)
            if leaf not in used_root:
                used_root.add(leaf)
                entries.append((leaf, 0))
    return Ontology.from_parents(entries)


def random_grammar(rng: random.Random, max_rules: int = 8, alphabet: str = "ab:X",
                   max_language: int = 400) -> Grammar:
    """Acyclic random grammar (rule i references only rules j > i)."""
    while True:
        n = rng.randint(1, max_rules)
        names = ["root"] + [f"r{i}" for i in range(1, n)]
        rules = {}
        for i, name in enumerate(names):
            alts = []
            for _ in range(rng.randint(1, 3)):
                syms = []
                for _ in range(rng.randint(1, 3)):
                    if i + 1 < n and rng.random() < 0.4:
                        syms.append(NonTerminal(names[rng.randrange(i + 1, n)]))
                    else:
                        length = rng.choice([0, 1, 1, 2, 3]) if rng.random() < 0.9 else 1
                        syms.append(Terminal("".join(rng.choice(alphabet) for _ in range(length))))
                alts.append(tuple(syms))
            rules[name] = tuple(alts)
        grammar = Grammar(rules)
        try:
            size = len(enumerate_language(grammar))
        except RecursionError:
            continue
        if size <= max_language:
            return grammar


def random_text(rng: random.Random, n: int) -> str:
    pool = string.ascii_letters + string.digits + " :._-é漢\n"
    return "".join(rng.choice(pool) for _ in range(n))
