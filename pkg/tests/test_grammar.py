import itertools
import random

import numpy as np
import pytest

from semtype.core import Ontology
from semtype.grammar import (
    DecodeConfig,
    DepthUnsupported,
    Grammar,
    GrammarError,
    GrammarSyntaxError,
    MaxTokensExceeded,
    NonTerminal,
    Terminal,
    UndefinedNonterminal,
    accepts,
    advance,
    decode_constrained,
    emit_gbnf,
    initial_state,
    parse_answer,
    parse_gbnf,
    valid_mask,
)
from semtype.llm import CapabilityUnsupported, MockBackend, ToyModel, Vocabulary, log_softmax
from semtype.ontology import serialize_tree

from oracles import enumerate_language, random_grammar

# A hand-written event grammar in the layout people usually write by hand:
# one wrapper rule per superclass plus one rule for its leaves.
EVENT_GRAMMAR = """\
root ::= answer
answer ::= "Semantic-type::" property
property ::= event | location | contact | meta
event ::= "EVENT::" sub-event
sub-event ::= "TITLE" | "STARTDATE" | "DURATION"
location ::= "LOCATION::" sublocation
sublocation ::= "LAT" | "LONG" | "ZIP" | "CITY" | "STATE"
contact ::= "CONTACT::" sub-contact
sub-contact ::= "WEBSITE" | "URL" | "PHONE" | "EMAIL"
meta ::= "META::" sub-meta
sub-meta ::= "RATING" | "TOTAL_NUMBER_OF_RATINGS"
"""


def toy_backend(extra=(), seed=0, bias=None):
    vocab = Vocabulary.byte_level(extra)
    return MockBackend(toy_model=ToyModel(vocab, seed=seed, bias=bias))


# -- parsing ----------------------------------------------------------------


def test_parse_two_alternatives():
    g = parse_gbnf('root ::= "A" | "B"')
    assert list(g.rules) == ["root"]
    assert g.rules["root"] == ((Terminal("A"),), (Terminal("B"),))


def test_parse_event_grammar():
    g = parse_gbnf(EVENT_GRAMMAR)
    assert list(g.rules) == ["root", "answer", "property", "event", "sub-event", "location",
                             "sublocation", "contact", "sub-contact", "meta", "sub-meta"]
    assert g.rules["property"][3] == (NonTerminal("meta"),)
    assert "Semantic-type::LOCATION::ZIP" in enumerate_language(g)
    assert len(enumerate_language(g)) == 14


def test_parse_undefined_nonterminal():
    with pytest.raises(UndefinedNonterminal):
        parse_gbnf('root ::= "A" foo')


def test_parse_comments_escapes_and_continuations():
    g = parse_gbnf('# header\nroot ::= "a\\"#b" # trailing\n    | x\n  | "\\n"\nx ::= "y"\n')
    assert enumerate_language(g) == {'a"#b', "y", "\n"}


@pytest.mark.parametrize("text, line", [
    ('root ::= "A" | ...', 1),
    ('root ::= "A"\nbogus line', 2),
    ('root ::= "A" |', 1),
    ('root ::= "unterminated', 1),
    ('root ::= "A"\nroot ::= "B"', 2),
])
def test_parse_syntax_errors(text, line):
    with pytest.raises(GrammarSyntaxError) as err:
        parse_gbnf(text)
    assert err.value.line == line


def test_left_recursion_rejected():
    g = parse_gbnf('root ::= root "a" | "b"')
    with pytest.raises(GrammarError):
        accepts(g, "b")


# -- emission -----------------------------------------------------------------


def test_emit_one_superclass_two_leaves():
    o = Ontology.from_parents([("property", None), ("location", 0), ("lat", 1), ("long", 1)])
    text = emit_gbnf(o)
    g = parse_gbnf(text)
    assert len(g.rules) == 4
    assert enumerate_language(g) == {"Semantic-type::PROPERTY::LOCATION::LAT",
                                     "Semantic-type::PROPERTY::LOCATION::LONG"}


def test_emit_event_tree(event_ontology):
    text = emit_gbnf(event_ontology)
    assert 'sublocation ::= "LAT" | "LONG" | "ZIP" | "CITY" | "STATE"' in text
    assert text == emit_gbnf(event_ontology)
    lang = enumerate_language(parse_gbnf(text))
    assert lang == {f"Semantic-type::{line}" for line in serialize_tree(event_ontology)
                    if line.count("::") == 2}


def test_emit_root_only():
    with pytest.raises(DepthUnsupported):
        emit_gbnf(Ontology.from_parents([("property", None)]))


def test_emit_too_deep():
    o = Ontology.from_parents([("p", None), ("a", 0), ("b", 1), ("c", 2), ("d", 3)])
    with pytest.raises(DepthUnsupported):
        emit_gbnf(o)


def test_emit_disambiguates_rule_names():
    # Two internal nodes whose identifiers collide after hyphenation.
    o = Ontology.from_parents([("property", None), ("a_b", 0), ("a-b", 0), ("x", 1), ("y", 2)])
    g = parse_gbnf(emit_gbnf(o))
    assert enumerate_language(g) == {"Semantic-type::PROPERTY::A_B::X",
                                     "Semantic-type::PROPERTY::A-B::Y"}


def test_parse_answer(event_ontology):
    zip_ = event_ontology.find_path(["property", "location", "zip"])
    assert parse_answer("Semantic-type::PROPERTY::LOCATION::ZIP", event_ontology) == zip_
    assert parse_answer("PROPERTY::LOCATION::ZIP", event_ontology) is None


# -- recognizer ---------------------------------------------------------------


def test_advance_examples():
    g = parse_gbnf('root ::= "AB"')
    s = advance(initial_state(g), "A")
    assert not s.rejected and not s.accepting
    s = advance(s, "B")
    assert s.accepting
    assert advance(initial_state(g), "X").rejected
    assert advance(s, "B").rejected


def test_recognizer_matches_enumeration_on_random_grammars():
    rng = random.Random(11)
    for _ in range(25):
        g = random_grammar(rng, max_rules=6)
        lang = enumerate_language(g)
        for s in lang:
            assert accepts(g, s), (g.to_text(), s)
        # Every string up to length 4 over the alphabet is accepted iff in the language.
        for n in range(5):
            for chars in itertools.product("ab:X", repeat=n):
                s = "".join(chars)
                assert accepts(g, s) == (s in lang)


# -- masks --------------------------------------------------------------------


def test_mask_after_location_prefix():
    g = parse_gbnf(EVENT_GRAMMAR)
    vocab = Vocabulary.byte_level(["LAT", "LONG", "LA", "apple", "ZIP", "CITY"])
    state = advance(initial_state(g), "Semantic-type::LOCATION::")
    mask = valid_mask(state, vocab)
    allowed = {vocab.text(i) for i in np.flatnonzero(mask)}
    assert {b"LAT", b"LONG", b"LA", b"ZIP", b"CITY", b"L", b"Z", b"C", b"S"} == allowed
    assert not mask[vocab.tokenize("apple")[0]]
    assert not mask[vocab.eos_id]


def test_mask_fresh_single_literal():
    g = parse_gbnf('root ::= "A"')
    vocab = Vocabulary.byte_level()
    mask = valid_mask(initial_state(g), vocab)
    assert np.flatnonzero(mask).tolist() == [ord("A")]
    done = advance(initial_state(g), "A")
    assert np.flatnonzero(valid_mask(done, vocab)).tolist() == [vocab.eos_id]


def test_mask_matches_brute_force_on_event_grammar():
    g = parse_gbnf(EVENT_GRAMMAR)
    vocab = Vocabulary.byte_level(["Semantic-type::", "LOCATION::", "LO", "NG", "::", "TE"])
    state = initial_state(g)
    for ch in "Semantic-type::CONTACT::PHO":
        mask = valid_mask(state, vocab)
        for tid in range(len(vocab)):
            if tid == vocab.eos_id:
                expected = state.accepting
            else:
                expected = not advance(state, vocab.text(tid)).rejected
            assert mask[tid] == expected
        state = advance(state, ch)


# -- decoding -----------------------------------------------------------------


@pytest.mark.parametrize("strategy", ["greedy", "beam"])
def test_single_string_language(strategy):
    g = parse_gbnf('root ::= "Semantic-type::A::B"')
    for seed in range(3):
        out = decode_constrained(toy_backend(seed=seed), "prompt", g, DecodeConfig(strategy))
        assert out == "Semantic-type::A::B"


@pytest.mark.parametrize("strategy", ["greedy", "beam"])
def test_biased_model_stays_in_language(strategy):
    g = parse_gbnf(EVENT_GRAMMAR)
    backend = toy_backend(extra=["apple", "bees"], bias={"apple": 25.0, "bees": 25.0})
    out = decode_constrained(backend, "which type?", g, DecodeConfig(strategy))
    assert out in enumerate_language(g)


def test_decode_needs_distributions():
    with pytest.raises(CapabilityUnsupported):
        decode_constrained(MockBackend(), "p", parse_gbnf('root ::= "A"'))


def test_max_tokens_counts_eos():
    g = parse_gbnf('root ::= "ABC"')
    with pytest.raises(MaxTokensExceeded):
        decode_constrained(toy_backend(), "p", g, DecodeConfig("greedy", max_tokens=3))
    assert decode_constrained(toy_backend(), "p", g, DecodeConfig("greedy", max_tokens=4)) == "ABC"


def _exhaustive_best(toy: ToyModel, prompt: str, language: set[str]) -> tuple[float, str]:
    # Independent scorer: walk the byte tokens by hand with numpy.
    vocab = toy.vocabulary
    best = (-np.inf, "")
    for s in sorted(language):
        ctx = list(prompt.encode())
        total = 0.0
        for tid in list(s.encode()) + [vocab.eos_id]:
            logits = toy.unigram if not ctx else toy.transitions[ctx[-1]]
            z = logits - logits.max()
            total += float(z[tid] - np.log(np.exp(z).sum()))
            ctx.append(tid)
        if total > best[0]:
            best = (total, s)
    return best


@pytest.mark.parametrize("seed", range(6))
def test_wide_beam_finds_exhaustive_optimum(seed):
    g = parse_gbnf(EVENT_GRAMMAR)
    lang = enumerate_language(g)
    backend = toy_backend(seed=seed)
    score, expected = _exhaustive_best(backend.toy_model, "col: ", lang)
    out = decode_constrained(backend, "col: ", g, DecodeConfig("beam", beam_width=64))
    assert out == expected


@pytest.mark.parametrize("seed", range(6))
def test_narrow_beam_never_beats_optimum(seed):
    g = parse_gbnf(EVENT_GRAMMAR)
    lang = enumerate_language(g)
    backend = toy_backend(seed=seed)
    best, _ = _exhaustive_best(backend.toy_model, "col: ", lang)
    out = decode_constrained(backend, "col: ", g, DecodeConfig("beam", beam_width=2))
    assert out in lang
    got, _ = _exhaustive_best(backend.toy_model, "col: ", {out})
    assert got <= best + 1e-12


def test_sampling_is_seeded():
    g = parse_gbnf(EVENT_GRAMMAR)
    cfg = DecodeConfig("greedy", temperature=1.0, seed=5)
    a = decode_constrained(toy_backend(), "p", g, cfg)
    assert a == decode_constrained(toy_backend(), "p", g, cfg)
    assert a in enumerate_language(g)
