import numpy as np
import pytest
from nltk.grammar import Nonterminal

import chem
from grammar import (
    BnfSyntaxError,
    CompleteState,
    DepthRunaway,
    DerivationState,
    EmptyGrammar,
    GrammarError,
    UndefinedNonterminal,
    UnproductiveNonterminal,
    bundled_smiles_grammar,
    enumerate_strings,
    leftmost_expansions,
    load_grammar,
    parse_bnf,
    rollout_complete,
)

S = Nonterminal("S")


def test_parse_simple_grammar(toy_grammar):
    assert toy_grammar.nonterminals == {S}
    assert toy_grammar.terminals == {"C"}
    assert toy_grammar.num_productions == 2
    assert toy_grammar.start == S
    assert toy_grammar.alternatives(S) == (("C",), ("C", S))


def test_comments_continuations_and_repeated_rules():
    grammar = parse_bnf(
        "# leading comment\n"
        "S ::= A   # trailing comment\n"
        "    | B\n"
        "A ::= 'x'\n"
        "A ::= \"#\"\n"
        "B ::= 'y'\n"
    )
    assert len(grammar.alternatives(S)) == 2
    assert grammar.alternatives(Nonterminal("A")) == (("x",), ("#",))
    assert grammar.terminals == {"x", "y", "#"}


@pytest.mark.parametrize("text, error", [
    ("S ::= 'C' | Q", UndefinedNonterminal),
    ("", EmptyGrammar),
    ("# only a comment\n\n", EmptyGrammar),
    ("S ::= 'C' S", UnproductiveNonterminal),
    ("S ::= 'C' |", BnfSyntaxError),
    ("S ::= 'C' | 'C'", BnfSyntaxError),
    ("| 'C'", BnfSyntaxError),
    ("S ::= ''", BnfSyntaxError),
])
def test_parse_errors(text, error):
    with pytest.raises(error):
        parse_bnf(text)


def test_syntax_error_reports_line_number():
    with pytest.raises(BnfSyntaxError) as info:
        parse_bnf("S ::= 'C'\n\nT 'C'\n")
    assert info.value.line_number == 3


def test_leftmost_expansions(toy_grammar):
    children = leftmost_expansions(toy_grammar.initial_state(), toy_grammar)
    assert [str(c) for c in children] == ["C", "C S"]
    assert all(c.depth == 1 for c in children)

    grandchildren = leftmost_expansions(children[1], toy_grammar)
    assert [str(c) for c in grandchildren] == ["C C", "C C S"]
    assert all(c.depth == 2 for c in grandchildren)


def test_expanding_a_complete_state_fails(toy_grammar):
    with pytest.raises(CompleteState):
        leftmost_expansions(DerivationState(("C", "C"), 2), toy_grammar)


def test_prefer_terminals_restricts_children(toy_grammar):
    children = leftmost_expansions(toy_grammar.initial_state(), toy_grammar, prefer_terminals=True)
    assert [str(c) for c in children] == ["C"]


def test_rollout_prefers_terminal_productions(toy_grammar):
    for seed in range(20):
        assert rollout_complete(toy_grammar.initial_state(), toy_grammar, np.random.default_rng(seed)) == "C"


def test_rollout_forces_terminals_past_depth():
    grammar = parse_bnf("S ::= A S | A\nA ::= 'C'")
    out = rollout_complete(grammar.initial_state(), grammar, np.random.default_rng(0), terminal_force_depth=0)
    assert out == "C"


def test_rollout_without_terminal_exit_runs_away():
    # S has no terminal-only production and 'C' S has the fewest nonterminals
    grammar = parse_bnf("S ::= 'C' S | T T\nT ::= 'C'")
    with pytest.raises(DepthRunaway):
        rollout_complete(grammar.initial_state(), grammar, np.random.default_rng(0),
                         terminal_force_depth=0, max_depth=50)


def test_rollout_is_reproducible_and_replayable():
    grammar = bundled_smiles_grammar()
    a = rollout_complete(grammar.initial_state(), grammar, np.random.default_rng(42))
    trace = []
    b = rollout_complete(grammar.initial_state(), grammar, np.random.default_rng(42), trace=trace)
    assert a == b

    # replaying the recorded productions from the start symbol rebuilds the string
    state = grammar.initial_state()
    for lhs, rhs in trace:
        assert state.form[state.leftmost] == lhs
        assert rhs in grammar.alternatives(lhs)
        index = state.leftmost
        state = DerivationState(state.form[:index] + rhs + state.form[index + 1:], state.depth + 1)
    assert state.is_complete
    assert state.text() == a


def test_bundled_grammar_rollouts_parse():
    grammar = bundled_smiles_grammar()
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(1000):
        text = rollout_complete(grammar.initial_state(), grammar, rng)
        chem.featurize(chem.parse_smiles(text))
        seen.add(text)
    assert len(seen) > 100


@pytest.mark.slow
def test_bundled_grammar_rollouts_parse_at_scale():
    grammar = bundled_smiles_grammar()
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        chem.parse_smiles(rollout_complete(grammar.initial_state(), grammar, rng))


def test_enumerate_finite_grammar():
    grammar = parse_bnf("S ::= L D\nL ::= 'a' | 'b'\nD ::= '0' | '1' | '2'")
    assert enumerate_strings(grammar) == ["a0", "a1", "a2", "b0", "b1", "b2"]


def test_enumerate_refuses_infinite_grammar(toy_grammar):
    with pytest.raises(GrammarError):
        enumerate_strings(toy_grammar, limit=100)


def test_load_grammar_from_file(tmp_path):
    path = tmp_path / "g.bnf"
    path.write_text("S ::= 'C' | 'N'\n", encoding="utf-8")
    assert load_grammar(path).terminals == {"C", "N"}
