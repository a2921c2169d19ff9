"""
grammar.py  ·  BNF grammar loader and leftmost-derivation engine
================================================================

Grammars are read from a small BNF dialect (``Name ::= alt | alt``, quoted
terminals, ``#`` comments) and stored as an ``nltk`` CFG. The search only
ever *generates*: it expands the leftmost nonterminal of a sentential form
and completes partial derivations with a terminal-preferring random rollout.
"""
from __future__ import annotations

import logging
import re
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
from nltk.grammar import CFG, Nonterminal, Production, is_nonterminal

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

Symbol = Union[Nonterminal, str]
Rhs = Tuple[Symbol, ...]

BUNDLED_SMILES_GRAMMAR = Path(__file__).resolve().parent / "grammars" / "smiles.bnf"
DEFAULT_MAX_DEPTH = 500


# ────────────────────────────────────────────────────────────────────────────
# ERRORS
# ────────────────────────────────────────────────────────────────────────────
class GrammarError(ValueError):
    """Base class for grammar loading and derivation failures."""


class BnfSyntaxError(GrammarError):
    def __init__(self, line_number: int, message: str) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class UndefinedNonterminal(GrammarError):
    def __init__(self, name: str) -> None:
        super().__init__(f"nonterminal {name!r} is used but never defined")
        self.name = name


class EmptyGrammar(GrammarError):
    pass


class UnproductiveNonterminal(GrammarError):
    def __init__(self, names: Sequence[str]) -> None:
        super().__init__(f"no finite derivation from: {', '.join(names)}")
        self.names = list(names)


class CompleteState(GrammarError):
    pass


class DepthRunaway(GrammarError):
    def __init__(self, depth: int) -> None:
        super().__init__(f"rollout exceeded the depth cap ({depth} expansions)")
        self.depth = depth


# ────────────────────────────────────────────────────────────────────────────
# TYPES
# ────────────────────────────────────────────────────────────────────────────
class Grammar:
    """Immutable view over an nltk CFG with the per-nonterminal tables the search needs."""

    def __init__(self, cfg: CFG, nonterminals: Sequence[Nonterminal]) -> None:
        self.cfg = cfg
        self.start: Nonterminal = cfg.start()
        self._order: Tuple[Nonterminal, ...] = tuple(nonterminals)
        self.productions: Dict[Nonterminal, Tuple[Rhs, ...]] = {
            nt: tuple(tuple(p.rhs()) for p in cfg.productions(lhs=nt)) for nt in self._order
        }
        self.nonterminals: FrozenSet[Nonterminal] = frozenset(self._order)
        self.terminals: FrozenSet[str] = frozenset(
            sym for alts in self.productions.values() for rhs in alts for sym in rhs
            if not is_nonterminal(sym)
        )
        self._terminal_only = {
            nt: tuple(rhs for rhs in alts if not any(is_nonterminal(s) for s in rhs))
            for nt, alts in self.productions.items()
        }
        self._fewest_nonterminals = {}
        for nt, alts in self.productions.items():
            counts = [sum(1 for s in rhs if is_nonterminal(s)) for rhs in alts]
            low = min(counts)
            self._fewest_nonterminals[nt] = tuple(rhs for rhs, c in zip(alts, counts) if c == low)

    def alternatives(self, nonterminal: Nonterminal) -> Tuple[Rhs, ...]:
        return self.productions[nonterminal]

    def terminal_only(self, nonterminal: Nonterminal) -> Tuple[Rhs, ...]:
        return self._terminal_only[nonterminal]

    def fewest_nonterminals(self, nonterminal: Nonterminal) -> Tuple[Rhs, ...]:
        return self._fewest_nonterminals[nonterminal]

    def initial_state(self) -> "DerivationState":
        return DerivationState((self.start,), 0)

    @property
    def num_productions(self) -> int:
        return sum(len(alts) for alts in self.productions.values())

    def __repr__(self) -> str:
        return (f"Grammar(start={self.start}, nonterminals={len(self.nonterminals)}, "
                f"terminals={len(self.terminals)}, productions={self.num_productions})")


@dataclass(frozen=True)
class DerivationState:
    form: Tuple[Symbol, ...]
    depth: int = 0

    def __post_init__(self) -> None:
        if self.depth < 0:
            raise ValueError("depth must be >= 0")

    @property
    def leftmost(self) -> Optional[int]:
        for i, sym in enumerate(self.form):
            if is_nonterminal(sym):
                return i
        return None

    @property
    def is_complete(self) -> bool:
        return self.leftmost is None

    def text(self) -> str:
        """Concatenated terminals; only meaningful once the state is complete."""
        return "".join(sym for sym in self.form if not is_nonterminal(sym))

    def __str__(self) -> str:
        return " ".join(str(sym) for sym in self.form)


# ────────────────────────────────────────────────────────────────────────────
# BNF LOADER
# ────────────────────────────────────────────────────────────────────────────
RULE_RE = re.compile(r"^\s*(?P<lhs>[A-Za-z_][\w\-]*)\s*::=(?P<rhs>.*)$")
SYMBOL_RE = re.compile(r"""\s*(?:'(?P<sq>[^']*)'|"(?P<dq>[^"]*)"|(?P<name>[A-Za-z_][\w\-]*)|(?P<bar>\|))""")


def _strip_comment(line: str) -> str:
    quote: Optional[str] = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def _split_alternatives(body: str, line_number: int) -> List[List[Tuple[str, str]]]:
    alternatives: List[List[Tuple[str, str]]] = [[]]
    pos = 0
    body = body.rstrip()
    while pos < len(body):
        m = SYMBOL_RE.match(body, pos)
        if m is None or m.end() == pos:
            raise BnfSyntaxError(line_number, f"unexpected text {body[pos:].strip()!r}")
        pos = m.end()
        if m.group("bar"):
            alternatives.append([])
        elif m.group("name") is not None:
            alternatives[-1].append(("nt", m.group("name")))
        else:
            literal = m.group("sq") if m.group("sq") is not None else m.group("dq")
            if literal == "":
                raise BnfSyntaxError(line_number, "empty terminal ''")
            alternatives[-1].append(("t", literal))
    return alternatives


def parse_bnf(text: str) -> Grammar:
    """
    Parse the BNF dialect into a validated Grammar.

    One rule per line, ``Name ::= alt | alt``; a line starting with ``|``
    continues the previous rule; a name that appears on the left twice gets
    the alternatives of both lines. The first left-hand side is the start
    symbol. Every nonterminal must be defined and must derive at least one
    terminal string.
    """
    rules: Dict[str, List[List[Tuple[str, str]]]] = {}
    rule_lines: Dict[str, int] = {}
    current: Optional[str] = None

    for line_number, raw in enumerate((text or "").splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("|"):
            if current is None:
                raise BnfSyntaxError(line_number, "continuation line before any rule")
            alternatives = _split_alternatives(line, line_number)[1:]
        else:
            m = RULE_RE.match(line)
            if m is None:
                raise BnfSyntaxError(line_number, f"expected 'Name ::= ...', got {line!r}")
            current = m.group("lhs")
            rule_lines.setdefault(current, line_number)
            alternatives = _split_alternatives(m.group("rhs"), line_number)
        existing = rules.setdefault(current, [])
        for alt in alternatives:
            if not alt:
                raise BnfSyntaxError(line_number, f"empty alternative in rule {current!r}")
            if alt in existing:
                raise BnfSyntaxError(line_number, f"duplicate alternative in rule {current!r}")
            existing.append(alt)

    if not rules:
        raise EmptyGrammar("grammar text defines no rules")

    for name, alternatives in rules.items():
        for alt in alternatives:
            for kind, value in alt:
                if kind == "nt" and value not in rules:
                    raise UndefinedNonterminal(value)

    _check_productive(rules)

    order = [Nonterminal(name) for name in rules]
    productions = [
        Production(Nonterminal(name), [Nonterminal(v) if k == "nt" else v for k, v in alt])
        for name, alternatives in rules.items()
        for alt in alternatives
    ]
    grammar = Grammar(CFG(order[0], productions, calculate_leftcorners=False), order)
    logger.debug("Parsed %r", grammar)
    return grammar


def _check_productive(rules: Dict[str, List[List[Tuple[str, str]]]]) -> None:
    productive: set = set()
    changed = True
    while changed:
        changed = False
        for name, alternatives in rules.items():
            if name in productive:
                continue
            if any(all(k == "t" or v in productive for k, v in alt) for alt in alternatives):
                productive.add(name)
                changed = True
    stuck = [name for name in rules if name not in productive]
    if stuck:
        raise UnproductiveNonterminal(stuck)


def load_grammar(path: Path | str) -> Grammar:
    path = Path(path)
    grammar = parse_bnf(path.read_text(encoding="utf-8"))
    logger.info("Loaded grammar %s: %r", path.name, grammar)
    return grammar


@lru_cache(maxsize=1)
def bundled_smiles_grammar() -> Grammar:
    """The SMILES-subset grammar shipped with the package."""
    return load_grammar(BUNDLED_SMILES_GRAMMAR)


# ────────────────────────────────────────────────────────────────────────────
# DERIVATION
# ────────────────────────────────────────────────────────────────────────────
def _substitute(state: DerivationState, index: int, rhs: Rhs) -> DerivationState:
    form = state.form[:index] + tuple(rhs) + state.form[index + 1:]
    return DerivationState(form, state.depth + 1)


def leftmost_expansions(
    state: DerivationState,
    grammar: Grammar,
    prefer_terminals: bool = False,
) -> List[DerivationState]:
    """
    One child per production of the leftmost nonterminal, in grammar order.
    With ``prefer_terminals`` the children are restricted to terminal-only
    productions whenever the nonterminal has any.
    """
    index = state.leftmost
    if index is None:
        raise CompleteState(f"no nonterminal left in {str(state)!r}")
    nonterminal = state.form[index]
    alternatives = grammar.alternatives(nonterminal)
    if prefer_terminals:
        alternatives = grammar.terminal_only(nonterminal) or alternatives
    return [_substitute(state, index, rhs) for rhs in alternatives]


def rollout_complete(
    state: DerivationState,
    grammar: Grammar,
    rng: np.random.Generator,
    terminal_force_depth: int = 30,
    max_depth: int = DEFAULT_MAX_DEPTH,
    trace: Optional[List[Tuple[Nonterminal, Rhs]]] = None,
) -> str:
    """
    Randomly complete *state* by leftmost expansion and return the terminal
    string. Terminal-only productions win whenever a nonterminal has one.
    From ``terminal_force_depth`` on, a nonterminal without such a production
    takes one of the productions with the fewest nonterminals. ``trace``, if
    given, receives every (lhs, rhs) applied.
    """
    current = state
    while True:
        index = current.leftmost
        if index is None:
            return current.text()
        if current.depth >= max_depth:
            raise DepthRunaway(current.depth)
        nonterminal = current.form[index]
        options = grammar.terminal_only(nonterminal)
        if not options:
            if current.depth >= terminal_force_depth:
                options = grammar.fewest_nonterminals(nonterminal)
            else:
                options = grammar.alternatives(nonterminal)
        rhs = options[int(rng.integers(len(options)))]
        if trace is not None:
            trace.append((nonterminal, rhs))
        current = _substitute(current, index, rhs)


def enumerate_strings(grammar: Grammar, limit: int = 10_000) -> List[str]:
    """
    Every terminal string of a finite grammar, sorted. Raises GrammarError
    when more than *limit* sentential forms would have to be explored.
    """
    found: set = set()
    queue = deque([grammar.initial_state()])
    explored = 0
    while queue:
        state = queue.popleft()
        explored += 1
        if explored > limit:
            raise GrammarError(f"grammar has more than {limit} derivations; is it finite?")
        if state.is_complete:
            found.add(state.text())
            continue
        queue.extend(leftmost_expansions(state, grammar))
    return sorted(found)
