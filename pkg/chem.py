"""
chem.py  ·  SMILES subset → molecule → featurised graph
=======================================================

A small, dependency-light replacement for the parts of a cheminformatics
toolkit the pipeline needs: parse the organic SMILES subset, count hydrogens
with a fixed valence table, build the five-feature node / five-category edge
graph, and compute an isomorphism-invariant key for deduplication.
"""
from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


# ────────────────────────────────────────────────────────────────────────────
# ERRORS
# ────────────────────────────────────────────────────────────────────────────
class ChemError(ValueError):
    """Base class for everything chem rejects."""


class EmptyInput(ChemError):
    pass


class UnsupportedToken(ChemError):
    def __init__(self, token: str, position: int) -> None:
        super().__init__(f"unsupported token {token!r} at position {position}")
        self.token = token
        self.position = position


class UnclosedRing(ChemError):
    def __init__(self, label: str) -> None:
        super().__init__(f"ring closure {label} is never closed")
        self.label = label


class UnclosedBranch(ChemError):
    pass


class SmilesSyntaxError(ChemError):
    pass


class DuplicateBond(ChemError):
    pass


class UnknownElement(ChemError):
    def __init__(self, symbol: str) -> None:
        super().__init__(f"element {symbol!r} is not in the built-in tables")
        self.symbol = symbol


# ────────────────────────────────────────────────────────────────────────────
# TABLES
# ────────────────────────────────────────────────────────────────────────────
class EdgeCategory(IntEnum):
    SINGLE = 0
    DOUBLE = 1
    TRIPLE = 2
    AROMATIC = 3
    SELF_LOOP = 4


BondOrder = EdgeCategory  # self-loops never appear as a bond order

BOND_SYMBOLS: Dict[str, EdgeCategory] = {
    "-": EdgeCategory.SINGLE,
    "=": EdgeCategory.DOUBLE,
    "#": EdgeCategory.TRIPLE,
    ":": EdgeCategory.AROMATIC,
}
BOND_VALENCE: Dict[EdgeCategory, float] = {
    EdgeCategory.SINGLE: 1.0,
    EdgeCategory.DOUBLE: 2.0,
    EdgeCategory.TRIPLE: 3.0,
    EdgeCategory.AROMATIC: 1.5,
}
NUM_EDGE_CATEGORIES = len(EdgeCategory)
NODE_FEATURES = ("mass", "valence", "total_h", "aromatic", "formal_charge")

# symbol -> (standard atomic weight, default valence)
ELEMENTS: Dict[str, Tuple[float, int]] = {
    "H": (1.008, 1),
    "Li": (6.94, 1),
    "B": (10.81, 3),
    "C": (12.011, 4),
    "N": (14.007, 3),
    "O": (15.999, 2),
    "F": (18.998, 1),
    "Na": (22.990, 1),
    "Mg": (24.305, 2),
    "Si": (28.085, 4),
    "P": (30.974, 3),
    "S": (32.06, 2),
    "Cl": (35.45, 1),
    "K": (39.098, 1),
    "Ca": (40.078, 2),
    "Fe": (55.845, 2),
    "Zn": (65.38, 2),
    "As": (74.922, 3),
    "Se": (78.971, 2),
    "Br": (79.904, 1),
    "I": (126.904, 1),
}

AROMATIC_SYMBOLS = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S",
                    "se": "Se", "as": "As"}

TOKEN_RE = re.compile(
    r"""
     (?P<bracket>\[[^\[\]]*\])
    |(?P<organic>Cl|Br|B|C|N|O|P|S|F|I)
    |(?P<aromatic>[bcnops])
    |(?P<branch>[()])
    |(?P<bond>[-=\#:])
    |(?P<stereo>[/\\])
    |(?P<ring>%\d{2}|\d)
    """,
    re.VERBOSE,
)
BRACKET_RE = re.compile(
    r"""^\[
    (?P<isotope>\d+)?
    (?P<symbol>se|as|[A-Z][a-z]?|[bcnops])
    (?P<chiral>@{1,2})?
    (?:(?P<h>H)(?P<hcount>\d+)?)?
    (?P<charge>\+\d+|-\d+|\++|-+)?
    \]$""",
    re.VERBOSE,
)


# ────────────────────────────────────────────────────────────────────────────
# TYPES
# ────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True, slots=True)
class Atom:
    symbol: str              # element symbol, capitalised even when aromatic
    charge: int = 0
    aromatic: bool = False
    hcount: Optional[int] = None   # explicit bracket H; None for organic-subset atoms


@dataclass(frozen=True, slots=True)
class Bond:
    begin: int
    end: int
    order: EdgeCategory


@dataclass(frozen=True)
class Molecule:
    atoms: Tuple[Atom, ...]
    bonds: Tuple[Bond, ...]

    @cached_property
    def neighbors(self) -> Tuple[Tuple[Tuple[int, EdgeCategory], ...], ...]:
        adj: List[List[Tuple[int, EdgeCategory]]] = [[] for _ in self.atoms]
        for bond in self.bonds:
            adj[bond.begin].append((bond.end, bond.order))
            adj[bond.end].append((bond.begin, bond.order))
        return tuple(tuple(row) for row in adj)

    @cached_property
    def bond_order_sums(self) -> Tuple[float, ...]:
        return tuple(sum(BOND_VALENCE[order] for _, order in row) for row in self.neighbors)

    def __len__(self) -> int:
        return len(self.atoms)


@dataclass(frozen=True, eq=False)
class MolecularGraph:
    """Directed multigraph: one edge per bond direction plus one self-loop per node."""

    node_features: np.ndarray     # (n, 5) float64, columns as NODE_FEATURES
    edge_index: np.ndarray        # (2, E) int64, rows = source, target
    edge_categories: np.ndarray   # (E,) int64 EdgeCategory values

    @property
    def num_nodes(self) -> int:
        return int(self.node_features.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.edge_index.shape[1])

    @property
    def edge_features(self) -> np.ndarray:
        return np.eye(NUM_EDGE_CATEGORIES, dtype=np.float64)[self.edge_categories]

    @cached_property
    def canonical(self) -> "MolecularGraph":
        """This graph in canonical node and edge order (computed once)."""
        return canonical_graph(self)


# ────────────────────────────────────────────────────────────────────────────
# PARSING
# ────────────────────────────────────────────────────────────────────────────
def _scan(text: str) -> Iterator[Tuple[str, str, int]]:
    pos = 0
    while pos < len(text):
        m = TOKEN_RE.match(text, pos)
        if m is None:
            raise UnsupportedToken(text[pos], pos)
        yield m.lastgroup, m.group(0), pos
        pos = m.end()


def tokenize_smiles(text: str) -> List[str]:
    """Split *text* into SMILES tokens; raises UnsupportedToken on the first stray character."""
    return [tok for _, tok, _ in _scan(text)]


def _parse_charge(raw: Optional[str]) -> int:
    if not raw:
        return 0
    sign = 1 if raw[0] == "+" else -1
    if raw[1:].isdigit():
        return sign * int(raw[1:])
    return sign * len(raw)


def _bracket_atom(token: str, position: int, text: str) -> Atom:
    m = BRACKET_RE.match(token)
    if m is None:
        raise UnsupportedToken(token, position)
    if m.group("isotope"):
        logger.warning("Ignoring isotope label in %s of %r", token, text)
    if m.group("chiral"):
        logger.warning("Ignoring chirality marker in %s of %r", token, text)
    raw = m.group("symbol")
    aromatic = raw in AROMATIC_SYMBOLS
    symbol = AROMATIC_SYMBOLS.get(raw, raw)
    hcount = 0
    if m.group("h"):
        hcount = int(m.group("hcount")) if m.group("hcount") else 1
    return Atom(symbol=symbol, charge=_parse_charge(m.group("charge")),
                aromatic=aromatic, hcount=hcount)


def parse_smiles(text: str) -> Molecule:
    """
    Parse the supported SMILES subset: organic-subset and aromatic atoms,
    bracket atoms with charge and explicit H, branches, ring closures 1-9 and
    %nn, and the bond symbols - = # :. Stereo markers are accepted and ignored.
    """
    if text is None or not text.strip():
        raise EmptyInput("empty SMILES string")
    text = text.strip()

    atoms: List[Atom] = []
    bonds: List[Bond] = []
    bonded: set = set()
    prev: Optional[int] = None
    pending: Optional[EdgeCategory] = None
    branches: List[Tuple[int, int]] = []          # (branch-point atom, atom count at '(')
    rings: Dict[str, Tuple[int, Optional[EdgeCategory]]] = {}
    warned_stereo = False

    def default_order(a: int, b: int) -> EdgeCategory:
        if atoms[a].aromatic and atoms[b].aromatic:
            return EdgeCategory.AROMATIC
        return EdgeCategory.SINGLE

    def add_bond(a: int, b: int, order: Optional[EdgeCategory]) -> None:
        if a == b:
            raise SmilesSyntaxError(f"ring closure bonds atom {a} to itself in {text!r}")
        key = frozenset((a, b))
        if key in bonded:
            raise DuplicateBond(f"atoms {a} and {b} are bonded twice in {text!r}")
        bonded.add(key)
        bonds.append(Bond(a, b, order if order is not None else default_order(a, b)))

    for kind, token, position in _scan(text):
        if kind in ("organic", "aromatic", "bracket"):
            if kind == "bracket":
                atom = _bracket_atom(token, position, text)
            elif kind == "aromatic":
                atom = Atom(symbol=AROMATIC_SYMBOLS[token], aromatic=True)
            else:
                atom = Atom(symbol=token)
            atoms.append(atom)
            idx = len(atoms) - 1
            if prev is not None:
                add_bond(prev, idx, pending)
            elif pending is not None:
                raise SmilesSyntaxError(f"bond symbol before the first atom in {text!r}")
            prev, pending = idx, None
        elif token == "(":
            if prev is None or pending is not None:
                raise SmilesSyntaxError(f"misplaced '(' at position {position} in {text!r}")
            branches.append((prev, len(atoms)))
        elif token == ")":
            if not branches:
                raise UnclosedBranch(f"')' at position {position} has no matching '(' in {text!r}")
            if pending is not None:
                raise SmilesSyntaxError(f"dangling bond before ')' in {text!r}")
            anchor, count = branches.pop()
            if len(atoms) == count:
                raise SmilesSyntaxError(f"empty branch at position {position} in {text!r}")
            prev = anchor
        elif kind == "bond":
            if pending is not None:
                raise SmilesSyntaxError(f"two bond symbols in a row at position {position} in {text!r}")
            pending = BOND_SYMBOLS[token]
        elif kind == "stereo":
            if not warned_stereo:
                logger.warning("Ignoring stereo bond marker %r in %r", token, text)
                warned_stereo = True
            if pending is None:
                pending = EdgeCategory.SINGLE
        elif kind == "ring":
            if prev is None:
                raise SmilesSyntaxError(f"ring label before the first atom in {text!r}")
            label = token.lstrip("%")
            if label in rings:
                other, opened_with = rings.pop(label)
                if opened_with is not None and pending is not None and opened_with != pending:
                    raise SmilesSyntaxError(f"ring {label} closes with a conflicting bond in {text!r}")
                add_bond(other, prev, pending if pending is not None else opened_with)
            else:
                rings[label] = (prev, pending)
            pending = None

    if rings:
        raise UnclosedRing(sorted(rings)[0])
    if branches:
        raise UnclosedBranch(f"{len(branches)} unclosed branch(es) in {text!r}")
    if pending is not None:
        raise SmilesSyntaxError(f"trailing bond symbol in {text!r}")
    if not atoms:
        raise EmptyInput("no atoms in SMILES string")
    return Molecule(atoms=tuple(atoms), bonds=tuple(bonds))


# ────────────────────────────────────────────────────────────────────────────
# FEATURES
# ────────────────────────────────────────────────────────────────────────────
def _element(symbol: str) -> Tuple[float, int]:
    try:
        return ELEMENTS[symbol]
    except KeyError:
        raise UnknownElement(symbol) from None


def _bond_total(molecule: Molecule, atom_index: int) -> float:
    total = molecule.bond_order_sums[atom_index]
    if molecule.atoms[atom_index].aromatic:
        total = math.floor(total)
    return total


def implicit_hydrogens(molecule: Molecule, atom_index: int) -> int:
    """Total hydrogens on an atom: bracket count if given, else valence-table fill."""
    if not 0 <= atom_index < len(molecule.atoms):
        raise IndexError(f"atom index {atom_index} out of range")
    atom = molecule.atoms[atom_index]
    if atom.hcount is not None:
        return atom.hcount
    _, default_valence = _element(atom.symbol)
    return max(0, int(math.floor(default_valence - _bond_total(molecule, atom_index))))


def featurize(molecule: Molecule) -> MolecularGraph:
    n = len(molecule.atoms)
    nodes = np.zeros((n, len(NODE_FEATURES)), dtype=np.float64)
    for i, atom in enumerate(molecule.atoms):
        mass, _ = _element(atom.symbol)
        hydrogens = implicit_hydrogens(molecule, i)
        nodes[i] = (mass, _bond_total(molecule, i) + hydrogens, hydrogens,
                    float(atom.aromatic), float(atom.charge))

    src: List[int] = []
    dst: List[int] = []
    cats: List[int] = []
    for bond in molecule.bonds:
        src += [bond.begin, bond.end]
        dst += [bond.end, bond.begin]
        cats += [int(bond.order)] * 2
    src += list(range(n))
    dst += list(range(n))
    cats += [int(EdgeCategory.SELF_LOOP)] * n

    edge_index = np.array([src, dst], dtype=np.int64).reshape(2, -1)
    categories = np.array(cats, dtype=np.int64)
    for arr in (nodes, edge_index, categories):
        arr.flags.writeable = False
    return MolecularGraph(node_features=nodes, edge_index=edge_index, edge_categories=categories)


def to_networkx(molecule: Molecule) -> nx.Graph:
    """Labelled simple graph (node: symbol/aromatic/charge/hydrogens, edge: order)."""
    graph = nx.Graph()
    for i, atom in enumerate(molecule.atoms):
        graph.add_node(i, symbol=atom.symbol, aromatic=atom.aromatic,
                       charge=atom.charge, hydrogens=_hydrogens_for_key(molecule, i))
    for bond in molecule.bonds:
        graph.add_edge(bond.begin, bond.end, order=int(bond.order))
    return graph


# ────────────────────────────────────────────────────────────────────────────
# CANONICAL KEY
# ────────────────────────────────────────────────────────────────────────────
def _hydrogens_for_key(molecule: Molecule, atom_index: int) -> int:
    try:
        return implicit_hydrogens(molecule, atom_index)
    except UnknownElement:
        return molecule.atoms[atom_index].hcount or 0


def _atom_text(atom: Atom, hydrogens: int) -> str:
    symbol = atom.symbol.lower() if atom.aromatic else atom.symbol
    h = "" if hydrogens == 0 else ("H" if hydrogens == 1 else f"H{hydrogens}")
    if atom.charge == 0:
        charge = ""
    elif abs(atom.charge) == 1:
        charge = "+" if atom.charge > 0 else "-"
    else:
        charge = f"{atom.charge:+d}"
    return f"[{symbol}{h}{charge}]"


def _bond_text(molecule: Molecule, a: int, b: int, order: EdgeCategory) -> str:
    both_aromatic = molecule.atoms[a].aromatic and molecule.atoms[b].aromatic
    if order == EdgeCategory.SINGLE:
        return "-" if both_aromatic else ""
    if order == EdgeCategory.AROMATIC:
        return "" if both_aromatic else ":"
    return "=" if order == EdgeCategory.DOUBLE else "#"


def _refine(colors: List[int], adj: Sequence[Sequence[Tuple[int, EdgeCategory]]]) -> List[int]:
    """Iterated neighbourhood refinement; returns a stable, order-preserving colouring."""
    while True:
        signatures = [
            (colors[i], tuple(sorted((int(order), colors[j]) for j, order in adj[i])))
            for i in range(len(colors))
        ]
        ranking = {sig: r for r, sig in enumerate(sorted(set(signatures)))}
        refined = [ranking[sig] for sig in signatures]
        if len(ranking) == len(set(colors)):
            return refined
        colors = refined


def _ring_label(number: int) -> str:
    return str(number) if number < 10 else f"%{number:02d}"


def _write_ranked(molecule: Molecule, ranks: List[int], texts: List[str]) -> str:
    """SMILES-like DFS string of a molecule whose atoms carry distinct ranks."""
    n = len(molecule.atoms)
    adj = [sorted(row, key=lambda item: ranks[item[0]]) for row in molecule.neighbors]
    visited = [False] * n
    children: List[List[Tuple[int, EdgeCategory]]] = [[] for _ in range(n)]
    ring_bonds: Dict[int, List[Tuple[int, EdgeCategory]]] = {i: [] for i in range(n)}
    roots: List[int] = []

    for start in sorted(range(n), key=lambda i: ranks[i]):
        if visited[start]:
            continue
        roots.append(start)
        visited[start] = True
        seen_edges = set()
        stack = [(start, -1, iter(adj[start]))]
        while stack:
            atom, parent, it = stack[-1]
            advanced = False
            for nbr, order in it:
                edge = frozenset((atom, nbr))
                if edge in seen_edges:
                    continue
                seen_edges.add(edge)
                if visited[nbr]:
                    ring_bonds[nbr].append((atom, order))
                    ring_bonds[atom].append((nbr, order))
                else:
                    visited[nbr] = True
                    children[atom].append((nbr, order))
                    stack.append((nbr, atom, iter(adj[nbr])))
                    advanced = True
                    break
            if not advanced:
                stack.pop()

    open_rings: Dict[frozenset, int] = {}
    free: List[int] = []
    next_number = 1
    out: List[str] = []

    def emit(atom: int) -> None:
        nonlocal next_number
        out.append(texts[atom])
        for partner, order in sorted(ring_bonds[atom], key=lambda item: ranks[item[0]]):
            key = frozenset((atom, partner))
            if key in open_rings:
                number = open_rings.pop(key)
                out.append(_ring_label(number))
                free.append(number)
                free.sort()
            else:
                if free:
                    number = free.pop(0)
                else:
                    number = next_number
                    next_number += 1
                open_rings[key] = number
                out.append(_bond_text(molecule, atom, partner, order) + _ring_label(number))
        kids = children[atom]
        for idx, (child, order) in enumerate(kids):
            last = idx == len(kids) - 1
            if not last:
                out.append("(")
            out.append(_bond_text(molecule, atom, child, order))
            emit(child)
            if not last:
                out.append(")")

    parts = []
    for root in roots:
        out = []
        emit(root)
        parts.append("".join(out))
    return ".".join(parts)


def _best_leaf(
    colors: List[int],
    adj: Sequence[Sequence[Tuple[int, int]]],
    leaf: Callable[[List[int]], Any],
) -> Any:
    """
    Smallest ``leaf(ranks)`` over the individualisation-refinement tree.
    Colour refinement partitions the nodes; remaining ties are individualised
    one cell at a time. *colors* must be derived from labels only, so the
    minimum does not depend on how the input was numbered.
    """
    n = len(colors)

    def search(coloring: List[int]) -> Any:
        coloring = _refine(coloring, adj)
        if len(set(coloring)) == n:
            return leaf(coloring)
        counts = Counter(coloring)
        cell = min(c for c, k in counts.items() if k > 1)
        best: Any = None
        tried_neighbourhoods = set()
        for v in range(n):
            if coloring[v] != cell:
                continue
            # twins (same colour, same neighbours) are swapped by an automorphism
            neighbourhood = frozenset((j, int(o)) for j, o in adj[v] if j != v)
            if neighbourhood in tried_neighbourhoods:
                continue
            tried_neighbourhoods.add(neighbourhood)
            individual = [2 * c + (0 if i == v else 1) if c == cell else 2 * c
                          for i, c in enumerate(coloring)]
            candidate = search(individual)
            if best is None or candidate < best:
                best = candidate
        return best

    return search(colors)


def canonical_key(molecule: Molecule) -> str:
    """
    Isomorphism-invariant identifier: the lexicographically smallest DFS
    string over every canonical ranking of the atoms.
    """
    n = len(molecule.atoms)
    if n == 0:
        return ""
    hydrogens = [_hydrogens_for_key(molecule, i) for i in range(n)]
    texts = [_atom_text(atom, hydrogens[i]) for i, atom in enumerate(molecule.atoms)]
    labels = sorted(set(texts))
    colors = [labels.index(t) for t in texts]
    return _best_leaf(colors, molecule.neighbors, lambda ranks: _write_ranked(molecule, ranks, texts))


def canonical_order(graph: MolecularGraph) -> np.ndarray:
    """
    Node permutation (position -> original index) under which every
    relabelling of *graph*, nodes and edge list alike, yields the same
    arrays. Nodes are labelled by their feature rows, edges by category.
    """
    n = graph.num_nodes
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    rows = [tuple(row) for row in graph.node_features.tolist()]
    codes = {row: c for c, row in enumerate(sorted(set(rows)))}
    edges = list(zip(graph.edge_index[0].tolist(), graph.edge_index[1].tolist(),
                     graph.edge_categories.tolist()))
    adj: List[List[Tuple[int, int]]] = [[] for _ in range(n)]
    for s, d, category in edges:
        adj[s].append((d, category))

    def certificate(ranks: List[int]) -> Tuple[Tuple[Tuple[int, int, int], ...], Tuple[int, ...]]:
        # refinement keeps label order, so the sorted edge list fixes the whole graph
        return tuple(sorted((ranks[s], ranks[d], c) for s, d, c in edges)), tuple(ranks)

    _, ranks = _best_leaf([codes[row] for row in rows], adj, certificate)
    return np.argsort(np.asarray(ranks, dtype=np.int64), kind="stable")


def canonical_graph(graph: MolecularGraph) -> MolecularGraph:
    """*graph* with nodes in canonical order and edges sorted by (source, target, category)."""
    order = canonical_order(graph)
    position = np.empty_like(order)
    position[order] = np.arange(len(order))
    src, dst = position[graph.edge_index[0]], position[graph.edge_index[1]]
    edge_order = np.lexsort((graph.edge_categories, dst, src))
    nodes = np.ascontiguousarray(graph.node_features[order])
    edge_index = np.ascontiguousarray(np.stack([src, dst])[:, edge_order]).reshape(2, -1)
    categories = np.ascontiguousarray(graph.edge_categories[edge_order])
    for arr in (nodes, edge_index, categories):
        arr.flags.writeable = False
    return MolecularGraph(node_features=nodes, edge_index=edge_index, edge_categories=categories)


def smiles_key(text: str) -> str:
    """canonical_key(parse_smiles(text))."""
    return canonical_key(parse_smiles(text))
