"""
search.py  ·  Grammar-constrained UCT molecule search
=====================================================

Each tree node is a partial leftmost derivation. One iteration selects down
the tree with the max+mean UCB1 score, expands a leaf into its grammar
children, completes one child by random rollout, scores the resulting string
and backs the reward up the path. Independent restarts share nothing but the
global best-set keyed by canonical molecule key.
"""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm.auto import tqdm

import chem
from deen import EnergyBounds, EnergyNet, energy
from grammar import DepthRunaway, DerivationState, Grammar, leftmost_expansions, rollout_complete
from gnn import PredictorEnsemble, ensemble_predict
from schemas import RESULTS_COLUMNS, MoleculeRecord
from utils import numpy_rng, write_frame

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


# ────────────────────────────────────────────────────────────────────────────
# TREE
# ────────────────────────────────────────────────────────────────────────────
@dataclass(eq=False)
class SearchNode:
    state: DerivationState
    parent: Optional["SearchNode"] = None
    children: List["SearchNode"] = field(default_factory=list)
    visits: int = 0
    mean_reward: float = 0.0
    max_reward: float = -math.inf
    expanded: bool = False

    def update(self, reward: float) -> None:
        self.visits += 1
        # running mean, not a sum
        self.mean_reward += (reward - self.mean_reward) / self.visits
        self.max_reward = max(self.max_reward, reward)

    def iter_subtree(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


def ucb_score(node: SearchNode, parent_visits: int, c: float) -> float:
    """(w_max + w̄)/2 + c·√(ln N / n); +∞ for an unvisited node."""
    if node.visits == 0:
        return math.inf
    if parent_visits < 1:
        raise ValueError("parent_visits must be >= 1 once a child has been visited")
    exploit = (node.max_reward + node.mean_reward) / 2.0
    return exploit + c * math.sqrt(math.log(parent_visits) / node.visits)


def select_child(node: SearchNode, c: float) -> SearchNode:
    # max() keeps the first of equal scores, i.e. the lowest child index
    return max(node.children, key=lambda child: ucb_score(child, node.visits, c))


# ────────────────────────────────────────────────────────────────────────────
# SCORING
# ────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class Evaluation:
    smiles: str
    key: str
    reward: float
    f_assay: float = float("nan")
    energy: float = float("nan")
    delta_energy: float = float("nan")
    f_all: Tuple[float, ...] = ()
    valid: bool = True


class Scorer(Protocol):
    def score(self, smiles: str) -> Evaluation: ...


def reward_value(f_assay: float, phi: float, phi_min: float, beta: float) -> float:
    """w = f · 2/(1 + exp(β Δφ)) with Δφ = φ − φ_min, written as f·(1 − tanh(βΔφ/2))."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return float(f_assay) * (1.0 - math.tanh(beta * (phi - phi_min) / 2.0))


class RewardSpec:
    """
    Energy-regularised reward for one target assay. ``beta=None`` selects
    β₀ = 1/(φ_max − φ_min) from the bounds. The last *cache_size*
    evaluations are kept by string, least recently used dropped first.
    """

    def __init__(
        self,
        ensemble: PredictorEnsemble,
        net: EnergyNet,
        bounds: EnergyBounds,
        target_assay: int = 0,
        beta: Optional[float] = None,
        cache_size: int = 100_000,
    ) -> None:
        if cache_size < 1:
            raise ValueError("cache_size must be >= 1")
        if not 0 <= target_assay < len(ensemble.assay_ids):
            raise ValueError(f"target assay {target_assay} out of range for {len(ensemble.assay_ids)} assays")
        self.ensemble = ensemble
        self.net = net
        self.bounds = bounds
        self.target_assay = target_assay
        self.beta = bounds.beta0 if beta is None else float(beta)
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        self.cache_size = cache_size
        self._cache: OrderedDict[str, Evaluation] = OrderedDict()
        self.failures = 0

    def evaluate_graph(self, graph: chem.MolecularGraph) -> Tuple[float, float, np.ndarray]:
        """(w, φ, f) for one featurised molecule."""
        f, latent = ensemble_predict(graph, self.ensemble)
        phi = float(energy(self.net, latent))
        w = reward_value(f[self.target_assay], phi, self.bounds.phi_min, self.beta)
        return w, phi, f

    def score(self, smiles: str) -> Evaluation:
        if smiles in self._cache:
            self._cache.move_to_end(smiles)
            return self._cache[smiles]
        try:
            molecule = chem.parse_smiles(smiles)
            graph = chem.featurize(molecule)
            key = chem.canonical_key(molecule)
        except chem.ChemError as exc:
            self.failures += 1
            logger.debug("Rollout %r failed to parse: %s", smiles, exc)
            result = Evaluation(smiles=smiles, key="", reward=0.0, valid=False)
        else:
            w, phi, f = self.evaluate_graph(graph)
            result = Evaluation(
                smiles=smiles,
                key=key,
                reward=w,
                f_assay=float(f[self.target_assay]),
                energy=phi,
                delta_energy=phi - self.bounds.phi_min,
                f_all=tuple(float(v) for v in f),
            )
        self._cache[smiles] = result
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return result


def reward(graph: chem.MolecularGraph, spec: RewardSpec) -> float:
    return spec.evaluate_graph(graph)[0]


class CallableScorer:
    """Wraps ``fn(smiles) -> reward`` so plain functions can drive the search."""

    def __init__(self, fn: Callable[[str], float], key_fn: Optional[Callable[[str], str]] = None) -> None:
        self.fn = fn
        self.key_fn = key_fn or (lambda s: s)
        self.failures = 0

    def score(self, smiles: str) -> Evaluation:
        w = float(self.fn(smiles))
        return Evaluation(smiles=smiles, key=self.key_fn(smiles), reward=w, f_assay=w)


# ────────────────────────────────────────────────────────────────────────────
# ITERATION
# ────────────────────────────────────────────────────────────────────────────
@dataclass
class SearchSettings:
    c: float = math.sqrt(2.0)
    terminal_force_depth: int = 30
    max_depth: int = 500


def run_iteration(
    root: SearchNode,
    grammar: Grammar,
    scorer: Scorer,
    rng: np.random.Generator,
    settings: Optional[SearchSettings] = None,
) -> Evaluation:
    """Selection, expansion, rollout and backpropagation; returns what was scored."""
    settings = settings or SearchSettings()
    node, path = root, [root]
    while node.expanded and node.children:
        node = select_child(node, settings.c)
        path.append(node)

    if node.state.is_complete:
        node.expanded = True
        text = node.state.text()
    else:
        prefer = node.state.depth >= settings.terminal_force_depth
        node.children = [SearchNode(s, parent=node) for s in leftmost_expansions(node.state, grammar, prefer)]
        node.expanded = True
        node = select_child(node, settings.c)
        path.append(node)
        try:
            text = rollout_complete(node.state, grammar, rng, settings.terminal_force_depth, settings.max_depth)
        except DepthRunaway as exc:
            logger.debug("Rollout abandoned at depth %d", exc.depth)
            text = None

    if text is None:
        evaluation = Evaluation(smiles="", key="", reward=0.0, valid=False)
    else:
        evaluation = scorer.score(text)
    for visited in path:
        visited.update(evaluation.reward)
    return evaluation


# ────────────────────────────────────────────────────────────────────────────
# RESTARTS AND RESULTS
# ────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class Found:
    evaluation: Evaluation
    restart: int
    iteration: int

    def rank_key(self) -> Tuple[float, int, int, str]:
        # higher reward first, then earliest discovery; independent of merge order
        return (-self.evaluation.reward, self.restart, self.iteration, self.evaluation.smiles)


def merge_best(best: Dict[str, Found], found: Found) -> None:
    key = found.evaluation.key
    current = best.get(key)
    if current is None or found.rank_key() < current.rank_key():
        best[key] = found


def run_search(
    grammar: Grammar,
    scorer: Scorer,
    iterations: int = 1_000_000,
    restarts: int = 10,
    top_k: int = 30_000,
    c: float = math.sqrt(2.0),
    terminal_force_depth: int = 30,
    seed: int = 0,
    max_depth: int = 500,
    progress: bool = True,
) -> pd.DataFrame:
    """
    Independent trees per restart, each with its ``rollout-<r>`` stream.
    Returns the top_k unique molecules as a results frame ordered by reward
    (descending) then canonical key.
    """
    settings = SearchSettings(c=c, terminal_force_depth=terminal_force_depth, max_depth=max_depth)
    best: Dict[str, Found] = {}
    for restart in range(restarts):
        rng = numpy_rng(seed, f"rollout-{restart}")
        root = SearchNode(grammar.initial_state())
        invalid = 0
        bar = tqdm(range(iterations), desc=f"search {restart + 1}/{restarts}", disable=not progress)
        for iteration in bar:
            evaluation = run_iteration(root, grammar, scorer, rng, settings)
            if not evaluation.valid:
                invalid += 1
                continue
            merge_best(best, Found(evaluation, restart, iteration))
        logger.info("Restart %d: %d iterations, %d unparsable rollouts, best reward %.4f, %d unique so far",
                    restart, iterations, invalid, root.max_reward, len(best))
    return results_frame(best.values(), top_k)


def results_frame(found: Sequence[Found], top_k: Optional[int] = None) -> pd.DataFrame:
    ordered = sorted(found, key=lambda f: (-f.evaluation.reward, f.evaluation.key))
    if top_k is not None:
        ordered = ordered[:top_k]
    rows = [
        MoleculeRecord(
            rank=i + 1,
            smiles=f.evaluation.smiles,
            canonical_key=f.evaluation.key,
            reward=f.evaluation.reward,
            f_assay=f.evaluation.f_assay,
            energy=f.evaluation.energy,
            delta_energy=f.evaluation.delta_energy,
            restart=f.restart,
            iteration=f.iteration,
        ).model_dump()
        for i, f in enumerate(ordered)
    ]
    return pd.DataFrame(rows, columns=RESULTS_COLUMNS)


def write_results_csv(results: pd.DataFrame, path: Path | str) -> Path:
    missing = [c for c in RESULTS_COLUMNS if c not in results.columns]
    if missing:
        raise ValueError(f"results frame lacks columns {missing}")
    return write_frame(results[RESULTS_COLUMNS], path)
