"""
dataset.py  ·  Assay tables, splits and synthetic assays
========================================================

An AssayDataset is a deduplicated list of molecules (canonical key, parsed
molecule, featurised graph) plus a molecules × assays label table in which
NaN marks a missing measurement. Splits stratify on the joint
label/missing pattern across assays.
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence

import networkx as nx
import numpy as np
import pandas as pd
from pydantic import BaseModel
from sklearn.model_selection import StratifiedKFold, train_test_split
from tqdm.auto import tqdm

import chem
from grammar import Grammar, rollout_complete
from utils import numpy_rng, stream_seed, write_frame

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

ASSAY_PREFIX = "assay_"


# ────────────────────────────────────────────────────────────────────────────
# ERRORS
# ────────────────────────────────────────────────────────────────────────────
class DatasetError(ValueError):
    """Base class for ingestion, splitting and synthesis failures."""


class ParseFailure(DatasetError):
    def __init__(self, row: int, cause: str) -> None:
        super().__init__(f"row {row}: {cause}")
        self.row = row
        self.cause = cause


class DuplicateConflict(DatasetError):
    def __init__(self, key: str) -> None:
        super().__init__(f"duplicate molecule {key} carries conflicting labels")
        self.key = key


class NoAssayColumns(DatasetError):
    pass


class GrammarTooSmall(DatasetError):
    pass


class InsufficientPositives(DatasetError):
    def __init__(self, assay: str, fold: int) -> None:
        super().__init__(f"fold {fold} receives no positive for assay {assay}")
        self.assay = assay
        self.fold = fold


# ────────────────────────────────────────────────────────────────────────────
# DATASET
# ────────────────────────────────────────────────────────────────────────────
@dataclass
class AssayDataset:
    smiles: List[str]
    keys: List[str]
    molecules: List[chem.Molecule]
    graphs: List[chem.MolecularGraph]
    labels: np.ndarray                      # (n, A) float64, NaN = missing
    assay_ids: List[str]
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.smiles)
        if not (len(self.keys) == len(self.molecules) == len(self.graphs) == n):
            raise DatasetError("molecule columns have different lengths")
        if self.labels.shape != (n, len(self.assay_ids)):
            raise DatasetError(
                f"label table is {self.labels.shape}, expected {(n, len(self.assay_ids))}"
            )
        if len(set(self.keys)) != n:
            raise DatasetError("canonical keys are not unique")

    def __len__(self) -> int:
        return len(self.smiles)

    @property
    def num_assays(self) -> int:
        return len(self.assay_ids)

    @classmethod
    def from_records(
        cls,
        smiles: Sequence[str],
        labels: np.ndarray,
        assay_ids: Sequence[str],
        rows: Optional[Sequence[int]] = None,
    ) -> "AssayDataset":
        """
        Parse, featurise and deduplicate. Duplicates merge their labels; two
        observed labels that disagree raise DuplicateConflict.
        """
        labels = np.asarray(labels, dtype=np.float64).reshape(len(smiles), len(assay_ids))
        rows = list(rows) if rows is not None else list(range(1, len(smiles) + 1))
        by_key: Dict[str, int] = {}
        out_smiles: List[str] = []
        out_keys: List[str] = []
        out_mols: List[chem.Molecule] = []
        out_graphs: List[chem.MolecularGraph] = []
        out_labels: List[np.ndarray] = []

        for text, row_labels, row in zip(smiles, labels, rows):
            try:
                molecule = chem.parse_smiles(text)
                key = chem.canonical_key(molecule)
                graph = chem.featurize(molecule)
            except chem.ChemError as exc:
                raise ParseFailure(row, f"{text!r}: {exc}") from exc
            if key in by_key:
                kept = out_labels[by_key[key]]
                both = ~np.isnan(kept) & ~np.isnan(row_labels)
                if np.any(kept[both] != row_labels[both]):
                    raise DuplicateConflict(key)
                fill = np.isnan(kept)
                kept[fill] = row_labels[fill]
                continue
            by_key[key] = len(out_keys)
            out_smiles.append(text)
            out_keys.append(key)
            out_mols.append(molecule)
            out_graphs.append(graph)
            out_labels.append(np.array(row_labels, dtype=np.float64))

        table = np.vstack(out_labels) if out_labels else np.zeros((0, len(assay_ids)))
        dropped = len(smiles) - len(out_keys)
        if dropped:
            logger.info("Merged %d duplicate molecule(s) by canonical key", dropped)
        return cls(out_smiles, out_keys, out_mols, out_graphs, table, list(assay_ids))

    def subset(self, indices: Sequence[int]) -> "AssayDataset":
        idx = [int(i) for i in indices]
        return AssayDataset(
            smiles=[self.smiles[i] for i in idx],
            keys=[self.keys[i] for i in idx],
            molecules=[self.molecules[i] for i in idx],
            graphs=[self.graphs[i] for i in idx],
            labels=self.labels[idx].copy(),
            assay_ids=list(self.assay_ids),
            meta=dict(self.meta),
        )

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"smiles": self.smiles, "canonical_key": self.keys})
        for j, assay in enumerate(self.assay_ids):
            df[f"{ASSAY_PREFIX}{assay}"] = pd.array(
                [None if np.isnan(v) else int(v) for v in self.labels[:, j]], dtype="Int64"
            )
        return df

    def summary(self) -> pd.DataFrame:
        """Per-assay inactive / active / missing counts."""
        rows = []
        for j, assay in enumerate(self.assay_ids):
            col = self.labels[:, j]
            rows.append({
                "assay": assay,
                "inactive": int(np.sum(col == 0)),
                "active": int(np.sum(col == 1)),
                "missing": int(np.sum(np.isnan(col))),
            })
        return pd.DataFrame(rows)


def ingest_csv(path: Path | str) -> AssayDataset:
    """
    Read ``smiles,assay_<id>,...``; cells are 0, 1 or empty (missing).
    Row numbers in errors are file line numbers (the header is line 1).
    """
    path = Path(path)
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    df.columns = [c.strip() for c in df.columns]
    if "smiles" not in df.columns:
        raise NoAssayColumns(f"{path}: no 'smiles' column")
    assay_cols = [c for c in df.columns if c.startswith(ASSAY_PREFIX) and len(c) > len(ASSAY_PREFIX)]
    if not assay_cols:
        raise NoAssayColumns(f"{path}: no '{ASSAY_PREFIX}<id>' columns")

    labels = np.full((len(df), len(assay_cols)), np.nan)
    for i in range(len(df)):
        for j, col in enumerate(assay_cols):
            cell = df.at[i, col].strip()
            if cell == "":
                continue
            if cell not in ("0", "1"):
                raise ParseFailure(i + 2, f"label {cell!r} in column {col} is not 0, 1 or empty")
            labels[i, j] = float(cell)

    dataset = AssayDataset.from_records(
        df["smiles"].str.strip().tolist(),
        labels,
        [c[len(ASSAY_PREFIX):] for c in assay_cols],
        rows=[i + 2 for i in range(len(df))],
    )
    dataset.meta["source"] = str(path)
    logger.info("Ingested %s: %d molecules, %d assays", path, len(dataset), dataset.num_assays)
    return dataset


def write_dataset(dataset: AssayDataset, path: Path | str) -> Path:
    return write_frame(dataset.to_frame(), path)


# ────────────────────────────────────────────────────────────────────────────
# SPLITS
# ────────────────────────────────────────────────────────────────────────────
class SplitPlan(BaseModel):
    """Held-out test indices plus k disjoint folds over the remainder."""

    test: List[int]
    folds: List[List[int]]
    seed: int

    @property
    def train(self) -> List[int]:
        return sorted(i for fold in self.folds for i in fold)

    def check_partition(self, n: int) -> None:
        seen = list(self.test) + [i for fold in self.folds for i in fold]
        if len(seen) != len(set(seen)):
            raise DatasetError("split plan parts overlap")
        if sorted(seen) != list(range(n)):
            raise DatasetError("split plan does not cover the dataset")

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.model_dump(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path | str) -> "SplitPlan":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


def _pattern(row: np.ndarray) -> str:
    return "".join("m" if np.isnan(v) else str(int(v)) for v in row)


def stratification_keys(labels: np.ndarray, min_count: int) -> np.ndarray:
    """
    One class per joint label/missing pattern. Patterns with fewer than
    *min_count* members fall back to "which assays are positive", then to a
    shared rare class, then to the most common class.
    """
    labels = np.asarray(labels, dtype=np.float64)
    keys = np.array([_pattern(row) for row in labels], dtype=object)
    if len(keys) == 0:
        return keys

    counts = Counter(keys)
    coarse = np.array(["p:" + "".join("1" if v == 1 else "." for v in row) for row in labels], dtype=object)
    keys = np.where([counts[k] < min_count for k in keys], coarse, keys)

    counts = Counter(keys)
    keys = np.where([counts[k] < min_count for k in keys], "rare", keys)

    counts = Counter(keys)
    if counts.get("rare", min_count) < min_count:
        common = max(sorted(counts), key=lambda k: (counts[k], k != "rare"))
        keys = np.where(keys == "rare", common, keys)
    return keys


def stratified_folds(
    labels: np.ndarray,
    k: int,
    seed: int,
    stream: str = "folds",
    assay_ids: Optional[Sequence[str]] = None,
) -> List[np.ndarray]:
    """
    k disjoint stratified folds (sorted index arrays) covering every row.
    Raises InsufficientPositives when an assay with positives leaves some
    fold without one.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n = labels.shape[0]
    if k < 2:
        return [np.arange(n)]
    if n < k:
        raise DatasetError(f"cannot cut {n} molecules into {k} folds")
    keys = stratification_keys(labels, k)
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=stream_seed(seed, stream))
    folds = [np.sort(val) for _, val in splitter.split(np.zeros(n), keys)]
    _check_positives(labels, folds, assay_ids)
    return folds


def _check_positives(labels: np.ndarray, folds: Sequence[np.ndarray], assay_ids: Optional[Sequence[str]]) -> None:
    names = list(assay_ids) if assay_ids is not None else [str(j) for j in range(labels.shape[1])]
    for j, assay in enumerate(names):
        if not np.any(labels[:, j] == 1):
            continue
        for f, fold in enumerate(folds):
            if not np.any(labels[fold, j] == 1):
                raise InsufficientPositives(assay, f)


def split(dataset: AssayDataset, test_fraction: float = 0.2, k: int = 5, seed: int = 0) -> SplitPlan:
    """Stratified test hold-out, then k stratified folds over the remainder (k=0: none)."""
    n = len(dataset)
    everything = np.arange(n)
    if test_fraction > 0:
        keys = stratification_keys(dataset.labels, 2)
        rest, test = train_test_split(
            everything,
            test_size=test_fraction,
            stratify=keys,
            random_state=stream_seed(seed, "split"),
        )
        rest, test = np.sort(rest), np.sort(test)
    else:
        rest, test = everything, np.array([], dtype=int)

    if k == 0:
        folds: List[np.ndarray] = [rest] if len(rest) else []
    else:
        local = stratified_folds(dataset.labels[rest], k, seed, assay_ids=dataset.assay_ids)
        folds = [rest[f] for f in local]

    plan = SplitPlan(test=[int(i) for i in test], folds=[[int(i) for i in f] for f in folds], seed=seed)
    plan.check_partition(n)
    logger.info("Split %d molecules: %d test, %d fold(s) of sizes %s",
                n, len(plan.test), len(plan.folds), [len(f) for f in plan.folds])
    return plan


# ────────────────────────────────────────────────────────────────────────────
# SYNTHETIC ASSAYS
# ────────────────────────────────────────────────────────────────────────────
def _has_ring(molecule: chem.Molecule) -> bool:
    return len(nx.cycle_basis(chem.to_networkx(molecule))) > 0


def _has_symbol(molecule: chem.Molecule, symbols: Sequence[str]) -> bool:
    return any(atom.symbol in symbols for atom in molecule.atoms)


def _has_carbonyl(molecule: chem.Molecule) -> bool:
    for bond in molecule.bonds:
        if bond.order != chem.EdgeCategory.DOUBLE:
            continue
        pair = {molecule.atoms[bond.begin].symbol, molecule.atoms[bond.end].symbol}
        if pair == {"C", "O"}:
            return True
    return False


RULES: Dict[str, Callable[[chem.Molecule], bool]] = {
    "nitrogen_ring": lambda m: _has_symbol(m, ("N",)) and _has_ring(m),
    "carbonyl": _has_carbonyl,
    "halogen": lambda m: _has_symbol(m, ("F", "Cl", "Br", "I")),
    "aromatic": lambda m: any(atom.aromatic for atom in m.atoms),
    "nitrogen": lambda m: _has_symbol(m, ("N",)),
    "sulfur": lambda m: _has_symbol(m, ("S",)),
}


class AssayInfo(NamedTuple):
    assay_id: str
    target: str
    inactive: int
    active: int


# the four protease screens the method was designed around
PROTEASE_SCREENS: List[AssayInfo] = [
    AssayInfo("1706", "3CLpro", 290_321, 405),
    AssayInfo("1879", "3CLpro", 244, 136),
    AssayInfo("485353", "PLpro", 322_433, 602),
    AssayInfo("652038", "PLpro", 735, 198),
]
SCREENED_INACTIVE = 331_480
SCREENED_ACTIVE = 1_095


def screen_observed_fractions() -> List[float]:
    """Fraction of all screened molecules that carry a label in each assay."""
    total = SCREENED_INACTIVE + SCREENED_ACTIVE
    return [(a.inactive + a.active) / total for a in PROTEASE_SCREENS]


def screen_positive_rates() -> List[float]:
    return [a.active / (a.inactive + a.active) for a in PROTEASE_SCREENS]


def make_synthetic_assays(
    grammar: Grammar,
    n_molecules: int,
    rules: Sequence[str],
    label_noise: float = 0.02,
    seed: int = 0,
    observed: Optional[Sequence[float]] = None,
    attempts_per_molecule: int = 50,
    progress: bool = True,
) -> AssayDataset:
    """
    Sample unique molecules by grammar rollout and label them with structural
    rules, flipping each label with probability *label_noise*. ``observed``
    gives, per rule, the fraction of molecules that keep their label; the
    rest become missing.
    """
    unknown = [r for r in rules if r not in RULES]
    if unknown:
        raise DatasetError(f"unknown synthetic rule(s): {', '.join(unknown)}")
    if observed is not None and len(observed) != len(rules):
        raise DatasetError("need one observed fraction per rule")
    if not 0.0 <= label_noise <= 1.0:
        raise DatasetError("label_noise must lie in [0, 1]")

    rng = numpy_rng(seed, "synth")
    budget = attempts_per_molecule * n_molecules
    seen: Dict[str, int] = {}
    smiles: List[str] = []
    attempts = 0
    bar = tqdm(total=n_molecules, desc="synthetic molecules", disable=not progress)
    while len(smiles) < n_molecules:
        if attempts >= budget:
            bar.close()
            raise GrammarTooSmall(
                f"only {len(smiles)} unique molecules after {attempts} rollouts (wanted {n_molecules})"
            )
        attempts += 1
        text = rollout_complete(grammar.initial_state(), grammar, rng)
        try:
            key = chem.smiles_key(text)
        except chem.ChemError as exc:
            logger.warning("Skipping unparsable rollout %r: %s", text, exc)
            continue
        if key in seen:
            continue
        seen[key] = len(smiles)
        smiles.append(text)
        bar.update(1)
    bar.close()

    molecules = [chem.parse_smiles(s) for s in smiles]
    labels = np.array([[float(RULES[r](m)) for r in rules] for m in molecules], dtype=np.float64)
    labels = labels.reshape(len(smiles), len(rules))

    if label_noise > 0:
        flips = numpy_rng(seed, "synth-noise").random(labels.shape) < label_noise
        labels = np.where(flips, 1.0 - labels, labels)
    if observed is not None:
        keep = numpy_rng(seed, "synth-mask").random(labels.shape) < np.asarray(observed)[None, :]
        labels = np.where(keep, labels, np.nan)

    dataset = AssayDataset.from_records(smiles, labels, list(rules))
    dataset.meta["source"] = "synthetic"
    logger.info("Synthesised %d molecules in %d rollouts; positives per rule %s",
                len(dataset), attempts, dict(zip(rules, np.nansum(dataset.labels, axis=0).astype(int))))
    return dataset
