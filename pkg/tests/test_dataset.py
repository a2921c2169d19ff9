import numpy as np
import pytest

import chem
from dataset import (
    RULES,
    AssayDataset,
    DatasetError,
    DuplicateConflict,
    GrammarTooSmall,
    InsufficientPositives,
    NoAssayColumns,
    ParseFailure,
    SplitPlan,
    ingest_csv,
    make_synthetic_assays,
    screen_observed_fractions,
    screen_positive_rates,
    split,
    stratification_keys,
    stratified_folds,
)
from grammar import bundled_smiles_grammar, parse_bnf


def chain_dataset(n=100, every=10):
    smiles = ["C" * i for i in range(1, n + 1)]
    labels = np.array([[1.0 if i % every == 0 else 0.0] for i in range(1, n + 1)])
    return AssayDataset.from_records(smiles, labels, ["chain"])


# ── records and ingestion ─────────────────────────────────────────────────
def test_duplicates_merge_their_labels():
    ds = AssayDataset.from_records(["CCO", "OCC", "CC"], [[1, np.nan], [np.nan, 0], [0, 0]], ["a", "b"])
    assert len(ds) == 2
    assert ds.smiles == ["CCO", "CC"]
    assert ds.labels[0].tolist() == [1.0, 0.0]


def test_conflicting_duplicates_raise():
    with pytest.raises(DuplicateConflict):
        AssayDataset.from_records(["CCO", "OCC"], [[1], [0]], ["a"])


def test_unparsable_record_names_its_row():
    with pytest.raises(ParseFailure) as info:
        AssayDataset.from_records(["CC", "C1CC"], [[0], [1]], ["a"])
    assert info.value.row == 2


def test_ingest_csv(tmp_path):
    path = tmp_path / "assays.csv"
    path.write_text(
        "smiles,assay_1706,assay_1879,notes\n"
        "CCO,1,,x\n"
        "c1ccccc1,0,1,\n"
        "OCC,,0,\n",
        encoding="utf-8",
    )
    ds = ingest_csv(path)
    assert ds.assay_ids == ["1706", "1879"]
    assert len(ds) == 2
    np.testing.assert_array_equal(ds.labels, [[1.0, 0.0], [0.0, 1.0]])
    summary = ds.summary().set_index("assay")
    assert summary.loc["1706", "active"] == 1
    assert summary.loc["1879", "missing"] == 0
    assert ds.meta["source"] == str(path)


def test_ingest_reports_file_line_numbers(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("smiles,assay_a\nCC,1\nC(C,0\n", encoding="utf-8")
    with pytest.raises(ParseFailure) as info:
        ingest_csv(path)
    assert info.value.row == 3

    path.write_text("smiles,assay_a\nCC,yes\n", encoding="utf-8")
    with pytest.raises(ParseFailure) as info:
        ingest_csv(path)
    assert info.value.row == 2


def test_ingest_needs_assay_columns(tmp_path):
    path = tmp_path / "none.csv"
    path.write_text("smiles,activity\nCC,1\n", encoding="utf-8")
    with pytest.raises(NoAssayColumns):
        ingest_csv(path)


def test_to_frame_keeps_missing_cells(small_dataset):
    ds = small_dataset.subset([0, 9])
    ds.labels[0, 1] = np.nan
    df = ds.to_frame()
    assert list(df.columns) == ["smiles", "canonical_key", "assay_nitrogen", "assay_oxygen"]
    assert df["assay_oxygen"].isna().tolist() == [True, False]
    assert df["assay_nitrogen"].tolist() == [0, 1]


# ── splits ────────────────────────────────────────────────────────────────
def test_split_partitions_and_stratifies():
    ds = chain_dataset()
    plan = split(ds, test_fraction=0.2, k=5, seed=0)
    plan.check_partition(len(ds))
    assert len(plan.test) == 20
    assert len(plan.folds) == 5
    assert all(len(f) == 16 for f in plan.folds)
    assert int(ds.labels[plan.test, 0].sum()) == 2
    assert all(ds.labels[f, 0].sum() >= 1 for f in plan.folds)
    assert plan.train == sorted(set(range(100)) - set(plan.test))


def test_split_is_seeded():
    ds = chain_dataset()
    assert split(ds, seed=3) == split(ds, seed=3)
    assert split(ds, seed=3).test != split(ds, seed=4).test


def test_split_without_folds():
    ds = chain_dataset()
    plan = split(ds, test_fraction=0.2, k=0, seed=0)
    assert len(plan.folds) == 1 and len(plan.folds[0]) == 80


def test_split_plan_saves_and_loads(tmp_path):
    plan = split(chain_dataset(), seed=1)
    assert SplitPlan.load(plan.save(tmp_path / "split.json")) == plan


def test_fold_without_positive_raises():
    labels = np.zeros((50, 1))
    labels[[3, 17, 40], 0] = 1.0
    with pytest.raises(InsufficientPositives) as info:
        stratified_folds(labels, 5, seed=0, assay_ids=["rare"])
    assert info.value.assay == "rare"


def test_rare_patterns_fall_back_to_coarser_classes():
    labels = np.array([[0, 0]] * 6 + [[1, np.nan]] * 2 + [[1, 0]] * 2, dtype=float)
    keys = stratification_keys(labels, 3)
    # both small patterns share "first assay positive"
    assert set(keys[6:]) == {"p:1."}
    assert set(keys[:6]) == {"00"}

    lone = np.array([[0, 0]] * 6 + [[1, 0]], dtype=float)
    assert set(stratification_keys(lone, 3)) == {"00"}


def test_too_many_folds():
    with pytest.raises(DatasetError):
        stratified_folds(np.zeros((3, 1)), 5, seed=0)


# ── synthetic assays ──────────────────────────────────────────────────────
def test_synthetic_labels_follow_rules():
    ds = make_synthetic_assays(bundled_smiles_grammar(), 60, ["nitrogen", "aromatic"],
                               label_noise=0.0, seed=0, progress=False)
    assert len(ds) == 60
    assert len(set(ds.keys)) == 60
    for molecule, row in zip(ds.molecules, ds.labels):
        assert row.tolist() == [float(RULES["nitrogen"](molecule)), float(RULES["aromatic"](molecule))]
    again = make_synthetic_assays(bundled_smiles_grammar(), 60, ["nitrogen", "aromatic"],
                                  label_noise=0.0, seed=0, progress=False)
    assert again.keys == ds.keys


def test_synthetic_masking():
    ds = make_synthetic_assays(bundled_smiles_grammar(), 80, ["carbonyl", "halogen"], seed=2,
                               observed=[0.5, 1.0], progress=False)
    assert np.isnan(ds.labels[:, 0]).any()
    assert not np.isnan(ds.labels[:, 1]).any()


def test_rules_on_known_molecules():
    m = chem.parse_smiles("CC(=O)Nc1ccccc1")
    assert RULES["carbonyl"](m) and RULES["aromatic"](m) and RULES["nitrogen"](m)
    assert RULES["nitrogen_ring"](chem.parse_smiles("C1CCNC1"))
    assert not RULES["nitrogen_ring"](chem.parse_smiles("CCN"))
    assert not RULES["carbonyl"](chem.parse_smiles("CCO"))


def test_small_grammar_cannot_fill_the_request():
    with pytest.raises(GrammarTooSmall):
        make_synthetic_assays(parse_bnf("S ::= 'C' | 'CC'"), 5, ["nitrogen"], progress=False)


def test_unknown_rule():
    with pytest.raises(DatasetError):
        make_synthetic_assays(bundled_smiles_grammar(), 5, ["glow"], progress=False)


def test_screen_statistics():
    fractions = screen_observed_fractions()
    rates = screen_positive_rates()
    assert len(fractions) == len(rates) == 4
    assert all(0.0 < f <= 1.0 for f in fractions)
    assert all(0.0 < r < 0.5 for r in rates)
