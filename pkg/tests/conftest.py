from __future__ import annotations

import numpy as np
import pytest

from dataset import AssayDataset
from grammar import parse_bnf
from schemas import PipelineConfig

# (smiles, contains nitrogen, contains oxygen)
SMALL_CORPUS = [
    ("CC", 0, 0), ("CCC", 0, 0), ("CCCC", 0, 0), ("CCCCC", 0, 0), ("C1CCCCC1", 0, 0),
    ("c1ccccc1", 0, 0), ("CC(C)C", 0, 0), ("C=C", 0, 0), ("C#C", 0, 0),
    ("CCN", 1, 0), ("CN", 1, 0), ("NCCN", 1, 0), ("c1ccncc1", 1, 0), ("CC(F)N", 1, 0),
    ("N1CCCC1", 1, 0),
    ("CCO", 0, 1), ("CO", 0, 1), ("OCCO", 0, 1), ("C=O", 0, 1), ("CC(=O)O", 0, 1),
    ("c1ccoc1", 0, 1), ("OC1CCCC1", 0, 1),
    ("NC=O", 1, 1), ("CC(N)O", 1, 1),
    ("CS", 0, 0), ("CCS", 0, 0), ("c1ccsc1", 0, 0), ("CCCl", 0, 0), ("CBr", 0, 0), ("CF", 0, 0),
]


@pytest.fixture(scope="session")
def small_dataset() -> AssayDataset:
    smiles = [s for s, _, _ in SMALL_CORPUS]
    labels = np.array([[n, o] for _, n, o in SMALL_CORPUS], dtype=np.float64)
    return AssayDataset.from_records(smiles, labels, ["nitrogen", "oxygen"])


@pytest.fixture(scope="session")
def toy_grammar():
    return parse_bnf("S ::= 'C' | 'C' S")


# every stage at toy scale: seconds on a laptop CPU
TINY_RUN = dict(
    synth_molecules=120,
    synth_rules=["nitrogen", "aromatic"],
    synth_label_noise=0.0,
    ensemble_k=3,
    gnn_lr=1e-3,
    gnn_batch_size=8,
    gnn_patience=2,
    gnn_max_epochs=3,
    gnn_hidden=8,
    gnn_blocks=2,
    gnn_head_hidden=8,
    deen_lr=1e-3,
    deen_batch_size=32,
    deen_epochs=3,
    deen_width_scale=0.005,
    search_iterations=40,
    search_restarts=2,
    search_top_k=50,
    hist_bins=5,
)


@pytest.fixture(scope="session")
def make_tiny_config():
    def build(out_dir, **overrides) -> PipelineConfig:
        return PipelineConfig(out_dir=out_dir, **{**TINY_RUN, **overrides})
    return build


@pytest.fixture
def tiny_config(tmp_path, make_tiny_config) -> PipelineConfig:
    return make_tiny_config(tmp_path / "run")
