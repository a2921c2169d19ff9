"""Pydantic models shared across stages: the run configuration and the
records that end up in report files."""
from __future__ import annotations

import math
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, field_validator, model_validator


class PipelineConfig(BaseModel):
    """Flat run configuration. Defaults are the full-scale settings; configs/smoke.env shrinks them."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    seed: int = 0
    out_dir: Path = Path("artifacts")

    # ---- dataset ------------------------------------------------------------
    dataset_csv: Optional[Path] = None
    grammar_path: Optional[Path] = None
    synth_molecules: int = 2000
    synth_rules: List[str] = ["nitrogen_ring", "carbonyl", "halogen", "aromatic"]
    synth_label_noise: float = 0.02
    synth_observed: Optional[List[float]] = None
    test_fraction: float = 0.2

    # ---- predictor ensemble -------------------------------------------------
    ensemble_k: int = 5
    gnn_lr: float = 2e-5
    gnn_batch_size: int = 128
    gnn_weight_decay: float = 1e-4
    gnn_patience: int = 20
    gnn_max_epochs: int = 200
    gnn_hidden: int = 96
    gnn_blocks: int = 3
    gnn_head_hidden: int = 128
    gnn_head_dropout: List[float] = [0.25, 0.5]

    # ---- energy model -------------------------------------------------------
    deen_sigma: float = 0.25
    deen_lr: float = 1e-5
    deen_batch_size: int = 128
    deen_epochs: int = 200
    deen_width_scale: float = 1.0
    deen_standardize: bool = False

    # ---- search -------------------------------------------------------------
    target_assay: int = 0
    search_iterations: int = 1_000_000
    search_restarts: int = 10
    search_top_k: int = 30_000
    search_c: float = math.sqrt(2.0)
    search_terminal_force_depth: int = 30
    search_max_depth: int = 500
    search_beta: Union[Literal["beta0"], float] = "beta0"
    search_cache_size: int = 100_000

    # ---- reports ------------------------------------------------------------
    hist_bins: int = 30

    @field_validator("synth_rules", "synth_observed", "gnn_head_dropout", mode="before")
    @classmethod
    def _split_csv(cls, value):
        if isinstance(value, str):
            items = [item.strip() for item in value.split(",") if item.strip()]
            return items or None
        return value

    @field_validator("dataset_csv", "grammar_path", mode="before")
    @classmethod
    def _empty_path_is_none(cls, value):
        if isinstance(value, str) and not value.strip():
            return None
        return value

    @field_validator("search_beta", mode="before")
    @classmethod
    def _parse_beta(cls, value):
        if isinstance(value, str) and value.strip().lower() != "beta0":
            return float(value)
        if isinstance(value, str):
            return "beta0"
        return value

    @model_validator(mode="after")
    def _check_ranges(self) -> "PipelineConfig":
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        if self.ensemble_k < 1:
            raise ValueError("ensemble_k must be >= 1")
        if len(self.gnn_head_dropout) != 2:
            raise ValueError("gnn_head_dropout needs two probabilities")
        if self.deen_sigma < 0:
            raise ValueError("deen_sigma must be >= 0")
        if not isinstance(self.search_beta, str) and self.search_beta < 0:
            raise ValueError("search_beta must be >= 0")
        if self.search_cache_size < 1:
            raise ValueError("search_cache_size must be >= 1")
        if self.synth_observed is not None and len(self.synth_observed) != len(self.synth_rules):
            raise ValueError("synth_observed needs one fraction per synthetic rule")
        return self


# ---- report records -------------------------------------------------------
class MoleculeRecord(BaseModel):
    """One row of results.csv."""

    rank: int = 0
    smiles: str
    canonical_key: str
    reward: float
    f_assay: float
    energy: float
    delta_energy: float
    restart: int
    iteration: int


RESULTS_COLUMNS = [
    "rank",
    "smiles",
    "canonical_key",
    "reward",
    "f_assay",
    "energy",
    "delta_energy",
    "restart",
    "iteration",
]

HIST_COLUMNS = ["bin_left", "bin_right", "count", "series"]
