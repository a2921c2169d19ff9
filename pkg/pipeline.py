"""
pipeline.py  ·  End-to-end orchestration and report files
=========================================================

dataset → split → predictor ensemble → latents → energy model → bounds on
test positives → search with β₀ and with β = 0 → reports. Each stage can also
be run on its own against an artifacts directory (the CLI in ``app.py`` does
that); a failing stage raises StageError naming the stage, and whatever was
written before it stays on disk.
"""
from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd

from dataset import AssayDataset, SplitPlan, ingest_csv, make_synthetic_assays, split, write_dataset
from deen import EnergyBounds, EnergyNet, energy, energy_bounds, energy_histogram, histogram_edges, train_deen
from gnn import PredictorEnsemble, evaluate_ensemble, train_ensemble
from grammar import Grammar, bundled_smiles_grammar, load_grammar
from schemas import PipelineConfig
from search import RewardSpec, run_search, write_results_csv
from utils import write_frame

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

# artifact file names, relative to config.out_dir
DATASET_CSV = "dataset.csv"
SPLIT_JSON = "split.json"
CONFIG_JSON = "config.json"
METRICS_CSV = "metrics.csv"
DEEN_METRICS_CSV = "deen_metrics.csv"
AUC_TABLE_CSV = "auc_table.csv"
ENERGY_HIST_CSV = "energy_hist.csv"
RESULTS_CSV = "results.csv"
RESULTS_BETA_ZERO_CSV = "results_beta_zero.csv"
PREDICTOR_CKPT = "checkpoints/predictor.pt"
ENERGY_CKPT = "checkpoints/energy.pt"

# rows of results used for the discovered-energy histograms
HIST_TOP = 500


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str) -> None:
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str) -> Iterator[None]:
    logger.info("── stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        logger.error("Stage %s failed: %s", name, exc)
        raise StageError(name, exc) from exc


def artifact(config: PipelineConfig, name: str) -> Path:
    return Path(config.out_dir) / name


# ────────────────────────────────────────────────────────────────────────────
# STAGES
# ────────────────────────────────────────────────────────────────────────────
def resolve_grammar(config: PipelineConfig) -> Grammar:
    return load_grammar(config.grammar_path) if config.grammar_path else bundled_smiles_grammar()


def build_dataset(config: PipelineConfig, grammar: Optional[Grammar] = None, progress: bool = True) -> AssayDataset:
    """The configured CSV, or synthetic assays sampled from the grammar."""
    if config.dataset_csv is not None:
        return ingest_csv(config.dataset_csv)
    return make_synthetic_assays(
        grammar or resolve_grammar(config),
        config.synth_molecules,
        config.synth_rules,
        label_noise=config.synth_label_noise,
        seed=config.seed,
        observed=config.synth_observed,
        progress=progress,
    )


def load_dataset(config: PipelineConfig, progress: bool = True) -> AssayDataset:
    """Reuse ``dataset.csv`` from the artifacts directory when a previous stage wrote it."""
    saved = artifact(config, DATASET_CSV)
    if saved.exists():
        return ingest_csv(saved)
    dataset = build_dataset(config, progress=progress)
    write_dataset(dataset, saved)
    return dataset


def load_split(config: PipelineConfig, dataset: AssayDataset) -> SplitPlan:
    saved = artifact(config, SPLIT_JSON)
    if saved.exists():
        plan = SplitPlan.load(saved)
        plan.check_partition(len(dataset))
        return plan
    plan = split(dataset, config.test_fraction, _fold_count(config), config.seed)
    plan.save(saved)
    return plan


def _fold_count(config: PipelineConfig) -> int:
    return config.ensemble_k if config.ensemble_k > 1 else 0


def train_predictor(
    dataset: AssayDataset, plan: SplitPlan, config: PipelineConfig, progress: bool = True
) -> Tuple[PredictorEnsemble, pd.DataFrame]:
    """Bagged ensemble on the training part; the plan's folds become member folds."""
    train_idx = np.asarray(plan.train, dtype=np.int64)
    train_set = dataset.subset(train_idx)
    # plan folds hold dataset rows; train_ensemble wants rows of train_set
    folds = [np.searchsorted(train_idx, np.asarray(f, dtype=np.int64)) for f in plan.folds]
    ensemble, log = train_ensemble(
        train_set,
        k=config.ensemble_k,
        config=config,
        seed=config.seed,
        folds=folds if len(folds) > 1 else None,
        progress=progress,
    )
    ensemble.save(artifact(config, PREDICTOR_CKPT), config.model_dump(mode="json"))
    write_frame(log, artifact(config, METRICS_CSV))
    return ensemble, log


def auc_report(ensemble: PredictorEnsemble, dataset: AssayDataset, plan: SplitPlan, config: PipelineConfig) -> pd.DataFrame:
    """Per-member / member-mean / ensemble AUC on the test part."""
    indices = plan.test if plan.test else plan.train
    if not plan.test:
        logger.warning("No test molecules; AUC table is computed on the training part")
    table = evaluate_ensemble(ensemble, dataset.subset(indices))
    write_frame(table, artifact(config, AUC_TABLE_CSV))
    return table


def latents(ensemble: PredictorEnsemble, dataset: AssayDataset, indices: List[int]) -> np.ndarray:
    if not indices:
        return np.zeros((0, ensemble.latent_dim))
    _, z, _ = ensemble.predict(dataset.subset(indices).graphs)
    return z


def positive_test_rows(dataset: AssayDataset, plan: SplitPlan, target: int) -> List[int]:
    return [i for i in plan.test if dataset.labels[i, target] == 1]


def train_energy(
    ensemble: PredictorEnsemble,
    dataset: AssayDataset,
    plan: SplitPlan,
    config: PipelineConfig,
    progress: bool = True,
) -> Tuple[EnergyNet, EnergyBounds, pd.DataFrame]:
    """Energy model on training latents; bounds over the target assay's test positives."""
    _check_target(config, dataset)
    train_z = latents(ensemble, dataset, plan.train)
    test_z = latents(ensemble, dataset, plan.test)
    net, log = train_deen(train_z, config, seed=config.seed, test_latents=test_z, progress=progress)
    reference = latents(ensemble, dataset, positive_test_rows(dataset, plan, config.target_assay))
    bounds = energy_bounds(net, reference)
    net.bounds = bounds
    logger.info("Energy bounds over %d test positives: [%.5f, %.5f], beta0=%.5f",
                reference.shape[0], bounds.phi_min, bounds.phi_max, bounds.beta0)
    net.save(artifact(config, ENERGY_CKPT), config.model_dump(mode="json"))
    write_frame(log, artifact(config, DEEN_METRICS_CSV))
    return net, bounds, log


def _check_target(config: PipelineConfig, dataset: AssayDataset) -> None:
    if not 0 <= config.target_assay < dataset.num_assays:
        raise ValueError(f"target_assay={config.target_assay} but the dataset has {dataset.num_assays} assays")


def search_molecules(
    grammar: Grammar,
    ensemble: PredictorEnsemble,
    net: EnergyNet,
    bounds: EnergyBounds,
    config: PipelineConfig,
    beta: Optional[float] = None,
    progress: bool = True,
) -> pd.DataFrame:
    """One full multi-restart search; ``beta=None`` means β₀."""
    spec = RewardSpec(ensemble, net, bounds, config.target_assay, beta, cache_size=config.search_cache_size)
    logger.info("Searching with beta=%.5f on assay %s", spec.beta, ensemble.assay_ids[config.target_assay])
    return run_search(
        grammar,
        spec,
        iterations=config.search_iterations,
        restarts=config.search_restarts,
        top_k=config.search_top_k,
        c=config.search_c,
        terminal_force_depth=config.search_terminal_force_depth,
        seed=config.seed,
        max_depth=config.search_max_depth,
        progress=progress,
    )


def configured_beta(config: PipelineConfig) -> Optional[float]:
    return None if config.search_beta == "beta0" else float(config.search_beta)


def regularised_series(config: PipelineConfig) -> str:
    """Histogram series name of the configured search, e.g. discovered_beta0 or discovered_beta_0.5."""
    beta = configured_beta(config)
    return "discovered_beta0" if beta is None else f"discovered_beta_{beta:g}"


def energy_report(
    reference_energies: np.ndarray,
    results: Dict[str, pd.DataFrame],
    config: PipelineConfig,
) -> pd.DataFrame:
    """Histograms of test-positive energies and of each search's top discoveries on shared bins."""
    series = {"test_positives": np.asarray(reference_energies, dtype=np.float64)}
    for name, frame in results.items():
        series[name] = frame["energy"].head(HIST_TOP).to_numpy(dtype=np.float64)
    edges = histogram_edges(list(series.values()), config.hist_bins)
    table = pd.concat([energy_histogram(v, edges, name) for name, v in series.items()], ignore_index=True)
    write_frame(table, artifact(config, ENERGY_HIST_CSV))
    return table


# ────────────────────────────────────────────────────────────────────────────
# FULL RUN
# ────────────────────────────────────────────────────────────────────────────
@dataclass
class PipelineResult:
    out_dir: Path
    artifacts: Dict[str, Path] = field(default_factory=dict)
    auc_table: Optional[pd.DataFrame] = None
    bounds: Optional[EnergyBounds] = None


def run_pipeline(config: PipelineConfig, progress: bool = True) -> PipelineResult:
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_JSON).write_text(
        json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    result = PipelineResult(out_dir=out_dir)

    with stage("dataset"):
        grammar = resolve_grammar(config)
        dataset = build_dataset(config, grammar, progress)
        write_dataset(dataset, artifact(config, DATASET_CSV))
        _check_target(config, dataset)

    with stage("split"):
        plan = split(dataset, config.test_fraction, _fold_count(config), config.seed)
        plan.save(artifact(config, SPLIT_JSON))

    with stage("train-gnn"):
        ensemble, _ = train_predictor(dataset, plan, config, progress)
        result.auc_table = auc_report(ensemble, dataset, plan, config)

    with stage("train-deen"):
        net, bounds, _ = train_energy(ensemble, dataset, plan, config, progress)
        result.bounds = bounds

    with stage("search"):
        regularised = search_molecules(grammar, ensemble, net, bounds, config, configured_beta(config), progress)
        write_results_csv(regularised, artifact(config, RESULTS_CSV))
        unregularised = search_molecules(grammar, ensemble, net, bounds, config, 0.0, progress)
        write_results_csv(unregularised, artifact(config, RESULTS_BETA_ZERO_CSV))

    with stage("report"):
        reference = latents(ensemble, dataset, positive_test_rows(dataset, plan, config.target_assay))
        reference_energies = energy(net, reference).numpy() if len(reference) else np.zeros(0)
        energy_report(
            reference_energies,
            {regularised_series(config): regularised, "discovered_beta_zero": unregularised},
            config,
        )

    for name in (DATASET_CSV, SPLIT_JSON, CONFIG_JSON, METRICS_CSV, DEEN_METRICS_CSV, AUC_TABLE_CSV,
                 ENERGY_HIST_CSV, RESULTS_CSV, RESULTS_BETA_ZERO_CSV, PREDICTOR_CKPT, ENERGY_CKPT):
        result.artifacts[name] = artifact(config, name)
    logger.info("Pipeline finished; artifacts in %s", out_dir)
    return result
