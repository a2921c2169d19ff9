import json

import numpy as np
import pandas as pd
import pytest

import app
import pipeline
from pipeline import StageError, run_pipeline
from schemas import HIST_COLUMNS, RESULTS_COLUMNS, PipelineConfig


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory, make_tiny_config):
    config = make_tiny_config(tmp_path_factory.mktemp("pipeline") / "run")
    return config, run_pipeline(config, progress=False)


def test_every_artifact_is_written(finished_run):
    config, result = finished_run
    assert result.out_dir == config.out_dir
    for name, path in result.artifacts.items():
        assert path.exists(), name
    saved = json.loads((config.out_dir / pipeline.CONFIG_JSON).read_text(encoding="utf-8"))
    assert saved["seed"] == config.seed and saved["ensemble_k"] == 3


def test_reports_have_the_expected_layout(finished_run):
    config, result = finished_run
    auc = pd.read_csv(config.out_dir / pipeline.AUC_TABLE_CSV)
    assert auc["model"].tolist() == ["member-0", "member-1", "member-2", "member-mean", "ensemble"]
    assert {"auc_nitrogen", "auc_aromatic", "stop_epoch"} <= set(auc.columns)

    metrics = pd.read_csv(config.out_dir / pipeline.METRICS_CSV)
    assert set(metrics["member"]) == {0, 1, 2}
    deen_metrics = pd.read_csv(config.out_dir / pipeline.DEEN_METRICS_CSV)
    assert deen_metrics["epoch"].tolist() == [1, 2, 3]

    hist = pd.read_csv(config.out_dir / pipeline.ENERGY_HIST_CSV)
    assert list(hist.columns) == HIST_COLUMNS
    assert set(hist["series"]) == {"test_positives", "discovered_beta0", "discovered_beta_zero"}
    assert hist.groupby("series").size().tolist() == [5, 5, 5]


def test_results_files(finished_run):
    config, result = finished_run
    results = pd.read_csv(config.out_dir / pipeline.RESULTS_CSV)
    assert list(results.columns) == RESULTS_COLUMNS
    assert 0 < len(results) <= config.search_top_k
    assert results["canonical_key"].is_unique
    assert results["reward"].is_monotonic_decreasing
    assert results["restart"].isin([0, 1]).all()
    np.testing.assert_allclose(
        results["delta_energy"], results["energy"] - result.bounds.phi_min, atol=1e-9
    )

    plain = pd.read_csv(config.out_dir / pipeline.RESULTS_BETA_ZERO_CSV)
    np.testing.assert_allclose(plain["reward"], plain["f_assay"], atol=1e-12)


def test_bounds_come_from_test_positives(finished_run):
    config, result = finished_run
    assert result.bounds.phi_min < result.bounds.phi_max
    assert result.bounds.beta0 == pytest.approx(1.0 / (result.bounds.phi_max - result.bounds.phi_min))
    split = json.loads((config.out_dir / pipeline.SPLIT_JSON).read_text(encoding="utf-8"))
    dataset = pd.read_csv(config.out_dir / pipeline.DATASET_CSV)
    assert sum(len(f) for f in split["folds"]) + len(split["test"]) == len(dataset) == 120
    assert dataset["assay_nitrogen"].iloc[split["test"]].sum() >= 2


def test_same_seed_same_results(finished_run, make_tiny_config, tmp_path):
    config, _ = finished_run
    again = make_tiny_config(tmp_path / "again")
    run_pipeline(again, progress=False)
    for name in (pipeline.DATASET_CSV, pipeline.SPLIT_JSON, pipeline.RESULTS_CSV, pipeline.ENERGY_HIST_CSV):
        assert (again.out_dir / name).read_bytes() == (config.out_dir / name).read_bytes(), name


def test_histogram_series_follows_the_configured_beta(make_tiny_config, tmp_path):
    assert pipeline.regularised_series(make_tiny_config(tmp_path)) == "discovered_beta0"
    assert pipeline.regularised_series(make_tiny_config(tmp_path, search_beta=0.5)) == "discovered_beta_0.5"
    assert pipeline.regularised_series(make_tiny_config(tmp_path, search_beta="2")) == "discovered_beta_2"


def test_failing_stage_is_named(make_tiny_config, tmp_path):
    config = make_tiny_config(tmp_path / "bad", target_assay=5)
    with pytest.raises(StageError) as info:
        run_pipeline(config, progress=False)
    assert info.value.stage == "dataset"
    assert str(info.value).startswith("[dataset] ")
    assert (tmp_path / "bad" / pipeline.CONFIG_JSON).exists()


def test_missing_dataset_file(make_tiny_config, tmp_path):
    config = make_tiny_config(tmp_path / "bad", dataset_csv=tmp_path / "absent.csv")
    with pytest.raises(StageError) as info:
        run_pipeline(config, progress=False)
    assert info.value.stage == "dataset"


# ── command line ──────────────────────────────────────────────────────────
@pytest.fixture(autouse=True)
def _no_root_handler(monkeypatch):
    monkeypatch.setattr(app, "configure_logging", lambda level: None)


def test_cli_featurize(capsys):
    assert app.main(["featurize", "--quiet", "CCO", "c1ccccc1"]) == 0
    out = capsys.readouterr().out
    assert "canonical_key" in out and "c1ccccc1" in out


def test_cli_bad_config(tmp_path, capsys):
    assert app.main(["featurize", "--config", str(tmp_path / "nope.env"), "C"]) == 2
    assert "[config]" in capsys.readouterr().err


def test_cli_reuses_pipeline_artifacts(finished_run, capsys):
    config, _ = finished_run
    assert app.main(["eval", "--quiet", "--out-dir", str(config.out_dir)]) == 0
    assert "ensemble" in capsys.readouterr().out


def test_cli_stage_failure_exit_code(tmp_path, capsys):
    env = tmp_path / "small.env"
    env.write_text("SYNTH_MOLECULES=20\nSYNTH_RULES=nitrogen\n", encoding="utf-8")
    code = app.main(["eval", "--quiet", "--config", str(env), "--out-dir", str(tmp_path / "empty")])
    assert code == 1
    assert "[eval]" in capsys.readouterr().err


# ── synthetic benchmark (slow) ────────────────────────────────────────────
BENCHMARK_RUN = dict(
    synth_molecules=600,
    synth_rules=["nitrogen"],
    synth_label_noise=0.02,
    ensemble_k=5,
    gnn_lr=1e-3,
    gnn_batch_size=32,
    gnn_patience=5,
    gnn_max_epochs=30,
    gnn_hidden=32,
    gnn_blocks=2,
    gnn_head_hidden=32,
    deen_lr=1e-3,
    deen_batch_size=64,
    deen_epochs=30,
    deen_width_scale=0.01,
    search_iterations=3000,
    search_restarts=2,
    search_top_k=pipeline.HIST_TOP,
    hist_bins=20,
)


@pytest.fixture(scope="module")
def benchmark_run(tmp_path_factory):
    config = PipelineConfig(out_dir=tmp_path_factory.mktemp("benchmark") / "run", **BENCHMARK_RUN)
    return config, run_pipeline(config, progress=False)


@pytest.fixture(scope="module")
def seed_auc_tables(tmp_path_factory):
    tables = []
    for seed in range(5):
        config = PipelineConfig(out_dir=tmp_path_factory.mktemp(f"seed{seed}"), seed=seed, **BENCHMARK_RUN)
        dataset = pipeline.build_dataset(config, progress=False)
        plan = pipeline.load_split(config, dataset)
        ensemble, _ = pipeline.train_predictor(dataset, plan, config, progress=False)
        tables.append(pipeline.auc_report(ensemble, dataset, plan, config).set_index("model"))
    return tables


@pytest.mark.slow
def test_benchmark_ensemble_auc(benchmark_run):
    _, result = benchmark_run
    assert result.auc_table.set_index("model").loc["ensemble", "auc_nitrogen"] >= 0.9


@pytest.mark.slow
def test_ensemble_matches_or_beats_its_members(seed_auc_tables):
    wins = sum(t.loc["ensemble", "auc_nitrogen"] >= t.loc["member-mean", "auc_nitrogen"] for t in seed_auc_tables)
    assert wins >= 4


@pytest.mark.slow
def test_energy_term_pulls_discoveries_to_lower_energy(benchmark_run):
    config, _ = benchmark_run
    regularised = pd.read_csv(config.out_dir / pipeline.RESULTS_CSV)["energy"].head(pipeline.HIST_TOP)
    plain = pd.read_csv(config.out_dir / pipeline.RESULTS_BETA_ZERO_CSV)["energy"].head(pipeline.HIST_TOP)
    assert regularised.median() < plain.median()
