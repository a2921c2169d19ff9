"""
app.py  ·  Command-line entry point
===================================

    python app.py pipeline --config configs/smoke.env --out-dir runs/smoke
    python app.py featurize "c1ccccc1O" "CC(=O)N"

Every subcommand takes --config, --seed and --out-dir. Stages that need
earlier results read them from the artifacts directory. Exit code 0 on
success, 1 with "[stage] cause" on stderr when a stage fails, 2 for bad
arguments.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

import pandas as pd

import chem
import pipeline
from deen import EnergyNet
from gnn import PredictorEnsemble
from info import STAGE_INFO
from pipeline import StageError, artifact, stage
from search import write_results_csv
from utils import configure_logging, format_table, load_config

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


# ────────────────────────────────────────────────────────────────────────────
# SUBCOMMANDS
# ────────────────────────────────────────────────────────────────────────────
def cmd_featurize(args, config) -> None:
    rows = []
    with stage("featurize"):
        for text in args.smiles:
            molecule = chem.parse_smiles(text)
            graph = chem.featurize(molecule)
            rows.append({
                "smiles": text,
                "canonical_key": chem.canonical_key(molecule),
                "atoms": graph.num_nodes,
                "edges": graph.num_edges,
            })
    print(format_table(pd.DataFrame(rows)))


def cmd_synth_data(args, config) -> None:
    with stage("synth-data"):
        dataset = pipeline.build_dataset(config, progress=not args.quiet)
        pipeline.write_dataset(dataset, artifact(config, pipeline.DATASET_CSV))
    print(format_table(dataset.summary()))


def cmd_train_gnn(args, config) -> None:
    with stage("dataset"):
        dataset = pipeline.load_dataset(config, progress=not args.quiet)
        plan = pipeline.load_split(config, dataset)
    with stage("train-gnn"):
        ensemble, _ = pipeline.train_predictor(dataset, plan, config, progress=not args.quiet)
        table = pipeline.auc_report(ensemble, dataset, plan, config)
    print(format_table(table))


def _load_trained(config, need_energy: bool):
    dataset = pipeline.load_dataset(config, progress=False)
    plan = pipeline.load_split(config, dataset)
    ensemble = PredictorEnsemble.load(artifact(config, pipeline.PREDICTOR_CKPT))
    net = EnergyNet.load(artifact(config, pipeline.ENERGY_CKPT)) if need_energy else None
    return dataset, plan, ensemble, net


def cmd_train_deen(args, config) -> None:
    with stage("train-deen"):
        dataset, plan, ensemble, _ = _load_trained(config, need_energy=False)
        _, bounds, _ = pipeline.train_energy(ensemble, dataset, plan, config, progress=not args.quiet)
    print(f"phi_min={bounds.phi_min:.6f} phi_max={bounds.phi_max:.6f} beta0={bounds.beta0:.6f}")


def cmd_search(args, config) -> None:
    with stage("search"):
        _, _, ensemble, net = _load_trained(config, need_energy=True)
        if net.bounds is None:
            raise ValueError("energy checkpoint carries no bounds; rerun train-deen")
        grammar = pipeline.resolve_grammar(config)
        results = pipeline.search_molecules(grammar, ensemble, net, net.bounds, config,
                                            pipeline.configured_beta(config), progress=not args.quiet)
        write_results_csv(results, artifact(config, pipeline.RESULTS_CSV))
    print(format_table(results.head(20)))


def cmd_eval(args, config) -> None:
    with stage("eval"):
        dataset, plan, ensemble, _ = _load_trained(config, need_energy=False)
        table = pipeline.auc_report(ensemble, dataset, plan, config)
    print(format_table(table))


def cmd_pipeline(args, config) -> None:
    result = pipeline.run_pipeline(config, progress=not args.quiet)
    if result.auc_table is not None:
        print(format_table(result.auc_table))
    print(f"artifacts written to {result.out_dir}")


COMMANDS = {
    "featurize": cmd_featurize,
    "synth-data": cmd_synth_data,
    "train-gnn": cmd_train_gnn,
    "train-deen": cmd_train_deen,
    "search": cmd_search,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


# ────────────────────────────────────────────────────────────────────────────
# PARSER
# ────────────────────────────────────────────────────────────────────────────
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molsearch", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        info = STAGE_INFO[name]
        cmd = sub.add_parser(name, help=info["title"], description=info["description"])
        cmd.add_argument("--config", help="flat KEY=value config file")
        cmd.add_argument("--seed", type=int, help="master seed (overrides config)")
        cmd.add_argument("--out-dir", help="artifacts directory (overrides config)")
        cmd.add_argument("--quiet", action="store_true", help="no progress bars")
        cmd.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        if name == "featurize":
            cmd.add_argument("smiles", nargs="+", help="SMILES strings")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        config = load_config(args.config, {"seed": args.seed, "out_dir": args.out_dir})
    except Exception as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args, config)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
