STAGE_INFO = {
    "featurize": {
        "title": "Featurize SMILES",
        "description": (
            "Parse SMILES strings and print each molecule's canonical key, atom "
            "count and edge count (self-loops included)."
        ),
    },
    "synth-data": {
        "title": "Synthetic assays",
        "description": (
            "Sample unique molecules from the SMILES grammar and label them with "
            "structural rules (optional label noise and masking). Writes dataset.csv."
        ),
    },
    "train-gnn": {
        "title": "Predictor ensemble",
        "description": (
            "Split the dataset, train the k-member bagging ensemble of multi-task "
            "graph networks with early stopping and write the predictor checkpoint, "
            "metrics.csv and auc_table.csv."
        ),
    },
    "train-deen": {
        "title": "Energy model",
        "description": (
            "Train the denoising energy model on ensemble latents of the training "
            "part and fix the energy bounds on the target assay's test positives."
        ),
    },
    "search": {
        "title": "Molecule search",
        "description": (
            "Run grammar-constrained tree search with the energy-regularised reward "
            "(beta from the config) and write results.csv."
        ),
    },
    "eval": {
        "title": "Evaluate ensemble",
        "description": "Recompute auc_table.csv on the test part from the saved predictor checkpoint.",
    },
    "pipeline": {
        "title": "Full run",
        "description": (
            "All stages in order, including a second search without energy "
            "regularisation and the energy histograms."
        ),
    },
}
