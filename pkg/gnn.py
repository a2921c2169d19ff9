"""
gnn.py  ·  Multi-task activity predictor
========================================

Message-passing layers with edge-contraction pooling, one sigmoid head per
assay, the class-balanced multi-task loss, early-stopped training and the
k-member bagging ensemble whose concatenated latents feed the energy model.

Batches are disjoint unions of molecular graphs; ``node_graph`` maps every
node to its molecule.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from sklearn.model_selection import train_test_split
from tqdm.auto import tqdm

import chem
from dataset import AssayDataset, InsufficientPositives, stratification_keys, stratified_folds
from diffcore import ShapeMismatch, dropout, segment_max, segment_mean, segment_softmax
from metrics import auc_or_nan
from schemas import PipelineConfig
from utils import load_checkpoint, numpy_rng, save_checkpoint, stream_seed, torch_generator

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

DTYPE = torch.float64
NODE_DIM = len(chem.NODE_FEATURES)
EDGE_DIM = chem.NUM_EDGE_CATEGORIES
LOG_CLAMP = 1e-12

__all__ = [
    "GnnError", "EmptyGraph", "NoPositives", "EmptyTrainingSet", "InsufficientPositives",
    "GraphBatch", "collate", "MessageLayer", "EdgePool", "contract_edges", "GnnModel",
    "forward", "AssayWeights", "assay_weights", "multitask_loss", "train_model",
    "train_ensemble", "PredictorEnsemble", "ensemble_predict", "evaluate_ensemble",
]


# ────────────────────────────────────────────────────────────────────────────
# ERRORS
# ────────────────────────────────────────────────────────────────────────────
class GnnError(ValueError):
    """Base class for predictor failures."""


class EmptyGraph(GnnError):
    pass


class NoPositives(GnnError):
    def __init__(self, assay: str) -> None:
        super().__init__(f"assay {assay} has no positive training sample")
        self.assay = assay


class EmptyTrainingSet(GnnError):
    pass


# ────────────────────────────────────────────────────────────────────────────
# BATCHING
# ────────────────────────────────────────────────────────────────────────────
@dataclass
class GraphBatch:
    x: torch.Tensor             # (N, node_dim)
    edge_index: torch.Tensor    # (2, E) long
    edge_attr: torch.Tensor     # (E, edge_dim)
    node_graph: torch.Tensor    # (N,) long
    num_graphs: int


def collate(graphs: Sequence[chem.MolecularGraph]) -> GraphBatch:
    """
    Disjoint union of *graphs*, each in canonical node and edge order (edge
    pooling breaks score ties by edge position).
    """
    if not graphs:
        raise EmptyGraph("cannot batch zero graphs")
    xs, edges, attrs, owners = [], [], [], []
    offset = 0
    for g, graph in enumerate(graphs):
        if graph.num_nodes == 0:
            raise EmptyGraph(f"graph {g} has no nodes")
        graph = graph.canonical
        xs.append(graph.node_features)
        edges.append(graph.edge_index + offset)
        attrs.append(graph.edge_features)
        owners.append(np.full(graph.num_nodes, g, dtype=np.int64))
        offset += graph.num_nodes
    return GraphBatch(
        x=torch.tensor(np.concatenate(xs), dtype=DTYPE),
        edge_index=torch.tensor(np.concatenate(edges, axis=1), dtype=torch.long),
        edge_attr=torch.tensor(np.concatenate(attrs), dtype=DTYPE),
        node_graph=torch.tensor(np.concatenate(owners), dtype=torch.long),
        num_graphs=len(graphs),
    )


# ────────────────────────────────────────────────────────────────────────────
# LAYERS
# ────────────────────────────────────────────────────────────────────────────
def _mlp(in_dim: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(),
        nn.Linear(hidden, hidden), nn.BatchNorm1d(hidden), nn.ReLU(),
    )


class MessageLayer(nn.Module):
    """
    e'_j = Φ_E(e_j ⊕ v_src ⊕ v_dst); N̄_i = mean of e' over edges into i;
    v'_i = Φ_V(v_i ⊕ N̄_i). Self-loops keep every neighbourhood non-empty.
    """

    def __init__(self, node_dim: int, edge_dim: int, hidden: int = 96) -> None:
        super().__init__()
        self.node_dim, self.edge_dim, self.hidden = node_dim, edge_dim, hidden
        self.edge_mlp = _mlp(edge_dim + 2 * node_dim, hidden)
        self.node_mlp = _mlp(node_dim + hidden, hidden)

    def forward(
        self, x: torch.Tensor, edge_index: torch.Tensor, edge_attr: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        if x.shape[1] != self.node_dim or edge_attr.shape[1] != self.edge_dim:
            raise ShapeMismatch(
                f"layer expects node/edge widths {self.node_dim}/{self.edge_dim}, "
                f"got {x.shape[1]}/{edge_attr.shape[1]}"
            )
        src, dst = edge_index
        edges = self.edge_mlp(torch.cat([edge_attr, x[src], x[dst]], dim=-1))
        neighbourhood = segment_mean(edges, dst, x.shape[0])
        nodes = self.node_mlp(torch.cat([x, neighbourhood], dim=-1))
        return nodes, edges


@dataclass
class PooledGraph:
    x: torch.Tensor
    edge_index: torch.Tensor
    edge_attr: torch.Tensor
    node_graph: torch.Tensor
    cluster: torch.Tensor                     # old node -> new node
    pairs: List[Tuple[int, int]] = field(default_factory=list)


def contract_edges(
    x: torch.Tensor,
    edge_index: torch.Tensor,
    edge_attr: torch.Tensor,
    node_graph: torch.Tensor,
    scores: torch.Tensor,
) -> PooledGraph:
    """
    Greedy contraction in descending score order, ties broken by edge position
    (collate hands over edges in canonical order). An
    edge is contracted only if neither endpoint was merged already; the new
    node is s·(v_src + v_dst)/2. Edges are re-targeted, parallel edges
    averaged, and a merged pair keeps a single self-loop.
    """
    n = x.shape[0]
    src = edge_index[0].tolist()
    dst = edge_index[1].tolist()
    order = np.argsort(-scores.detach().cpu().numpy(), kind="stable")

    used = np.zeros(n, dtype=bool)
    cluster = np.full(n, -1, dtype=np.int64)
    pairs: List[Tuple[int, int]] = []
    chosen: List[int] = []
    for e in order:
        a, b = src[e], dst[e]
        if a == b or used[a] or used[b]:
            continue
        used[a] = used[b] = True
        cluster[a] = cluster[b] = len(pairs)
        pairs.append((a, b))
        chosen.append(int(e))
    singles = np.flatnonzero(~used)
    cluster[singles] = len(pairs) + np.arange(len(singles))
    num_new = len(pairs) + len(singles)

    singles_t = torch.as_tensor(singles, dtype=torch.long)
    parts, owners = [], []
    if pairs:
        a_idx = torch.tensor([p[0] for p in pairs], dtype=torch.long)
        b_idx = torch.tensor([p[1] for p in pairs], dtype=torch.long)
        s = scores[torch.tensor(chosen, dtype=torch.long)].unsqueeze(-1)
        parts.append(s * (x[a_idx] + x[b_idx]) / 2.0)
        owners.append(node_graph[a_idx])
    parts.append(x[singles_t])
    owners.append(node_graph[singles_t])

    cluster_t = torch.as_tensor(cluster, dtype=torch.long)
    key = cluster_t[edge_index[0]] * num_new + cluster_t[edge_index[1]]
    unique, inverse = torch.unique(key, sorted=True, return_inverse=True)
    new_attr = segment_mean(edge_attr, inverse, unique.numel())
    new_index = torch.stack([unique // num_new, unique % num_new])

    return PooledGraph(
        x=torch.cat(parts, dim=0),
        edge_index=new_index,
        edge_attr=new_attr,
        node_graph=torch.cat(owners, dim=0),
        cluster=cluster_t,
        pairs=pairs,
    )


class EdgePool(nn.Module):
    """r = W·(v_src ⊕ v_dst ⊕ e) + b, softmax over the edges leaving each node, then contract."""

    def __init__(self, node_dim: int, edge_dim: int) -> None:
        super().__init__()
        self.score = nn.Linear(2 * node_dim + edge_dim, 1)

    def edge_scores(self, x: torch.Tensor, edge_index: torch.Tensor, edge_attr: torch.Tensor) -> torch.Tensor:
        src, dst = edge_index
        raw = self.score(torch.cat([x[src], x[dst], edge_attr], dim=-1)).squeeze(-1)
        return segment_softmax(raw, src, x.shape[0])

    def forward(
        self,
        x: torch.Tensor,
        edge_index: torch.Tensor,
        edge_attr: torch.Tensor,
        node_graph: torch.Tensor,
    ) -> PooledGraph:
        scores = self.edge_scores(x, edge_index, edge_attr)
        return contract_edges(x, edge_index, edge_attr, node_graph, scores)


class AssayHead(nn.Module):
    def __init__(self, latent_dim: int, hidden: int, dropouts: Sequence[float]) -> None:
        super().__init__()
        self.p_in, self.p_mid = float(dropouts[0]), float(dropouts[1])
        self.fc1 = nn.Linear(latent_dim, hidden)
        self.bn1 = nn.BatchNorm1d(hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.bn2 = nn.BatchNorm1d(hidden)
        self.out = nn.Linear(hidden, 1)

    def forward(self, z: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        h = dropout(z, self.p_in, generator, self.training)
        h = torch.relu(self.bn1(self.fc1(h)))
        h = dropout(h, self.p_mid, generator, self.training)
        h = torch.relu(self.bn2(self.fc2(h)))
        return self.out(h).squeeze(-1)


class GnnModel(nn.Module):
    """Message layer + EdgePool blocks, mean‖max readout after each, one head per assay."""

    def __init__(
        self,
        num_assays: int,
        hidden: int = 96,
        blocks: int = 3,
        head_hidden: int = 128,
        head_dropout: Sequence[float] = (0.25, 0.5),
        node_dim: int = NODE_DIM,
        edge_dim: int = EDGE_DIM,
    ) -> None:
        super().__init__()
        if num_assays < 1 or blocks < 1:
            raise GnnError("need at least one assay and one block")
        self.config = {
            "num_assays": num_assays, "hidden": hidden, "blocks": blocks,
            "head_hidden": head_hidden, "head_dropout": [float(p) for p in head_dropout],
            "node_dim": node_dim, "edge_dim": edge_dim,
        }
        self.layers = nn.ModuleList(
            [MessageLayer(node_dim, edge_dim, hidden)]
            + [MessageLayer(hidden, hidden, hidden) for _ in range(blocks - 1)]
        )
        self.pools = nn.ModuleList([EdgePool(hidden, hidden) for _ in range(blocks)])
        self.latent_dim = blocks * 2 * hidden
        self.heads = nn.ModuleList(
            [AssayHead(self.latent_dim, head_hidden, head_dropout) for _ in range(num_assays)]
        )
        self.dropout_generator: Optional[torch.Generator] = None
        self.double()

    def forward(self, batch: GraphBatch) -> Tuple[torch.Tensor, torch.Tensor]:
        x, edge_index, edge_attr, owner = batch.x, batch.edge_index, batch.edge_attr, batch.node_graph
        if x.shape[0] == 0:
            raise EmptyGraph("batch has no nodes")
        readouts = []
        for layer, pool in zip(self.layers, self.pools):
            x, edge_attr = layer(x, edge_index, edge_attr)
            pooled = pool(x, edge_index, edge_attr, owner)
            x, edge_index, edge_attr, owner = pooled.x, pooled.edge_index, pooled.edge_attr, pooled.node_graph
            readouts.append(segment_mean(x, owner, batch.num_graphs))
            readouts.append(segment_max(x, owner, batch.num_graphs))
        # per block: mean then max, blocks in order
        latent = torch.cat(readouts, dim=-1)
        logits = torch.stack([head(latent, self.dropout_generator) for head in self.heads], dim=1)
        return torch.sigmoid(logits), latent


def forward(
    graphs: Union[chem.MolecularGraph, Sequence[chem.MolecularGraph]],
    model: GnnModel,
    mode: str = "eval",
) -> Tuple[torch.Tensor, torch.Tensor]:
    """(probabilities (B, A), latents (B, L)) in train or eval mode; the model's mode is restored."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if isinstance(graphs, chem.MolecularGraph):
        graphs = [graphs]
    batch = collate(graphs)
    was_training = model.training
    model.train(mode == "train")
    try:
        with torch.set_grad_enabled(mode == "train"):
            return model(batch)
    finally:
        model.train(was_training)


@torch.no_grad()
def predict(model: GnnModel, graphs: Sequence[chem.MolecularGraph], batch_size: int = 256) -> Tuple[torch.Tensor, torch.Tensor]:
    was_training = model.training
    model.eval()
    probs, latents = [], []
    for start in range(0, len(graphs), batch_size):
        p, z = model(collate(graphs[start:start + batch_size]))
        probs.append(p)
        latents.append(z)
    model.train(was_training)
    return torch.cat(probs), torch.cat(latents)


# ────────────────────────────────────────────────────────────────────────────
# LOSS
# ────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class AssayWeights:
    alpha: np.ndarray
    beta: np.ndarray
    assay_ids: Tuple[str, ...]


def assay_weights(labels: np.ndarray, assay_ids: Optional[Sequence[str]] = None) -> AssayWeights:
    """α_A = N/(I+J), β_A = (I+J)/I with N training molecules, I positives and J negatives of A."""
    labels = np.asarray(labels, dtype=np.float64)
    n, a = labels.shape
    ids = tuple(assay_ids) if assay_ids is not None else tuple(str(j) for j in range(a))
    alpha = np.zeros(a)
    beta = np.zeros(a)
    for j in range(a):
        positives = int(np.sum(labels[:, j] == 1))
        negatives = int(np.sum(labels[:, j] == 0))
        if positives == 0:
            raise NoPositives(ids[j])
        alpha[j] = n / (positives + negatives)
        beta[j] = (positives + negatives) / positives
    return AssayWeights(alpha=alpha, beta=beta, assay_ids=ids)


def multitask_loss(probs: torch.Tensor, labels: Any, weights: AssayWeights) -> torch.Tensor:
    """
    Mean over the batch of Σ_A ℓ_A with ℓ_A = -α β log f (positive),
    -α log(1 - f) (negative), 0 (missing). Logs are clamped at 1e-12.
    """
    labels = torch.as_tensor(labels, dtype=probs.dtype)
    if labels.shape != probs.shape:
        raise ShapeMismatch(f"labels {tuple(labels.shape)} vs predictions {tuple(probs.shape)}")
    alpha = torch.as_tensor(weights.alpha, dtype=probs.dtype)
    beta = torch.as_tensor(weights.beta, dtype=probs.dtype)
    observed = ~torch.isnan(labels)
    positive = torch.nan_to_num(labels, nan=0.0) == 1
    pos_term = -alpha * beta * torch.log(probs.clamp(min=LOG_CLAMP))
    neg_term = -alpha * torch.log((1.0 - probs).clamp(min=LOG_CLAMP))
    per_entry = torch.where(positive, pos_term, neg_term)
    per_entry = torch.where(observed, per_entry, torch.zeros_like(per_entry))
    return per_entry.sum(dim=1).mean()


# ────────────────────────────────────────────────────────────────────────────
# TRAINING
# ────────────────────────────────────────────────────────────────────────────
@dataclass
class TrainResult:
    model: GnnModel
    log: pd.DataFrame
    best_epoch: int
    stop_epoch: int


def _build_model(num_assays: int, config: PipelineConfig) -> GnnModel:
    return GnnModel(
        num_assays,
        hidden=config.gnn_hidden,
        blocks=config.gnn_blocks,
        head_hidden=config.gnn_head_hidden,
        head_dropout=config.gnn_head_dropout,
    )


def train_model(
    model: GnnModel,
    train: AssayDataset,
    val: AssayDataset,
    weights: AssayWeights,
    config: PipelineConfig,
    seed: int = 0,
    member: int = 0,
    progress: bool = True,
) -> TrainResult:
    """
    Adam with the configured learning rate / weight decay, shuffled batches,
    early stopping after ``gnn_patience`` epochs without a lower validation
    loss. The returned model holds the parameters of the best epoch.
    """
    if len(train) < 2:
        raise EmptyTrainingSet(f"member {member}: {len(train)} training molecules")
    if len(val) == 0:
        raise EmptyTrainingSet(f"member {member}: empty validation set")

    optimizer = torch.optim.Adam(model.parameters(), lr=config.gnn_lr, weight_decay=config.gnn_weight_decay)
    shuffle = numpy_rng(seed, f"shuffle-{member}")
    model.dropout_generator = torch_generator(seed, f"dropout-{member}")
    val_labels = torch.as_tensor(val.labels, dtype=DTYPE)

    best_loss, best_epoch = math.inf, 0
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    rows: List[Dict[str, Any]] = []
    stop_epoch = 0
    bar = tqdm(range(1, config.gnn_max_epochs + 1), desc=f"member {member}", disable=not progress)
    for epoch in bar:
        stop_epoch = epoch
        model.train()
        order = shuffle.permutation(len(train))
        total, seen = 0.0, 0
        for start in range(0, len(order), config.gnn_batch_size):
            idx = order[start:start + config.gnn_batch_size]
            if len(idx) < 2:
                continue   # batch norm needs two samples
            probs, _ = model(collate([train.graphs[i] for i in idx]))
            loss = multitask_loss(probs, train.labels[idx], weights)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)

        val_probs, _ = predict(model, val.graphs)
        val_loss = float(multitask_loss(val_probs, val_labels, weights))
        row: Dict[str, Any] = {
            "member": member,
            "epoch": epoch,
            "train_loss": total / seen if seen else float("nan"),
            "val_loss": val_loss,
        }
        for j, assay in enumerate(train.assay_ids):
            row[f"auc_{assay}"] = auc_or_nan(val_probs[:, j].numpy(), val.labels[:, j])
        rows.append(row)
        bar.set_postfix(train=f"{row['train_loss']:.4f}", val=f"{val_loss:.4f}")

        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        elif epoch - best_epoch >= config.gnn_patience:
            logger.info("Member %d: early stop at epoch %d (best %d, val loss %.5f)",
                        member, epoch, best_epoch, best_loss)
            break

    model.load_state_dict(best_state)
    model.dropout_generator = None
    log = pd.DataFrame(rows)
    log["best"] = log["epoch"] == best_epoch
    return TrainResult(model=model, log=log, best_epoch=best_epoch, stop_epoch=stop_epoch)


@dataclass
class PredictorEnsemble:
    members: List[GnnModel]
    assay_ids: List[str]
    weights: AssayWeights
    val_folds: List[List[int]] = field(default_factory=list)
    best_epochs: List[int] = field(default_factory=list)
    stop_epochs: List[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.members:
            raise GnnError("an ensemble needs at least one member")

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def latent_dim(self) -> int:
        return sum(m.latent_dim for m in self.members)

    def predict(
        self, graphs: Sequence[chem.MolecularGraph], batch_size: int = 256
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(mean probabilities (n, A), concatenated latents (n, k·L), member probabilities (k, n, A))."""
        member_probs, latents = [], []
        for model in self.members:
            p, z = predict(model, graphs, batch_size)
            member_probs.append(p.numpy())
            latents.append(z.numpy())
        stacked = np.stack(member_probs)
        return stacked.mean(axis=0), np.concatenate(latents, axis=1), stacked

    def save(self, path: Path | str, config: Optional[Dict[str, Any]] = None) -> Path:
        tensors: Dict[str, torch.Tensor] = {}
        for i, model in enumerate(self.members):
            for name, value in model.state_dict().items():
                tensors[f"member{i}.{name}"] = value
        metadata = {
            "kind": "predictor_ensemble",
            "architecture": self.members[0].config,
            "k": self.k,
            "assay_ids": list(self.assay_ids),
            "alpha": [float(v) for v in self.weights.alpha],
            "beta": [float(v) for v in self.weights.beta],
            "val_folds": [list(map(int, f)) for f in self.val_folds],
            "best_epochs": list(map(int, self.best_epochs)),
            "stop_epochs": list(map(int, self.stop_epochs)),
            "config": dict(config or {}),
        }
        return save_checkpoint(path, tensors, metadata)

    @classmethod
    def load(cls, path: Path | str) -> "PredictorEnsemble":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "predictor_ensemble":
            raise GnnError(f"{path} does not hold a predictor ensemble")
        members = []
        for i in range(int(meta["k"])):
            model = GnnModel(**meta["architecture"])
            prefix = f"member{i}."
            state = {name[len(prefix):]: t for name, t in tensors.items() if name.startswith(prefix)}
            model.load_state_dict(state)
            model.eval()
            members.append(model)
        weights = AssayWeights(np.array(meta["alpha"]), np.array(meta["beta"]), tuple(meta["assay_ids"]))
        return cls(members, list(meta["assay_ids"]), weights, meta["val_folds"],
                   meta["best_epochs"], meta["stop_epochs"])


def train_ensemble(
    dataset: AssayDataset,
    k: int = 5,
    config: Optional[PipelineConfig] = None,
    seed: int = 0,
    folds: Optional[Sequence[np.ndarray]] = None,
    progress: bool = True,
) -> Tuple[PredictorEnsemble, pd.DataFrame]:
    """
    Bagging: member i trains on every fold but i and is validated on fold i.
    Folds are stratified on the joint label/missing pattern unless given as
    row indices of *dataset*, in which case k = len(folds). With k=1 a single
    model is validated on a stratified 20% hold-out.
    """
    config = config or PipelineConfig()
    if folds is not None:
        k = len(folds)
    if k < 1:
        raise GnnError("k must be >= 1")
    if len(dataset) < max(k, 2):
        raise EmptyTrainingSet(f"{len(dataset)} molecules cannot feed {k} member(s)")
    weights = assay_weights(dataset.labels, dataset.assay_ids)
    everything = np.arange(len(dataset))

    if k == 1:
        keys = stratification_keys(dataset.labels, 2)
        train_idx, val_idx = train_test_split(
            everything, test_size=0.2, stratify=keys, random_state=stream_seed(seed, "holdout")
        )
        splits = [(np.sort(train_idx), np.sort(val_idx))]
    else:
        if folds is None:
            folds = stratified_folds(dataset.labels, k, seed, assay_ids=dataset.assay_ids)
        folds = [np.sort(np.asarray(f, dtype=np.int64)) for f in folds]
        splits = [
            (np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i])), folds[i])
            for i in range(k)
        ]

    members: List[GnnModel] = []
    logs: List[pd.DataFrame] = []
    best_epochs: List[int] = []
    stop_epochs: List[int] = []
    for member, (train_idx, val_idx) in enumerate(splits):
        torch.manual_seed(stream_seed(seed, f"init-{member}"))
        model = _build_model(dataset.num_assays, config)
        result = train_model(model, dataset.subset(train_idx), dataset.subset(val_idx), weights,
                             config, seed=seed, member=member, progress=progress)
        members.append(result.model.eval())
        logs.append(result.log)
        best_epochs.append(result.best_epoch)
        stop_epochs.append(result.stop_epoch)
        logger.info("Member %d/%d trained: best epoch %d, stopped at %d",
                    member + 1, k, result.best_epoch, result.stop_epoch)

    ensemble = PredictorEnsemble(
        members=members,
        assay_ids=list(dataset.assay_ids),
        weights=weights,
        val_folds=[[int(i) for i in v] for _, v in splits],
        best_epochs=best_epochs,
        stop_epochs=stop_epochs,
    )
    return ensemble, pd.concat(logs, ignore_index=True)


def ensemble_predict(
    graphs: Union[chem.MolecularGraph, Sequence[chem.MolecularGraph]],
    ensemble: PredictorEnsemble,
) -> Tuple[np.ndarray, np.ndarray]:
    """Member-averaged probabilities and member-ordered concatenated latents."""
    single = isinstance(graphs, chem.MolecularGraph)
    probs, latents, _ = ensemble.predict([graphs] if single else list(graphs))
    return (probs[0], latents[0]) if single else (probs, latents)


def evaluate_ensemble(ensemble: PredictorEnsemble, dataset: AssayDataset) -> pd.DataFrame:
    """Per-member, member-mean and ensemble ROC AUC per assay on *dataset*."""
    probs, _, member_probs = ensemble.predict(dataset.graphs)
    rows = []
    for i in range(ensemble.k):
        row: Dict[str, Any] = {"model": f"member-{i}"}
        for j, assay in enumerate(ensemble.assay_ids):
            row[f"auc_{assay}"] = auc_or_nan(member_probs[i][:, j], dataset.labels[:, j])
        row["stop_epoch"] = ensemble.stop_epochs[i] if i < len(ensemble.stop_epochs) else np.nan
        rows.append(row)
    table = pd.DataFrame(rows)
    auc_cols = [f"auc_{a}" for a in ensemble.assay_ids]
    mean_row = {"model": "member-mean", **{c: float(np.nanmean(table[c])) if table[c].notna().any() else np.nan
                                             for c in auc_cols}, "stop_epoch": np.nan}
    ens_row: Dict[str, Any] = {"model": "ensemble", "stop_epoch": np.nan}
    for j, assay in enumerate(ensemble.assay_ids):
        ens_row[f"auc_{assay}"] = auc_or_nan(probs[:, j], dataset.labels[:, j])
    return pd.concat([table, pd.DataFrame([mean_row, ens_row])], ignore_index=True)
