"""
deen.py  ·  Energy model over the ensemble latent space
=======================================================

A smooth skip-connected MLP φ(y) trained by empirical-Bayes denoising: noisy
latents y = x + ε are mapped back through x̂ = y − σ²∇φ(y) and the squared
error to the clean x is minimised. The gradient ∇φ comes from
``diffcore.gradient`` and stays differentiable, so training runs through a
second-order path.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from tqdm.auto import tqdm

import diffcore
from diffcore import ShapeMismatch
from schemas import PipelineConfig
from utils import load_checkpoint, numpy_rng, save_checkpoint, stream_seed

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

DTYPE = torch.float64
BASE_WIDTHS = (3072, 2048, 1024)

EnergyFn = Union["EnergyNet", Callable[[torch.Tensor], torch.Tensor]]


class DeenError(ValueError):
    pass


class EmptyInput(DeenError):
    pass


class DegenerateRange(DeenError):
    pass


# ────────────────────────────────────────────────────────────────────────────
# NETWORK
# ────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class EnergyBounds:
    phi_min: float
    phi_max: float

    @property
    def beta0(self) -> float:
        return 1.0 / (self.phi_max - self.phi_min)

    def as_dict(self) -> Dict[str, float]:
        return {"phi_min": self.phi_min, "phi_max": self.phi_max, "beta0": self.beta0}


def scaled_widths(scale: float, base: Sequence[int] = BASE_WIDTHS) -> List[int]:
    return [max(1, int(round(w * scale))) for w in base]


class EnergyNet(nn.Module):
    """
    h1 = silu(W1 y); h_i = silu(W_i (h_{i-1} ⊕ h_{i-2})) with h_0 = y;
    φ = w·(h_last ⊕ h_prev) + b. Optional standardisation buffers map y to
    (y − mean)/std before the first layer.
    """

    def __init__(self, input_dim: int, widths: Sequence[int] = BASE_WIDTHS) -> None:
        super().__init__()
        if input_dim < 1 or not widths:
            raise DeenError("energy net needs a positive input width and at least one hidden layer")
        self.input_dim = int(input_dim)
        self.widths = [int(w) for w in widths]
        previous = [self.input_dim]
        layers = []
        for width in self.widths:
            fan_in = previous[-1] + (previous[-2] if len(previous) > 1 else 0)
            layers.append(nn.Linear(fan_in, width))
            previous.append(width)
        self.hidden = nn.ModuleList(layers)
        self.out = nn.Linear(previous[-1] + previous[-2], 1)
        self.register_buffer("shift", torch.zeros(self.input_dim, dtype=DTYPE))
        self.register_buffer("scale", torch.ones(self.input_dim, dtype=DTYPE))
        self.sigma: Optional[float] = None
        self.bounds: Optional[EnergyBounds] = None
        self.double()

    def set_standardization(self, latents: torch.Tensor) -> None:
        latents = torch.as_tensor(latents, dtype=DTYPE)
        std = latents.std(dim=0, unbiased=False)
        self.shift.copy_(latents.mean(dim=0))
        self.scale.copy_(torch.where(std > 0, std, torch.ones_like(std)))

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        single = y.dim() == 1
        if single:
            y = y.unsqueeze(0)
        h_prev, h = None, (y - self.shift) / self.scale
        for layer in self.hidden:
            z = h if h_prev is None else torch.cat([h, h_prev], dim=-1)
            h_prev, h = h, diffcore.silu(layer(z))
        phi = self.out(torch.cat([h, h_prev], dim=-1)).squeeze(-1)
        return phi[0] if single else phi

    def save(self, path: Path | str, config: Optional[Dict[str, Any]] = None) -> Path:
        metadata = {
            "kind": "energy_net",
            "input_dim": self.input_dim,
            "widths": self.widths,
            "sigma": self.sigma,
            "bounds": self.bounds.as_dict() if self.bounds else None,
            "config": dict(config or {}),
        }
        return save_checkpoint(path, self.state_dict(), metadata)

    @classmethod
    def load(cls, path: Path | str) -> "EnergyNet":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "energy_net":
            raise DeenError(f"{path} does not hold an energy net")
        net = cls(meta["input_dim"], meta["widths"])
        net.load_state_dict(tensors)
        net.sigma = meta.get("sigma")
        if meta.get("bounds"):
            net.bounds = EnergyBounds(meta["bounds"]["phi_min"], meta["bounds"]["phi_max"])
        return net.eval()


def _check_width(net: EnergyFn, y: torch.Tensor) -> None:
    width = getattr(net, "input_dim", None)
    if width is not None and y.shape[-1] != width:
        raise ShapeMismatch(f"energy net takes width {width}, got {y.shape[-1]}")


def _as_batch(y: Any) -> Tuple[torch.Tensor, bool]:
    y = torch.as_tensor(y, dtype=DTYPE)
    return (y.unsqueeze(0), True) if y.dim() == 1 else (y, False)


# ────────────────────────────────────────────────────────────────────────────
# NOISE, ENERGY, ESTIMATOR
# ────────────────────────────────────────────────────────────────────────────
def corrupt(
    latents: Any, sigma: float, m: int = 1, rng: Optional[np.random.Generator] = None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """(clean, noisy) with every latent repeated m times and noisy = clean + N(0, σ²I)."""
    if sigma < 0 or m < 1:
        raise DeenError(f"need sigma >= 0 and m >= 1, got sigma={sigma}, m={m}")
    clean = np.repeat(np.asarray(latents, dtype=np.float64), m, axis=0)
    rng = rng or np.random.default_rng(0)
    noise = rng.standard_normal(clean.shape) * sigma
    return torch.as_tensor(clean), torch.as_tensor(clean + noise)


def energy(net: EnergyFn, y: Any) -> torch.Tensor:
    """φ(y): a 0-d tensor for one vector, shape (B,) for a batch."""
    batch, single = _as_batch(y)
    _check_width(net, batch)
    with torch.no_grad():
        phi = net(batch)
    return phi[0] if single else phi


def _energy_graph(net: EnergyFn) -> diffcore.ExpressionGraph:
    # rows are independent, so d(Σφ)/dy holds every row's own gradient
    return diffcore.ExpressionGraph(diffcore.sum_(diffcore.call(net, diffcore.leaf("y"), label="energy")))


def energy_gradient(net: EnergyFn, y: Any) -> torch.Tensor:
    """∇φ at each row of y; differentiable with respect to the net's parameters."""
    batch, single = _as_batch(y)
    _check_width(net, batch)
    grad = diffcore.evaluate(diffcore.gradient(_energy_graph(net), "y"), {"y": batch})
    return grad[0] if single else grad


def score(net: EnergyFn, y: Any) -> torch.Tensor:
    """−∇φ(y), pointing towards higher data density."""
    return -energy_gradient(net, y).detach()


def bayes_estimate(net: EnergyFn, y: Any, sigma: float, keep_graph: bool = False) -> torch.Tensor:
    """x̂ = y − σ²∇φ(y)."""
    if sigma < 0:
        raise DeenError(f"sigma must be >= 0, got {sigma}")
    y = torch.as_tensor(y, dtype=DTYPE)
    estimate = y - sigma ** 2 * energy_gradient(net, y)
    return estimate if keep_graph else estimate.detach()


def deen_loss(net: EnergyFn, pairs: Tuple[Any, Any], sigma: float) -> torch.Tensor:
    """Mean over pairs of ‖x − x̂(y)‖²; differentiable in the net's parameters."""
    clean, noisy = (torch.as_tensor(p, dtype=DTYPE) for p in pairs)
    if clean.shape != noisy.shape:
        raise ShapeMismatch(f"clean {tuple(clean.shape)} vs noisy {tuple(noisy.shape)}")
    if clean.shape[0] == 0:
        raise EmptyInput("no pairs")
    estimate = bayes_estimate(net, noisy, sigma, keep_graph=True)
    return ((clean - estimate) ** 2).sum(dim=-1).mean()


# ────────────────────────────────────────────────────────────────────────────
# TRAINING
# ────────────────────────────────────────────────────────────────────────────
def _chunked_loss(net: EnergyNet, clean: torch.Tensor, noisy: torch.Tensor, sigma: float, chunk: int) -> float:
    total = 0.0
    for start in range(0, clean.shape[0], chunk):
        part = slice(start, start + chunk)
        total += float(deen_loss(net, (clean[part], noisy[part]), sigma).detach()) * clean[part].shape[0]
    return total / clean.shape[0]


def train_deen(
    latents: Any,
    config: Optional[PipelineConfig] = None,
    seed: int = 0,
    test_latents: Any = None,
    progress: bool = True,
) -> Tuple[EnergyNet, pd.DataFrame]:
    """
    Adam over a fixed number of epochs with fresh noise every epoch; the last
    epoch's parameters are kept. The log has one row per epoch with the train
    loss and, when *test_latents* is given, the loss on a fixed noisy copy of it.
    """
    config = config or PipelineConfig()
    latents = torch.as_tensor(np.asarray(latents, dtype=np.float64))
    if latents.dim() != 2 or latents.shape[0] == 0:
        raise EmptyInput("energy model needs a non-empty (n, d) latent matrix")
    sigma = config.deen_sigma

    torch.manual_seed(stream_seed(seed, "init-deen"))
    net = EnergyNet(latents.shape[1], scaled_widths(config.deen_width_scale))
    if config.deen_standardize:
        net.set_standardization(latents)
    net.sigma = sigma

    noise_rng = numpy_rng(seed, "noise")
    shuffle = numpy_rng(seed, "shuffle-deen")
    test_pairs = None
    if test_latents is not None and len(test_latents):
        test_pairs = corrupt(test_latents, sigma, rng=numpy_rng(seed, "noise-test"))

    optimizer = torch.optim.Adam(net.parameters(), lr=config.deen_lr)
    rows = []
    for epoch in tqdm(range(1, config.deen_epochs + 1), desc="energy model", disable=not progress):
        clean, noisy = corrupt(latents, sigma, rng=noise_rng)
        order = torch.as_tensor(shuffle.permutation(clean.shape[0]))
        total = 0.0
        for start in range(0, len(order), config.deen_batch_size):
            idx = order[start:start + config.deen_batch_size]
            loss = deen_loss(net, (clean[idx], noisy[idx]), sigma)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
        row = {"epoch": epoch, "train_loss": total / len(order), "test_loss": float("nan")}
        if test_pairs is not None:
            row["test_loss"] = _chunked_loss(net, *test_pairs, sigma, config.deen_batch_size)
        rows.append(row)

    log = pd.DataFrame(rows)
    logger.info("Energy model trained: %d epochs, final train loss %.5f, test loss %.5f",
                len(rows), log["train_loss"].iloc[-1], log["test_loss"].iloc[-1])
    return net.eval(), log


def energy_bounds(net: EnergyFn, reference: Any) -> EnergyBounds:
    """φ_min / φ_max over the reference latents and β₀ = 1/(φ_max − φ_min)."""
    reference = torch.as_tensor(np.asarray(reference, dtype=np.float64))
    if reference.dim() != 2 or reference.shape[0] == 0:
        raise EmptyInput("energy bounds need at least one reference latent")
    values = energy(net, reference)
    phi_min, phi_max = float(values.min()), float(values.max())
    if not phi_max > phi_min:
        raise DegenerateRange(f"all {reference.shape[0]} reference energies equal {phi_min}")
    return EnergyBounds(phi_min, phi_max)


def energy_histogram(values: Sequence[float], edges: np.ndarray, series: str) -> pd.DataFrame:
    """One histogram series on shared bin edges, in the energy_hist.csv layout."""
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    counts, _ = np.histogram(values, bins=edges)
    return pd.DataFrame({
        "bin_left": edges[:-1],
        "bin_right": edges[1:],
        "count": counts.astype(int),
        "series": series,
    })


def histogram_edges(series: Sequence[Sequence[float]], bins: int) -> np.ndarray:
    pooled = np.concatenate([np.asarray(s, dtype=np.float64) for s in series if len(s)] or [np.zeros(1)])
    pooled = pooled[np.isfinite(pooled)]
    lo, hi = (float(pooled.min()), float(pooled.max())) if pooled.size else (0.0, 1.0)
    if math.isclose(lo, hi):
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)
