"""
utils.py  ·  Shared helpers for every stage
==========================================

Configuration loading, named random streams, the checkpoint container and a
few table helpers. Nothing here trains or searches; importing it has no side
effects beyond defining loggers.
"""
from __future__ import annotations

import logging
import os
import zlib
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from dotenv import dotenv_values

from schemas import PipelineConfig

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

ENV_PREFIX = "MOLSEARCH_"
CHECKPOINT_FORMAT_VERSION = 1
LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, foreign or of an unknown version."""


# ────────────────────────────────────────────────────────────────────────────
# LOGGING
# ────────────────────────────────────────────────────────────────────────────
def configure_logging(level: int = logging.INFO) -> None:
    """Install a single stream handler on the root logger (CLI only)."""
    root = logging.getLogger()
    if not any(getattr(h, "_molsearch", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._molsearch = True  # type: ignore[attr-defined]
        root.addHandler(handler)
    root.setLevel(level)


# ────────────────────────────────────────────────────────────────────────────
# CONFIGURATION
# ────────────────────────────────────────────────────────────────────────────
def load_config(
    path: Path | str | None = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> PipelineConfig:
    """
    Build a PipelineConfig from (lowest to highest precedence) the model
    defaults, a flat KEY=value file, ``MOLSEARCH_*`` environment variables and
    explicit overrides. ``None`` overrides are ignored.
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        for key, value in dotenv_values(path).items():
            if value is not None:
                values[key.strip().lower()] = value

    for key, value in os.environ.items():
        if key.startswith(ENV_PREFIX):
            values[key[len(ENV_PREFIX):].lower()] = value

    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value

    config = PipelineConfig.model_validate(values)
    logger.info("Loaded config (seed=%s, out_dir=%s)", config.seed, config.out_dir)
    return config


# ────────────────────────────────────────────────────────────────────────────
# NAMED RANDOM STREAMS
# ────────────────────────────────────────────────────────────────────────────
def _seed_sequence(master: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=(zlib.crc32(name.encode("utf-8")),))


def stream_seed(master: int, name: str) -> int:
    """A 32-bit seed for the sub-stream *name* of the master seed."""
    return int(_seed_sequence(master, name).generate_state(1, dtype=np.uint32)[0])


def numpy_rng(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(_seed_sequence(master, name))


def torch_generator(master: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(stream_seed(master, name))
    return gen


# ────────────────────────────────────────────────────────────────────────────
# CHECKPOINT CONTAINER
# ────────────────────────────────────────────────────────────────────────────
def save_checkpoint(
    path: Path | str,
    tensors: Mapping[str, torch.Tensor],
    metadata: Mapping[str, Any],
) -> Path:
    """
    Write named tensors plus metadata. Tensors are detached, made contiguous and
    stored in sorted-name order so that save → load → save is byte-stable.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "metadata": dict(metadata),
        "tensors": {
            name: tensors[name].detach().cpu().contiguous().clone()
            for name in sorted(tensors)
        },
    }
    torch.save(payload, path)
    logger.info("Saved checkpoint %s (%d tensors)", path, len(payload["tensors"]))
    return path


def load_checkpoint(path: Path | str) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "tensors" not in payload:
        raise CheckpointError(f"{path} is not a named-tensor checkpoint")
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {version!r}")
    return dict(payload["tensors"]), dict(payload.get("metadata", {}))


# ────────────────────────────────────────────────────────────────────────────
# TABLES
# ────────────────────────────────────────────────────────────────────────────
def write_frame(df: pd.DataFrame, path: Path | str) -> Path:
    """CSV writer used for every report so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, lineterminator="\n")
    return path


def format_table(df: pd.DataFrame, digits: int = 3) -> str:
    """
    Render a report table compactly for the terminal.

    Parameters
    ----------
    df : pd.DataFrame
        Any report frame (AUC table, ranked results, ...).
    digits : int
        Decimal places for float columns.
    """
    if df.empty:
        return "(empty)"
    shown = df.copy()
    for col in shown.columns:
        if pd.api.types.is_float_dtype(shown[col]):
            shown[col] = shown[col].round(digits)
    return shown.to_string(index=False)
