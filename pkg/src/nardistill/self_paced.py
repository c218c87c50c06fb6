"""Per-sample self-paced weights: ``w_i = softmax_i(lambda_i)`` over the batch.

The proposed strategy sets ``lambda_i = exp(-loss_i)`` so that easy samples get
larger weights; ``LOSS`` and ``LOG_LOSS`` are the hard-focused ablations.
Weights are computed from detached losses and act as constants in backprop.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Tensor

LOG_FLOOR = 1e-8


class SpStrategy(str, Enum):
    NONE = "NONE"
    INV_PPL = "INV_PPL"
    LOSS = "LOSS"
    LOG_LOSS = "LOG_LOSS"


@dataclass
class SampleWeightReport:
    loss: float
    lam: float
    weight: float
    batch_id: int = 0
    sample_id: int = -1


def compute_lambda(loss: float, strategy: SpStrategy | str) -> float:
    strategy = SpStrategy(strategy)
    if not math.isfinite(loss):
        raise ValueError(f"non-finite sample loss {loss}")
    if strategy is SpStrategy.INV_PPL:
        return math.exp(-loss)
    if strategy is SpStrategy.LOSS:
        return loss
    if strategy is SpStrategy.LOG_LOSS:
        if loss <= 0:
            warnings.warn(f"LOG_LOSS lambda with loss={loss} <= 0; clamping to log({LOG_FLOOR})",
                          RuntimeWarning, stacklevel=2)
            return math.log(LOG_FLOOR)
        return math.log(loss)
    return 0.0


def lambdas(losses: Sequence[float] | np.ndarray, strategy: SpStrategy | str) -> np.ndarray:
    return np.array([compute_lambda(float(x), strategy) for x in np.asarray(losses).reshape(-1)])


def softmax_weights(lams: np.ndarray) -> np.ndarray:
    lams = np.asarray(lams, dtype=np.float64)
    e = np.exp(lams - lams.max())
    return e / e.sum()


def batch_weights(lams: Sequence[float], losses: Sequence[float] | None = None,
                  batch_id: int = 0, sample_ids: Sequence[int] | None = None) -> list[SampleWeightReport]:
    if len(lams) == 0:
        raise ValueError("batch_weights needs at least one sample")
    w = softmax_weights(np.asarray(lams))
    losses = [float("nan")] * len(w) if losses is None else losses
    ids = range(len(w)) if sample_ids is None else sample_ids
    return [SampleWeightReport(float(l), float(lam), float(wi), batch_id, int(i))
            for l, lam, wi, i in zip(losses, lams, w, ids)]


def sp_weights(losses, strategy: SpStrategy | str) -> np.ndarray:
    """Normalised weights for a batch of per-sample losses (uniform under NONE)."""
    values = np.asarray(losses.data if isinstance(losses, Tensor) else losses, dtype=np.float64)
    if SpStrategy(strategy) is SpStrategy.NONE:
        return np.full(values.shape, 1.0 / values.size)
    return softmax_weights(lambdas(values, strategy))


def sp_weighted_loss(per_sample_losses, strategy: SpStrategy | str):
    """``sum_i w_i * loss_i``; the plain mean under ``NONE``.

    Accepts a ``Tensor`` (gradient flows through the losses, not the weights)
    or any array-like, in which case a float comes back.
    """
    if SpStrategy(strategy) is SpStrategy.NONE:
        if isinstance(per_sample_losses, Tensor):
            return per_sample_losses.mean()
        return float(np.mean(per_sample_losses))
    w = sp_weights(per_sample_losses, strategy)
    if isinstance(per_sample_losses, Tensor):
        return (per_sample_losses * w.astype(per_sample_losses.data.dtype)).sum()
    return float(np.dot(w, np.asarray(per_sample_losses, dtype=np.float64)))


def write_weight_report(path: str | Path, step: int, rows: Sequence[SampleWeightReport]):
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "sample_id", "loss", "lambda", "weight"])
        for r in rows:
            writer.writerow([step, r.sample_id, f"{r.loss:.6f}", f"{r.lam:.6f}", f"{r.weight:.6f}"])
