"""Training loop plumbing: thread limits, one optimiser step, step-addressable
batch streams, JSONL logging and periodic checkpoints.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import save_checkpoint
from .data import Batch, Example, Vocab, collate
from .distill import LossBundle
from .model import BangModel
from .self_paced import write_weight_report
from .tensor import Adam, NumericError, Tape

log = logging.getLogger(__name__)

THREADS_ENV = "NAR_DISTILL_THREADS"


def thread_count(deterministic: bool = True) -> int:
    """Worker count: 1 in deterministic mode, else ``$NAR_DISTILL_THREADS`` (default 1)."""
    if deterministic:
        return 1
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def configure_threads(deterministic: bool = True):
    """Cap BLAS worker threads; returns the limiter so callers may restore it."""
    return threadpool_limits(limits=thread_count(deterministic))


def optimizer_step(optimizer: Adam, loss_fn: Callable[[], LossBundle]) -> LossBundle:
    """Build the loss on a fresh tape, backpropagate, then update parameters.

    A non-finite loss aborts before any parameter changes.
    """
    optimizer.zero_grad()
    with Tape() as tape:
        bundle = loss_fn()
    value = bundle.total.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}; components {bundle.scalars()}")
    tape.backward(bundle.total)
    optimizer.step()
    return bundle


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 32
    lr: float = 4e-4
    seed: int = 0
    log_every: int = 10
    ckpt_every: int = 0            # 0: checkpoint only at the end
    deterministic: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


class ExampleStream:
    """Endless shuffled batches; batch ``step`` depends only on ``(seed, step)``."""

    def __init__(self, examples: Sequence[Example], batch_size: int, seed: int = 0,
                 pad_id: int = 0, eos_id: int = 2):
        if not examples:
            raise ValueError("no training examples")
        self.examples = list(examples)
        self.batch_size = min(batch_size, len(self.examples))
        self.seed = seed
        self.pad_id, self.eos_id = pad_id, eos_id
        self.per_epoch = len(self.examples) // self.batch_size
        self._order_cache: tuple[int, np.ndarray] | None = None

    def _order(self, epoch: int) -> np.ndarray:
        if self._order_cache is None or self._order_cache[0] != epoch:
            order = np.arange(len(self.examples))
            np.random.default_rng([self.seed, epoch]).shuffle(order)
            self._order_cache = (epoch, order)
        return self._order_cache[1]

    def batch(self, step: int) -> Batch:
        epoch, pos = divmod(step, self.per_epoch)
        idx = self._order(epoch)[pos * self.batch_size:(pos + 1) * self.batch_size]
        return collate([self.examples[i] for i in idx], self.pad_id, self.eos_id, idx)


def train(model: BangModel, loss_fn: Callable[[Batch, int], LossBundle], stream, cfg: TrainConfig,
          out_dir: str | Path | None = None, vocab: Vocab | None = None, optimizer: Adam | None = None,
          start_step: int = 0, record: Callable[[int, LossBundle], dict] | None = None,
          extra: dict | None = None) -> list[float]:
    """Run ``cfg.steps`` updates (counting from ``start_step``); returns the loss trajectory.

    With ``out_dir`` set, writes ``log.jsonl``, a self-paced ``weights.csv``
    when weights are produced, and a checkpoint under ``out_dir/checkpoint``.
    """
    optimizer = optimizer or Adam(model.parameters(), lr=cfg.lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history = []
    with configure_threads(cfg.deterministic):
        for step in range(start_step, cfg.steps):
            batch = stream.batch(step)
            bundle = optimizer_step(optimizer, lambda: loss_fn(batch, step))
            value = bundle.total.item()
            history.append(value)
            if out is None:
                continue
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                rec = record(step, bundle) if record else {"step": step, **bundle.scalars()}
                with open(out / "log.jsonl", "a") as fh:
                    fh.write(json.dumps(rec) + "\n")
                if bundle.weights:
                    write_weight_report(out / "weights.csv", step, bundle.weights)
            if cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0 and step + 1 < cfg.steps:
                save_checkpoint(out / "checkpoint", model, vocab, optimizer.state, step + 1, extra)
    if out is not None:
        save_checkpoint(out / "checkpoint", model, vocab, optimizer.state, cfg.steps, extra)
    return history
