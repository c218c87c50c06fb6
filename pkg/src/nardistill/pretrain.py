"""Span-masking pre-training in which the AR stream teaches every other stream
through detached soft targets, plus the shared-parameter AR/NAR
self-distillation finetuning schedule.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .data import Batch, Example, Vocab, collate
from .distill import (DistillMode, LossBundle, encode_batch, per_sample_kl, per_sample_nll,
                      student_nar_log_probs)
from .errors import ConfigError, DataError
from .model import BangModel
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class SpanMaskSpec:
    span_fraction: float = 0.3
    min_span: int = 1
    max_span: int = 8
    seed: int = 0

    def validate(self):
        if not 0 < self.span_fraction < 1:
            raise ConfigError(f"span_fraction must lie in (0, 1), got {self.span_fraction}")
        if not 1 <= self.min_span <= self.max_span:
            raise ConfigError(f"need 1 <= min_span <= max_span, got {self.min_span}, {self.max_span}")

    def to_dict(self) -> dict:
        return asdict(self)


def mask_spans(article: Sequence[int], spec: SpanMaskSpec, rng: np.random.Generator,
               mask_id: int = 3) -> tuple[list[int], list[int]] | None:
    """Replace one contiguous span with mask tokens; the span becomes the target.

    The span length is drawn uniformly from ``[0.5, 1.5] * span_fraction * n``
    (stochastically rounded, so its mean is ``span_fraction * n``) and clipped
    to ``[min_span, min(max_span, n - 2)]``. Returns ``None`` for articles
    shorter than ``min_span + 2``.
    """
    n = len(article)
    if n < spec.min_span + 2:
        return None
    target = rng.uniform(0.5, 1.5) * spec.span_fraction * n
    length = int(math.floor(target))
    if rng.random() < target - length:
        length += 1
    length = int(np.clip(length, spec.min_span, min(spec.max_span, n - 2)))
    start = int(rng.integers(0, n - length + 1))
    noised = list(article)
    noised[start:start + length] = [mask_id] * length
    return noised, list(article[start:start + length])


def make_batch(noised_articles: Sequence[Sequence[int]], spans: Sequence[Sequence[int]],
               pad_id: int = 0, eos_id: int = 2, index: Sequence[int] | None = None) -> Batch:
    """Pad noised sources and span targets (EOS appended) into one batch."""
    if len(noised_articles) != len(spans):
        raise ValueError(f"{len(noised_articles)} articles but {len(spans)} spans")
    examples = [Example(list(a), list(s)) for a, s in zip(noised_articles, spans)]
    return collate(examples, pad_id, eos_id, index)


def split_streams(stream_log_probs: dict) -> tuple[Tensor, ...]:
    """Order per-stream outputs as ``(y1, y2, ..., yn)``; ``y1`` is the AR stream."""
    return tuple(stream_log_probs[s] for s in sorted(stream_log_probs))


def soft_target_log(targets: np.ndarray, ar_log_probs: np.ndarray, alpha: float) -> np.ndarray:
    """``log(alpha * onehot(targets) + (1 - alpha) * exp(ar_log_probs))``; may hold ``-inf``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    vocab = ar_log_probs.shape[-1]
    onehot = np.zeros(ar_log_probs.shape, dtype=np.float64)
    np.put_along_axis(onehot, np.clip(targets, 0, vocab - 1)[..., None], 1.0, axis=-1)
    soft = alpha * onehot + (1.0 - alpha) * np.exp(ar_log_probs.astype(np.float64))
    with np.errstate(divide="ignore"):
        return np.log(soft).astype(ar_log_probs.dtype)


def pretrain_loss(model: BangModel, batch: Batch, alpha: float = 0.5,
                  target_model: BangModel | None = None) -> LossBundle:
    """Mean of ``[NLL(y, y1), KL(y_soft || y2), ..., KL(y_soft || yn)]``.

    ``y_soft`` mixes the gold one-hot with the detached AR-stream distribution.
    ``target_model`` (default: ``model`` itself) supplies that AR distribution,
    which lets tests swap in a frozen copy.
    """
    cfg = model.config
    if cfg.n_streams < 2:
        raise ConfigError("self-distillation pre-training needs n_streams >= 2")
    pad = cfg.pad_id
    enc = encode_batch(model, batch)
    y = split_streams(model.stream_log_probs(enc, batch.tgt))
    if target_model is None:
        ar = y[0].data
    else:
        # same fused layout as the model pass, so identical weights give identical values
        with no_grad():
            ar = split_streams(target_model.stream_log_probs(encode_batch(target_model, batch),
                                                             batch.tgt))[0].data
    log_soft = soft_target_log(batch.tgt, ar, alpha)
    terms = [per_sample_nll(y[0], batch.tgt, pad)]
    terms += [per_sample_kl(log_soft, ys, batch.tgt, pad) for ys in y[1:]]
    means = [t.mean() for t in terms]
    total = means[0]
    for m in means[1:]:
        total = total + m
    total = total * (1.0 / len(means))
    streams = {s + 1: m.item() for s, m in enumerate(means)}
    return LossBundle(total, DistillMode.NONE, 0.0, bang=total, stream_losses=streams)


def progress_record(step: int, bundle: LossBundle) -> dict:
    rec = {"step": step, "nll_s1": bundle.stream_losses[1]}
    for s in sorted(bundle.stream_losses):
        if s > 1:
            rec[f"kl_s{s}"] = bundle.stream_losses[s]
    rec["total"] = bundle.total.item()
    return rec


def pretrain_step(model: BangModel, optimizer, batch: Batch, alpha: float = 0.5) -> LossBundle:
    """One optimiser update on the self-distillation pre-training loss."""
    from .train import optimizer_step
    return optimizer_step(optimizer, lambda: pretrain_loss(model, batch, alpha))


# shared-parameter AR/NAR finetuning

class SelfDistillMode(str, Enum):
    HARD = "HARD"
    SOFT_SELF = "SOFT_SELF"


def flow_for_batch(batch_idx: int) -> str:
    """Even batches train the AR flow, odd batches the NAR flow."""
    return "AR" if batch_idx % 2 == 0 else "NAR"


def nar_selfdistill_term(model: BangModel, batch: Batch, mode: SelfDistillMode | str,
                         ar_log_probs: np.ndarray | None = None) -> Tensor:
    """Per-sample NAR-flow losses: gold NLL (HARD) or KL to detached AR outputs (SOFT_SELF)."""
    mode = SelfDistillMode(mode)
    pad = model.config.pad_id
    enc = encode_batch(model, batch)
    lq = student_nar_log_probs(model, enc, batch.tgt.shape[1])
    if mode is SelfDistillMode.HARD:
        return per_sample_nll(lq, batch.tgt, pad)
    if ar_log_probs is None:
        with no_grad():
            ar_log_probs = model.stream_log_probs(enc, batch.tgt, streams=(1,))[1].data
    return per_sample_kl(ar_log_probs, lq, batch.tgt, pad)


def shared_selfdistill_loss(model: BangModel, batch: Batch, batch_idx: int,
                            mode: SelfDistillMode | str = SelfDistillMode.HARD) -> LossBundle:
    if flow_for_batch(batch_idx) == "AR":
        lp = model.stream_log_probs(encode_batch(model, batch), batch.tgt, streams=(1,))[1]
        per = per_sample_nll(lp, batch.tgt, model.config.pad_id)
        total = per.mean()
        return LossBundle(total, bang=total, stream_losses={1: total.item()})
    per = nar_selfdistill_term(model, batch, mode)
    total = per.mean()
    return LossBundle(total, distill=total, per_sample_distill=per.data.copy())


def shared_selfdistill_finetune_step(model: BangModel, optimizer, batch: Batch, batch_idx: int,
                                     mode: SelfDistillMode | str = SelfDistillMode.HARD) -> LossBundle:
    from .train import optimizer_step
    return optimizer_step(optimizer, lambda: shared_selfdistill_loss(model, batch, batch_idx, mode))


# toy corpus and batch stream

def read_documents(path: str | Path) -> list[str]:
    """Plain UTF-8 text, one document per line; blank lines are skipped."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"cannot read pre-training corpus {path}: {e}") from e
    docs = [line.strip() for line in text.splitlines() if line.strip()]
    if not docs:
        raise DataError(f"pre-training corpus {path} has no documents")
    return docs


def toy_documents(n_docs: int, words: Sequence[str], seed: int = 0, n_items: int = 4,
                  min_phrases: int = 3, max_phrases: int = 5) -> list[str]:
    """Documents made of short phrases, each followed by its copy or reversal."""
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        toks = []
        for _ in range(int(rng.integers(min_phrases, max_phrases + 1))):
            phrase = [words[i] for i in rng.choice(len(words), size=n_items, replace=False)]
            echo = phrase if rng.random() < 0.5 else phrase[::-1]
            toks += phrase + echo
        docs.append(" ".join(toks))
    return docs


class PretrainStream:
    """Endless batches of span-masked documents, addressable by step.

    Epoch ``e`` visits the documents in the order given by ``(seed, e)``;
    each document's span depends only on ``(seed, e, doc index)``, so a
    resumed run sees exactly the batches an unbroken run would.
    """

    def __init__(self, docs: Sequence[Sequence[int]], spec: SpanMaskSpec, batch_size: int,
                 max_src_len: int, pad_id: int = 0, eos_id: int = 2, mask_id: int = 3):
        spec.validate()
        self.spec = spec
        self.batch_size = batch_size
        self.pad_id, self.eos_id, self.mask_id = pad_id, eos_id, mask_id
        docs = [list(d[:max_src_len]) for d in docs]
        self.skipped = sum(len(d) < spec.min_span + 2 for d in docs)
        self.docs = [d for d in docs if len(d) >= spec.min_span + 2]
        if self.skipped:
            log.warning("skipped %d documents shorter than %d tokens", self.skipped, spec.min_span + 2)
        if len(self.docs) < batch_size:
            raise DataError(f"only {len(self.docs)} usable documents for batch size {batch_size}")
        self.per_epoch = len(self.docs) // batch_size

    def batch(self, step: int) -> Batch:
        epoch, pos = divmod(step, self.per_epoch)
        order = np.arange(len(self.docs))
        np.random.default_rng([self.spec.seed, epoch]).shuffle(order)
        idx = order[pos * self.batch_size:(pos + 1) * self.batch_size]
        noised, spans = [], []
        for i in idx:
            rng = np.random.default_rng([self.spec.seed, epoch, int(i)])
            a, s = mask_spans(self.docs[i], self.spec, rng, self.mask_id)
            noised.append(a)
            spans.append(s)
        return make_batch(noised, spans, self.pad_id, self.eos_id, idx)

    def __iter__(self) -> Iterator[Batch]:
        step = 0
        while True:
            yield self.batch(step)
            step += 1


def encode_documents(docs: Sequence[str], vocab: Vocab) -> list[list[int]]:
    return [vocab.tokenize(d) for d in docs]


def masked_fraction(docs: Sequence[Sequence[int]], spec: SpanMaskSpec, seed: int = 0) -> float:
    """Mean fraction of tokens masked over ``docs`` (one span each)."""
    rng = np.random.default_rng(seed)
    fracs = []
    for d in docs:
        out = mask_spans(d, spec, rng)
        if out is not None:
            fracs.append(len(out[1]) / len(d))
    return float(np.mean(fracs))

