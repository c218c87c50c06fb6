"""Training objectives: multi-stream NLL, sequence (hard) distillation,
teacher-forcing and mixed soft distillation, and their weighted combination.

Reduction: every per-stream / per-distill value is a mean over the non-pad
positions of a sample, then a mean over streams, then over the batch (or a
self-paced weighted sum over the batch).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .data import Batch
from .errors import ConfigError
from .model import NAR, BangModel, EncoderOutput
from .self_paced import SampleWeightReport, SpStrategy, batch_weights, lambdas, sp_weighted_loss
from .tensor import Tensor, kl_divergence, log_softmax, no_grad, token_nll


class DistillMode(str, Enum):
    NONE = "NONE"
    SEQ_HARD = "SEQ_HARD"     # BS-Hard-Distill
    TF_SOFT = "TF_SOFT"       # TF-Distill
    BS_SOFT = "BS_SOFT"       # BS-Distill (mixed)


@dataclass
class LossBundle:
    total: Tensor
    mode: DistillMode = DistillMode.NONE
    gamma: float = 0.0
    bang: Tensor | None = None
    distill: Tensor | None = None
    per_sample_bang: np.ndarray | None = None
    per_sample_distill: np.ndarray | None = None
    stream_losses: dict = field(default_factory=dict)
    weights: list[SampleWeightReport] | None = None

    def scalars(self) -> dict:
        out = {"total": self.total.item()}
        if self.bang is not None:
            out["bang"] = self.bang.item()
        if self.distill is not None:
            out["distill"] = self.distill.item()
        for s, v in self.stream_losses.items():
            out["stream_nar" if s == NAR else f"stream_{s}"] = v
        return out


def _mask(targets: np.ndarray, pad_id: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    keep = (targets != pad_id).astype(dtype)
    counts = keep.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("target row with no non-pad positions")
    return keep, counts


def fit_targets(model: BangModel, targets: np.ndarray) -> np.ndarray:
    """Targets cut to the model's ``max_tgt_len`` (the decoder truncates likewise)."""
    return targets[:, :model.config.max_tgt_len]


def per_sample_mean(values: Tensor, targets: np.ndarray, pad_id: int) -> Tensor:
    """Mean of ``values [B, T]`` over each row's non-pad positions -> ``[B]``."""
    keep, counts = _mask(targets, pad_id, values.data.dtype)
    return (values * keep).sum(axis=1) * (1.0 / counts)


def per_sample_nll(log_p: Tensor, targets: np.ndarray, pad_id: int) -> Tensor:
    safe = np.where(targets == pad_id, 0, targets)
    return per_sample_mean(token_nll(log_p, safe), targets, pad_id)


def per_sample_kl(teacher_log_p: np.ndarray, student_log_q: Tensor, targets: np.ndarray,
                  pad_id: int) -> Tensor:
    return per_sample_mean(kl_divergence(teacher_log_p, student_log_q), targets, pad_id)


def encode_batch(model: BangModel, batch: Batch) -> EncoderOutput:
    return model.encode(batch.src, batch.src_pad_mask)


def teacher_log_probs(teacher: BangModel, batch: Batch, targets: np.ndarray) -> np.ndarray:
    """Frozen teacher's AR next-token log-distributions along ``targets`` prefixes."""
    with no_grad():
        enc = encode_batch(teacher, batch)
        return teacher.stream_log_probs(enc, targets, streams=(1,))[1].data


def student_nar_log_probs(student: BangModel, enc: EncoderOutput, length: int) -> Tensor:
    return log_softmax(student.forward_nar(enc, length).logits)


def loss_bang(student: BangModel, batch: Batch, enc: EncoderOutput | None = None,
              sp: SpStrategy | str = SpStrategy.NONE) -> LossBundle:
    """Mean over streams ``1..n`` of the gold-target NLL.

    With a self-paced strategy the last stream's batch term (the NAR stream
    whenever ``n_streams`` covers the target length) becomes the weighted sum.
    """
    if batch.size == 0:
        raise ValueError("empty batch")
    cfg = student.config
    enc = enc or encode_batch(student, batch)
    streams = tuple(range(1, cfg.n_streams + 1))
    tgt = fit_targets(student, batch.tgt)
    lps = student.stream_log_probs(enc, tgt, streams)
    per_stream = {s: per_sample_nll(lps[s], tgt, cfg.pad_id) for s in streams}
    sp = SpStrategy(sp)
    weights = None
    terms = []
    for s in streams:
        if s == streams[-1] and sp is not SpStrategy.NONE:
            values = per_stream[s].data
            lam = lambdas(values, sp)
            weights = batch_weights(lam, values, sample_ids=batch.index)
            terms.append(sp_weighted_loss(per_stream[s], sp))
        else:
            terms.append(per_stream[s].mean())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    total = total * (1.0 / len(terms))
    per_sample = per_stream[streams[0]]
    for s in streams[1:]:
        per_sample = per_sample + per_stream[s]
    per_sample = per_sample * (1.0 / len(streams))
    return LossBundle(total, DistillMode.NONE, 0.0, bang=total,
                      per_sample_bang=per_sample.data.copy(),
                      stream_losses={s: float(per_stream[s].data.mean()) for s in streams},
                      weights=weights)


def loss_ar(model: BangModel, batch: Batch) -> LossBundle:
    """Stream-1 (left-to-right) NLL on gold targets; the teacher objective."""
    enc = encode_batch(model, batch)
    tgt = fit_targets(model, batch.tgt)
    lp = model.stream_log_probs(enc, tgt, streams=(1,))[1]
    per_sample = per_sample_nll(lp, tgt, model.config.pad_id)
    total = per_sample.mean()
    return LossBundle(total, DistillMode.NONE, 0.0, bang=total,
                      per_sample_bang=per_sample.data.copy(),
                      stream_losses={1: total.item()})


def _require_bs(batch: Batch):
    if batch.tgt_bs is None:
        raise ConfigError("batch has no distilled targets (bs_target); run distill-corpus first")


def _check_vocab(student: BangModel, teacher: BangModel):
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ConfigError(f"teacher vocab {teacher.config.vocab_size} != "
                          f"student vocab {student.config.vocab_size}")


def distill_per_sample(student: BangModel, teacher: BangModel | None, batch: Batch,
                       mode: DistillMode | str, enc: EncoderOutput | None = None) -> Tensor:
    """Per-sample distillation losses ``[B]`` for the student's NAR stream."""
    mode = DistillMode(mode)
    pad = student.config.pad_id
    enc = enc or encode_batch(student, batch)
    if mode is DistillMode.SEQ_HARD:
        _require_bs(batch)
        tgt_bs = fit_targets(student, batch.tgt_bs)
        lq = student_nar_log_probs(student, enc, tgt_bs.shape[1])
        return per_sample_nll(lq, tgt_bs, pad)
    if mode in (DistillMode.TF_SOFT, DistillMode.BS_SOFT):
        if teacher is None:
            raise ConfigError(f"{mode.value} needs a teacher model")
        _check_vocab(student, teacher)
        if mode is DistillMode.BS_SOFT:
            _require_bs(batch)
            targets = fit_targets(student, batch.tgt_bs)
        else:
            targets = fit_targets(student, batch.tgt)
        lp = teacher_log_probs(teacher, batch, targets)
        lq = student_nar_log_probs(student, enc, targets.shape[1])
        return per_sample_kl(lp, lq, targets, pad)
    raise ConfigError(f"no distillation term for mode {mode.value}")


def loss_seq_hard_distill(student: BangModel, batch: Batch) -> Tensor:
    return distill_per_sample(student, None, batch, DistillMode.SEQ_HARD).mean()


def loss_tf_distill(student: BangModel, teacher: BangModel, batch: Batch) -> Tensor:
    return distill_per_sample(student, teacher, batch, DistillMode.TF_SOFT).mean()


def loss_bs_soft_distill(student: BangModel, teacher: BangModel, batch: Batch) -> Tensor:
    return distill_per_sample(student, teacher, batch, DistillMode.BS_SOFT).mean()


def loss_overall(student: BangModel, teacher: BangModel | None, batch: Batch,
                 mode: DistillMode | str = DistillMode.NONE, gamma: float = 1.0,
                 sp: SpStrategy | str = SpStrategy.NONE) -> LossBundle:
    """``L_BANG + gamma * L_distill``; self-paced weights go on the distill term.

    Under ``mode=NONE`` a self-paced strategy weights the NAR-stream NLL
    inside ``L_BANG`` instead.
    """
    try:
        mode = DistillMode(mode)
    except ValueError:
        raise ConfigError(f"unknown distillation mode {mode!r}") from None
    sp = SpStrategy(sp)
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    enc = encode_batch(student, batch)
    if mode is DistillMode.NONE:
        return loss_bang(student, batch, enc, sp=sp)
    bang = loss_bang(student, batch, enc)
    per_sample = distill_per_sample(student, teacher, batch, mode, enc)
    values = per_sample.data.copy()
    weights = None
    if sp is not SpStrategy.NONE:
        weights = batch_weights(lambdas(values, sp), values, sample_ids=batch.index)
    distill = sp_weighted_loss(per_sample, sp)
    total = bang.total + distill * gamma
    return LossBundle(total, mode, gamma, bang=bang.total, distill=distill,
                      per_sample_bang=bang.per_sample_bang, per_sample_distill=values,
                      stream_losses=bang.stream_losses, weights=weights)
