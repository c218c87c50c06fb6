"""Inference: length-normalised beam search and greedy decoding on the AR stream,
and single-pass NAR decoding on the all-mask stream.

Any object with ``config`` (carrying ``bos_id``/``eos_id``/``pad_id``/``mask_id``),
``encode(src)`` and ``next_token_log_probs(enc, prefixes)`` can be searched; the
NAR path additionally needs ``forward_nar(enc, length)``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad


@dataclass
class BeamHypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    finished: bool = False
    score: float = 0.0


@dataclass
class DecodeResult:
    tokens: list[int]
    decoder_passes: int
    wall_time: float                # seconds, decoder work only
    beam: list[BeamHypothesis] = field(default_factory=list)
    score: float | None = None


def length_normalised(log_prob: float, length: int, penalty: float) -> float:
    return log_prob / max(length, 1) ** penalty


def _strip(tokens, cfg) -> list[int]:
    out = []
    for t in tokens:
        if t == cfg.eos_id:
            break
        if t not in (cfg.pad_id, cfg.bos_id, cfg.mask_id):
            out.append(int(t))
    return out


def beam_search(model, src, beam_size: int = 5, length_penalty: float = 1.2,
                max_len: int | None = None) -> DecodeResult:
    """Best hypothesis plus the finished beam sorted by normalised score.

    Each step ranks every expansion of the live hypotheses by log-probability
    (ties toward smaller token ids) and keeps the top ``beam_size``; the ones
    ending in EOS join the finished pool. Search stops once no live hypothesis
    can still beat the worst of ``beam_size`` finished ones.
    """
    cfg = model.config
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    max_len = max_len or cfg.max_tgt_len
    start = time.perf_counter()
    with no_grad():
        enc = model.encode(src)
    eos = cfg.eos_id
    live: list[tuple[float, tuple]] = [(0.0, ())]
    finished: list[BeamHypothesis] = []
    passes = 0

    def worst_finished():
        return finished[-1].score if len(finished) >= beam_size else -np.inf

    def add_finished(hyp: BeamHypothesis):
        finished.append(hyp)
        finished.sort(key=lambda h: (-h.score, h.tokens))
        del finished[beam_size:]

    for step in range(1, max_len + 1):
        prefixes = np.array([(cfg.bos_id,) + toks for _, toks in live], dtype=np.int64)
        lp = model.next_token_log_probs(enc, prefixes)
        passes += 1
        vocab = lp.shape[1]
        cand = (np.array([s for s, _ in live])[:, None] + lp.astype(np.float64)).reshape(-1)
        # sort by score desc, then (parent order, token id) asc for deterministic ties
        order = np.lexsort((np.arange(cand.size), -cand))[:beam_size]
        new_live = []
        for flat in order:
            parent, tok = divmod(int(flat), vocab)
            score = float(cand[flat])
            toks = live[parent][1] + (tok,)
            if tok == eos:
                add_finished(BeamHypothesis(toks, score, True,
                                            length_normalised(score, len(toks), length_penalty)))
            elif step == max_len:
                add_finished(BeamHypothesis(toks, score, True,
                                            length_normalised(score, len(toks), length_penalty)))
            else:
                new_live.append((score, toks))
        live = new_live
        if not live:
            break
        # scores only fall as tokens append; normalisation can still lift them
        bound = max(max(length_normalised(s, step + 1, length_penalty),
                        length_normalised(s, max_len, length_penalty)) for s, _ in live)
        if bound < worst_finished():
            break
    best = finished[0]
    return DecodeResult(_strip(best.tokens, cfg), passes, time.perf_counter() - start,
                        beam=list(finished), score=best.score)


def greedy_ar(model, src, max_len: int | None = None) -> DecodeResult:
    cfg = model.config
    max_len = max_len or cfg.max_tgt_len
    start = time.perf_counter()
    with no_grad():
        enc = model.encode(src)
    prefix = [cfg.bos_id]
    passes = 0
    for _ in range(max_len):
        lp = model.next_token_log_probs(enc, np.array([prefix], dtype=np.int64))[0]
        passes += 1
        tok = int(np.argmax(lp))
        prefix.append(tok)
        if tok == cfg.eos_id:
            break
    return DecodeResult(_strip(prefix[1:], cfg), passes, time.perf_counter() - start)


def nar_decode(model, src, max_len: int | None = None) -> DecodeResult:
    """One decoder pass over ``max_len`` [MASK] slots; output cut at the first EOS."""
    cfg = model.config
    max_len = max_len or cfg.max_tgt_len
    start = time.perf_counter()
    with no_grad():
        enc = model.encode(src)
        logits = model.forward_nar(enc, max_len).logits.data[0]
    tokens = np.argmax(logits, axis=-1)
    return DecodeResult(_strip(tokens.tolist(), cfg), 1, time.perf_counter() - start)


def nar_decode_batch(model, sources, max_len: int | None = None, batch_size: int = 64) -> list[list[int]]:
    """Batched NAR decoding for evaluation (no timing)."""
    from .data import _pad
    cfg = model.config
    max_len = max_len or cfg.max_tgt_len
    out = []
    with no_grad():
        for i in range(0, len(sources), batch_size):
            src = _pad(sources[i:i + batch_size], cfg.pad_id)
            enc = model.encode(src)
            tokens = np.argmax(model.forward_nar(enc, max_len).logits.data, axis=-1)
            out.extend(_strip(row.tolist(), cfg) for row in tokens)
    return out


def greedy_ar_batch(model, sources, max_len: int | None = None, batch_size: int = 64) -> list[list[int]]:
    """Batched greedy decoding for evaluation (no timing)."""
    from .data import _pad
    cfg = model.config
    max_len = max_len or cfg.max_tgt_len
    out = []
    with no_grad():
        for i in range(0, len(sources), batch_size):
            src = _pad(sources[i:i + batch_size], cfg.pad_id)
            enc = model.encode(src)
            prefix = np.full((src.shape[0], 1), cfg.bos_id, dtype=np.int64)
            done = np.zeros(src.shape[0], dtype=bool)
            for _ in range(max_len):
                tok = np.argmax(model.next_token_log_probs(enc, prefix), axis=-1)
                tok = np.where(done, cfg.pad_id, tok)
                prefix = np.concatenate([prefix, tok[:, None]], axis=1)
                done |= tok == cfg.eos_id
                if done.all():
                    break
            out.extend(_strip(row[1:].tolist(), cfg) for row in prefix)
    return out


