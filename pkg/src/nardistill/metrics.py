"""Evaluation metrics over token-id sequences and the batch-1 latency bench.

BLEU is corpus-level with add-one smoothing on the 2..4-gram precisions and
the closest-reference brevity penalty. ROUGE reports F1, taking the best
reference per example. All BLEU/ROUGE values are percentages.
"""
from __future__ import annotations

import csv
import json
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Example, ModeOracle, collate
from .decoding import DecodeResult, beam_search, greedy_ar, greedy_ar_batch, nar_decode, nar_decode_batch
from .model import NAR, BangModel
from .tensor import log_softmax, no_grad

Seq = Sequence


def _ngrams(seq: Seq, n: int) -> Counter:
    seq = tuple(seq)
    return Counter(seq[i:i + n] for i in range(len(seq) - n + 1))


def _as_multi(references) -> list[list[tuple]]:
    """Accept one reference per candidate or a list of references per candidate."""
    out = []
    for r in references:
        if len(r) and isinstance(r[0], (list, tuple)):
            out.append([tuple(x) for x in r])
        else:
            out.append([tuple(r)])
    return out


def bleu(candidates: Sequence[Seq], references, max_n: int = 4,
         orders: Sequence[int] = (1, 2, 4)) -> dict[int, float]:
    """Corpus BLEU-n for each ``n`` in ``orders`` (each ``<= max_n``)."""
    if not candidates:
        raise ValueError("bleu needs at least one candidate")
    refs = _as_multi(references)
    if len(refs) != len(candidates):
        raise ValueError(f"{len(candidates)} candidates but {len(refs)} reference sets")
    matched = np.zeros(max_n + 1)
    total = np.zeros(max_n + 1)
    cand_len = ref_len = 0
    for cand, rs in zip(candidates, refs):
        cand = tuple(cand)
        cand_len += len(cand)
        ref_len += min((len(r) for r in rs), key=lambda L: (abs(L - len(cand)), L))
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            best: Counter = Counter()
            for r in rs:
                best |= _ngrams(r, n)
            matched[n] += sum(min(c, best[g]) for g, c in counts.items())
            total[n] += max(len(cand) - n + 1, 0)
    if cand_len == 0:
        return {n: 0.0 for n in orders}
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    out = {}
    for N in orders:
        if N > max_n:
            raise ValueError(f"order {N} exceeds max_n={max_n}")
        logs = []
        for n in range(1, N + 1):
            m, t = (matched[n], total[n]) if n == 1 else (matched[n] + 1, total[n] + 1)
            if m == 0 or t == 0:
                logs = None
                break
            logs.append(math.log(m / t))
        out[N] = 0.0 if logs is None else 100.0 * bp * math.exp(sum(logs) / N)
    return out


def _f1(overlap: float, n_cand: int, n_ref: int) -> float:
    if n_cand == 0 and n_ref == 0:
        return 1.0
    if overlap == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def lcs_length(a: Seq, b: Seq) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _rouge_n(cand: Seq, ref: Seq, n: int) -> float:
    c, r = _ngrams(cand, n), _ngrams(ref, n)
    return _f1(sum((c & r).values()), sum(c.values()), sum(r.values()))


def rouge(candidates: Sequence[Seq], references) -> dict[str, float]:
    """Mean per-example ROUGE-1/2/L F1 (best reference per example), in percent."""
    if not candidates:
        raise ValueError("rouge needs at least one candidate")
    refs = _as_multi(references)
    if len(refs) != len(candidates):
        raise ValueError(f"{len(candidates)} candidates but {len(refs)} reference sets")
    sums = {"r1": 0.0, "r2": 0.0, "rL": 0.0}
    for cand, rs in zip(candidates, refs):
        cand = tuple(cand)
        sums["r1"] += max(_rouge_n(cand, r, 1) for r in rs)
        sums["r2"] += max(_rouge_n(cand, r, 2) for r in rs)
        sums["rL"] += max(_f1(lcs_length(cand, r), len(cand), len(r)) for r in rs)
    return {k: 100.0 * v / len(candidates) for k, v in sums.items()}


def exact_match(candidates: Sequence[Seq], references) -> float:
    refs = _as_multi(references)
    if not candidates:
        raise ValueError("exact_match needs at least one candidate")
    return sum(tuple(c) in rs for c, rs in zip(candidates, refs)) / len(candidates)


def mode_consistency(sources: Sequence[Seq], outputs: Sequence[Seq], oracle: ModeOracle | None) -> float:
    """Fraction of outputs equal to exactly one valid mode of their source."""
    if oracle is None:
        raise ValueError("mode consistency needs a synthetic-corpus mode oracle")
    if not outputs:
        raise ValueError("mode_consistency needs at least one output")
    return sum(oracle.classify(s, o)[0] == "exact" for s, o in zip(sources, outputs)) / len(outputs)


def overall(scores: Sequence[float]) -> float:
    """Arithmetic mean of the reported metric columns."""
    return sum(scores) / len(scores)


def format_score(x: float) -> str:
    return f"{x:.2f}"


def ppl(model: BangModel, stream: int, examples: Sequence[Example], batch_size: int = 64) -> float:
    """``exp`` of the mean per-token NLL of the gold targets (+EOS) under ``stream``."""
    cfg = model.config
    nll, count = 0.0, 0
    with no_grad():
        for i in range(0, len(examples), batch_size):
            b = collate(examples[i:i + batch_size], cfg.pad_id, cfg.eos_id)
            enc = model.encode(b.src, b.src_pad_mask)
            if stream == NAR:
                lp = log_softmax(model.forward_nar(enc, b.tgt.shape[1]).logits).data
            else:
                lp = model.stream_log_probs(enc, b.tgt, streams=(stream,))[stream].data
            keep = b.tgt != cfg.pad_id
            picked = np.take_along_axis(lp, b.tgt[..., None], axis=-1)[..., 0]
            nll -= float(picked[keep].astype(np.float64).sum())
            count += int(keep.sum())
    return math.exp(nll / count)


# decoding + reports

DECODE_PATHS = ("ar_greedy", "ar_beam", "nar")


def decode_all(model: BangModel, sources: Sequence[Seq], path: str, beam_size: int = 5,
               length_penalty: float = 1.2, max_len: int | None = None) -> list[list[int]]:
    if path == "nar":
        return nar_decode_batch(model, sources, max_len)
    if path == "ar_greedy":
        return greedy_ar_batch(model, sources, max_len)
    if path == "ar_beam":
        return [beam_search(model, s, beam_size, length_penalty, max_len).tokens for s in sources]
    raise ValueError(f"unknown decode path {path!r}; expected one of {DECODE_PATHS}")


@dataclass
class EvalReport:
    path: str
    scores: dict
    per_example: list = field(default_factory=list)
    decoder_passes: dict = field(default_factory=dict)
    wall_ms: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path, per_example_path: str | Path | None = None):
        body = self.to_dict()
        body.pop("per_example")
        Path(path).write_text(json.dumps(body, indent=2))
        if per_example_path is not None:
            with open(per_example_path, "w") as fh:
                for rec in self.per_example:
                    fh.write(json.dumps(rec) + "\n")


def score_outputs(sources: Sequence[Seq], outputs: Sequence[Seq], references,
                  oracle: ModeOracle | None = None) -> dict:
    refs = _as_multi(references)
    b = bleu(outputs, refs)
    r = rouge(outputs, refs)
    scores = {"bleu1": b[1], "bleu2": b[2], "bleu4": b[4], **r,
              "overall": overall([r["r1"], r["r2"], r["rL"]]),
              "exact_match": exact_match(outputs, refs)}
    if oracle is not None:
        scores["mode_consistency"] = mode_consistency(sources, outputs, oracle)
    return scores


def evaluate(model: BangModel, examples: Sequence[Example], path: str = "nar",
             oracle: ModeOracle | None = None, beam_size: int = 5, length_penalty: float = 1.2,
             max_len: int | None = None) -> EvalReport:
    sources = [e.source for e in examples]
    refs = [e.refs or [e.target] for e in examples]
    start = time.perf_counter()
    outputs = decode_all(model, sources, path, beam_size, length_penalty, max_len)
    elapsed = time.perf_counter() - start
    scores = score_outputs(sources, outputs, refs, oracle)
    per_example = []
    for i, (s, o, r) in enumerate(zip(sources, outputs, refs)):
        rec = {"index": i, "output": list(o), "exact": tuple(o) in {tuple(x) for x in r}}
        if oracle is not None:
            kind, mode = oracle.classify(s, o)
            rec.update(mode_class=kind, mode=mode)
        per_example.append(rec)
    if path == "nar":
        passes = [1] * len(outputs)
    elif path == "ar_greedy":
        passes = [min(len(o) + 1, max_len or model.config.max_tgt_len) for o in outputs]
    else:
        passes = []
    stats = {"mean": float(np.mean(passes))} if passes else {}
    return EvalReport(path, scores, per_example, decoder_passes=stats,
                      wall_ms={"total": 1e3 * elapsed, "mean_per_sample": 1e3 * elapsed / len(examples)})


# latency

_SINGLE = {
    "ar_greedy": lambda m, s, a: greedy_ar(m, s, a["max_len"]),
    "ar_beam": lambda m, s, a: beam_search(m, s, a["beam_size"], a["length_penalty"], a["max_len"]),
    "nar": lambda m, s, a: nar_decode(m, s, a["max_len"]),
}


@dataclass
class LatencyRow:
    decode_path: str
    mean_ms: float
    p50_ms: float
    decoder_passes: float
    n_samples: int
    threads: int = 1


def bench_latency(model: BangModel, sources: Sequence[Seq], paths: Sequence[str] = DECODE_PATHS,
                  warmup: int = 2, max_len: int | None = None, beam_size: int = 5,
                  length_penalty: float = 1.2,
                  decode_fns: dict[str, Callable] | None = None) -> list[LatencyRow]:
    """Batch-1 decode timing per path; warm-up calls are discarded.

    Each timing covers the decode call only (encoder plus decoder passes),
    never tokenisation or file I/O.
    """
    from threadpoolctl import threadpool_info
    threads = max([i.get("num_threads", 1) for i in threadpool_info()], default=1)
    args = {"max_len": max_len, "beam_size": beam_size, "length_penalty": length_penalty}
    fns = {**_SINGLE, **(decode_fns or {})}
    rows = []
    for path in paths:
        fn = fns[path]
        for s in sources[:warmup]:
            fn(model, s, args)
        times, passes = [], []
        for s in sources:
            res: DecodeResult = fn(model, s, args)
            times.append(1e3 * res.wall_time)
            passes.append(res.decoder_passes)
        rows.append(LatencyRow(path, float(np.mean(times)), float(np.median(times)),
                               float(np.mean(passes)), len(sources), threads))
    return rows


def write_latency_csv(path: str | Path, rows: Sequence[LatencyRow]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["decode_path", "mean_ms", "p50_ms", "decoder_passes"])
        for r in rows:
            w.writerow([r.decode_path, f"{r.mean_ms:.4f}", f"{r.p50_ms:.4f}", f"{r.decoder_passes:.4f}"])
