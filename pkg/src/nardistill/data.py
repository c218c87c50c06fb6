"""Vocabulary, corpus I/O, batching and the synthetic multi-modality benchmark."""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

PAD, BOS, EOS, MASK, SEP, UNK = "[PAD]", "[BOS]", "[EOS]", "[MASK]", "[SEP]", "[UNK]"
SPECIALS = (PAD, BOS, EOS, MASK, SEP, UNK)


class Vocab:
    """Word-level vocabulary; specials occupy ids 0..5."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise ConfigError("vocabulary must start with the special tokens in canonical order")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigError("duplicate tokens in vocabulary")
        self.pad_id, self.bos_id, self.eos_id, self.mask_id, self.sep_id, self.unk_id = range(6)

    @classmethod
    def build(cls, texts: Iterable[str | Sequence[str]], min_freq: int = 1,
              max_size: int | None = None) -> "Vocab":
        """Frequency-descending, ties broken lexicographically, so input order never matters."""
        counts: Counter = Counter()
        for text in texts:
            counts.update(text.split() if isinstance(text, str) else text)
        for s in SPECIALS:
            counts.pop(s, None)
        words = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
        if max_size is not None:
            words = words[:max(0, max_size - len(SPECIALS))]
        return cls(list(SPECIALS) + words)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def tokenize(self, text: str) -> list[int]:
        return [self.stoi.get(w, self.unk_id) for w in text.split()]

    def detokenize(self, ids: Iterable[int]) -> str:
        skip = {self.pad_id, self.bos_id, self.eos_id, self.mask_id}
        return " ".join(self.itos[i] for i in ids if i not in skip)

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps({"tokens": self.itos}, ensure_ascii=False))

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls(json.loads(Path(path).read_text())["tokens"])


@dataclass
class Example:
    source: list[int]
    target: list[int]
    bs_target: list[int] | None = None
    mode_id: int | None = None
    refs: list[list[int]] | None = None
    teacher_score: float | None = None


@dataclass
class Batch:
    src: np.ndarray                # [B, S]
    src_pad_mask: np.ndarray       # [B, S], True on padding
    tgt: np.ndarray                # [B, T] gold target + EOS, padded
    tgt_bs: np.ndarray | None      # [B, T'] distilled target + EOS, padded
    index: np.ndarray              # [B] positions of the examples in the corpus

    @property
    def size(self) -> int:
        return self.src.shape[0]


def _pad(rows: Sequence[Sequence[int]], pad_id: int) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def collate(examples: Sequence[Example], pad_id: int = 0, eos_id: int = 2,
            index: Sequence[int] | None = None) -> Batch:
    if not examples:
        raise DataError("cannot build an empty batch")
    src = _pad([e.source for e in examples], pad_id)
    tgt = _pad([list(e.target) + [eos_id] for e in examples], pad_id)
    bs = None
    if all(e.bs_target is not None for e in examples):
        bs = _pad([list(e.bs_target) + [eos_id] for e in examples], pad_id)
    idx = np.arange(len(examples)) if index is None else np.asarray(index)
    return Batch(src, src == pad_id, tgt, bs, idx)


def make_batches(examples: Sequence[Example], batch_size: int, pad_id: int = 0, seed: int = 0,
                 *, eos_id: int = 2, epoch: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    """One epoch of batches; the order depends only on ``(seed, epoch)``."""
    order = np.arange(len(examples))
    if shuffle:
        np.random.default_rng([seed, epoch]).shuffle(order)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield collate([examples[i] for i in idx], pad_id, eos_id, idx)


# corpus files

def read_rows(path: str | Path, fmt: str = "jsonl") -> tuple[list[dict], int]:
    """Raw ``{source, target[, bs_target]}`` text rows plus the malformed-row count."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    rows, bad = [], []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        row = _parse_line(line, fmt)
        if row is None:
            bad.append((n, line[:80]))
        else:
            rows.append(row)
    total = len(rows) + len(bad)
    if bad:
        log.warning("%s: skipped %d malformed rows of %d", path, len(bad), total)
        if len(bad) > 0.1 * total:
            sample = "; ".join(f"line {n}: {text!r}" for n, text in bad[:3])
            raise DataError(f"{path}: {len(bad)}/{total} rows malformed (>10%), e.g. {sample}")
    return rows, len(bad)


def _parse_line(line: str, fmt: str) -> dict | None:
    if fmt == "jsonl":
        try:
            row = json.loads(line)
        except json.JSONDecodeError:
            return None
        if not isinstance(row, dict):
            return None
        if "target" not in row and "gold_target" in row:
            row = dict(row, target=row["gold_target"])
        if not isinstance(row.get("source"), str) or not isinstance(row.get("target"), str):
            return None
        if not row["source"].strip():
            return None
        return row
    if fmt == "tsv":
        parts = next(csv.reader([line], delimiter="\t", quoting=csv.QUOTE_NONE))
        if len(parts) != 2 or not parts[0].strip():
            return None
        return {"source": parts[0], "target": parts[1]}
    raise ConfigError(f"unknown corpus format {fmt!r}; expected jsonl or tsv")


def load_corpus(path: str | Path, fmt: str, vocab: Vocab) -> list[Example]:
    examples = []
    rows, _ = read_rows(path, fmt)
    for row in rows:
        bs = row.get("bs_target")
        refs = row.get("refs")
        examples.append(Example(
            source=vocab.tokenize(row["source"]),
            target=vocab.tokenize(row["target"]),
            bs_target=vocab.tokenize(bs) if isinstance(bs, str) else None,
            mode_id=row.get("mode_id"),
            refs=[vocab.tokenize(r) for r in refs] if refs else None,
            teacher_score=row.get("teacher_beam_score"),
        ))
    return examples


def write_corpus(path: str | Path, examples: Sequence[Example], vocab: Vocab):
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            row = {"source": vocab.detokenize(e.source), "target": vocab.detokenize(e.target)}
            if e.bs_target is not None:
                row["bs_target"] = vocab.detokenize(e.bs_target)
            if e.mode_id is not None:
                row["mode_id"] = e.mode_id
            if e.refs:
                row["refs"] = [vocab.detokenize(r) for r in e.refs]
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def qg_source(answer: str, passage: str) -> str:
    """Question-generation input: ``answer [SEP] passage``."""
    return f"{answer} {SEP} {passage}"


# synthetic multi-modality benchmark

RULES = ("REVERSE_OR_COPY", "ROTATIONS", "TEMPLATE_PARAPHRASE")


def _template(m: int, seq: tuple) -> tuple:
    half = len(seq) // 2
    if m == 0:
        return seq
    if m == 1:
        return seq[::-1]
    if m == 2:
        return seq[half:] + seq[:half]
    pairs = list(seq)
    for i in range(0, len(pairs) - 1, 2):
        pairs[i], pairs[i + 1] = pairs[i + 1], pairs[i]
    return tuple(pairs)


def rule_capacity(rule: str, n_items: int) -> int:
    if rule == "REVERSE_OR_COPY":
        return 2
    if rule == "ROTATIONS":
        return n_items
    if rule == "TEMPLATE_PARAPHRASE":
        return 4
    raise ConfigError(f"unknown mode rule {rule!r}; expected one of {RULES}")


def mode_targets(source: Sequence, rule: str, k: int) -> list[tuple]:
    seq = tuple(source)
    if rule == "REVERSE_OR_COPY":
        return [seq, seq[::-1]][:k]
    if rule == "ROTATIONS":
        return [seq[m:] + seq[:m] for m in range(k)]
    if rule == "TEMPLATE_PARAPHRASE":
        return [_template(m, seq) for m in range(k)]
    raise ConfigError(f"unknown mode rule {rule!r}")


@dataclass
class SynthMMSpec:
    n_items: int = 8
    k_modes: int = 2
    vocab_size: int = 50
    n_train: int = 2000
    n_eval: int = 200
    seed: int = 0
    mode_rule: str = "REVERSE_OR_COPY"
    lead_marker: bool = False     # prefix each valid target with a word naming its mode

    def validate(self):
        if self.k_modes < 2:
            raise ConfigError("k_modes must be >= 2")
        cap = rule_capacity(self.mode_rule, self.n_items)
        if self.k_modes > cap:
            raise ConfigError(f"k_modes={self.k_modes} exceeds capacity {cap} of {self.mode_rule}")
        if self.n_items < 2 or self.vocab_size < 2:
            raise ConfigError("n_items and vocab_size must be >= 2")
        space = self.vocab_size ** self.n_items
        if self.n_train + self.n_eval > space // 4:
            raise ConfigError("too many examples requested for the source space")

    def to_dict(self) -> dict:
        return asdict(self)


class ModeOracle:
    """Classifies an output against the valid targets of its source.

    With ``markers``, mode ``m``'s target starts with ``markers[m]``.
    """

    def __init__(self, rule: str, k_modes: int, markers: Sequence | None = None):
        self.rule = rule
        self.k_modes = k_modes
        self.markers = tuple(markers) if markers is not None else None
        if self.markers is not None and len(self.markers) != k_modes:
            raise ConfigError(f"{len(self.markers)} markers for {k_modes} modes")

    @classmethod
    def for_spec(cls, spec: "SynthMMSpec") -> "ModeOracle":
        markers = None
        if spec.lead_marker:
            first = len(SPECIALS) + spec.vocab_size
            markers = range(first, first + spec.k_modes)
        return cls(spec.mode_rule, spec.k_modes, markers)

    def targets(self, source: Sequence) -> list[tuple]:
        targets = mode_targets(source, self.rule, self.k_modes)
        if self.markers is None:
            return targets
        return [(m,) + t for m, t in zip(self.markers, targets)]

    def classify(self, source: Sequence, candidate: Sequence) -> tuple[str, int | None]:
        """``("exact", m)``, ``("partial", m)`` or ``("mixed", None)``."""
        targets = self.targets(source)
        cand = tuple(candidate)
        for m, t in enumerate(targets):
            if cand == t:
                return "exact", m
        consistent = set(range(len(targets)))
        informative = False
        for i, tok in enumerate(cand):
            hits = {m for m, t in enumerate(targets) if i < len(t) and t[i] == tok}
            if hits and len(hits) < len(targets):
                informative = True
                consistent &= hits
        if informative and len(consistent) == 1:
            return "partial", consistent.pop()
        return "mixed", None


@dataclass
class SynthCorpus:
    spec: SynthMMSpec
    vocab: Vocab
    train: list[Example]
    eval: list[Example]
    oracle: ModeOracle = field(repr=False)

    def save(self, directory: str | Path):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_corpus(directory / "train.jsonl", self.train, self.vocab)
        write_corpus(directory / "eval.jsonl", self.eval, self.vocab)
        (directory / "synth_spec.json").write_text(json.dumps(self.spec.to_dict(), indent=2))
        self.vocab.save(directory / "vocab.json")


def generate_synth_mm(spec: SynthMMSpec) -> SynthCorpus:
    """Sources with ``k_modes`` valid targets; each training pair uses one mode at random."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    words = [f"w{i:02d}" for i in range(spec.vocab_size)]
    seen: set[tuple] = set()
    sources: list[tuple] = []
    need = spec.n_train + spec.n_eval
    while len(sources) < need:
        src = tuple(rng.integers(0, spec.vocab_size, size=spec.n_items).tolist())
        if src in seen:
            continue
        seen.add(src)
        if len(set(mode_targets(src, spec.mode_rule, spec.k_modes))) < spec.k_modes:
            continue
        sources.append(src)
    markers = [f"m{m}" for m in range(spec.k_modes)] if spec.lead_marker else []
    vocab = Vocab(list(SPECIALS) + words + markers)
    oracle = ModeOracle.for_spec(spec)
    offset = len(SPECIALS)
    sources = [[offset + w for w in src] for src in sources]

    modes = rng.integers(0, spec.k_modes, size=spec.n_train)
    train = []
    for src, m in zip(sources[:spec.n_train], modes):
        train.append(Example(src, list(oracle.targets(src)[m]), mode_id=int(m)))
    evals = []
    for src in sources[spec.n_train:]:
        refs = [list(t) for t in oracle.targets(src)]
        evals.append(Example(src, refs[0], refs=refs))
    return SynthCorpus(spec, vocab, train, evals, oracle)


def load_synth(directory: str | Path) -> SynthCorpus:
    directory = Path(directory)
    spec = SynthMMSpec(**json.loads((directory / "synth_spec.json").read_text()))
    vocab = Vocab.load(directory / "vocab.json")
    return SynthCorpus(spec, vocab, load_corpus(directory / "train.jsonl", "jsonl", vocab),
                       load_corpus(directory / "eval.jsonl", "jsonl", vocab),
                       ModeOracle.for_spec(spec))
