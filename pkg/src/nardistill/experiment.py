"""Desk-scale comparison of student objectives on the synthetic
multi-modality corpus.

Per seed: train one AR teacher, distil the training set with beam search,
then train one student per (mode, self-paced strategy) variant, each
initialised from that same teacher. Scores are NAR exact match and mode
consistency on the eval split; medians across seeds decide the orderings.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Example, SynthCorpus, SynthMMSpec, _pad, generate_synth_mm
from .decoding import beam_search
from .distill import DistillMode, loss_ar, loss_overall
from .metrics import evaluate
from .model import BangModel, ModelConfig
from .tensor import log_softmax, no_grad
from .pretrain import PretrainStream, SpanMaskSpec, encode_documents, pretrain_loss, progress_record, toy_documents
from .self_paced import SpStrategy
from .train import ExampleStream, TrainConfig, configure_threads, train

log = logging.getLogger(__name__)

VARIANTS = (
    ("NONE", "NONE"),
    ("SEQ_HARD", "NONE"),
    ("BS_SOFT", "NONE"),
    ("BS_SOFT", "INV_PPL"),
    ("BS_SOFT", "LOSS"),
    ("BS_SOFT", "LOG_LOSS"),
)


def variant_name(mode: str, sp: str) -> str:
    return mode if sp == "NONE" else f"{mode}+{sp}"


def experiment_model_config(vocab_size: int, target_len: int, d_model: int = 64) -> ModelConfig:
    """Small model whose last stream covers the whole target (so it is the NAR stream)."""
    return ModelConfig(vocab_size=vocab_size, d_model=d_model, n_heads=2, n_enc_layers=2,
                       n_dec_layers=2, n_streams=target_len, max_src_len=48,
                       max_tgt_len=max(16, target_len))


def target_length(spec: SynthMMSpec) -> int:
    """Longest target in tokens, EOS included."""
    return spec.n_items + int(spec.lead_marker) + 1


def experiment_synth() -> SynthMMSpec:
    # the lead marker lets a desk-scale AR teacher condition on its own mode choice
    return SynthMMSpec(lead_marker=True)


@dataclass
class ExperimentConfig:
    synth: SynthMMSpec = field(default_factory=experiment_synth)
    seeds: tuple = (0, 1, 2)
    variants: tuple = VARIANTS
    d_model: int = 32
    teacher_steps: int = 1200
    student_steps: int = 1200
    batch_size: int = 32
    lr: float = 2e-3
    gamma: float = 1.0
    beam_size: int = 5
    length_penalty: float = 1.2
    pretrain_steps: int = 500
    pretrain_docs: int = 1000
    pretrain_batch: int = 16
    alpha: float = 0.5
    with_pretrain: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["variants"] = [list(v) for v in self.variants]
        return d


def distil_examples(teacher: BangModel, examples: Sequence[Example], beam_size: int = 5,
                    length_penalty: float = 1.2) -> list[Example]:
    """Copies of ``examples`` whose ``bs_target`` is the teacher's beam output.

    Outputs are capped one short of ``max_tgt_len`` so the EOS still fits.
    """
    max_len = teacher.config.max_tgt_len - 1
    out = []
    for e in examples:
        res = beam_search(teacher, e.source, beam_size, length_penalty, max_len)
        out.append(replace(e, bs_target=res.tokens, teacher_score=res.score))
    return out


def _stream(examples, cfg: ExperimentConfig, seed: int, model_cfg: ModelConfig) -> ExampleStream:
    return ExampleStream(examples, cfg.batch_size, seed, model_cfg.pad_id, model_cfg.eos_id)


def train_teacher(corpus: SynthCorpus, cfg: ExperimentConfig, seed: int, out_dir: Path | None,
                  init: BangModel | None = None) -> BangModel:
    mcfg = experiment_model_config(len(corpus.vocab), target_length(corpus.spec), cfg.d_model)
    model = init.clone() if init is not None else BangModel(mcfg, seed)
    tcfg = TrainConfig(steps=cfg.teacher_steps, batch_size=cfg.batch_size, lr=cfg.lr, seed=seed,
                       log_every=50)
    train(model, lambda b, _: loss_ar(model, b), _stream(corpus.train, cfg, seed, mcfg), tcfg,
          out_dir, corpus.vocab)
    return model


def train_student(teacher: BangModel, examples: Sequence[Example], cfg: ExperimentConfig, seed: int,
                  mode: str, sp: str, out_dir: Path | None, vocab=None) -> BangModel:
    student = teacher.clone()
    frozen = teacher.clone()
    tcfg = TrainConfig(steps=cfg.student_steps, batch_size=cfg.batch_size, lr=cfg.lr, seed=seed,
                       log_every=25)

    def loss_fn(batch, _):
        return loss_overall(student, frozen, batch, DistillMode(mode), cfg.gamma, SpStrategy(sp))

    train(student, loss_fn, _stream(examples, cfg, seed + 1000, teacher.config), tcfg, out_dir, vocab)
    return student


def pretrain_model(corpus: SynthCorpus, cfg: ExperimentConfig, seed: int, out_dir: Path | None) -> tuple[BangModel, list[float]]:
    """Self-distillation pre-training on toy documents over the corpus words."""
    mcfg = experiment_model_config(len(corpus.vocab), target_length(corpus.spec), cfg.d_model)
    words = corpus.vocab.itos[6:6 + corpus.spec.vocab_size]
    docs = encode_documents(toy_documents(cfg.pretrain_docs, words, seed=seed + 500), corpus.vocab)
    stream = PretrainStream(docs, SpanMaskSpec(seed=seed, max_span=corpus.spec.n_items),
                            cfg.pretrain_batch, mcfg.max_src_len)
    model = BangModel(mcfg, seed)
    tcfg = TrainConfig(steps=cfg.pretrain_steps, batch_size=cfg.pretrain_batch, lr=cfg.lr, seed=seed,
                       log_every=10)
    history = train(model, lambda b, _: pretrain_loss(model, b, cfg.alpha), stream, tcfg, out_dir,
                    corpus.vocab, record=progress_record)
    return model, history


def first_token_confidence(model: BangModel, sources: Sequence[Sequence[int]], nar: bool) -> float:
    """Mean top probability at the first target position (AR stream or all-mask stream).

    On the synthetic corpus the first token decides the mode, so this shows how
    firmly a model commits to one mode before the rest of the output.
    """
    cfg = model.config
    with no_grad():
        enc = model.encode(_pad(sources, cfg.pad_id))
        if nar:
            lp = log_softmax(model.forward_nar(enc, 1).logits).data[:, 0]
        else:
            lp = model.next_token_log_probs(enc, np.full((len(sources), 1), cfg.bos_id))
    return float(np.exp(lp).max(-1).mean())


def score(model: BangModel, corpus: SynthCorpus, out_dir: Path | None = None) -> dict:
    """NAR scores on the eval split; per-example outputs are saved when ``out_dir`` is given."""
    report = evaluate(model, corpus.eval, "nar", corpus.oracle)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        report.save(out_dir / "eval_nar.json", out_dir / "eval_nar_per_example.jsonl")
    out = {k: report.scores[k] for k in ("exact_match", "mode_consistency", "rL", "overall")}
    out["first_token_confidence"] = first_token_confidence(model, [e.source for e in corpus.eval], nar=True)
    return out


def run_seed(cfg: ExperimentConfig, seed: int, out: Path | None) -> dict:
    synth = replace(cfg.synth, seed=seed)
    corpus = generate_synth_mm(synth)
    sub = (lambda name: out / f"seed{seed}" / name) if out is not None else (lambda name: None)
    result = {"seed": seed, "variants": {}, "timing": {}}
    t0 = time.perf_counter()
    teacher = train_teacher(corpus, cfg, seed, sub("teacher"))
    result["teacher_ar"] = {k: evaluate(teacher, corpus.eval, "ar_greedy", corpus.oracle).scores[k]
                            for k in ("exact_match", "mode_consistency")}
    result["teacher_ar"]["first_token_confidence"] = first_token_confidence(
        teacher, [e.source for e in corpus.eval], nar=False)
    distilled = distil_examples(teacher, corpus.train, cfg.beam_size, cfg.length_penalty)
    result["timing"]["teacher+distil_s"] = time.perf_counter() - t0
    if out is not None:
        _write_distilled(sub("distilled.jsonl"), distilled)
    for mode, sp in cfg.variants:
        t0 = time.perf_counter()
        name = variant_name(mode, sp)
        student = train_student(teacher, distilled, cfg, seed, mode, sp, sub(name), corpus.vocab)
        result["variants"][name] = score(student, corpus, sub(name))
        result["timing"][name] = time.perf_counter() - t0
        log.info("seed %d %s %s", seed, name, result["variants"][name])
    if cfg.with_pretrain:
        t0 = time.perf_counter()
        pre, history = pretrain_model(corpus, cfg, seed, sub("pretrain"))
        result["pretrain"] = {"first_loss": history[0], "last_loss": history[-1],
                              "last10_mean": float(np.mean(history[-10:]))}
        pre_teacher = train_teacher(corpus, cfg, seed, sub("teacher_pretrained"), init=pre)
        pre_distilled = distil_examples(pre_teacher, corpus.train, cfg.beam_size, cfg.length_penalty)
        student = train_student(pre_teacher, pre_distilled, cfg, seed, "BS_SOFT", "INV_PPL",
                                sub("BS_SOFT+INV_PPL_pretrained"), corpus.vocab)
        result["variants"]["BS_SOFT+INV_PPL@pretrained"] = score(student, corpus, sub("BS_SOFT+INV_PPL_pretrained"))
        result["timing"]["pretrained_path"] = time.perf_counter() - t0
    return result


def _write_distilled(path: Path, examples: Sequence[Example]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for e in examples:
            fh.write(json.dumps({"source": e.source, "gold_target": e.target, "bs_target": e.bs_target,
                                 "teacher_beam_score": e.teacher_score}) + "\n")


def medians(per_seed: Sequence[dict]) -> dict:
    names = per_seed[0]["variants"].keys()
    return {n: {m: float(np.median([r["variants"][n][m] for r in per_seed]))
                for m in per_seed[0]["variants"][n]} for n in names}


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> dict:
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    per_seed = []
    with configure_threads(True):
        for seed in cfg.seeds:
            per_seed.append(run_seed(cfg, seed, out))
            if out is not None:
                (out / "results.json").write_text(json.dumps(
                    {"config": cfg.to_dict(), "per_seed": per_seed, "median": medians(per_seed)}, indent=2))
    return {"config": cfg.to_dict(), "per_seed": per_seed, "median": medians(per_seed)}


def orderings(med: dict, metrics: Sequence[str] = ("exact_match", "mode_consistency")) -> dict:
    """Directional checks on seed medians; ``True`` where the ordering holds."""
    checks = {}
    for m in metrics:
        v = {n: med[n][m] for n in med}
        checks[f"{m}: BS_SOFT >= SEQ_HARD"] = v["BS_SOFT"] >= v["SEQ_HARD"]
        checks[f"{m}: SEQ_HARD >= NONE"] = v["SEQ_HARD"] >= v["NONE"]
        checks[f"{m}: BS_SOFT+INV_PPL >= BS_SOFT"] = v["BS_SOFT+INV_PPL"] >= v["BS_SOFT"]
    checks["mode_consistency(NONE) < 0.9"] = med["NONE"]["mode_consistency"] < 0.9
    return checks


def ablation_orderings(med: dict, metrics: Sequence[str] = ("exact_match", "mode_consistency")) -> dict:
    """Hard-focused strategies should not beat unweighted distillation."""
    checks = {}
    for m in metrics:
        for sp in ("LOSS", "LOG_LOSS"):
            checks[f"{m}: BS_SOFT+{sp} <= BS_SOFT"] = med[f"BS_SOFT+{sp}"][m] <= med["BS_SOFT"][m]
    return checks



def main(argv=None) -> int:
    import argparse
    p = argparse.ArgumentParser(description="Run the distillation-variant comparison on the synthetic corpus.")
    p.add_argument("--out", required=True, help="directory for logs, weight reports and results.json")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--student-steps", type=int, default=None)
    p.add_argument("--with-pretrain", action="store_true", help="also run the pre-trained initialisation path")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig(seeds=tuple(int(s) for s in args.seeds.split(",")), with_pretrain=args.with_pretrain)
    if args.student_steps:
        cfg = replace(cfg, student_steps=args.student_steps)
    result = run_experiment(cfg, args.out)
    checks = {**orderings(result["median"]), **ablation_orderings(result["median"])}
    print(json.dumps({"median": result["median"], "checks": checks}, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
