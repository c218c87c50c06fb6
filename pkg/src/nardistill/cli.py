"""Command-line entry point: ``nar-distill <command> [options]``.

Every command reads an optional JSON config (``--config``) layered over the
built-in defaults; any field can then be overridden with a dotted flag such
as ``--model.d_model 64`` or ``--train.steps=200``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint
from .data import ModeOracle, SynthMMSpec, Vocab, generate_synth_mm, load_corpus, read_rows, write_corpus
from .decoding import beam_search
from .distill import DistillMode, loss_ar, loss_overall
from .errors import ConfigError, DataError
from .metrics import DECODE_PATHS, bench_latency, decode_all, evaluate, write_latency_csv
from .model import BangModel, ModelConfig
from .pretrain import (PretrainStream, SpanMaskSpec, encode_documents, pretrain_loss, progress_record,
                       read_documents)
from .self_paced import SpStrategy
from .tensor import Adam, NumericError
from .train import ExampleStream, TrainConfig, configure_threads, train

log = logging.getLogger("nardistill")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

DEFAULTS: dict = {
    "model": ModelConfig().to_dict(),
    "optim": {"lr": 4e-4, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "train": {"steps": 500, "batch_size": 32, "log_every": 10, "ckpt_every": 0},
    "data": {"dir": "", "train": "", "eval": "", "format": "jsonl"},
    "synth": SynthMMSpec().to_dict(),
    "pretrain": {"corpus": "", "span_fraction": 0.3, "min_span": 1, "max_span": 8, "batch_size": 16},
    "mode": "NONE",
    "sp": "NONE",
    "gamma": 1.0,
    "alpha": 0.5,
    "beam": {"size": 5, "length_penalty": 1.2},
    "decode": {"path": "nar", "max_len": 0},
    "bench": {"n_samples": 50, "warmup": 2},
    "seed": 0,
    "deterministic": True,
    "init": "",
    "teacher": "",
    "checkpoint": "",
    "out": "",
}


# config resolution

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config field {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config field {dotted!r}")
    default = node[keys[-1]]
    if isinstance(default, dict):
        raise ConfigError(f"{dotted!r} is a section; set its fields individually")
    if isinstance(default, str) and isinstance(value, (int, float)) and not isinstance(value, bool):
        value = str(value)          # e.g. a numeric-looking path
    elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if type(value) is not type(default):
        raise ConfigError(f"{dotted} expects {type(default).__name__}, got {value!r}")
    node[keys[-1]] = value


def _merge(base: dict, update: dict, prefix: str = ""):
    for k, v in update.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            if not isinstance(base.get(k), dict):
                raise ConfigError(f"unknown config section {name!r}")
            _merge(base[k], v, name + ".")
        elif k in base:
            _set_dotted(base, k, v)
        else:
            raise ConfigError(f"unknown config field {name!r}")


def parse_overrides(tokens: list[str]) -> list[tuple[str, object]]:
    """``--a.b 3`` / ``--a.b=3`` pairs from leftover argv tokens."""
    out, i = [], 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, text = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"flag {tok} needs a value")
            text = tokens[i + 1]
            i += 2
        out.append((key, _parse_value(text)))
    return out


def resolve_config(config_path: str | None, overrides: list[tuple[str, object]]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {config_path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge(cfg, loaded)
    for key, value in overrides:
        _set_dotted(cfg, key, value)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    ModelConfig.from_dict(cfg["model"])
    try:
        DistillMode(cfg["mode"])
    except ValueError:
        raise ConfigError(f"unknown mode {cfg['mode']!r}; expected one of "
                          f"{[m.value for m in DistillMode]}") from None
    try:
        SpStrategy(cfg["sp"])
    except ValueError:
        raise ConfigError(f"unknown sp strategy {cfg['sp']!r}; expected one of "
                          f"{[s.value for s in SpStrategy]}") from None
    if cfg["gamma"] < 0:
        raise ConfigError("gamma must be >= 0")
    if not 0 <= cfg["alpha"] <= 1:
        raise ConfigError("alpha must lie in [0, 1]")
    if cfg["beam"]["size"] < 1:
        raise ConfigError("beam.size must be >= 1")
    if cfg["train"]["steps"] < 1 or cfg["train"]["batch_size"] < 1:
        raise ConfigError("train.steps and train.batch_size must be positive")
    if cfg["optim"]["lr"] <= 0:
        raise ConfigError("optim.lr must be positive")
    if cfg["decode"]["path"] not in DECODE_PATHS:
        raise ConfigError(f"decode.path must be one of {DECODE_PATHS}")
    if cfg["data"]["format"] not in ("jsonl", "tsv"):
        raise ConfigError("data.format must be jsonl or tsv")


def content_hash(paths) -> str:
    """SHA-1 over the bytes of every input file (directories: their files, sorted)."""
    h = hashlib.sha1()
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def _run_dir(cfg: dict, inputs) -> Path:
    if not cfg["out"]:
        raise ConfigError("--out is required")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2))
    existing = [p for p in inputs if p and Path(p).exists()]
    (out / "run.json").write_text(json.dumps({"seed": cfg["seed"], "inputs": [str(p) for p in existing],
                                              "input_hash": content_hash(existing)}, indent=2))
    return out


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(steps=t["steps"], batch_size=t["batch_size"], lr=cfg["optim"]["lr"], seed=cfg["seed"],
                       log_every=t["log_every"], ckpt_every=t["ckpt_every"], deterministic=cfg["deterministic"])


def _optimizer(cfg: dict, model: BangModel) -> Adam:
    o = cfg["optim"]
    return Adam(model.parameters(), lr=o["lr"], betas=(o["beta1"], o["beta2"]), eps=o["eps"])


# data helpers

def _data_files(cfg: dict) -> tuple[Path, Path | None]:
    d = cfg["data"]
    if d["train"]:
        return Path(d["train"]), Path(d["eval"]) if d["eval"] else None
    if d["dir"]:
        base = Path(d["dir"])
        return base / "train.jsonl", base / "eval.jsonl"
    raise ConfigError("set data.dir or data.train")


def _vocab_for(cfg: dict) -> Vocab:
    for base in (Path(cfg["data"]["dir"]) if cfg["data"]["dir"] else None,
                 Path(cfg["data"]["train"]).parent if cfg["data"]["train"] else None):
        if base is not None and (base / "vocab.json").exists():
            return Vocab.load(base / "vocab.json")
    raise DataError("no vocab.json next to the data; run prepare first")


def _oracle_for(cfg: dict) -> ModeOracle | None:
    if cfg["data"]["dir"]:
        spec_path = Path(cfg["data"]["dir"]) / "synth_spec.json"
        if spec_path.exists():
            return ModeOracle.for_spec(SynthMMSpec(**json.loads(spec_path.read_text())))
    return None


def _model_config(cfg: dict, vocab: Vocab) -> ModelConfig:
    m = dict(cfg["model"])
    m["vocab_size"] = len(vocab)
    return ModelConfig.from_dict(m)


def _load_init(path: str, vocab: Vocab) -> BangModel:
    model, ck_vocab, _, _ = load_checkpoint(path)
    if ck_vocab is not None and ck_vocab != vocab:
        raise ConfigError(f"checkpoint {path} was trained with a different vocabulary")
    return model


def _resume(out: Path, model: BangModel, opt: Adam) -> int:
    ckpt = out / "checkpoint"
    if not (ckpt / "manifest.json").exists():
        return 0
    loaded, _, state, manifest = load_checkpoint(ckpt)
    model.load_state_dict(loaded.state_dict())
    if state is not None:
        opt.state = state
    log.info("resuming from step %d", manifest["step"])
    return manifest["step"]


# commands

def cmd_prepare(cfg: dict, args) -> int:
    if not cfg["out"]:
        raise ConfigError("--out is required")
    out = Path(cfg["out"])
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} is not empty; pass --force to overwrite")
    if args.synth:
        corpus = generate_synth_mm(SynthMMSpec(**cfg["synth"]))
        corpus.save(out)
        print(f"wrote {len(corpus.train)} train / {len(corpus.eval)} eval examples to {out}")
        return 0
    train_path, eval_path = _data_files(cfg)
    fmt = cfg["data"]["format"]
    rows, _ = read_rows(train_path, fmt)
    vocab = Vocab.build([r["source"] for r in rows] + [r["target"] for r in rows])
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.json")
    write_corpus(out / "train.jsonl", load_corpus(train_path, fmt, vocab), vocab)
    if eval_path is not None:
        write_corpus(out / "eval.jsonl", load_corpus(eval_path, fmt, vocab), vocab)
    print(f"wrote {len(rows)} train rows and a {len(vocab)}-token vocabulary to {out}")
    return 0


def cmd_train_teacher(cfg: dict, args) -> int:
    train_path, _ = _data_files(cfg)
    vocab = _vocab_for(cfg)
    examples = load_corpus(train_path, cfg["data"]["format"], vocab)
    out = _run_dir(cfg, [train_path, cfg["init"]])
    model = _load_init(cfg["init"], vocab) if cfg["init"] else BangModel(_model_config(cfg, vocab), cfg["seed"])
    opt = _optimizer(cfg, model)
    start = _resume(out, model, opt)
    tcfg = _train_config(cfg)
    stream = ExampleStream(examples, tcfg.batch_size, cfg["seed"], model.config.pad_id, model.config.eos_id)
    hist = train(model, lambda b, _: loss_ar(model, b), stream, tcfg, out, vocab, opt, start)
    print(f"teacher trained to step {tcfg.steps}; final loss {hist[-1] if hist else float('nan'):.4f}")
    return 0


def cmd_distill_corpus(cfg: dict, args) -> int:
    if not cfg["teacher"]:
        raise ConfigError("--teacher checkpoint is required")
    if not cfg["out"]:
        raise ConfigError("--out is required")
    train_path, _ = _data_files(cfg)
    teacher, vocab, _, _ = load_checkpoint(cfg["teacher"])
    vocab = vocab or _vocab_for(cfg)
    examples = load_corpus(train_path, cfg["data"]["format"], vocab)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with configure_threads(cfg["deterministic"]), open(out, "w", encoding="utf-8") as fh:
        for e in examples:
            res = beam_search(teacher, e.source, cfg["beam"]["size"], cfg["beam"]["length_penalty"],
                              teacher.config.max_tgt_len - 1)
            row = {"source": vocab.detokenize(e.source), "gold_target": vocab.detokenize(e.target),
                   "bs_target": vocab.detokenize(res.tokens), "teacher_beam_score": res.score}
            if e.refs:
                row["refs"] = [vocab.detokenize(r) for r in e.refs]
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    print(f"wrote {len(examples)} distilled rows to {out}")
    return 0


def cmd_train_student(cfg: dict, args) -> int:
    mode = DistillMode(cfg["mode"])
    train_path, _ = _data_files(cfg)
    vocab = _vocab_for(cfg)
    examples = load_corpus(train_path, cfg["data"]["format"], vocab)
    if mode in (DistillMode.SEQ_HARD, DistillMode.BS_SOFT) and any(e.bs_target is None for e in examples):
        raise ConfigError(f"mode {mode.value} needs bs_target in every row of {train_path}; "
                          "run distill-corpus first")
    teacher = None
    if mode in (DistillMode.TF_SOFT, DistillMode.BS_SOFT):
        if not cfg["teacher"]:
            raise ConfigError(f"mode {mode.value} needs --teacher")
        teacher = _load_init(cfg["teacher"], vocab)
    out = _run_dir(cfg, [train_path, cfg["init"], cfg["teacher"]])
    if cfg["init"]:
        student = _load_init(cfg["init"], vocab)
    else:
        student = BangModel(teacher.config if teacher else _model_config(cfg, vocab), cfg["seed"])
    if teacher is not None and teacher.config.vocab_size != student.config.vocab_size:
        raise ConfigError("teacher and student vocabularies differ")
    opt = _optimizer(cfg, student)
    start = _resume(out, student, opt)
    tcfg = _train_config(cfg)
    stream = ExampleStream(examples, tcfg.batch_size, cfg["seed"], student.config.pad_id,
                           student.config.eos_id)
    sp = SpStrategy(cfg["sp"])
    hist = train(student, lambda b, _: loss_overall(student, teacher, b, mode, cfg["gamma"], sp),
                 stream, tcfg, out, vocab, opt, start)
    print(f"student ({mode.value}, sp={sp.value}) trained to step {tcfg.steps}; "
          f"final loss {hist[-1] if hist else float('nan'):.4f}")
    return 0


def cmd_pretrain(cfg: dict, args) -> int:
    p = cfg["pretrain"]
    if not p["corpus"]:
        raise ConfigError("--pretrain.corpus is required")
    docs = read_documents(p["corpus"])
    vocab_path = Path(cfg["data"]["dir"]) / "vocab.json" if cfg["data"]["dir"] else None
    vocab = Vocab.load(vocab_path) if vocab_path and vocab_path.exists() else Vocab.build(docs)
    out = _run_dir(cfg, [p["corpus"]])
    model = _load_init(cfg["init"], vocab) if cfg["init"] else BangModel(_model_config(cfg, vocab), cfg["seed"])
    if model.config.n_streams < 2:
        raise ConfigError("pre-training needs model.n_streams >= 2")
    spec = SpanMaskSpec(p["span_fraction"], p["min_span"], p["max_span"], cfg["seed"])
    stream = PretrainStream(encode_documents(docs, vocab), spec, p["batch_size"], model.config.max_src_len,
                            model.config.pad_id, model.config.eos_id, model.config.mask_id)
    opt = _optimizer(cfg, model)
    start = _resume(out, model, opt)
    tcfg = replace(_train_config(cfg), batch_size=p["batch_size"])
    hist = train(model, lambda b, _: pretrain_loss(model, b, cfg["alpha"]), stream, tcfg, out, vocab,
                 opt, start, record=progress_record)
    print(f"pre-trained to step {tcfg.steps}; final loss {hist[-1] if hist else float('nan'):.4f}")
    return 0


def _load_for_inference(cfg: dict) -> tuple[BangModel, Vocab]:
    if not cfg["checkpoint"]:
        raise ConfigError("--checkpoint is required")
    model, vocab, _, _ = load_checkpoint(cfg["checkpoint"])
    return model, vocab or _vocab_for(cfg)


def _eval_examples(cfg: dict, vocab: Vocab):
    train_path, eval_path = _data_files(cfg)
    path = eval_path if eval_path is not None and eval_path.exists() else train_path
    return load_corpus(path, cfg["data"]["format"], vocab)


def cmd_decode(cfg: dict, args) -> int:
    model, vocab = _load_for_inference(cfg)
    examples = _eval_examples(cfg, vocab)
    with configure_threads(cfg["deterministic"]):
        outputs = decode_all(model, [e.source for e in examples], cfg["decode"]["path"], cfg["beam"]["size"],
                             cfg["beam"]["length_penalty"], cfg["decode"]["max_len"] or None)
    lines = [vocab.detokenize(o) for o in outputs]
    if cfg["out"]:
        Path(cfg["out"]).write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        print("\n".join(lines))
    return 0


def cmd_eval(cfg: dict, args) -> int:
    model, vocab = _load_for_inference(cfg)
    examples = _eval_examples(cfg, vocab)
    with configure_threads(cfg["deterministic"]):
        report = evaluate(model, examples, cfg["decode"]["path"], _oracle_for(cfg), cfg["beam"]["size"],
                          cfg["beam"]["length_penalty"], cfg["decode"]["max_len"] or None)
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "report.json", out / "per_example.jsonl")
    print(json.dumps(report.scores, indent=2))
    return 0


def cmd_bench(cfg: dict, args) -> int:
    if cfg["checkpoint"]:
        model, vocab = _load_for_inference(cfg)
    else:
        vocab = _vocab_for(cfg)
        model = BangModel(_model_config(cfg, vocab), cfg["seed"])
    examples = _eval_examples(cfg, vocab)[:cfg["bench"]["n_samples"]]
    paths = args.paths.split(",") if args.paths else list(DECODE_PATHS)
    with configure_threads(True):
        rows = bench_latency(model, [e.source for e in examples], paths, cfg["bench"]["warmup"],
                             cfg["decode"]["max_len"] or None, cfg["beam"]["size"], cfg["beam"]["length_penalty"])
    if cfg["out"]:
        write_latency_csv(cfg["out"], rows)
    for r in rows:
        print(f"{r.decode_path:10s} mean {r.mean_ms:8.2f} ms  p50 {r.p50_ms:8.2f} ms  passes {r.decoder_passes:.2f}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train-teacher": cmd_train_teacher,
    "distill-corpus": cmd_distill_corpus,
    "train-student": cmd_train_student,
    "pretrain": cmd_pretrain,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "bench": cmd_bench,
}

# short flags mapped onto config fields
ALIASES = {"out": "out", "teacher": "teacher", "init": "init", "checkpoint": "checkpoint",
           "mode": "mode", "sp": "sp", "gamma": "gamma", "alpha": "alpha", "seed": "seed",
           "data": "data.dir", "path": "decode.path"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nar-distill", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", "").replace("_", " "))
        p.add_argument("--config", help="JSON config file")
        for flag in ALIASES:
            p.add_argument(f"--{flag}", dest=f"alias_{flag}", default=None)
        if name == "prepare":
            p.add_argument("--synth", action="store_true", help="generate the synthetic corpus")
            p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        if name == "bench":
            p.add_argument("--paths", help="comma-separated decode paths")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = [(ALIASES[k[len("alias_"):]], _parse_value(v)) for k, v in vars(args).items()
                     if k.startswith("alias_") and v is not None]
        overrides += parse_overrides(rest)
        cfg = resolve_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
