"""Encoder-decoder transformer with n prediction streams over shared weights.

Stream ``s`` predicts target token ``y_t`` (1-based) from the source and the
prefix ``y_{<t-s+1}``; the ``s-1`` tokens in between are replaced by [MASK]
embeddings that keep their positional encodings. Stream 1 is ordinary causal
decoding. Any ``s >= T`` sees no target token at all, which is the NAR stream,
addressed here as stream ``NAR``.

Decoder slots are indexed by 0-based position ``p = t - 1``. The main stream
holds ``[BOS, y_1, ..., y_{T-1}]``. In the fused pass every predicting slot of
stream ``s`` at ``p >= s`` attends to main slots ``0..p-s+1`` plus the slots of
streams ``s-k`` at ``p-k`` for ``k = 0..s-2``; slots at ``p < s`` coincide with
the all-mask stream. This reproduces, state for state, what a separate causal
decoder pass per (stream, position) computes; ``forward_stream_naive`` is that
oracle.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache

import numpy as np

from .errors import ConfigError
from .tensor import (Tensor, _current_tape, concat, embedding, get_dtype, layer_norm,
                     log_softmax, no_grad, softmax)

log = logging.getLogger(__name__)

NAR = 0
NEG_INF = -1e9


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 128
    n_heads: int = 4
    n_enc_layers: int = 3
    n_dec_layers: int = 3
    n_streams: int = 4
    max_src_len: int = 64
    max_tgt_len: int = 32
    d_ff: int = 0
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    mask_id: int = 3
    sep_id: int = 4

    def __post_init__(self):
        if not self.d_ff:
            self.d_ff = 4 * self.d_model
        self.validate()

    def validate(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.n_streams < 1:
            raise ConfigError(f"n_streams must be >= 1, got {self.n_streams}")
        specials = [self.pad_id, self.bos_id, self.eos_id, self.mask_id, self.sep_id]
        if len(set(specials)) != len(specials):
            raise ConfigError(f"special ids must be distinct, got {specials}")
        if max(specials) >= self.vocab_size or min(specials) < 0:
            raise ConfigError(f"special ids {specials} must lie in [0, {self.vocab_size})")
        if self.max_src_len < 1 or self.max_tgt_len < 1:
            raise ConfigError("max_src_len and max_tgt_len must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EncoderOutput:
    h: Tensor                      # [B, S, d_model]
    src_pad_mask: np.ndarray       # [B, S], True where padding
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def attn_bias(self) -> np.ndarray:
        return np.where(self.src_pad_mask, NEG_INF, 0.0)[:, None, None, :]


@dataclass
class StreamLogits:
    stream: int                    # 1..n_streams, or NAR
    logits: Tensor                 # [B, T, vocab]


@dataclass(frozen=True)
class SlotLayout:
    """Decoder slot arrangement for one fused pass over ``T`` positions."""
    T: int
    token_pos: np.ndarray          # [N] index into the main-stream inputs, -1 for [MASK]
    positions: np.ndarray          # [N] positional-embedding index
    visible: np.ndarray            # [N, N] query-row may attend to key-column
    read: dict                     # stream -> [T] slot index for positions 0..T-1
    kinds: tuple                   # per slot: ("main", p) | ("nar", p) | ("g", s, p)


@lru_cache(maxsize=256)
def build_layout(T: int, streams: tuple) -> SlotLayout:
    """Slots and cross-stream visibility for the requested streams.

    ``streams`` holds stream ids; ``NAR`` or any id ``>= T`` reads the all-mask
    stream.
    """
    g_max = max([s for s in streams if s != NAR and 2 <= s < T], default=1)
    need_nar = any(s == NAR or s >= 2 for s in streams) and T > 1

    kinds: list[tuple] = []
    index: dict[tuple, int] = {}

    def add(kind):
        index[kind] = len(kinds)
        kinds.append(kind)

    for p in range(T):
        add(("main", p))
    if need_nar:
        for p in range(1, T):
            add(("nar", p))
    for s in range(2, g_max + 1):
        for p in range(s, T):
            add(("g", s, p))

    n = len(kinds)
    visible = np.zeros((n, n), dtype=bool)
    token_pos = np.full(n, -1, dtype=np.int64)
    positions = np.zeros(n, dtype=np.int64)
    for i, kind in enumerate(kinds):
        if kind[0] == "main":
            p = kind[1]
            token_pos[i] = p
            positions[i] = p
            visible[i, [index[("main", q)] for q in range(p + 1)]] = True
        elif kind[0] == "nar":
            p = kind[1]
            positions[i] = p
            visible[i, index[("main", 0)]] = True
            visible[i, [index[("nar", q)] for q in range(1, p + 1)]] = True
        else:
            _, s, p = kind
            positions[i] = p
            visible[i, [index[("main", q)] for q in range(p - s + 2)]] = True
            visible[i, [index[("g", s - k, p - k)] for k in range(s - 1)]] = True

    def read_for(s):
        out = np.empty(T, dtype=np.int64)
        for p in range(T):
            if s == 1:
                out[p] = index[("main", p)]
            elif p == 0:
                out[p] = index[("main", 0)]
            elif s == NAR or p < s:
                out[p] = index[("nar", p)]
            else:
                out[p] = index[("g", s, p)]
        return out

    read = {s: read_for(s) for s in streams}
    for arr in (token_pos, positions, visible):
        arr.setflags(write=False)
    return SlotLayout(T, token_pos, positions, visible, read, tuple(kinds))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


class BangModel:
    """Parameters plus encode / decode passes. All streams share one weight set."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self._init_params(np.random.default_rng(seed))

    # parameters

    def _init_params(self, rng: np.random.Generator):
        c = self.config
        d, f, v = c.d_model, c.d_ff, c.vocab_size
        dtype = get_dtype()

        def normal(shape, std):
            return rng.normal(0.0, std, size=shape)

        def xavier(n_in, n_out):
            bound = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-bound, bound, size=(n_in, n_out))

        def add(name, arr):
            self.params[name] = Tensor(arr, requires_grad=True, dtype=dtype, name=name)

        add("embed.tok", normal((v, d), d ** -0.5))
        add("embed.pos_src", normal((c.max_src_len, d), d ** -0.5))
        add("embed.pos_tgt", normal((c.max_tgt_len, d), d ** -0.5))

        def attn(prefix):
            for w in ("q", "k", "v", "o"):
                add(f"{prefix}.w{w}", xavier(d, d))
                add(f"{prefix}.b{w}", np.zeros(d))

        def ln(prefix):
            add(f"{prefix}.g", np.ones(d))
            add(f"{prefix}.b", np.zeros(d))

        def ffn(prefix):
            add(f"{prefix}.w1", xavier(d, f))
            add(f"{prefix}.b1", np.zeros(f))
            add(f"{prefix}.w2", xavier(f, d))
            add(f"{prefix}.b2", np.zeros(d))

        for i in range(c.n_enc_layers):
            ln(f"enc.{i}.ln1")
            attn(f"enc.{i}.self")
            ln(f"enc.{i}.ln2")
            ffn(f"enc.{i}.ffn")
        ln("enc.ln")
        for i in range(c.n_dec_layers):
            ln(f"dec.{i}.ln1")
            attn(f"dec.{i}.self")
            ln(f"dec.{i}.ln2")
            attn(f"dec.{i}.cross")
            ln(f"dec.{i}.ln3")
            ffn(f"dec.{i}.ffn")
        ln("dec.ln")
        add("out.w", xavier(d, v))
        add("out.b", np.zeros(v))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> OrderedDict:
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: dict):
        missing = set(self.params) - set(state)
        if missing:
            raise ConfigError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ConfigError(f"parameter {k}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)

    def astype(self, dtype) -> "BangModel":
        """A copy of this model with every parameter cast to ``dtype``."""
        clone = BangModel.__new__(BangModel)
        clone.config = self.config
        clone.params = OrderedDict(
            (k, Tensor(np.array(v.data, dtype=dtype), requires_grad=True, dtype=dtype, name=k))
            for k, v in self.params.items())
        return clone

    def clone(self) -> "BangModel":
        return self.astype(next(iter(self.params.values())).data.dtype)

    # building blocks

    def _ln(self, prefix, x):
        return layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _heads(self, x: Tensor) -> Tensor:
        b, l, _ = x.shape
        h = self.config.n_heads
        return x.reshape(b, l, h, -1).transpose(0, 2, 1, 3)

    def _kv(self, prefix, x):
        P = self.params
        k = self._heads(_linear(x, P[f"{prefix}.wk"], P[f"{prefix}.bk"]))
        v = self._heads(_linear(x, P[f"{prefix}.wv"], P[f"{prefix}.bv"]))
        return k, v

    def _attend(self, prefix, xq, kv, bias):
        P = self.params
        k, v = kv
        q = self._heads(_linear(xq, P[f"{prefix}.wq"], P[f"{prefix}.bq"]))
        dh = self.config.d_model // self.config.n_heads
        scores = (q @ k.swapaxes(-1, -2)) * (dh ** -0.5) + bias
        o = softmax(scores) @ v
        b, _, l, _ = o.shape
        o = o.transpose(0, 2, 1, 3).reshape(b, l, self.config.d_model)
        return _linear(o, P[f"{prefix}.wo"], P[f"{prefix}.bo"])

    def _ffn(self, prefix, x):
        P = self.params
        return _linear(_linear(x, P[f"{prefix}.w1"], P[f"{prefix}.b1"]).relu(),
                       P[f"{prefix}.w2"], P[f"{prefix}.b2"])

    # encoder

    def encode(self, src, src_pad_mask=None) -> EncoderOutput:
        """Encode one token sequence or a padded ``[B, S]`` batch."""
        c = self.config
        ids = np.asarray(src, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[1] == 0:
            raise ValueError("cannot encode an empty source sequence")
        if src_pad_mask is None:
            src_pad_mask = ids == c.pad_id
        src_pad_mask = np.asarray(src_pad_mask, dtype=bool)
        if ids.shape[1] > c.max_src_len:
            log.warning("source length %d exceeds max_src_len=%d; truncating",
                        ids.shape[1], c.max_src_len)
            ids = ids[:, :c.max_src_len]
            src_pad_mask = src_pad_mask[:, :c.max_src_len]
        if src_pad_mask.all(axis=1).any():
            raise ValueError("source row with no non-pad tokens")
        P = self.params
        x = embedding(P["embed.tok"], ids) + embedding(P["embed.pos_src"], np.arange(ids.shape[1]))
        bias = np.where(src_pad_mask, NEG_INF, 0.0)[:, None, None, :].astype(x.data.dtype)
        for i in range(c.n_enc_layers):
            hn = self._ln(f"enc.{i}.ln1", x)
            x = x + self._attend(f"enc.{i}.self", hn, self._kv(f"enc.{i}.self", hn), bias)
            x = x + self._ffn(f"enc.{i}.ffn", self._ln(f"enc.{i}.ln2", x))
        return EncoderOutput(self._ln("enc.ln", x), src_pad_mask)

    # decoder

    def _cross_kv(self, enc: EncoderOutput, layer: int):
        if _current_tape() is not None and enc.h.requires_grad:
            return self._kv(f"dec.{layer}.cross", enc.h)
        key = (id(self), layer)
        if key not in enc.cache:
            enc.cache[key] = self._kv(f"dec.{layer}.cross", enc.h)
        return enc.cache[key]

    def _decode(self, enc: EncoderOutput, ids: np.ndarray, positions: np.ndarray,
                self_bias: np.ndarray) -> Tensor:
        """Run decoder layers over explicit slot tokens/positions; returns logits."""
        c = self.config
        P = self.params
        x = embedding(P["embed.tok"], ids) + embedding(P["embed.pos_tgt"], positions)
        dtype = x.data.dtype
        self_bias = self_bias.astype(dtype)
        cross_bias = enc.attn_bias.astype(dtype)
        for i in range(c.n_dec_layers):
            hn = self._ln(f"dec.{i}.ln1", x)
            x = x + self._attend(f"dec.{i}.self", hn, self._kv(f"dec.{i}.self", hn), self_bias)
            x = x + self._attend(f"dec.{i}.cross", self._ln(f"dec.{i}.ln2", x),
                                 self._cross_kv(enc, i), cross_bias)
            x = x + self._ffn(f"dec.{i}.ffn", self._ln(f"dec.{i}.ln3", x))
        x = self._ln("dec.ln", x)
        return _linear(x, P["out.w"], P["out.b"])

    def decoder_inputs(self, tgt) -> np.ndarray:
        """``[BOS, y_1, ..., y_{T-1}]`` for targets ``y_1..y_T`` (batched)."""
        tgt = np.asarray(tgt, dtype=np.int64)
        if tgt.ndim == 1:
            tgt = tgt[None, :]
        if tgt.shape[1] > self.config.max_tgt_len:
            log.warning("target length %d exceeds max_tgt_len=%d; truncating",
                        tgt.shape[1], self.config.max_tgt_len)
            tgt = tgt[:, :self.config.max_tgt_len]
        bos = np.full((tgt.shape[0], 1), self.config.bos_id, dtype=np.int64)
        return np.concatenate([bos, tgt[:, :-1]], axis=1)

    def _check_stream(self, s: int):
        if s != NAR and not 1 <= s <= self.config.n_streams:
            raise ValueError(f"stream index {s} outside 1..{self.config.n_streams} (or NAR)")

    def forward_slots(self, enc: EncoderOutput, dec_in: np.ndarray, layout: SlotLayout) -> Tensor:
        """Logits ``[B, N, V]`` for every slot of ``layout``."""
        tok = np.where(layout.token_pos >= 0,
                       dec_in[:, np.maximum(layout.token_pos, 0)], self.config.mask_id)
        bias = np.where(layout.visible, 0.0, NEG_INF)[None, None]
        return self._decode(enc, tok, layout.positions, bias)

    def stream_log_probs(self, enc: EncoderOutput, tgt, streams=None) -> dict:
        """One fused pass; returns ``{stream: log-probs [B, T, V]}``."""
        if streams is None:
            streams = tuple(range(1, self.config.n_streams + 1))
        for s in streams:
            self._check_stream(s)
        dec_in = self.decoder_inputs(tgt)
        layout = build_layout(dec_in.shape[1], tuple(streams))
        lp = log_softmax(self.forward_slots(enc, dec_in, layout))
        return {s: lp[:, layout.read[s]] for s in streams}

    def forward_all_streams_fused(self, enc: EncoderOutput, tgt, streams=None) -> list[StreamLogits]:
        if streams is None:
            streams = tuple(range(1, self.config.n_streams + 1))
        for s in streams:
            self._check_stream(s)
        dec_in = self.decoder_inputs(tgt)
        layout = build_layout(dec_in.shape[1], tuple(streams))
        logits = self.forward_slots(enc, dec_in, layout)
        return [StreamLogits(s, logits[:, layout.read[s]]) for s in streams]

    def forward_stream_naive(self, enc: EncoderOutput, tgt, s: int) -> StreamLogits:
        """Reference forward: one causal decoder pass per target position."""
        self._check_stream(s)
        dec_in = self.decoder_inputs(tgt)
        b, T = dec_in.shape
        outs = []
        for t in range(1, T + 1):
            visible = 0 if s == NAR else max(0, t - s)
            ids = dec_in[:, :t].copy()
            ids[:, visible + 1:] = self.config.mask_id
            causal = np.triu(np.full((t, t), NEG_INF), k=1)[None, None]
            logits = self._decode(enc, ids, np.arange(t), causal)
            outs.append(logits[:, t - 1:t])
        return StreamLogits(s, concat(outs, axis=1))

    def forward_nar(self, enc: EncoderOutput, length: int) -> StreamLogits:
        """All-mask decoding of ``length`` positions; no target tokens needed."""
        b = enc.h.shape[0]
        dummy = np.full((b, length), self.config.mask_id, dtype=np.int64)
        return self.forward_all_streams_fused(enc, dummy, streams=(NAR,))[0]

    def next_token_log_probs(self, enc: EncoderOutput, prefixes) -> np.ndarray:
        """Stream-1 log-probs of the next token after each BOS-led prefix ``[K, L]``."""
        prefixes = np.asarray(prefixes, dtype=np.int64)
        L = prefixes.shape[1]
        layout = build_layout(L, (1,))
        with no_grad():
            logits = self.forward_slots(enc, prefixes, layout)
            return log_softmax(logits[:, L - 1]).data


def log_probs(sl: StreamLogits) -> Tensor:
    return log_softmax(sl.logits)
