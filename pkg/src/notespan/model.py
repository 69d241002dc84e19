"""Toy transformer encoder with standard and disentangled attention modes.

Disentangled mode adds a learned per-head bias vector to every key row before
the query-key product; with the bias at zero it reduces exactly to standard
scaled dot-product attention. The encoder carries two output heads: token
logits for masked-language-model training and one raw logit per token for
span extraction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

ATTENTION_MODES = ("standard", "disentangled")


class ConfigError(ValueError):
    """Invalid model hyperparameters."""


class LengthError(ValueError):
    """Input sequence exceeds the configured maximum length."""


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_seq_len: int = 128
    attention_mode: str = "disentangled"
    mask_token_id: int = 2
    pad_token_id: int = 0

    def __post_init__(self):
        if self.d_model <= 0 or self.d_model % 2 != 0:
            raise ConfigError(f"d_model must be positive and even, got {self.d_model}")
        if self.n_heads <= 0 or self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"n_heads must divide d_model, got {self.n_heads} and {self.d_model}")
        if self.n_layers < 0 or self.vocab_size <= 0 or self.max_seq_len <= 0:
            raise ConfigError("counts must be positive")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}")
        if self.mask_token_id == self.pad_token_id:
            raise ConfigError("mask_token_id and pad_token_id must differ")
        if not (0 <= self.mask_token_id < self.vocab_size
                and 0 <= self.pad_token_id < self.vocab_size):
            raise ConfigError("special token ids must be < vocab_size")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_model": self.d_model,
            "n_heads": self.n_heads, "n_layers": self.n_layers,
            "max_seq_len": self.max_seq_len, "attention_mode": self.attention_mode,
            "mask_token_id": self.mask_token_id, "pad_token_id": self.pad_token_id,
        }


def positional_encoding(max_seq_len: int, d_model: int) -> Tensor:
    """Sinusoidal position table: sin at even columns, cos at odd ones."""
    if d_model <= 0 or d_model % 2 != 0:
        raise ConfigError(f"d_model must be positive and even, got {d_model}")
    pos = np.arange(max_seq_len, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    table = np.empty((max_seq_len, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return Tensor(table)


def pad_mask_row(pad_mask: Sequence[bool]) -> Tensor:
    """Additive score mask: 0 where visible, a large negative fill where padded."""
    mask = np.where(np.asarray(pad_mask, dtype=bool), T.MASK_FILL, 0.0)
    return Tensor(mask)


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None,
              pad_mask: Sequence[bool] | None = None,
              mode: str = "standard") -> Tensor:
    """softmax(Q (K + bias)^T / sqrt(d_k)) V, with padded keys hidden.

    The bias row vector is broadcast-added to every key row and must be
    present exactly when mode is disentangled.
    """
    if mode not in ATTENTION_MODES:
        raise ConfigError(f"unknown attention mode {mode!r}")
    if mode == "standard" and bias is not None:
        raise ContractError("attention: bias supplied in standard mode")
    if mode == "disentangled" and bias is None:
        raise ContractError("attention: disentangled mode needs a bias vector")
    d_k = k.shape[1]
    keys = T.add_row(k, bias) if bias is not None else k
    scores = T.scale(T.matmul(q, T.transpose(keys)), 1.0 / math.sqrt(d_k))
    if pad_mask is not None and any(pad_mask):
        scores = T.add_row(scores, pad_mask_row(pad_mask))
    return T.matmul(T.softmax_rows(scores), v)


@dataclass
class LayerParams:
    """Learned weights of one encoder layer."""
    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    key_bias: list[Tensor]
    w_out: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln1_gain: Tensor = field(default=None)
    ln1_shift: Tensor = field(default=None)
    ln2_gain: Tensor = field(default=None)
    ln2_shift: Tensor = field(default=None)


def multi_head(x: Tensor, layer: LayerParams, pad_mask: Sequence[bool] | None,
               mode: str) -> Tensor:
    """Per-head attention over projections of x, concatenated and projected."""
    heads = []
    for h in range(len(layer.w_q)):
        q = T.matmul(x, layer.w_q[h])
        k = T.matmul(x, layer.w_k[h])
        v = T.matmul(x, layer.w_v[h])
        bias = layer.key_bias[h] if mode == "disentangled" else None
        heads.append(attention(q, k, v, bias=bias, pad_mask=pad_mask, mode=mode))
    return T.matmul(T.concat_cols(heads), layer.w_out)


class EncoderModel:
    """Embeddings + stacked attention/feed-forward layers + two output heads."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.pos_table = positional_encoding(config.max_seq_len, config.d_model)
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(config.d_model)

        def uniform(*shape):
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape), requires_grad=True)

        c = config
        d_ff = 4 * c.d_model
        self.embedding = uniform(c.vocab_size, c.d_model)
        self.layers: list[LayerParams] = []
        for _ in range(c.n_layers):
            self.layers.append(LayerParams(
                w_q=[uniform(c.d_model, c.d_k) for _ in range(c.n_heads)],
                w_k=[uniform(c.d_model, c.d_k) for _ in range(c.n_heads)],
                w_v=[uniform(c.d_model, c.d_k) for _ in range(c.n_heads)],
                key_bias=[zeros(c.d_k) for _ in range(c.n_heads)],
                w_out=uniform(c.d_model, c.d_model),
                ff_w1=uniform(c.d_model, d_ff), ff_b1=zeros(d_ff),
                ff_w2=uniform(d_ff, c.d_model), ff_b2=zeros(c.d_model),
                ln1_gain=ones(c.d_model), ln1_shift=zeros(c.d_model),
                ln2_gain=ones(c.d_model), ln2_shift=zeros(c.d_model),
            ))
        self.mlm_w = uniform(c.d_model, c.vocab_size)
        self.mlm_b = zeros(c.vocab_size)
        self.span_w = uniform(c.d_model, 1)
        self.span_b = zeros(1)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("embedding", self.embedding)]
        for li, layer in enumerate(self.layers):
            for h in range(self.config.n_heads):
                out += [(f"layer{li}.head{h}.w_q", layer.w_q[h]),
                        (f"layer{li}.head{h}.w_k", layer.w_k[h]),
                        (f"layer{li}.head{h}.w_v", layer.w_v[h]),
                        (f"layer{li}.head{h}.key_bias", layer.key_bias[h])]
            out += [(f"layer{li}.w_out", layer.w_out),
                    (f"layer{li}.ff_w1", layer.ff_w1), (f"layer{li}.ff_b1", layer.ff_b1),
                    (f"layer{li}.ff_w2", layer.ff_w2), (f"layer{li}.ff_b2", layer.ff_b2),
                    (f"layer{li}.ln1_gain", layer.ln1_gain),
                    (f"layer{li}.ln1_shift", layer.ln1_shift),
                    (f"layer{li}.ln2_gain", layer.ln2_gain),
                    (f"layer{li}.ln2_shift", layer.ln2_shift)]
        out += [("mlm_w", self.mlm_w), ("mlm_b", self.mlm_b),
                ("span_w", self.span_w), ("span_b", self.span_b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def encode(self, token_ids: Sequence[int],
               pad_mask: Sequence[bool] | None = None) -> Tensor:
        """Hidden states [n x d_model] for one token sequence."""
        c = self.config
        n = len(token_ids)
        if n == 0:
            raise LengthError("empty token sequence")
        if n > c.max_seq_len:
            raise LengthError(f"sequence length {n} exceeds max_seq_len {c.max_seq_len}")
        ids = list(token_ids)
        if any(i < 0 or i >= c.vocab_size for i in ids):
            raise ContractError("token id out of vocabulary range")
        if pad_mask is not None and len(pad_mask) != n:
            raise ContractError("pad_mask length differs from sequence length")
        x = T.add(T.embedding_lookup(self.embedding, ids),
                  T.row_slice(self.pos_table, 0, n) if n < self.pos_table.shape[0]
                  else self.pos_table)
        for layer in self.layers:
            attended = multi_head(x, layer, pad_mask, c.attention_mode)
            x = T.layer_norm_rows(T.add(x, attended), layer.ln1_gain, layer.ln1_shift)
            ff = T.add_row(T.matmul(
                T.relu(T.add_row(T.matmul(x, layer.ff_w1), layer.ff_b1)),
                layer.ff_w2), layer.ff_b2)
            x = T.layer_norm_rows(T.add(x, ff), layer.ln2_gain, layer.ln2_shift)
        return x

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        """Token logits [n x vocab_size] from final hidden states."""
        return T.add_row(T.matmul(hidden, self.mlm_w), self.mlm_b)

    def span_logits(self, hidden: Tensor) -> Tensor:
        """One raw span logit per token, as a length-n vector."""
        out = T.add_row(T.matmul(hidden, self.span_w), self.span_b)
        return T.reshape(out, (hidden.shape[0],))

    def span_probabilities(self, token_ids: Sequence[int],
                           pad_mask: Sequence[bool] | None = None) -> np.ndarray:
        """Frozen-model per-token span probabilities (no recording)."""
        with T.no_tape():
            logits = self.span_logits(self.encode(token_ids, pad_mask))
            return T.sigmoid(logits).data


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------
# A checkpoint is one file:
#   line 1: magic "NOTESPAN-CKPT-1"
#   line 2: JSON header {"config": {...}, "arrays": [[name, [shape...]], ...]}
#   then:   raw little-endian float64 bytes of every array, in header order.
# Writing the same parameters always produces identical bytes, so round
# trips are bit-exact and reruns with equal seeds produce identical files.

_CKPT_MAGIC = b"NOTESPAN-CKPT-1\n"


def save_checkpoint(model: EncoderModel, path) -> None:
    named = model.named_parameters()
    header = {
        "config": model.config.to_dict(),
        "arrays": [[name, list(t.shape)] for name, t in named],
    }
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> EncoderModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a notespan checkpoint")
        header = json.loads(fh.readline().decode("utf-8"))
        model = EncoderModel(ModelConfig(**header["config"]), seed=0)
        by_name = dict(model.named_parameters())
        if [n for n, _ in header["arrays"]] != [n for n, _ in model.named_parameters()]:
            raise ValueError(f"{path}: parameter manifest does not match config")
        for name, shape in header["arrays"]:
            shape = tuple(shape)
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated array {name}")
            by_name[name].data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return model
