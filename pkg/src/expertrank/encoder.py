"""Transformer encoder over assembled expert sequences.

Five embedding tables (token, segment, position, vote, expert-ID) are summed
into input representations; the expert-ID slot at position 0 draws from its
own table and receives segment and position rows but no token/vote rows. A
stack of post-norm multi-head self-attention + feed-forward layers follows;
the output at position 0 is the expert-level vector used by the vote task
and the ranking head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .assembly import EncodedSequence
from .corpus import DataError, read_keyvalues
from .vocab import PAD, VOTE_VOCAB_SIZE

NEG_BIAS = -1e9  # additive pre-softmax bias for padded keys; finite so every op stays finite


@dataclass
class ModelConfig:
    word_vocab: int
    experts: int
    d: int = 64
    heads: int = 4
    layers: int = 2
    ffn_mult: int = 4
    max_len: int = 256
    title_cap: int = 16
    vote_vocab: int = VOTE_VOCAB_SIZE
    segments: int = 2
    dropout_pretrain: float = 0.2
    dropout_finetune: float = 0.3

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise DataError(f"hidden size {self.d} not divisible by heads {self.heads}")
        for name in ("dropout_pretrain", "dropout_finetune"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise DataError(f"{name} must be in [0,1), got {v}")
        if self.word_vocab < 5 or self.experts < 1:
            raise DataError("config needs a built vocabulary and at least one expert")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for f in fields(self):
                fh.write(f"{f.name} = {getattr(self, f.name)}\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        raw = read_keyvalues(path)
        kwargs = {}
        for f in fields(cls):
            if f.name in raw:
                kwargs[f.name] = (float if f.type == "float" else int)(raw[f.name])
        return cls(**kwargs)


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, ad.Tensor]:
    """Random initialization: normal(0, 0.02) tables/weights, zero biases,
    unit layer-norm gains. The PAD token and PAD vote rows start at zero
    (trainable), so an all-PAD vote lane is exactly the no-vote-lane model."""
    rng = np.random.default_rng(seed)

    def normal(*shape):
        return ad.Tensor(rng.normal(0.0, 0.02, size=shape).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return ad.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return ad.Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    params: dict[str, ad.Tensor] = {
        "token_table": normal(config.word_vocab, config.d),
        "segment_table": normal(config.segments, config.d),
        "position_table": normal(config.max_len, config.d),
        "vote_table": normal(config.vote_vocab, config.d),
        "expert_table": normal(config.experts, config.d),
        "word_head_bias": zeros(config.word_vocab),
        "vote_head_w": normal(config.d, 10),
        "vote_head_bias": zeros(10),
    }
    params["token_table"].data[PAD] = 0.0
    params["vote_table"].data[PAD] = 0.0
    for i in range(config.layers):
        p = f"layer{i}."
        params[p + "attn_wq"] = normal(config.d, config.d)
        params[p + "attn_wk"] = normal(config.d, config.d)
        params[p + "attn_wv"] = normal(config.d, config.d)
        params[p + "attn_wo"] = normal(config.d, config.d)
        params[p + "ln1_gain"] = ones(config.d)
        params[p + "ln1_bias"] = zeros(config.d)
        params[p + "ffn_w1"] = normal(config.d, config.ffn_mult * config.d)
        params[p + "ffn_b1"] = zeros(config.ffn_mult * config.d)
        params[p + "ffn_w2"] = normal(config.ffn_mult * config.d, config.d)
        params[p + "ffn_b2"] = zeros(config.d)
        params[p + "ln2_gain"] = ones(config.d)
        params[p + "ln2_bias"] = zeros(config.d)
    return params


def init_score_head(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, ad.Tensor]:
    """Ranking head: scalar matching score from the expert-level vector."""
    rng = np.random.default_rng(seed)
    return {
        "score_w": ad.Tensor(rng.normal(0.0, 0.02, size=(config.d, 1)).astype(dtype), requires_grad=True),
        "score_b": ad.Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
    }


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class SequenceBatch:
    tokens: np.ndarray      # (B, L) int64, PAD-padded
    segments: np.ndarray    # (B, L)
    positions: np.ndarray   # (B, L)
    votes: np.ndarray       # (B, L)
    expert_ids: np.ndarray  # (B,)
    lengths: np.ndarray     # (B,) true attention lengths

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def max_len(self) -> int:
        return self.tokens.shape[1]


def batch_sequences(seqs: list[EncodedSequence],
                    token_override: list[np.ndarray] | None = None) -> SequenceBatch:
    """Pad sequences to the batch max length. `token_override` substitutes
    masked token lanes (from applied masking plans)."""
    n = len(seqs)
    max_len = max(s.attention_len for s in seqs)
    tokens = np.full((n, max_len), PAD, dtype=np.int64)
    segments = np.zeros((n, max_len), dtype=np.int64)
    positions = np.zeros((n, max_len), dtype=np.int64)
    votes = np.zeros((n, max_len), dtype=np.int64)
    expert_ids = np.zeros(n, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    for i, s in enumerate(seqs):
        L = s.attention_len
        row_tokens = token_override[i] if token_override is not None else s.token_ids
        tokens[i, :L] = row_tokens
        segments[i, :L] = s.segment_ids
        positions[i, :L] = s.position_ids
        votes[i, :L] = s.vote_ids
        expert_ids[i] = s.expert_id
        lengths[i] = L
    return SequenceBatch(tokens, segments, positions, votes, expert_ids, lengths)


def _key_mask_bias(batch: SequenceBatch, dtype) -> ad.Tensor:
    """(B, 1, 1, L) additive bias: 0 on real keys, NEG_BIAS on padding."""
    cols = np.arange(batch.max_len)
    padded = cols[None, :] >= batch.lengths[:, None]
    bias = np.where(padded, NEG_BIAS, 0.0).astype(dtype)
    return ad.Tensor(bias[:, None, None, :])


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def embed(batch: SequenceBatch, params: dict[str, ad.Tensor], config: ModelConfig,
          dropout: float = 0.0, rng: np.random.Generator | None = None) -> ad.Tensor:
    """Sum the lane embeddings; position 0 is the expert-ID slot and gets
    expert + segment + position rows only."""
    for lane, table, name in ((batch.tokens, "token_table", "token"),
                              (batch.votes, "vote_table", "vote"),
                              (batch.segments, "segment_table", "segment"),
                              (batch.positions, "position_table", "position")):
        if lane.min() < 0 or lane.max() >= params[table].shape[0]:
            raise IndexError(f"{name} lane id out of bounds for {table} "
                             f"with {params[table].shape[0]} rows")
    if batch.expert_ids.min() < 0 or batch.expert_ids.max() >= params["expert_table"].shape[0]:
        raise IndexError("expert id out of bounds for expert_table "
                         f"with {params['expert_table'].shape[0]} rows")

    rest = ad.take_rows(params["token_table"], batch.tokens[:, 1:])
    rest = rest + ad.take_rows(params["segment_table"], batch.segments[:, 1:])
    rest = rest + ad.take_rows(params["position_table"], batch.positions[:, 1:])
    rest = rest + ad.take_rows(params["vote_table"], batch.votes[:, 1:])

    slot0 = ad.take_rows(params["expert_table"], batch.expert_ids[:, None])
    slot0 = slot0 + ad.take_rows(params["segment_table"], batch.segments[:, :1])
    slot0 = slot0 + ad.take_rows(params["position_table"], batch.positions[:, :1])

    x = ad.concat([slot0, rest], axis=1)
    if dropout > 0.0:
        x = ad.dropout(x, dropout, rng)
    return x


def attention(x: ad.Tensor, params: dict[str, ad.Tensor], layer: int, config: ModelConfig,
              mask_bias: ad.Tensor, dropout: float = 0.0,
              rng: np.random.Generator | None = None) -> ad.Tensor:
    """Multi-head self-attention with 1/sqrt(d/h) score scaling, padded keys
    biased to an effective -inf, then residual + layer norm."""
    p = f"layer{layer}."
    B, L, d = x.shape
    h, dh = config.heads, config.head_dim

    def split_heads(t):
        return ad.transpose(ad.reshape(t, (B, L, h, dh)), (0, 2, 1, 3))

    q = split_heads(ad.matmul(x, params[p + "attn_wq"]))
    k = split_heads(ad.matmul(x, params[p + "attn_wk"]))
    v = split_heads(ad.matmul(x, params[p + "attn_wv"]))

    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    weights = ad.softmax(scores + mask_bias)
    ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (B, L, d))
    out = ad.matmul(ctx, params[p + "attn_wo"])
    if dropout > 0.0:
        out = ad.dropout(out, dropout, rng)
    return ad.layer_norm(x + out, params[p + "ln1_gain"], params[p + "ln1_bias"])


def ffn(x: ad.Tensor, params: dict[str, ad.Tensor], layer: int,
        dropout: float = 0.0, rng: np.random.Generator | None = None) -> ad.Tensor:
    """Position-wise RELU feed-forward, then residual + layer norm."""
    p = f"layer{layer}."
    hidden = ad.relu(ad.matmul(x, params[p + "ffn_w1"]) + params[p + "ffn_b1"])
    out = ad.matmul(hidden, params[p + "ffn_w2"]) + params[p + "ffn_b2"]
    if dropout > 0.0:
        out = ad.dropout(out, dropout, rng)
    return ad.layer_norm(x + out, params[p + "ln2_gain"], params[p + "ln2_bias"])


def forward(batch: SequenceBatch, params: dict[str, ad.Tensor], config: ModelConfig,
            dropout: float = 0.0, rng: np.random.Generator | None = None
            ) -> tuple[ad.Tensor, ad.Tensor]:
    """Run the full stack. Returns (all position outputs (B, L, d), the
    expert-level vector e = output[:, 0, :]). Eval mode is dropout=0 and is
    deterministic."""
    if batch.max_len > config.max_len:
        raise DataError(f"batch length {batch.max_len} exceeds max_len {config.max_len}")
    if dropout > 0.0 and rng is None:
        raise DataError("dropout requires an rng")
    mask_bias = _key_mask_bias(batch, params["token_table"].dtype)
    x = embed(batch, params, config, dropout=dropout, rng=rng)
    for layer in range(config.layers):
        x = attention(x, params, layer, config, mask_bias, dropout=dropout, rng=rng)
        x = ffn(x, params, layer, dropout=dropout, rng=rng)
    e = ad.index_select(x, 1, 0)
    return x, e
