"""The clustering network: summed input embeddings, a pre-norm transformer
encoder, and five Q/K heads producing one pairwise logit matrix per class.

The model sees no sequence positions, only word content and quantized box
coordinates, so its outputs are equivariant under input permutation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .docmodel import ALL_CLASSES, ClassId
from .tokenizer import QUANT_BINS, TokenFeatures

NEG_INF = -1e30

COORD_FIELDS = ("x0", "y0", "x1", "y1")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_layers: int = 4
    d_model: int = 256
    dff: int = 1024
    num_heads: int = 8
    c_out: int = 300
    max_seq_len: int = 1000
    dropout: float = 0.1
    classes: tuple[str, ...] = field(default_factory=lambda: tuple(c.value for c in ALL_CLASSES))

    def __post_init__(self):
        if self.c_out % 2 != 0:
            raise ValueError(f"c_out must be even, got {self.c_out}")
        if self.d_model % self.num_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")

    @property
    def pad_word_id(self) -> int:
        return self.vocab_size

    @property
    def pad_coord_id(self) -> int:
        return QUANT_BINS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["classes"] = tuple(d.get("classes", [c.value for c in ALL_CLASSES]))
        return cls(**d)


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64, init_scale: float = 0.02) -> T.ParamStore:
    """Normal(0, init_scale) for embeddings and weights; LayerNorm gains one,
    offsets zero. Gradient-check tests pass a larger scale so the attention
    starts out non-degenerate."""
    rng = np.random.default_rng(seed)
    store = T.ParamStore(dtype=dtype)

    def normal(name, *shape):
        store.create(name, rng.normal(0.0, init_scale, size=shape))

    def zeros(name, *shape):
        store.create(name, np.zeros(shape))

    def ones(name, *shape):
        store.create(name, np.ones(shape))

    d = config.d_model
    normal("emb.word", config.vocab_size + 1, d)
    for f in COORD_FIELDS:
        normal(f"emb.{f}", QUANT_BINS + 1, d)
    ones("emb.ln.gain", d)
    zeros("emb.ln.bias", d)

    for i in range(config.num_layers):
        p = f"enc.{i}"
        ones(f"{p}.ln1.gain", d)
        zeros(f"{p}.ln1.bias", d)
        for m in ("wq", "wk", "wv", "wo"):
            normal(f"{p}.attn.{m}", d, d)
        # no bias on the key projection: softmax is invariant to the uniform
        # per-row score shift a key bias induces, so the parameter could never
        # learn anything (its exact gradient is zero)
        for m in ("bq", "bv", "bo"):
            zeros(f"{p}.attn.{m}", d)
        ones(f"{p}.ln2.gain", d)
        zeros(f"{p}.ln2.bias", d)
        normal(f"{p}.ffn.w1", d, config.dff)
        zeros(f"{p}.ffn.b1", config.dff)
        normal(f"{p}.ffn.w2", config.dff, d)
        zeros(f"{p}.ffn.b2", d)

    ones("enc.final_ln.gain", d)
    zeros("enc.final_ln.bias", d)

    for cls in config.classes:
        p = f"head.{cls}"
        normal(f"{p}.w1", d, config.c_out)
        zeros(f"{p}.b1", config.c_out)
        ones(f"{p}.ln.gain", config.c_out)
        zeros(f"{p}.ln.bias", config.c_out)
        normal(f"{p}.w2", config.c_out, config.c_out)
        zeros(f"{p}.b2", config.c_out)

    return store


EMBEDDING_TABLE_NAMES = ("emb.word",) + tuple(f"emb.{f}" for f in COORD_FIELDS)


def count_parameters(params: T.ParamStore, exclude_embeddings: bool = True) -> int:
    total = 0
    for name, t in params:
        if exclude_embeddings and name in EMBEDDING_TABLE_NAMES:
            continue
        total += t.data.size
    return total


def parameter_budget_ok(params: T.ParamStore) -> bool:
    """The non-embedding parameter count must sit in the 4M..6M band (at the
    whole-million reporting precision the architecture tables use)."""
    millions = round(count_parameters(params, exclude_embeddings=True) / 1e6)
    return 4 <= millions <= 6


def features_to_arrays(
    features: list[TokenFeatures], seq_len: int, config: ModelConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Pack token features into (seq_len, 5) int ids plus the real-position mask."""
    if len(features) > seq_len:
        raise ValueError(f"{len(features)} words exceed sequence length {seq_len}")
    ids = np.empty((seq_len, 5), dtype=np.int64)
    ids[:, 0] = config.pad_word_id
    ids[:, 1:] = config.pad_coord_id
    for i, f in enumerate(features):
        ids[i] = f.as_tuple()
    pad_mask = np.zeros(seq_len, dtype=bool)
    pad_mask[: len(features)] = True
    return ids, pad_mask


def embed_inputs(ids: np.ndarray, params: T.ParamStore) -> T.Tensor:
    """Sum the five per-field embeddings, then layer-normalize.

    ``ids`` has shape (..., 5): word id then qx0, qy0, qx1, qy1.
    """
    x = T.embedding(params["emb.word"], ids[..., 0])
    for k, f in enumerate(COORD_FIELDS):
        x = T.add(x, T.embedding(params[f"emb.{f}"], ids[..., k + 1]))
    return T.layer_norm(x, params["emb.ln.gain"], params["emb.ln.bias"])


def _attention(x, pad_mask: np.ndarray, params, prefix: str, config: ModelConfig):
    b, l, d = x.shape
    h = config.num_heads
    dh = d // h

    def split_heads(t):
        return T.permute(T.reshape(t, (b, l, h, dh)), (0, 2, 1, 3))

    q = split_heads(T.linear(x, params[f"{prefix}.wq"], params[f"{prefix}.bq"]))
    k = split_heads(T.linear(x, params[f"{prefix}.wk"]))
    v = split_heads(T.linear(x, params[f"{prefix}.wv"], params[f"{prefix}.bv"]))

    scores = T.scale(T.matmul(q, T.transpose_last2(k)), 1.0 / np.sqrt(dh))
    key_pad = ~pad_mask.reshape(b, 1, 1, l)
    scores = T.masked_fill(scores, key_pad, NEG_INF)
    weights = T.softmax_last(scores)
    ctx = T.matmul(weights, v)
    ctx = T.reshape(T.permute(ctx, (0, 2, 1, 3)), (b, l, d))
    return T.linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def encoder_forward(
    embedded: T.Tensor,
    pad_mask: np.ndarray,
    params: T.ParamStore,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> T.Tensor:
    """Pre-norm encoder stack; padded keys are masked out of every attention row."""
    x = embedded
    p = config.dropout
    for i in range(config.num_layers):
        pre = f"enc.{i}"
        h = T.layer_norm(x, params[f"{pre}.ln1.gain"], params[f"{pre}.ln1.bias"])
        attn = _attention(h, pad_mask, params, f"{pre}.attn", config)
        x = T.add(x, T.dropout(attn, p, rng, training))
        h = T.layer_norm(x, params[f"{pre}.ln2.gain"], params[f"{pre}.ln2.bias"])
        ff = T.linear(h, params[f"{pre}.ffn.w1"], params[f"{pre}.ffn.b1"])
        ff = T.linear(T.gelu(ff), params[f"{pre}.ffn.w2"], params[f"{pre}.ffn.b2"])
        x = T.add(x, T.dropout(ff, p, rng, training))
    return T.layer_norm(x, params["enc.final_ln.gain"], params["enc.final_ln.bias"])


def clustering_head_forward(
    hidden: T.Tensor,
    params: T.ParamStore,
    cls: str,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> T.Tensor:
    """linear -> GELU -> layer norm -> dropout -> linear, split into Q/K, return Q K^T."""
    p = f"head.{cls}"
    h = T.linear(hidden, params[f"{p}.w1"], params[f"{p}.b1"])
    h = T.gelu(h)
    h = T.layer_norm(h, params[f"{p}.ln.gain"], params[f"{p}.ln.bias"])
    h = T.dropout(h, config.dropout, rng, training)
    h = T.linear(h, params[f"{p}.w2"], params[f"{p}.b2"])
    half = config.c_out // 2
    q = T.narrow_last(h, 0, half)
    k = T.narrow_last(h, half, half)
    return T.matmul(q, T.transpose_last2(k))


def forward_batch(
    ids: np.ndarray,
    pad_mask: np.ndarray,
    params: T.ParamStore,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> dict[ClassId, T.Tensor]:
    """Whole network over a batch: (B, L, 5) ids -> per class (B, L, L) logits."""
    x = embed_inputs(ids, params)
    hidden = encoder_forward(x, pad_mask, params, config, training=training, rng=rng)
    return {
        ClassId(cls): clustering_head_forward(hidden, params, cls, config, training=training, rng=rng)
        for cls in config.classes
    }


def model_forward(
    features: list[TokenFeatures],
    params: T.ParamStore,
    config: ModelConfig,
    seq_len: int | None = None,
) -> dict[ClassId, np.ndarray]:
    """Single-page inference: pad to the sequence length and return logit matrices."""
    seq_len = seq_len or config.max_seq_len
    ids, pad = features_to_arrays(features, seq_len, config)
    logits = forward_batch(ids[None], pad[None], params, config, training=False)
    return {cls: t.data[0] for cls, t in logits.items()}
