"""Text encoders, annotator encoders, classification heads and combiners.

Every block is a pure function of ``(inputs, config, weights, mode, rng)``.
``weights`` maps *local* tensor names (``"proj.weight"``) to tensors; the
model assembles global names by prefixing (``"text_enc.0.proj.weight"``).
Each block also publishes its parameter layout as ``{name: (shape, fan_in)}``
so that initialization and parameter counting use one source of truth.

Linear weights are stored ``(in, out)`` and applied as ``x @ W + b``; cross
layer weights are square and applied as ``W x`` (``x @ W.T`` on batches).
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from .autodiff import ShapeError, Tensor, concat, dropout

SEP_TOKEN = "⟨sep⟩"

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

FNV_OFFSET = 0x811C9DC5
FNV_PRIME = 0x01000193

Layout = dict[str, tuple[tuple[int, ...], int]]


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class TextEncoderConfig:
    kind: str = "hashed_ngram"
    output_dim: int = 64
    vocab_or_bucket_size: int = 4096
    ngram_range: tuple[int, int] = (1, 2)
    max_tokens: int = 512

    def __post_init__(self):
        if self.kind not in ("hashed_ngram", "embed_pool"):
            raise ValueError(f"unknown text encoder kind {self.kind!r}")
        if self.output_dim < 2:
            raise ValueError("output_dim must be >= 2")
        if self.max_tokens < 1 or self.vocab_or_bucket_size < 1:
            raise ValueError("max_tokens and vocab_or_bucket_size must be positive")
        lo, hi = self.ngram_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad ngram_range {self.ngram_range}")
        object.__setattr__(self, "ngram_range", (int(lo), int(hi)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ngram_range"] = list(self.ngram_range)
        return d


_USER_DEFAULT_DIM = {"simple": 25, "complex": 50}


@dataclass(frozen=True)
class AnnotatorEncoderConfig:
    variant: str = "complex"
    embedding_dim: int | None = None
    dropout: float = 0.20

    def __post_init__(self):
        if self.variant not in ("one_hot", "simple", "complex"):
            raise ValueError(f"unknown annotator encoder variant {self.variant!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.embedding_dim is None and self.variant != "one_hot":
            object.__setattr__(self, "embedding_dim", _USER_DEFAULT_DIM[self.variant])

    def output_dim(self, n_annotators: int) -> int:
        return n_annotators if self.variant == "one_hot" else int(self.embedding_dim)

    def to_dict(self) -> dict:
        return asdict(self)


_COMBINER_DEFAULTS = {
    "simple": (1, "none"),
    "medium": (3, "relu"),
    "complex": (5, "tanh"),
    "deepcross": (3, "relu"),
}


@dataclass(frozen=True)
class CombinerConfig:
    variant: str = "deepcross"
    layers: int | None = None
    activation: str | None = None
    deep_branch_features: int = 30
    dropout: float = 0.20

    def __post_init__(self):
        if self.variant not in _COMBINER_DEFAULTS:
            raise ValueError(f"unknown combiner variant {self.variant!r}")
        layers, act = _COMBINER_DEFAULTS[self.variant]
        if self.layers is None:
            object.__setattr__(self, "layers", layers)
        if self.activation is None:
            object.__setattr__(self, "activation", act)
        if self.activation not in ("none", "relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.layers < 1 or self.deep_branch_features < 1:
            raise ValueError("layers and deep_branch_features must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# tokenization and hashing


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation; punctuation is dropped."""
    return _TOKEN_RE.findall(text.lower())


def fnv1a_32(s: str) -> int:
    h = FNV_OFFSET
    for byte in s.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFF
    return h


def sequence_tokens(text: str, text_pair: str | None, max_tokens: int) -> list[str]:
    toks = tokenize(text)
    if text_pair is not None:
        toks = toks + [SEP_TOKEN] + tokenize(text_pair)
    return toks[:max_tokens]


def ngrams(tokens: list[str], ngram_range: tuple[int, int]) -> list[str]:
    lo, hi = ngram_range
    out = []
    for n in range(lo, hi + 1):
        for i in range(len(tokens) - n + 1):
            out.append(" ".join(tokens[i : i + n]))
    return out


def bucket_counts(grams: list[str], buckets: int) -> np.ndarray:
    counts = np.zeros(buckets, dtype=np.float64)
    for g in grams:
        counts[_bucket(g, buckets)] += 1.0
    return counts


@lru_cache(maxsize=1 << 16)
def _bucket(gram: str, buckets: int) -> int:
    return fnv1a_32(gram) % buckets


def featurize(text: str, config: TextEncoderConfig, text_pair: str | None = None) -> np.ndarray:
    """Fixed (non-trainable) input features for one text.

    hashed_ngram: L2-normalized hashed n-gram counts. embed_pool: per-bucket
    token frequencies divided by token count, so ``features @ E`` is the mean
    of the token embeddings.
    """
    toks = sequence_tokens(text, text_pair, config.max_tokens)
    size = config.vocab_or_bucket_size
    if config.kind == "hashed_ngram":
        counts = bucket_counts(ngrams(toks, config.ngram_range), size)
        norm = np.sqrt(counts @ counts)
        return counts / norm if norm > 0 else counts
    counts = bucket_counts(toks, size)
    return counts / len(toks) if toks else counts


# ---------------------------------------------------------------------------
# parameter layouts


def linear_layout(prefix: str, n_in: int, n_out: int) -> Layout:
    return {f"{prefix}weight": ((n_in, n_out), n_in), f"{prefix}bias": ((n_out,), n_in)}


def text_encoder_layout(config: TextEncoderConfig) -> Layout:
    d, size = config.output_dim, config.vocab_or_bucket_size
    if config.kind == "hashed_ngram":
        return linear_layout("proj.", size, d)
    return {"embedding": ((size, d), 1), **linear_layout("proj.", d, d)}


def head_layout(dim: int, k: int) -> Layout:
    return {**linear_layout("dense.", dim, dim), **linear_layout("out.", dim, k)}


def annotator_encoder_layout(config: AnnotatorEncoderConfig, n_annotators: int) -> Layout:
    if config.variant == "one_hot":
        return {}
    e = config.embedding_dim
    if config.variant == "simple":
        return linear_layout("l0.", n_annotators, e)
    return {**linear_layout("l0.", n_annotators, e), **linear_layout("l1.", e, e), **linear_layout("l2.", e, e)}


def combiner_layout(config: CombinerConfig, x0_dim: int, k: int) -> Layout:
    layout: Layout = {}
    if config.variant == "deepcross":
        for i in range(config.layers):
            layout[f"cross.{i}.weight"] = ((x0_dim, x0_dim), x0_dim)
            layout[f"cross.{i}.bias"] = ((x0_dim,), x0_dim)
        layout.update(linear_layout("deep.", x0_dim, config.deep_branch_features))
        layout.update(linear_layout("out.", x0_dim + config.deep_branch_features, k))
        return layout
    for i in range(config.layers - 1):
        layout.update(linear_layout(f"ff.{i}.", x0_dim, x0_dim))
    layout.update(linear_layout(f"ff.{config.layers - 1}.", x0_dim, k))
    return layout


def layout_size(layout: Layout) -> int:
    return int(sum(np.prod(shape) for shape, _ in layout.values()))


# ---------------------------------------------------------------------------
# forward functions


def _check_layout(weights: Mapping[str, Tensor], layout: Layout, block: str) -> None:
    for name, (shape, _) in layout.items():
        if name not in weights:
            raise ShapeError(f"{block}: missing weight {name!r}")
        if tuple(weights[name].shape) != shape:
            raise ShapeError(f"{block}: weight {name!r} has shape {tuple(weights[name].shape)}, expected {shape}")


def _linear(x: Tensor, weights: Mapping[str, Tensor], prefix: str) -> Tensor:
    return x @ weights[f"{prefix}weight"] + weights[f"{prefix}bias"]


def _activate(x: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return x.relu()
    if activation == "tanh":
        return x.tanh()
    return x


def encode_features(features, config: TextEncoderConfig, weights: Mapping[str, Tensor]) -> Tensor:
    """Text encoder applied to precomputed features, shape (F,) or (B, F)."""
    _check_layout(weights, text_encoder_layout(config), "text encoder")
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.shape[-1] != config.vocab_or_bucket_size:
        raise ShapeError(f"text encoder: feature width {x.shape[-1]} != {config.vocab_or_bucket_size}")
    if config.kind == "hashed_ngram":
        return _linear(x, weights, "proj.")
    pooled = x @ weights["embedding"]
    return _linear(pooled, weights, "proj.").tanh()


def encode_text(text: str, config: TextEncoderConfig, weights: Mapping[str, Tensor], text_pair: str | None = None) -> Tensor:
    return encode_features(featurize(text, config, text_pair), config, weights)


def encode_annotator(
    index,
    config: AnnotatorEncoderConfig,
    weights: Mapping[str, Tensor],
    n_annotators: int,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Annotator representation for one index (vector) or an index array (matrix)."""
    idx = np.asarray(index, dtype=np.intp)
    if np.any(idx < 0) or np.any(idx >= n_annotators):
        raise IndexError(f"annotator index {index} out of range for {n_annotators} annotators")
    if config.variant == "one_hot":
        return Tensor(np.eye(n_annotators)[idx])
    _check_layout(weights, annotator_encoder_layout(config, n_annotators), "annotator encoder")
    # a linear layer on a one-hot input selects one weight row
    h = weights["l0.weight"][idx] + weights["l0.bias"]
    if config.variant == "complex":
        h = h.relu()
        h = _linear(h, weights, "l1.").relu()
        h = _linear(h, weights, "l2.").relu()
    return dropout(h, config.dropout, rng, train)


def classification_head(text_vec: Tensor, weights: Mapping[str, Tensor]) -> Tensor:
    """Dense + tanh + projection to K logits."""
    return _linear(_linear(text_vec, weights, "dense.").tanh(), weights, "out.")


def cross_layer(x0, x, W, b) -> Tensor:
    """``x0 * (W x + b) + x``; batched inputs are rows."""
    x0, x, W, b = (t if isinstance(t, Tensor) else Tensor(t) for t in (x0, x, W, b))
    d = x0.shape[-1]
    if x.shape != x0.shape or W.shape != (d, d) or b.shape != (d,):
        raise ShapeError(f"cross_layer: x0 {x0.shape}, x {x.shape}, W {W.shape}, b {b.shape} are inconsistent")
    wx = W @ x if x.ndim == 1 else x @ W.T
    return x0 * (wx + b) + x


def combine(
    text_vec: Tensor,
    user_vec: Tensor,
    config: CombinerConfig,
    weights: Mapping[str, Tensor],
    k: int,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    axis = text_vec.ndim - 1
    if user_vec.ndim != text_vec.ndim or (axis == 1 and user_vec.shape[0] != text_vec.shape[0]):
        raise ShapeError(f"combine: text {text_vec.shape} and user {user_vec.shape} do not pair up")
    x0 = concat([text_vec, user_vec], axis=axis)
    _check_layout(weights, combiner_layout(config, x0.shape[-1], k), "combiner")
    if config.variant == "deepcross":
        x = x0
        for i in range(config.layers):
            x = cross_layer(x0, x, weights[f"cross.{i}.weight"], weights[f"cross.{i}.bias"])
        deep = _linear(x0, weights, "deep.").relu()
        deep = dropout(deep, config.dropout, rng, train)
        return _linear(concat([x, deep], axis=axis), weights, "out.")
    h = x0
    for i in range(config.layers - 1):
        h = _activate(_linear(h, weights, f"ff.{i}."), config.activation)
        h = dropout(h, config.dropout, rng, train)
    return _linear(h, weights, f"ff.{config.layers - 1}.")
