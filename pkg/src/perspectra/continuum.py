"""The five architecture families, from Majority to PerAnnotator.

Families and their routing of an (instance, annotator) pair:

============== ================================ ==========================
family         text encoder                     output block
============== ================================ ==========================
majority       shared ``text_enc.0``            ``head.0``
per_annotator  ``text_enc.a``                   ``head.a``
sep_heads      shared ``text_enc.0``            ``head.a``
share_rec      shared ``text_enc.0``            user encoder + combiner
sep_rec        ``text_enc.a`` (+ ``text_enc.n``) user encoder + combiner
============== ================================ ==========================
"""

from __future__ import annotations

import itertools

import re
import zlib
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import checkpoint as ckpt
from .autodiff import Tensor, concat, softmax
from .model_zoo import (
    AnnotatorEncoderConfig,
    CombinerConfig,
    Layout,
    TextEncoderConfig,
    annotator_encoder_layout,
    classification_head,
    combine,
    combiner_layout,
    encode_annotator,
    encode_features,
    featurize,
    head_layout,
    text_encoder_layout,
)

FAMILIES = ("majority", "per_annotator", "sep_heads", "share_rec", "sep_rec")
REC_FAMILIES = ("share_rec", "sep_rec")


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    family: str
    n_annotators: int
    k: int
    text_encoder: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    annotator_encoder: AnnotatorEncoderConfig | None = None
    combiner: CombinerConfig | None = None
    lam: float = 0.0
    plus_shared: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ArchitectureError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.n_annotators < 1:
            raise ArchitectureError("n_annotators must be positive")
        if self.k < 2:
            raise ArchitectureError("k must be >= 2")
        if self.family in REC_FAMILIES:
            if self.annotator_encoder is None:
                object.__setattr__(self, "annotator_encoder", AnnotatorEncoderConfig())
            if self.combiner is None:
                object.__setattr__(self, "combiner", CombinerConfig())
        elif self.annotator_encoder is not None or self.combiner is not None:
            raise ArchitectureError(f"annotator encoder / combiner configs are only valid for {REC_FAMILIES}")
        if self.family != "sep_rec" and (self.lam != 0.0 or self.plus_shared):
            raise ArchitectureError("lambda and plus_shared are only valid for sep_rec")

    @property
    def n_text_encoders(self) -> int:
        if self.family in ("per_annotator", "sep_rec"):
            return self.n_annotators + (1 if self.plus_shared else 0)
        return 1

    @property
    def n_heads(self) -> int:
        return {"majority": 1, "per_annotator": self.n_annotators, "sep_heads": self.n_annotators}.get(self.family, 0)

    def to_dict(self) -> dict:
        d = {
            "family": self.family,
            "n_annotators": self.n_annotators,
            "k": self.k,
            "text_encoder": self.text_encoder.to_dict(),
        }
        if self.family in REC_FAMILIES:
            d["annotator_encoder"] = self.annotator_encoder.to_dict()
            d["combiner"] = self.combiner.to_dict()
        if self.family == "sep_rec":
            d["lambda"] = self.lam
            d["plus_shared"] = self.plus_shared
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchitectureSpec":
        d = dict(d)
        te = d.pop("text_encoder", None)
        ae = d.pop("annotator_encoder", None)
        cb = d.pop("combiner", None)
        lam = d.pop("lambda", d.pop("lam", 0.0))
        return cls(
            text_encoder=TextEncoderConfig(**_tupled(te)) if te else TextEncoderConfig(),
            annotator_encoder=AnnotatorEncoderConfig(**ae) if ae else None,
            combiner=CombinerConfig(**cb) if cb else None,
            lam=float(lam),
            **d,
        )


def _tupled(te: Mapping) -> dict:
    te = dict(te)
    if "ngram_range" in te:
        te["ngram_range"] = tuple(te["ngram_range"])
    return te


_TEXT_ENC_INDEX = re.compile(r"^text_enc\.\d+\.")


def _init_key(name: str) -> str:
    # all text encoders share one init stream so they start identical
    return _TEXT_ENC_INDEX.sub("text_enc.*.", name)


def init_tensor(name: str, shape: tuple[int, ...], fan_in: int, seed: int) -> np.ndarray:
    """Uniform in +-sqrt(1/fan_in), keyed by (seed, tensor role)."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(_init_key(name).encode("utf-8"))])
    bound = np.sqrt(1.0 / fan_in)
    return np.random.default_rng(ss).uniform(-bound, bound, size=shape)


def model_layout(spec: ArchitectureSpec) -> Layout:
    """Global ``{name: (shape, fan_in)}`` for every trainable tensor."""
    layout: Layout = {}

    def add(prefix: str, block: Layout) -> None:
        for local, v in block.items():
            layout[prefix + local] = v

    for i in range(spec.n_text_encoders):
        add(f"text_enc.{i}.", text_encoder_layout(spec.text_encoder))
    for i in range(spec.n_heads):
        add(f"head.{i}.", head_layout(spec.text_encoder.output_dim, spec.k))
    if spec.family in REC_FAMILIES:
        add("user_enc.", annotator_encoder_layout(spec.annotator_encoder, spec.n_annotators))
        x0 = spec.text_encoder.output_dim + spec.annotator_encoder.output_dim(spec.n_annotators)
        add("combiner.", combiner_layout(spec.combiner, x0, spec.k))
    return layout


class Model:
    """Assembled network: named parameter tensors plus family routing."""

    def __init__(self, spec: ArchitectureSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params
        n = spec.n_annotators
        fam = spec.family
        if fam == "majority":
            self.routing = [(0, 0)] * n
        elif fam == "per_annotator":
            self.routing = [(a, a) for a in range(n)]
        elif fam == "sep_heads":
            self.routing = [(0, a) for a in range(n)]
        elif fam == "share_rec":
            self.routing = [(0, None)] * n
        else:
            self.routing = [(a, None) for a in range(n)]
        self.shared_encoder = n if (fam == "sep_rec" and spec.plus_shared) else None
        self._feature_cache: dict[tuple[str, str | None], np.ndarray] = {}

    # -- parameter access ------------------------------------------------
    def block(self, prefix: str) -> dict[str, Tensor]:
        return {k[len(prefix) :]: v for k, v in self.params.items() if k.startswith(prefix)}

    def text_encoder_prefixes(self, include_shared: bool = True) -> list[str]:
        ids = range(self.spec.n_text_encoders)
        return [f"text_enc.{i}." for i in ids if include_shared or i != self.shared_encoder]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, tensors: Mapping[str, np.ndarray]) -> None:
        expected = {k: v.shape for k, v in self.params.items()}
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing or extra:
            raise ckpt.CheckpointError(f"state does not match architecture: missing {missing}, unexpected {extra}")
        for k, arr in tensors.items():
            if tuple(arr.shape) != expected[k]:
                raise ckpt.CheckpointError(f"tensor {k!r} has shape {tuple(arr.shape)}, expected {expected[k]}")
            self.params[k].data[...] = arr

    # -- inputs ------------------------------------------------------------
    def featurize(self, text: str, text_pair: str | None = None) -> np.ndarray:
        key = (text, text_pair)
        feats = self._feature_cache.get(key)
        if feats is None:
            feats = self._feature_cache[key] = featurize(text, self.spec.text_encoder, text_pair)
        return feats

    def features(self, items: Sequence) -> np.ndarray:
        """Stack features for instances (objects with ``text``/``text_pair``) or raw strings."""
        rows = []
        for it in items:
            if isinstance(it, str):
                rows.append(self.featurize(it))
            else:
                rows.append(self.featurize(it.text, getattr(it, "text_pair", None)))
        return np.stack(rows)

    # -- forward -----------------------------------------------------------
    def _check_annotators(self, annotators: np.ndarray) -> None:
        n = self.spec.n_annotators
        if np.any(annotators < 0) or np.any(annotators >= n):
            raise IndexError(f"annotator index out of range for {n} annotators: {annotators.tolist()}")

    def _encode(self, enc: int, x: np.ndarray) -> Tensor:
        return encode_features(x, self.spec.text_encoder, self.block(f"text_enc.{enc}."))

    def logits(
        self,
        features: np.ndarray,
        annotators=None,
        train: bool = False,
        rng: np.random.Generator | None = None,
        capture: dict | None = None,
    ) -> Tensor:
        """(B, K) logits for feature rows paired with annotator indices."""
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        b = x.shape[0]
        fam = self.spec.family
        if annotators is None:
            if fam != "majority":
                raise ValueError(f"{fam} needs annotator indices")
            a = np.zeros(b, dtype=np.intp)
        else:
            a = np.broadcast_to(np.asarray(annotators, dtype=np.intp), (b,))
            if fam != "majority":
                self._check_annotators(a)

        if fam == "majority":
            t = self._encode(0, x)
            if capture is not None:
                capture["text"] = t
            return classification_head(t, self.block("head.0."))

        if fam == "per_annotator":
            def per_group(u: int, rows: np.ndarray) -> Tensor:
                enc, head = self.routing[u]
                return classification_head(self._encode(enc, x[rows]), self.block(f"head.{head}."))

            return _route(a, per_group)

        if fam == "sep_heads":
            t = self._encode(0, x)
            if capture is not None:
                capture["text"] = t
            return _route(a, lambda u, rows: classification_head(_select(t, rows), self.block(f"head.{u}.")))

        if fam == "share_rec":
            t = self._encode(0, x)
        else:
            t = _route(a, lambda u, rows: self._encode(self.routing[u][0], x[rows]))
            if self.shared_encoder is not None:
                t = t + self._encode(self.shared_encoder, x)
        u = encode_annotator(a, self.spec.annotator_encoder, self.block("user_enc."), self.spec.n_annotators, train, rng)
        if capture is not None:
            capture["text"] = t
            capture["user"] = u
        return combine(t, u, self.spec.combiner, self.block("combiner."), self.spec.k, train, rng)

    def predict_proba(self, features: np.ndarray, annotators=None, chunk: int = 512) -> np.ndarray:
        """Eval-mode class distributions, computed in chunks without a graph."""
        x = np.atleast_2d(features)
        if annotators is not None:
            annotators = np.broadcast_to(np.asarray(annotators, dtype=np.intp), (x.shape[0],))
        out = []
        for lo in range(0, x.shape[0], chunk):
            a = None if annotators is None else annotators[lo : lo + chunk]
            out.append(softmax(self.logits(x[lo : lo + chunk], a), axis=1).data)
        return np.concatenate(out, axis=0)


def _select(t: Tensor, rows: np.ndarray) -> Tensor:
    return t if len(rows) == t.shape[0] else t.take_rows(rows)


def _route(annotators: np.ndarray, fn) -> Tensor:
    """Evaluate ``fn(annotator, rows)`` per annotator group and restore row order."""
    groups = np.unique(annotators)
    if len(groups) == 1:
        return fn(int(groups[0]), np.arange(len(annotators)))
    parts, order = [], []
    for u in groups:
        rows = np.flatnonzero(annotators == u)
        parts.append(fn(int(u), rows))
        order.append(rows)
    inverse = np.argsort(np.concatenate(order), kind="stable")
    return concat(parts, axis=0).take_rows(inverse)


def build_model(spec: ArchitectureSpec, seed: int) -> Model:
    params = {
        name: Tensor(init_tensor(name, shape, fan_in, seed), requires_grad=True, name=name)
        for name, (shape, fan_in) in model_layout(spec).items()
    }
    return Model(spec, params)


def predict(model: Model, text: str, annotator_index: int | None = None, text_pair: str | None = None) -> np.ndarray:
    """Length-K class distribution for one (text, annotator) pair in eval mode."""
    if model.spec.family != "majority":
        if annotator_index is None:
            raise ValueError(f"{model.spec.family} needs an annotator index")
        model._check_annotators(np.asarray([annotator_index]))
    feats = model.featurize(text, text_pair)[None, :]
    a = None if model.spec.family == "majority" else [annotator_index]
    return model.predict_proba(feats, a)[0]


def predict_all(model: Model, text: str, text_pair: str | None = None) -> np.ndarray:
    """(n_annotators, K) matrix; row ``a`` equals ``predict(model, text, a)``."""
    n = model.spec.n_annotators
    feats = np.repeat(model.featurize(text, text_pair)[None, :], n, axis=0)
    a = None if model.spec.family == "majority" else np.arange(n)
    return model.predict_proba(feats, a)


# ---------------------------------------------------------------------------
# coupling loss between annotator-specific text encoders


def pairwise_penalty(weight_sets: Sequence[Sequence[Tensor]], lam: float) -> Tensor:
    """``lam * sum_{i<j} ||W_i - W_j||^2 / #pairs`` over flattened weight sets.

    Pair terms are added in ascending order of value, so the result is
    bit-identical under any permutation of the sets, and ``lam`` enters as a
    single final factor.
    """
    n = len(weight_sets)
    if n < 2:
        raise ValueError("coupling penalty needs at least two encoders")
    layout = [t.shape for t in weight_sets[0]]
    for i, ws in enumerate(weight_sets[1:], start=1):
        if [t.shape for t in ws] != layout:
            raise ArchitectureError(f"encoder {i} layout {[t.shape for t in ws]} differs from encoder 0 {layout}")
    terms = []
    for i, j in itertools.combinations(range(n), 2):
        dist = None
        for a, b in zip(weight_sets[i], weight_sets[j]):
            d = a - b
            sq = (d * d).sum()
            dist = sq if dist is None else dist + sq
        terms.append(dist.reshape(1))
    stacked = concat(terms)
    order = np.argsort(stacked.data, kind="stable")
    return (stacked.take_rows(order).sum() * (1.0 / len(terms))) * float(lam)


def encoder_weight_sets(model: Model) -> list[list[Tensor]]:
    sets = []
    for prefix in model.text_encoder_prefixes(include_shared=False):
        block = model.block(prefix)
        sets.append([block[k] for k in sorted(block)])
    return sets


def coupling_penalty(model: Model, lam: float) -> Tensor:
    """Divergence penalty over the annotator text encoders of a sep_rec model."""
    if model.spec.family != "sep_rec":
        raise ArchitectureError("coupling penalty is defined for sep_rec models only")
    return pairwise_penalty(encoder_weight_sets(model), lam)


def encoder_divergence(model: Model) -> float:
    """Mean pairwise squared L2 distance between annotator text encoders."""
    sets = [np.concatenate([t.data.ravel() for t in ws]) for ws in encoder_weight_sets(model)]
    if len(sets) < 2:
        return 0.0
    dists = sorted(float(np.sum((a - b) ** 2)) for a, b in itertools.combinations(sets, 2))
    return float(np.sum(dists) / len(dists))


# ---------------------------------------------------------------------------
# parameter counting


class ParameterCount(NamedTuple):
    total: int
    by_block: dict[str, int]
    by_layer: dict[str, int]


def linear_parameter_count(n_in: int, n_out: int, bias: bool = True) -> int:
    return n_in * n_out + (n_out if bias else 0)


def count_parameters(model: Model | ArchitectureSpec) -> ParameterCount:
    spec = model.spec if isinstance(model, Model) else model
    by_block: dict[str, int] = {}
    by_layer: dict[str, int] = {}
    for name, (shape, _) in model_layout(spec).items():
        size = int(np.prod(shape))
        parts = name.split(".")
        block = ".".join(parts[:2]) if parts[0] in ("text_enc", "head") else parts[0]
        layer = name.rsplit(".", 1)[0] if parts[-1] in ("weight", "bias") else name
        by_block[block] = by_block.get(block, 0) + size
        by_layer[layer] = by_layer.get(layer, 0) + size
    return ParameterCount(sum(by_block.values()), by_block, by_layer)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: Model, metadata: Mapping | None = None) -> bytes:
    meta = dict(metadata or {})
    meta["architecture"] = model.spec.to_dict()
    return ckpt.save_checkpoint(model.params, meta)


def load_model(blob: bytes, spec: ArchitectureSpec | None = None) -> tuple[Model, dict]:
    meta = ckpt.read_manifest(blob)[0]
    if spec is None:
        if "architecture" not in meta:
            raise ckpt.CheckpointError("checkpoint metadata carries no architecture")
        spec = ArchitectureSpec.from_dict(meta["architecture"])
    model = build_model(spec, seed=0)
    expected = {k: v.shape for k, v in model.params.items()}
    tensors, meta = ckpt.load_checkpoint(blob, expected)
    model.load_state_dict(tensors)
    return model, meta
