"""Class weights, batching, loss assembly and the epoch loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff
from .autodiff import Graph, NonFiniteError, Tensor, weighted_nll
from .continuum import ArchitectureSpec, Model, build_model, coupling_penalty
from .data import Dataset, Instance, aggregate_majority
from .optim import AdamW

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (
    2923262358,
    1842330218,
    827634346,
    171049425,
    991167630,
    1070299506,
    762227973,
    555596930,
    1010185121,
    419984946,
)

_DEFAULT_EPOCHS = {"majority": 10, "per_annotator": 10, "sep_heads": 7, "sep_rec": 12}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int | None = None
    epochs: int | None = None
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checked: bool = False

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("seed list must be non-empty")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def resolved_batch_size(self, family: str) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 2 if family == "sep_rec" else 8

    def resolved_epochs(self, family: str, pair_dataset: bool = False) -> int:
        if self.epochs is not None:
            return self.epochs
        if family == "share_rec":
            return 14 if pair_dataset else 20
        return _DEFAULT_EPOCHS[family]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


@dataclass
class RunRecord:
    seed: int
    config_hash: str
    family: str
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0
    checkpoint: str | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    def loss_csv(self) -> str:
        rows = ["epoch,mean_loss"] + [f"{i + 1},{v!r}" for i, v in enumerate(self.epoch_losses)]
        return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# class weights


def compute_class_weights(labels: Sequence[int], k: int) -> np.ndarray:
    """Inverse-frequency weights ``N / (K * n_c)``; empty classes get 0."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size == 0:
        raise ValueError("cannot compute class weights from an empty view")
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    weights = np.zeros(k)
    present = counts > 0
    weights[present] = labels.size / (k * counts[present])
    if not present.all():
        log.warning("classes %s absent from view; their weight is 0", np.flatnonzero(~present).tolist())
    return weights


def class_weight_table(model_or_spec, dataset: Dataset, split: str = "train") -> np.ndarray:
    """(rows, K) table: one row per annotator, or one majority row for the majority family."""
    spec = getattr(model_or_spec, "spec", model_or_spec)
    k = dataset.meta.k
    if spec.family == "majority":
        labels = [aggregate_majority(x.annotations)[0] for x in dataset.split(split)]
        return compute_class_weights(labels, k)[None, :]
    rows = []
    for a in range(dataset.meta.n_annotators):
        view = dataset.annotator_view(a, split)
        if not view:
            raise TrainingError(f"annotator {dataset.meta.annotators[a]!r} has no {split} items")
        rows.append(compute_class_weights([y for _, y in view], k))
    return np.stack(rows)


# ---------------------------------------------------------------------------
# batching and loss


def training_units(spec: ArchitectureSpec, dataset: Dataset, split: str = "train") -> list[tuple[Instance, int, int]]:
    """(instance, annotator, label) units; majority units carry annotator -1."""
    if spec.family == "majority":
        return [(x, -1, aggregate_majority(x.annotations)[0]) for x in dataset.split(split)]
    return dataset.pairs(split)


def make_batches(units: Sequence, batch_size: int, seed: int, epoch: int, stream: int = 0) -> list[list]:
    """Shuffle keyed by (seed, epoch, stream) and cut into batches; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(stream)]))
    order = rng.permutation(len(units))
    return [[units[i] for i in order[lo : lo + batch_size]] for lo in range(0, len(units), batch_size)]


def batch_loss(
    model: Model,
    batch: Sequence[tuple[Instance, int, int]],
    weight_table: np.ndarray,
    lam: float | None = None,
    train: bool = True,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean item-weighted cross-entropy, plus the coupling penalty once for sep_rec."""
    fam = model.spec.family
    feats = model.features([x for x, _, _ in batch])
    annotators = np.asarray([a for _, a, _ in batch], dtype=np.intp)
    targets = np.asarray([y for _, _, y in batch], dtype=np.intp)
    rows = np.zeros_like(annotators) if fam == "majority" else annotators
    if weight_table.ndim != 2 or rows.max() >= weight_table.shape[0] or rows.min() < 0:
        raise TrainingError(f"class weight table {weight_table.shape} has no row for annotators {sorted(set(rows.tolist()))}")
    w = weight_table[rows, targets]
    if np.any(w <= 0):
        raise TrainingError("non-positive class weight for a training target")
    logits = model.logits(feats, None if fam == "majority" else annotators, train=train, rng=rng)
    loss = weighted_nll(logits, targets, w)
    lam = model.spec.lam if lam is None else lam
    if fam == "sep_rec" and lam != 0.0:
        loss = loss + coupling_penalty(model, lam)
    return loss


def _params_of(model: Model, prefixes: Sequence[str]) -> dict[str, Tensor]:
    return {k: v for k, v in model.params.items() if any(k.startswith(p) for p in prefixes)}


def _run_epochs(model, params, units, weight_table, config, seed, epochs, batch_size, stream, rng, losses):
    opt = AdamW(params, lr=config.learning_rate, betas=(config.beta1, config.beta2), eps=config.eps,
                weight_decay=config.weight_decay)
    steps = 0
    for epoch in range(epochs):
        total, count = 0.0, 0
        for b, batch in enumerate(make_batches(units, batch_size, seed, epoch, stream)):
            where = f"epoch {epoch + 1}, batch {b + 1} (seed {seed})"
            try:
                with Graph() as g:
                    loss = batch_loss(model, batch, weight_table, train=True, rng=rng)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss at {where}")
                grads = g.backward(loss)
            except NonFiniteError as e:
                raise TrainingError(f"non-finite value at {where}: {e}") from e
            opt.step({name: grads[p] for name, p in params.items() if grads.reached(p)})
            total += value
            count += 1
            steps += 1
        losses[epoch].append((total, count))
    return steps


def train(
    spec: ArchitectureSpec,
    dataset: Dataset,
    config: TrainConfig,
    seed: int,
    config_hash: str = "",
) -> tuple[Model, RunRecord]:
    """Train one model from a fresh seeded initialization."""
    start = time.perf_counter()
    if spec.n_annotators != dataset.meta.n_annotators or spec.k != dataset.meta.k:
        raise TrainingError(
            f"architecture ({spec.n_annotators} annotators, k={spec.k}) does not match dataset "
            f"({dataset.meta.n_annotators} annotators, k={dataset.meta.k})"
        )
    model = build_model(spec, seed)
    epochs = config.resolved_epochs(spec.family, dataset.has_pairs)
    batch_size = config.resolved_batch_size(spec.family)
    record = RunRecord(seed=int(seed), config_hash=config_hash, family=spec.family)
    if epochs == 0:
        record.wall_time = time.perf_counter() - start
        return model, record
    weight_table = class_weight_table(spec, dataset)
    units = training_units(spec, dataset)
    if not units:
        raise TrainingError("no training units in the train split")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD409]))
    losses: list[list[tuple[float, int]]] = [[] for _ in range(epochs)]
    with autodiff.checked(config.checked):
        if spec.family == "per_annotator":
            for a in range(spec.n_annotators):
                mine = [u for u in units if u[1] == a]
                params = _params_of(model, [f"text_enc.{a}.", f"head.{a}."])
                record.steps += _run_epochs(model, params, mine, weight_table, config, seed, epochs, batch_size,
                                            a + 1, rng, losses)
        else:
            record.steps = _run_epochs(model, model.params, units, weight_table, config, seed, epochs, batch_size,
                                       0, rng, losses)
    record.epoch_losses = [sum(t for t, _ in ep) / max(1, sum(c for _, c in ep)) for ep in losses]
    record.wall_time = time.perf_counter() - start
    log.info("trained %s seed=%s in %.1fs, final loss %.4f", spec.family, seed, record.wall_time,
             record.epoch_losses[-1])
    return model, record
