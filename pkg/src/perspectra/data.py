"""Disaggregated annotation datasets.

On disk a dataset is a directory holding ``meta.json`` and one or more JSONL
files (``train.jsonl``, ``dev.jsonl``, ``test.jsonl`` by convention), one
instance per line::

    {"id": "t-1", "split": "train", "text": "...", "text_pair": null,
     "annotations": {"a1": "high", "a2": "abstain"}}

Annotator order in ``meta.json`` fixes annotator indices.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
ABSTAIN = "abstain"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetMeta:
    k: int
    labels: tuple[str, ...]
    annotators: tuple[str, ...]
    language: str = "und"

    def __post_init__(self):
        if self.k < 2:
            raise DatasetError("k must be >= 2")
        if len(self.labels) != self.k:
            raise DatasetError(f"{len(self.labels)} label names for k={self.k}")
        if len(set(self.annotators)) != len(self.annotators) or not self.annotators:
            raise DatasetError("annotator registry must be non-empty and unique")
        if ABSTAIN in self.labels:
            raise DatasetError(f"{ABSTAIN!r} is reserved and cannot be a label name")

    @property
    def n_annotators(self) -> int:
        return len(self.annotators)

    def to_dict(self) -> dict:
        return {"k": self.k, "labels": list(self.labels), "annotators": list(self.annotators), "language": self.language}


@dataclass(frozen=True)
class Instance:
    id: str
    split: str
    text: str
    annotations: dict[str, int]
    text_pair: str | None = None


# annotation pair used for training: (instance, annotator index, label)
Pair = tuple[Instance, int, int]


@dataclass
class Dataset:
    meta: DatasetMeta
    instances: list[Instance]
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {a: i for i, a in enumerate(self.meta.annotators)}

    def __len__(self) -> int:
        return len(self.instances)

    def annotator_index(self, annotator_id: str) -> int:
        return self._index[annotator_id]

    def split(self, name: str) -> list[Instance]:
        return [x for x in self.instances if x.split == name]

    def get(self, instance_id: str) -> Instance:
        for x in self.instances:
            if x.id == instance_id:
                return x
        raise KeyError(f"unknown instance id {instance_id!r}")

    @property
    def has_pairs(self) -> bool:
        return any(x.text_pair is not None for x in self.instances)

    def annotator_view(self, annotator: int, split: str | None = None) -> list[tuple[Instance, int]]:
        return annotator_view(self, annotator, split)

    def pairs(self, split: str) -> list[Pair]:
        out = []
        for x in self.split(split):
            for aid, label in x.annotations.items():
                out.append((x, self._index[aid], label))
        return out


def annotator_view(dataset: Dataset, annotator: int, split: str | None = None) -> list[tuple[Instance, int]]:
    """Instances the annotator labeled, with that annotator's label."""
    if not 0 <= annotator < dataset.meta.n_annotators:
        raise IndexError(f"annotator index {annotator} out of range")
    aid = dataset.meta.annotators[annotator]
    return [
        (x, x.annotations[aid])
        for x in dataset.instances
        if aid in x.annotations and (split is None or x.split == split)
    ]


def aggregate_majority(annotations: Mapping[str, int] | Iterable[int]) -> tuple[int, bool]:
    """Plurality label; ties go to the lowest class index and set the flag."""
    labels = list(annotations.values()) if isinstance(annotations, Mapping) else list(annotations)
    if not labels:
        raise ValueError("cannot aggregate an empty annotation set")
    tally = Counter(labels)
    top = max(tally.values())
    winners = sorted(c for c, n in tally.items() if n == top)
    return winners[0], len(winners) > 1


# ---------------------------------------------------------------------------
# I/O


def _read_meta(path: Path) -> DatasetMeta:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        return DatasetMeta(
            k=int(raw["k"]),
            labels=tuple(raw["labels"]),
            annotators=tuple(raw["annotators"]),
            language=raw.get("language", "und"),
        )
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise DatasetError(f"{path}: invalid meta file ({e})") from e


def _data_files(root: Path) -> list[Path]:
    files = sorted(root.glob("*.jsonl"))
    rank = {f"{s}.jsonl": i for i, s in enumerate(SPLITS)}
    return sorted(files, key=lambda p: (rank.get(p.name, len(SPLITS)), p.name))


def load_dataset(path: str | Path) -> Dataset:
    """Read and validate a dataset directory (or a single JSONL file next to ``meta.json``)."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    meta = _read_meta(root / "meta.json")
    files = _data_files(root) if path.is_dir() else [path]
    label_index = {name: i for i, name in enumerate(meta.labels)}
    registry = set(meta.annotators)
    seen: set[str] = set()
    instances: list[Instance] = []
    for f in files:
        with f.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                where = f"{f.name}:{lineno}"
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DatasetError(f"{where}: malformed JSON ({e.msg})") from e
                inst = _parse_instance(rec, where, meta, label_index, registry)
                if inst.id in seen:
                    raise DatasetError(f"{where}: duplicate instance id {inst.id!r}")
                seen.add(inst.id)
                if not inst.annotations:
                    log.warning("%s: instance %r has only abstentions; dropped", where, inst.id)
                    continue
                instances.append(inst)
    return Dataset(meta, instances)


def _parse_instance(rec, where: str, meta: DatasetMeta, label_index, registry) -> Instance:
    if not isinstance(rec, dict):
        raise DatasetError(f"{where}: expected a JSON object")
    for key in ("id", "split", "text", "annotations"):
        if key not in rec:
            raise DatasetError(f"{where}: missing field {key!r}")
    if rec["split"] not in SPLITS:
        raise DatasetError(f"{where}: unknown split {rec['split']!r}")
    if not isinstance(rec["annotations"], dict):
        raise DatasetError(f"{where}: annotations must be an object")
    ann: dict[str, int] = {}
    # keep registry order so serialization is canonical
    for aid in sorted(rec["annotations"], key=lambda a: meta.annotators.index(a) if a in registry else -1):
        label = rec["annotations"][aid]
        if aid not in registry:
            raise DatasetError(f"{where}: unknown annotator id {aid!r}")
        if label == ABSTAIN:
            continue
        if isinstance(label, bool):
            raise DatasetError(f"{where}: invalid label {label!r}")
        if isinstance(label, int):
            if not 0 <= label < meta.k:
                raise DatasetError(f"{where}: class index {label} out of range for k={meta.k}")
            ann[aid] = label
        elif label in label_index:
            ann[aid] = label_index[label]
        else:
            raise DatasetError(f"{where}: unknown label {label!r} for annotator {aid!r}")
    pair = rec.get("text_pair")
    return Instance(id=str(rec["id"]), split=rec["split"], text=rec["text"], annotations=ann, text_pair=pair)


def instance_to_json(inst: Instance, meta: DatasetMeta) -> str:
    record = {
        "id": inst.id,
        "split": inst.split,
        "text": inst.text,
        "text_pair": inst.text_pair,
        "annotations": {a: meta.labels[inst.annotations[a]] for a in meta.annotators if a in inst.annotations},
    }
    return json.dumps(record, ensure_ascii=False)


def dump_dataset(dataset: Dataset) -> dict[str, str]:
    """Canonical file contents keyed by file name."""
    files = {"meta.json": json.dumps(dataset.meta.to_dict(), ensure_ascii=False, indent=2) + "\n"}
    for split in SPLITS:
        rows = [instance_to_json(x, dataset.meta) for x in dataset.instances if x.split == split]
        if rows:
            files[f"{split}.jsonl"] = "\n".join(rows) + "\n"
    return files


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, content in dump_dataset(dataset).items():
        (directory / name).write_text(content, encoding="utf-8")
    return directory


def majority_labels(instances: Sequence[Instance]) -> list[int]:
    return [aggregate_majority(x.annotations)[0] for x in instances]


# ---------------------------------------------------------------------------
# synthetic annotator populations


@dataclass(frozen=True)
class SyntheticSpec:
    """Keyword-driven labeling functions for a population of annotators.

    The noiseless label of annotator ``a`` for a text is the argmax over
    classes of the summed ``shared_scores`` and ``annotator_bias[a]`` rows of
    the distinct tokens it contains (ties to the lowest class). Observed
    labels are flipped to a uniformly drawn other class with ``flip_rate``.
    """

    n_annotators: int = 5
    k: int = 3
    vocab_size: int = 200
    splits: Mapping[str, int] = field(default_factory=lambda: {"train": 788, "dev": 113, "test": 226})
    text_length: tuple[int, int] = (8, 16)
    shared_scores: Mapping[str, Sequence[float]] = field(default_factory=dict)
    annotator_bias: Sequence[Mapping[str, Sequence[float]]] = ()
    flip_rate: float | Sequence[float] = 0.0
    density: float | Sequence[float] = 1.0
    language: str = "synthetic"

    def __post_init__(self):
        n = self.n_annotators
        if n < 1 or self.k < 2 or self.vocab_size < 1:
            raise ValueError("need n_annotators >= 1, k >= 2, vocab_size >= 1")
        if not self.annotator_bias:
            object.__setattr__(self, "annotator_bias", tuple({} for _ in range(n)))
        if len(self.annotator_bias) != n:
            raise ValueError("annotator_bias needs one table per annotator")
        for name in ("flip_rate", "density"):
            v = getattr(self, name)
            vals = [float(v)] * n if np.isscalar(v) else [float(x) for x in v]
            if len(vals) != n:
                raise ValueError(f"{name} needs one value per annotator")
            object.__setattr__(self, name, tuple(vals))
        if any(not 0.0 <= f < 0.5 for f in self.flip_rate):
            raise ValueError("flip rates must be in [0, 0.5)")
        if any(not 0.0 < d <= 1.0 for d in self.density):
            raise ValueError("densities must be in (0, 1]")
        lo, hi = self.text_length
        if not 1 <= lo <= hi:
            raise ValueError("bad text_length")
        for table in [self.shared_scores, *self.annotator_bias]:
            for tok, row in table.items():
                if len(row) != self.k:
                    raise ValueError(f"score row for {tok!r} must have {self.k} entries")

    @property
    def vocab(self) -> list[str]:
        return [f"w{i}" for i in range(self.vocab_size)]

    def to_dict(self) -> dict:
        return {
            "n_annotators": self.n_annotators,
            "k": self.k,
            "vocab_size": self.vocab_size,
            "splits": dict(self.splits),
            "text_length": list(self.text_length),
            "shared_scores": {t: list(map(float, r)) for t, r in self.shared_scores.items()},
            "annotator_bias": [{t: list(map(float, r)) for t, r in b.items()} for b in self.annotator_bias],
            "flip_rate": list(self.flip_rate),
            "density": list(self.density),
            "language": self.language,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        d = dict(d)
        if "random_tables" in d:
            return cls.with_random_tables(**d.pop("random_tables"), **d)
        if "text_length" in d:
            d["text_length"] = tuple(d["text_length"])
        return cls(**d)

    @classmethod
    def with_random_tables(
        cls,
        seed: int = 0,
        n_keywords: int = 30,
        shared_strength: float = 1.0,
        n_bias_keywords: int = 6,
        bias_strength: float = 3.0,
        groups: Sequence[int] | None = None,
        **kwargs,
    ) -> "SyntheticSpec":
        """Draw shared keyword scores and per-annotator keyword offsets.

        Each shared keyword votes for one class with ``shared_strength``.
        Each bias table holds ``n_bias_keywords`` keywords whose presence adds
        ``bias_strength`` to one class. ``groups[a]`` names the bias table of
        annotator ``a``, so annotators in one group share a perspective; by
        default every annotator gets a table of their own.
        """
        base = cls(**kwargs)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7AB1E5]))
        vocab = base.vocab
        chosen = rng.choice(len(vocab), size=min(n_keywords, len(vocab)), replace=False)
        shared = {}
        for i in chosen:
            row = np.zeros(base.k)
            row[rng.integers(base.k)] = shared_strength
            shared[vocab[i]] = row.tolist()
        groups = list(range(base.n_annotators)) if groups is None else [int(g) for g in groups]
        if len(groups) != base.n_annotators:
            raise ValueError("groups needs one entry per annotator")
        tables: dict[int, dict] = {}
        for g in sorted(set(groups)):
            table = {}
            for i in rng.choice(len(vocab), size=min(n_bias_keywords, len(vocab)), replace=False):
                row = np.zeros(base.k)
                row[rng.integers(base.k)] = bias_strength
                table[vocab[i]] = row.tolist()
            tables[g] = table
        params = {**base.to_dict(), "shared_scores": shared, "annotator_bias": [tables[g] for g in groups]}
        params["text_length"] = tuple(params["text_length"])
        return cls(**params)


@dataclass(frozen=True)
class SyntheticOracle:
    spec: SyntheticSpec

    def scores(self, annotator: int, tokens: Iterable[str]) -> np.ndarray:
        s = np.zeros(self.spec.k)
        bias = self.spec.annotator_bias[annotator]
        for tok in set(tokens):
            if tok in self.spec.shared_scores:
                s += self.spec.shared_scores[tok]
            if tok in bias:
                s += bias[tok]
        return s

    def label(self, annotator: int, text: str) -> int:
        """Noiseless label of ``annotator`` for ``text``."""
        return int(np.argmax(self.scores(annotator, text.split())))

    @property
    def bayes_accuracy(self) -> list[float]:
        return [1.0 - f for f in self.spec.flip_rate]

    def to_dict(self, dataset: Dataset | None = None) -> dict:
        d = {"spec": self.spec.to_dict(), "bayes_accuracy": self.bayes_accuracy}
        if dataset is not None:
            n = self.spec.n_annotators
            d["noiseless_labels"] = {x.id: [self.label(a, x.text) for a in range(n)] for x in dataset.instances}
        return d


def generate_synthetic(spec: SyntheticSpec, seed: int) -> tuple[Dataset, SyntheticOracle]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E7]))
    oracle = SyntheticOracle(spec)
    n, k = spec.n_annotators, spec.k
    annotators = tuple(f"ann{i + 1}" for i in range(n))
    meta = DatasetMeta(k=k, labels=tuple(f"c{c}" for c in range(k)), annotators=annotators, language=spec.language)
    vocab = spec.vocab
    density = np.asarray(spec.density)
    lo, hi = spec.text_length
    instances = []
    for split in SPLITS:
        for i in range(int(spec.splits.get(split, 0))):
            length = int(rng.integers(lo, hi + 1))
            text = " ".join(vocab[j] for j in rng.integers(len(vocab), size=length))
            who = rng.random(n) < density
            if not who.any():
                who[int(np.argmax(density))] = True
            flips = rng.random(n)
            offsets = rng.integers(k - 1, size=n)
            ann = {}
            for a in np.flatnonzero(who):
                y = oracle.label(int(a), text)
                if flips[a] < spec.flip_rate[a]:
                    y = int(offsets[a]) + (1 if offsets[a] >= y else 0)
                ann[annotators[a]] = y
            instances.append(Instance(id=f"{split}-{i:05d}", split=split, text=text, annotations=ann))
    return Dataset(meta, instances), oracle
