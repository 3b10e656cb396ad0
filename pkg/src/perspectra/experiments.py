"""The synthetic continuum experiment shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .continuum import ArchitectureSpec, encoder_divergence
from .data import Dataset, SyntheticSpec, generate_synthetic
from .evaluation import two_step_score
from .model_zoo import TextEncoderConfig
from .training import DEFAULT_SEEDS, TrainConfig, train

# Five annotators, two of them sparse. Bias groups pair each sparse
# annotator with a dense one holding the same perspective.
SYNTHETIC_CONTINUUM = {
    "random_tables": {
        "seed": 1,
        "n_keywords": 30,
        "shared_strength": 1.0,
        "n_bias_keywords": 12,
        "bias_strength": 3.0,
        "groups": [0, 1, 2, 1, 0],
    },
    "n_annotators": 5,
    "k": 3,
    "vocab_size": 120,
    "splits": {"train": 800, "dev": 100, "test": 200},
    "text_length": [6, 12],
    "flip_rate": 0.1,
    "density": [1.0, 1.0, 0.9, 0.35, 0.15],
}
SYNTHETIC_TEXT_ENCODER = TextEncoderConfig(output_dim=32, vocab_or_bucket_size=512, ngram_range=(1, 1))
SYNTHETIC_TRAINING = TrainConfig(learning_rate=1e-3, batch_size=8)
SPARSEST = 4

ARMS = (("majority", 0.0), ("share_rec", 0.0), ("per_annotator", 0.0), ("sep_rec", 0.0), ("sep_rec", 2.0),
        ("sep_rec", -0.5))


def synthetic_dataset(data_seed: int = 0) -> Dataset:
    return generate_synthetic(SyntheticSpec.from_dict(SYNTHETIC_CONTINUUM), data_seed)[0]


def arm_name(family: str, lam: float) -> str:
    return f"{family}(lambda={lam:g})" if family == "sep_rec" else family


@dataclass
class ArmResult:
    family: str
    lam: float
    seed: int
    average: float
    per_annotator: list[float]
    divergence: float | None
    seconds: float


@dataclass
class ContinuumResult:
    runs: list[ArmResult] = field(default_factory=list)

    def mean(self, family: str, lam: float = 0.0, what: str = "average") -> float:
        vals = []
        for r in self.runs:
            if r.family == family and r.lam == lam:
                vals.append(r.per_annotator[SPARSEST] if what == "sparsest" else getattr(r, what))
        return float(np.mean(vals))

    def table(self) -> str:
        lines = [f"{'arm':<24}{'avg F1':>8}{'sparsest':>10}{'divergence':>13}"]
        for fam, lam in dict.fromkeys((r.family, r.lam) for r in self.runs):
            div = self.mean(fam, lam, "divergence") if fam == "sep_rec" else float("nan")
            lines.append(f"{arm_name(fam, lam):<24}{self.mean(fam, lam):>8.2f}{self.mean(fam, lam, 'sparsest'):>10.2f}"
                         f"{div:>13.4g}")
        return "\n".join(lines)


def run_arm(dataset: Dataset, family: str, lam: float, seed: int,
            training: TrainConfig = SYNTHETIC_TRAINING) -> ArmResult:
    spec = ArchitectureSpec(family=family, n_annotators=dataset.meta.n_annotators, k=dataset.meta.k,
                            text_encoder=SYNTHETIC_TEXT_ENCODER, lam=lam)
    start = time.perf_counter()
    model, _ = train(spec, dataset, training, seed)
    report = two_step_score(model, dataset, seed=seed)
    div = encoder_divergence(model) if family == "sep_rec" else None
    return ArmResult(family, lam, seed, report.annotator_average, list(report.per_annotator_f1), div,
                     time.perf_counter() - start)


def synthetic_continuum(seeds=DEFAULT_SEEDS[:3], arms=ARMS, data_seed: int = 0, progress=None) -> ContinuumResult:
    dataset = synthetic_dataset(data_seed)
    result = ContinuumResult()
    for seed in seeds:
        for family, lam in arms:
            r = run_arm(dataset, family, lam, seed)
            result.runs.append(r)
            if progress:
                progress(r)
    return result
