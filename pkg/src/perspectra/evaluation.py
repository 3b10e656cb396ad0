"""Annotator-level scoring: per-annotator macro-F1 first, then the average.

All F1 values are percentages.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .continuum import Model
from .data import Dataset, aggregate_majority

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


def macro_f1(gold: Sequence[int], pred: Sequence[int], k: int | None = None) -> float:
    """Macro-F1 x 100 over the classes present in ``gold`` or ``pred``.

    ``k`` is accepted for signature symmetry; classes absent from both
    sequences never enter the average.
    """
    gold = np.asarray(gold, dtype=np.intp)
    pred = np.asarray(pred, dtype=np.intp)
    if gold.shape != pred.shape:
        raise EvaluationError(f"gold has {gold.size} labels, pred has {pred.size}")
    if gold.size == 0:
        raise EvaluationError("macro_f1 of empty sequences")
    scores = []
    for c in np.union1d(gold, pred):
        tp = np.sum((gold == c) & (pred == c))
        fp = np.sum((gold != c) & (pred == c))
        fn = np.sum((gold == c) & (pred != c))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * p * r / (p + r) if p + r else 0.0)
    return 100.0 * float(np.mean(scores))


def two_step_f1(gold_by_annotator: Sequence[Sequence[int]], pred_by_annotator: Sequence[Sequence[int]]) -> tuple[list[float], float]:
    """Per-annotator macro-F1, then their arithmetic mean."""
    per = [macro_f1(g, p) for g, p in zip(gold_by_annotator, pred_by_annotator)]
    return per, float(sum(per) / len(per))


class FleissKappa(NamedTuple):
    kappa: float
    exact_uniform: bool


def fleiss_kappa(matrix, k: int | None = None) -> FleissKappa:
    """Fleiss' kappa over an items x raters matrix of class indices.

    When every rating falls in one category the statistic is 0/0; that case
    is reported as perfect agreement with ``exact_uniform`` set.
    """
    rows = [list(r) for r in matrix]
    if not rows:
        raise EvaluationError("fleiss_kappa needs at least one item")
    r = len(rows[0])
    if any(len(row) != r for row in rows):
        raise EvaluationError("ragged prediction matrix")
    if r < 2:
        raise EvaluationError("fleiss_kappa needs at least two raters")
    m = np.asarray(rows, dtype=np.intp)
    k = int(m.max()) + 1 if k is None else k
    counts = np.stack([np.bincount(row, minlength=k) for row in m]).astype(np.float64)
    if np.count_nonzero(counts.sum(axis=0)) == 1:
        return FleissKappa(1.0, True)
    p_i = (np.sum(counts * counts, axis=1) - r) / (r * (r - 1))
    p_bar = p_i.mean()
    p_j = counts.sum(axis=0) / (m.shape[0] * r)
    p_e = float(np.sum(p_j * p_j))
    return FleissKappa(float((p_bar - p_e) / (1.0 - p_e)), False)


def _sample_std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclass
class EvaluationReport:
    per_annotator_f1: list[float | None]
    annotator_average: float
    min: float
    max: float
    std: float
    predicted_kappa: float
    kappa_exact_uniform: bool
    baseline_per_annotator: list[float | None]
    baseline_average: float
    excluded_annotators: list[str] = field(default_factory=list)
    items_per_annotator: list[int] = field(default_factory=list)
    seed: int | None = None
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(**d)


def predict_matrix(model: Model, instances) -> np.ndarray:
    """Dense items x annotators argmax predictions (eval mode)."""
    feats = model.features(instances)
    n = model.spec.n_annotators
    if model.spec.family == "majority":
        col = model.predict_proba(feats).argmax(axis=1)
        return np.repeat(col[:, None], n, axis=1)
    cols = [model.predict_proba(feats, np.full(len(instances), a)).argmax(axis=1) for a in range(n)]
    return np.stack(cols, axis=1)


def naive_baseline(dataset: Dataset, train_split: str = "train", test_split: str = "test") -> tuple[list[float | None], float]:
    """Constant predictor of the most frequent majority-aggregated train label."""
    train = dataset.split(train_split)
    if not train:
        raise EvaluationError("naive baseline needs train instances")
    agg = np.bincount([aggregate_majority(x.annotations)[0] for x in train], minlength=dataset.meta.k)
    label = int(np.argmax(agg))
    per: list[float | None] = []
    for a in range(dataset.meta.n_annotators):
        gold = [y for _, y in dataset.annotator_view(a, test_split)]
        per.append(macro_f1(gold, [label] * len(gold)) if gold else None)
    scored = [v for v in per if v is not None]
    return per, float(sum(scored) / len(scored))


def two_step_score(
    model: Model,
    dataset: Dataset,
    split: str = "test",
    seed: int | None = None,
    config_hash: str = "",
) -> EvaluationReport:
    test = dataset.split(split)
    if not test:
        raise EvaluationError(f"empty {split} split")
    preds = predict_matrix(model, test)
    row_of = {x.id: i for i, x in enumerate(test)}
    per: list[float | None] = []
    sizes: list[int] = []
    excluded: list[str] = []
    for a, aid in enumerate(dataset.meta.annotators):
        view = dataset.annotator_view(a, split)
        sizes.append(len(view))
        if not view:
            log.warning("annotator %r has no %s annotations; excluded from the average", aid, split)
            per.append(None)
            excluded.append(aid)
            continue
        gold = [y for _, y in view]
        pred = [int(preds[row_of[x.id], a]) for x, _ in view]
        per.append(macro_f1(gold, pred))
    scored = [v for v in per if v is not None]
    kappa = fleiss_kappa(preds, dataset.meta.k)
    base_per, base_avg = naive_baseline(dataset, test_split=split)
    return EvaluationReport(
        per_annotator_f1=per,
        annotator_average=float(sum(scored) / len(scored)),
        min=float(min(scored)),
        max=float(max(scored)),
        std=_sample_std(scored),
        predicted_kappa=kappa.kappa,
        kappa_exact_uniform=kappa.exact_uniform,
        baseline_per_annotator=base_per,
        baseline_average=base_avg,
        excluded_annotators=excluded,
        items_per_annotator=sizes,
        seed=seed,
        config_hash=config_hash,
    )


# ---------------------------------------------------------------------------
# aggregation over seeds


class MeanStd(NamedTuple):
    mean: float
    std: float

    def format(self, digits: int = 2) -> str:
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"


def mean_std(values: Sequence[float]) -> MeanStd:
    values = [float(v) for v in values]
    if not values:
        raise EvaluationError("no values to aggregate")
    return MeanStd(float(np.mean(values)), _sample_std(values))


def aggregate_runs(reports: Sequence[EvaluationReport]) -> dict[str, MeanStd]:
    """Per-metric mean and sample standard deviation across runs."""
    if not reports:
        raise EvaluationError("aggregate_runs needs at least one report")
    hashes = {r.config_hash for r in reports}
    if len(hashes) > 1:
        raise EvaluationError(f"refusing to aggregate reports from different configs: {sorted(hashes)}")
    out = {
        name: mean_std([getattr(r, name) for r in reports])
        for name in ("annotator_average", "min", "max", "std", "predicted_kappa", "baseline_average")
    }
    n = len(reports[0].per_annotator_f1)
    for a in range(n):
        vals = [r.per_annotator_f1[a] for r in reports if r.per_annotator_f1[a] is not None]
        if vals:
            out[f"annotator_{a}"] = mean_std(vals)
    return out


# ---------------------------------------------------------------------------
# table rendering


def table_rows(entries: Sequence[tuple[str, str, dict[str, MeanStd]]]) -> list[dict[str, str]]:
    """Rows for (model, task, aggregate) entries with average and min/max columns."""
    rows = []
    for model_name, task, agg in entries:
        rows.append(
            {
                "model": model_name,
                "task": task,
                "mean±std": agg["annotator_average"].format(),
                "min": f"{agg['min'].mean:.2f}",
                "max": f"{agg['max'].mean:.2f}",
                "kappa": f"{agg['predicted_kappa'].mean:.2f}",
            }
        )
    return rows


def render_csv(rows: list[dict[str, str]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def render_markdown(rows: list[dict[str, str]], columns: Sequence[str]) -> str:
    lines = ["| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(str(row.get(c, "")) for c in columns) + " |")
    return "\n".join(lines) + "\n"


AVERAGE_COLUMNS = ("model", "task", "mean±std")
RANGE_COLUMNS = ("model", "min", "max")
SUMMARY_COLUMNS = ("model", "task", "mean±std", "min", "max", "kappa")
