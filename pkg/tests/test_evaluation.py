from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest

from perspectra.continuum import ArchitectureSpec, build_model
from perspectra.evaluation import (
    AVERAGE_COLUMNS,
    SUMMARY_COLUMNS,
    EvaluationError,
    EvaluationReport,
    aggregate_runs,
    fleiss_kappa,
    macro_f1,
    mean_std,
    naive_baseline,
    predict_matrix,
    render_csv,
    render_markdown,
    table_rows,
    two_step_f1,
    two_step_score,
)
from perspectra.model_zoo import TextEncoderConfig

from conftest import make_dataset


def fleiss_fraction(rows, k):
    """Exact rational Fleiss kappa, written independently of the library."""
    r = len(rows[0])
    n = len(rows)
    counts = [[row.count(c) for c in range(k)] for row in rows]
    p_bar = sum(Fraction(sum(c * (c - 1) for c in cs), r * (r - 1)) for cs in counts) / n
    p_j = [Fraction(sum(cs[j] for cs in counts), n * r) for j in range(k)]
    p_e = sum(p * p for p in p_j)
    return (p_bar - p_e) / (1 - p_e), p_bar, p_e


class TestMacroF1:
    def test_hand_example(self):
        # class 0: P=1 R=1/2 F=2/3; class 1: P=2/3 R=1 F=4/5
        assert macro_f1([0, 0, 1, 1], [0, 1, 1, 1]) == pytest.approx(100 * (2 / 3 + 0.8) / 2, abs=1e-12)
        assert macro_f1([0, 0, 1, 1], [0, 1, 1, 1]) == pytest.approx(73.33, abs=5e-3)

    def test_constant_predictor(self):
        assert macro_f1([0, 0, 1], [0, 0, 0]) == pytest.approx(40.0, abs=1e-12)

    def test_perfect_and_bounds(self):
        assert macro_f1([2, 0, 1], [2, 0, 1]) == 100.0
        assert macro_f1([0, 0], [1, 1]) == 0.0

    def test_absent_classes_ignored(self):
        # k=5 but only classes 0 and 1 ever appear
        assert macro_f1([0, 1], [0, 1], k=5) == 100.0

    def test_errors(self):
        with pytest.raises(EvaluationError):
            macro_f1([0, 1], [0])
        with pytest.raises(EvaluationError):
            macro_f1([], [])


class TestKappa:
    def test_three_by_three_exact(self):
        rows = [[0, 0, 0], [0, 0, 1], [1, 1, 1]]
        want, p_bar, p_e = fleiss_fraction(rows, 2)
        assert p_bar == Fraction(7, 9) and p_e == Fraction(41, 81)
        assert want == Fraction(11, 20)
        assert fleiss_kappa(rows).kappa == pytest.approx(0.55, abs=1e-12)

    def test_against_exact_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            rows = rng.integers(0, 3, size=(7, 4)).tolist()
            want, _, _ = fleiss_fraction(rows, 3)
            assert fleiss_kappa(rows, 3).kappa == pytest.approx(float(want), abs=1e-12)

    def test_identical_raters(self):
        res = fleiss_kappa([[0, 0, 0], [1, 1, 1], [2, 2, 2]])
        assert res.kappa == 1.0 and not res.exact_uniform

    def test_uniform_single_category_flagged(self):
        res = fleiss_kappa([[1, 1], [1, 1]], k=3)
        assert res == (1.0, True)

    def test_random_near_zero(self):
        rng = np.random.default_rng(3)
        rows = rng.integers(0, 3, size=(20000, 5))
        assert abs(fleiss_kappa(rows, 3).kappa) < 0.05

    def test_errors(self):
        with pytest.raises(EvaluationError):
            fleiss_kappa([])
        with pytest.raises(EvaluationError):
            fleiss_kappa([[0, 1], [0]])
        with pytest.raises(EvaluationError):
            fleiss_kappa([[0], [1]])


class TestAggregate:
    def report(self, avg, h="abc", per=None):
        per = per if per is not None else [avg, avg]
        scored = [v for v in per if v is not None]
        return EvaluationReport(per, avg, min(scored), max(scored), 0.0, 0.5, False, [33.3, 33.3], 33.3, config_hash=h)

    def test_mean_sample_std(self):
        agg = aggregate_runs([self.report(50.0), self.report(60.0)])
        assert agg["annotator_average"].mean == 55.0
        assert agg["annotator_average"].std == pytest.approx(np.sqrt(50), abs=1e-12)
        assert agg["annotator_average"].format() == "55.00 ± 7.07"

    def test_single_run_zero_std(self):
        assert mean_std([42.0]) == (42.0, 0.0)

    def test_mixed_hash_rejected(self):
        with pytest.raises(EvaluationError, match="different configs"):
            aggregate_runs([self.report(50.0, "a"), self.report(60.0, "b")])
        with pytest.raises(EvaluationError):
            aggregate_runs([])

    def test_excluded_annotator_skipped(self):
        agg = aggregate_runs([self.report(50.0, per=[50.0, None]), self.report(70.0, per=[70.0, None])])
        assert "annotator_0" in agg and "annotator_1" not in agg

    def test_render(self):
        agg = aggregate_runs([self.report(50.0), self.report(60.0)])
        rows = table_rows([("share_rec", "validity", agg)])
        csv_text = render_csv(rows, SUMMARY_COLUMNS)
        assert csv_text.splitlines()[0] == ",".join(SUMMARY_COLUMNS)
        assert "55.00 ± 7.07" in csv_text
        md = render_markdown(rows, AVERAGE_COLUMNS).splitlines()
        assert md[0] == "| model | task | mean±std |" and md[2] == "| share_rec | validity | 55.00 ± 7.07 |"


class FixedModel:
    """Duck-typed model that returns chosen per-annotator predictions."""

    def __init__(self, family, n, k, table):
        self.spec = SimpleNamespace(family=family, n_annotators=n, k=k)
        self.table = table

    def features(self, instances):
        return [x.id for x in instances]

    def predict_proba(self, ids, annotators=None):
        cols = [self.table[(i, 0 if annotators is None else int(a))] for i, a in
                zip(ids, annotators if annotators is not None else [0] * len(ids))]
        return np.eye(self.spec.k)[cols]


class TestTwoStep:
    def counterexample(self):
        a1 = [0, 0, 0, 1]
        a2 = [1, 1, 1, 0]
        rows = [("train", "x", {"a1": 0, "a2": 0})]
        rows += [("test", f"w{i}", {"a1": g1, "a2": g2}) for i, (g1, g2) in enumerate(zip(a1, a2))]
        ds = make_dataset(rows, k=2, annotators=("a1", "a2"))
        table = {}
        for i, x in enumerate(ds.split("test")):
            table[(x.id, 0)] = 0
            table[(x.id, 1)] = 1
        return ds, FixedModel("per_annotator", 2, 2, table), a1, a2

    def test_per_annotator_first(self):
        ds, model, a1, a2 = self.counterexample()
        rep = two_step_score(model, ds)
        per_first = (macro_f1(a1, [0] * 4) + macro_f1(a2, [1] * 4)) / 2
        pooled = macro_f1(a1 + a2, [0] * 4 + [1] * 4)
        assert per_first == pytest.approx(100 * 6 / 7 / 2, abs=1e-12)
        assert pooled == pytest.approx(75.0, abs=1e-12)
        assert rep.annotator_average == pytest.approx(per_first, abs=1e-12) != pooled
        assert two_step_f1([a1, a2], [[0] * 4, [1] * 4])[1] == pytest.approx(per_first, abs=1e-12)

    def test_sparse_gold_and_dense_kappa(self):
        rows = [("train", "x", {"a1": 0}), ("test", "p", {"a1": 0}), ("test", "q", {"a1": 1, "a2": 1})]
        ds = make_dataset(rows, k=2, annotators=("a1", "a2"))
        table = {("test0", 0): 0, ("test0", 1): 1, ("test1", 0): 1, ("test1", 1): 1}
        rep = two_step_score(FixedModel("per_annotator", 2, 2, table), ds, seed=3, config_hash="h")
        assert rep.per_annotator_f1 == [100.0, 100.0]
        assert rep.items_per_annotator == [2, 1]
        # kappa uses every (item, annotator) prediction, gold or not
        assert rep.predicted_kappa == pytest.approx(fleiss_kappa([[0, 1], [1, 1]]).kappa)
        assert (rep.seed, rep.config_hash) == (3, "h")

    def test_annotator_without_test_items_excluded(self):
        rows = [("train", "x", {"a1": 0, "a2": 1}), ("test", "p", {"a1": 0})]
        ds = make_dataset(rows, k=2, annotators=("a1", "a2"))
        table = {("test0", 0): 0, ("test0", 1): 0}
        rep = two_step_score(FixedModel("per_annotator", 2, 2, table), ds)
        assert rep.per_annotator_f1 == [100.0, None] and rep.excluded_annotators == ["a2"]
        assert rep.annotator_average == 100.0

    def test_report_invariants(self, tiny_dataset):
        te = TextEncoderConfig(output_dim=4, vocab_or_bucket_size=32, ngram_range=(1, 1))
        for fam in ("majority", "sep_heads"):
            m = build_model(ArchitectureSpec(family=fam, n_annotators=3, k=3, text_encoder=te), 0)
            rep = two_step_score(m, tiny_dataset)
            scored = [v for v in rep.per_annotator_f1 if v is not None]
            assert rep.min <= rep.annotator_average <= rep.max
            assert all(0.0 <= v <= 100.0 for v in scored)
            assert rep.std == pytest.approx(np.std(scored, ddof=1))
            assert EvaluationReport.from_dict(rep.to_dict()) == rep
            if fam == "majority":
                preds = predict_matrix(m, tiny_dataset.split("test"))
                assert (preds == preds[:, :1]).all() and rep.predicted_kappa == 1.0


class TestBaseline:
    def test_balanced_binary(self):
        rows = [("train", "x", {"a1": 0, "a2": 0}), ("train", "y", {"a1": 0, "a2": 1})]
        rows += [("test", f"t{i}", {"a1": i % 2, "a2": (i + 1) % 2}) for i in range(10)]
        ds = make_dataset(rows, k=2, annotators=("a1", "a2"))
        per, avg = naive_baseline(ds)
        assert per == pytest.approx([100 / 3, 100 / 3], abs=1e-12) and avg == pytest.approx(100 / 3)

    def test_needs_train(self):
        ds = make_dataset([("test", "x", {"a1": 0})])
        with pytest.raises(EvaluationError):
            naive_baseline(ds)
