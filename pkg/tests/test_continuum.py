import itertools

import numpy as np
import pytest

from perspectra.autodiff import Graph, Tensor, gradcheck, weighted_nll
from perspectra.continuum import (
    ArchitectureError,
    ArchitectureSpec,
    build_model,
    count_parameters,
    coupling_penalty,
    encoder_divergence,
    linear_parameter_count,
    load_model,
    model_layout,
    pairwise_penalty,
    predict,
    predict_all,
    save_model,
)
from perspectra.model_zoo import AnnotatorEncoderConfig, CombinerConfig, TextEncoderConfig

TE = TextEncoderConfig(output_dim=4, vocab_or_bucket_size=16, ngram_range=(1, 1))
FAMILIES = ["majority", "per_annotator", "sep_heads", "share_rec", "sep_rec"]


def spec(family, n=3, k=3, **kw):
    if family in ("share_rec", "sep_rec"):
        kw.setdefault("annotator_encoder", AnnotatorEncoderConfig("simple", embedding_dim=3))
        kw.setdefault("combiner", CombinerConfig("deepcross", deep_branch_features=4))
    return ArchitectureSpec(family=family, n_annotators=n, k=k, text_encoder=TE, **kw)


def brute_penalty(sets, lam):
    flats = [np.concatenate([w.ravel() for w in s]) for s in sets]
    pairs = list(itertools.combinations(range(len(flats)), 2))
    total = 0.0
    for i, j in pairs:
        for a, b in zip(flats[i], flats[j]):
            total += (a - b) ** 2
    return lam * total / len(pairs)


class TestSpec:
    def test_rec_configs_rejected_for_non_rec(self):
        with pytest.raises(ArchitectureError):
            ArchitectureSpec("majority", 3, 3, TE, combiner=CombinerConfig())
        with pytest.raises(ArchitectureError):
            ArchitectureSpec("sep_heads", 3, 3, TE, annotator_encoder=AnnotatorEncoderConfig())

    def test_lambda_and_shared_only_for_sep_rec(self):
        with pytest.raises(ArchitectureError):
            ArchitectureSpec("share_rec", 3, 3, TE, lam=1.0)
        with pytest.raises(ArchitectureError):
            ArchitectureSpec("per_annotator", 3, 3, TE, plus_shared=True)
        assert ArchitectureSpec("sep_rec", 3, 3, TE, lam=-0.5).lam == -0.5

    def test_dict_round_trip(self):
        s = spec("sep_rec", lam=0.1, plus_shared=True)
        d = s.to_dict()
        assert d["lambda"] == 0.1
        assert ArchitectureSpec.from_dict(d) == s


class TestStructure:
    def test_encoder_and_head_counts(self):
        expect = {"majority": (1, 1), "per_annotator": (5, 5), "sep_heads": (1, 5), "share_rec": (1, 0), "sep_rec": (5, 0)}
        for fam, (enc, heads) in expect.items():
            m = build_model(spec(fam, n=5), 0)
            encs = {k.split(".")[1] for k in m.params if k.startswith("text_enc.")}
            hs = {k.split(".")[1] for k in m.params if k.startswith("head.")}
            assert (len(encs), len(hs)) == (enc, heads), fam
            has_rec = any(k.startswith(("user_enc.", "combiner.")) for k in m.params)
            assert has_rec == (fam in ("share_rec", "sep_rec"))

    def test_plus_shared_has_n_plus_one_encoders(self):
        m = build_model(spec("sep_rec", n=5, plus_shared=True), 0)
        assert len({k.split(".")[1] for k in m.params if k.startswith("text_enc.")}) == 6
        assert m.shared_encoder == 5

    def test_per_annotator_shares_no_tensors(self):
        m = build_model(spec("per_annotator", n=5), 0)
        owners = {}
        for name, t in m.params.items():
            owners.setdefault(id(t.data), set()).add(name.split(".")[1])
            assert t.data.base is None
        assert all(len(v) == 1 for v in owners.values())
        groups = {k.split(".", 2)[1] for k in m.params}
        assert groups == {str(i) for i in range(5)}

    def test_identical_initial_encoders(self):
        m = build_model(spec("sep_rec", n=4, plus_shared=True), 3)
        ref = m.block("text_enc.0.")
        for i in range(1, 5):
            other = m.block(f"text_enc.{i}.")
            assert all(np.array_equal(ref[k].data, other[k].data) for k in ref)

    def test_shapes_coincide_across_families(self):
        a = build_model(spec("majority"), 5).block("text_enc.0.")
        b = build_model(spec("share_rec"), 5).block("text_enc.0.")
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)

    def test_same_seed_bit_identical(self):
        one = save_model(build_model(spec("share_rec"), 11))
        two = save_model(build_model(spec("share_rec"), 11))
        three = save_model(build_model(spec("share_rec"), 12))
        assert one == two and one != three

    def test_init_scale(self):
        m = build_model(spec("majority"), 0)
        w = m.params["head.0.dense.weight"].data
        assert np.abs(w).max() <= np.sqrt(1 / 4)


class TestPrediction:
    def test_majority_annotator_invariant(self):
        m = build_model(spec("majority"), 0)
        rows = predict_all(m, "a b c")
        assert np.array_equal(rows, np.repeat(rows[:1], 3, axis=0))
        assert np.array_equal(predict(m, "a b c", 0), predict(m, "a b c", 2))

    @pytest.mark.parametrize("fam", FAMILIES)
    def test_predict_all_rows_equal_predict(self, fam):
        m = build_model(spec(fam), 1)
        rows = predict_all(m, "x y z", text_pair="w")
        for a in range(3):
            np.testing.assert_allclose(rows[a], predict(m, "x y z", a, text_pair="w"), rtol=1e-14, atol=1e-16)
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-12)

    def test_zero_final_projection_gives_uniform(self):
        m = build_model(spec("sep_heads"), 0)
        for k in [k for k in m.params if k.endswith("out.weight") or k.endswith("out.bias")]:
            m.params[k].data[...] = 0.0
        np.testing.assert_allclose(predict_all(m, "a b"), 1 / 3, atol=1e-15)

    def test_invalid_index(self):
        m = build_model(spec("share_rec"), 0)
        with pytest.raises(IndexError):
            predict(m, "a", 3)
        with pytest.raises(ValueError):
            predict(m, "a")

    def test_share_rec_annotator_only_changes_user_input(self):
        m = build_model(spec("share_rec"), 0)
        feats = m.features(["a b c"] * 3)
        caps = []
        for a in range(3):
            cap = {}
            m.logits(feats[:1], [a], capture=cap)
            caps.append(cap)
        for cap in caps[1:]:
            assert np.array_equal(cap["text"].data, caps[0]["text"].data)
            assert not np.array_equal(cap["user"].data, caps[0]["user"].data)

    def test_per_annotator_rows_from_independent_models(self):
        m = build_model(spec("per_annotator"), 0)
        before = predict_all(m, "q r")
        m.params["head.1.out.bias"].data += [1.0, 0.0, -1.0]
        after = predict_all(m, "q r")
        assert np.array_equal(before[[0, 2]], after[[0, 2]]) and not np.array_equal(before[1], after[1])

    def test_routing_preserves_row_order(self):
        m = build_model(spec("sep_rec"), 0)
        feats = m.features(["a", "b", "c", "d"])
        ann = np.array([2, 0, 2, 1])
        batched = m.predict_proba(feats, ann)
        for i in range(4):
            np.testing.assert_allclose(batched[i], m.predict_proba(feats[i : i + 1], ann[i : i + 1])[0], rtol=1e-14)


class TestCouplingPenalty:
    def test_hand_two_encoders(self):
        val = pairwise_penalty([[Tensor([1.0, 2.0])], [Tensor([1.0, 4.0])]], 0.5)
        assert val.item() == pytest.approx(2.0, abs=1e-15)

    def test_hand_three_encoders(self):
        val = pairwise_penalty([[Tensor([0.0])], [Tensor([1.0])], [Tensor([3.0])]], 1.0)
        assert val.item() == pytest.approx(14 / 3, abs=1e-14)

    def test_identical_encoders_zero(self):
        m = build_model(spec("sep_rec", lam=1.0), 0)
        assert coupling_penalty(m, 3.7).item() == 0.0
        assert encoder_divergence(m) == 0.0

    def test_hard_tying_keeps_zero(self):
        m = build_model(spec("sep_rec"), 0)
        rng = np.random.default_rng(0)
        for _ in range(3):
            shared = {k: rng.normal(size=v.shape) for k, v in m.block("text_enc.0.").items()}
            for i in range(3):
                for k, v in m.block(f"text_enc.{i}.").items():
                    v.data[...] = shared[k]
            assert coupling_penalty(m, 1e6).item() == 0.0

    def test_matches_brute_force_on_model(self):
        m = build_model(spec("sep_rec", plus_shared=True), 0)
        rng = np.random.default_rng(1)
        for t in m.params.values():
            t.data += rng.normal(scale=0.1, size=t.shape)
        sets = [[v.data for _, v in sorted(m.block(f"text_enc.{i}.").items())] for i in range(3)]
        assert coupling_penalty(m, 0.7).item() == pytest.approx(brute_penalty(sets, 0.7), rel=1e-12)

    def test_shared_encoder_excluded(self):
        m = build_model(spec("sep_rec", plus_shared=True), 0)
        m.params["text_enc.3.proj.bias"].data += 100.0
        assert coupling_penalty(m, 1.0).item() == 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            pairwise_penalty([[Tensor([1.0])]], 1.0)
        with pytest.raises(ValueError):
            pairwise_penalty([[Tensor([1.0])], [Tensor([1.0, 2.0])]], 1.0)
        with pytest.raises(ValueError):
            coupling_penalty(build_model(spec("share_rec"), 0), 1.0)

    def test_gradcheck(self):
        sets = [[Tensor(np.random.default_rng(i).normal(size=(2, 3)), requires_grad=True),
                 Tensor(np.random.default_rng(10 + i).normal(size=3), requires_grad=True)] for i in range(3)]
        assert gradcheck(lambda: pairwise_penalty(sets, 0.8), [t for s in sets for t in s]) < 1e-4


class TestParameterCount:
    def test_reference_layers(self):
        assert linear_parameter_count(768, 768) == 590_592
        assert linear_parameter_count(768, 3) == 2_307

    def test_head_breakdown(self):
        s = ArchitectureSpec("majority", 5, 3, TextEncoderConfig(output_dim=768, vocab_or_bucket_size=64))
        pc = count_parameters(s)
        assert pc.by_layer["head.0.dense"] == 590_592
        assert pc.by_layer["head.0.out"] == 2_307
        assert pc.total == sum(int(np.prod(t.shape)) for t in build_model(s, 0).params.values())

    def test_per_annotator_is_n_times_single(self):
        single = count_parameters(spec("majority")).total
        assert count_parameters(spec("per_annotator", n=5)).total == 5 * single

    @pytest.mark.parametrize("fam", FAMILIES)
    def test_blocks_sum_to_total(self, fam):
        pc = count_parameters(build_model(spec(fam, plus_shared=fam == "sep_rec"), 0))
        assert sum(pc.by_block.values()) == pc.total == sum(pc.by_layer.values())


class TestPersistence:
    @pytest.mark.parametrize("fam", FAMILIES)
    def test_save_load_round_trip(self, fam):
        m = build_model(spec(fam), 2)
        for t in m.params.values():
            t.data += 0.01
        loaded, meta = load_model(save_model(m, {"seed": 2}))
        assert meta["seed"] == 2 and loaded.spec == m.spec
        for k, v in m.params.items():
            assert loaded.params[k].data.tobytes() == v.data.tobytes()

    def test_architecture_mismatch(self):
        blob = save_model(build_model(spec("sep_heads"), 0))
        from perspectra.checkpoint import CheckpointError

        with pytest.raises(CheckpointError):
            load_model(blob, spec("majority"))


# gradient check of every assembled family, loss = weighted NLL (+ penalty)
@pytest.mark.parametrize(
    "fam,kw",
    [
        ("majority", {}),
        ("per_annotator", {}),
        ("sep_heads", {}),
        ("share_rec", {"combiner": CombinerConfig("deepcross", deep_branch_features=4)}),
        ("share_rec", {"combiner": CombinerConfig("complex"), "annotator_encoder": AnnotatorEncoderConfig("complex", 4)}),
        ("sep_rec", {"lam": 0.5, "plus_shared": True}),
        ("sep_rec", {"lam": -0.5, "annotator_encoder": AnnotatorEncoderConfig("one_hot"),
                     "combiner": CombinerConfig("medium")}),
    ],
)
def test_family_gradcheck(fam, kw):
    from perspectra.training import batch_loss

    m = build_model(spec(fam, **kw), 1)
    ann = np.array([0, 2, 1, 2])
    texts = ["a b", "c d e", "a e", "f"]

    class Item:
        def __init__(self, t):
            self.text, self.text_pair = t, None

    batch = [(Item(t), -1 if fam == "majority" else int(a), int(a) % 3) for t, a in zip(texts, ann)]
    table = np.array([[1.0, 2.0, 0.5]]) if fam == "majority" else np.array([[1.0, 2.0, 0.5], [0.7, 1.0, 1.3], [2.0, 1.0, 1.0]])
    # perturb so the encoders differ and the penalty has a gradient
    rng = np.random.default_rng(0)
    for t in m.params.values():
        t.data += rng.normal(scale=0.05, size=t.shape)
    err = gradcheck(lambda: batch_loss(m, batch, table, train=False), list(m.params.values()),
                    max_checks_per_param=12, rng=np.random.default_rng(3))
    assert err < 1e-4


def test_model_layout_prefixes():
    names = model_layout(spec("sep_rec", plus_shared=True))
    prefixes = {n.split(".")[0] for n in names}
    assert prefixes == {"text_enc", "user_enc", "combiner"}


def test_sep_heads_cross_head_gradients_zero():
    m = build_model(spec("sep_heads"), 0)
    feats = m.features(["a b", "c"])
    with Graph() as g:
        loss = weighted_nll(m.logits(feats, [1, 1]), [0, 2], [1.0, 1.0])
    grads = g.backward(loss)
    for name, t in m.params.items():
        if name.startswith(("head.0.", "head.2.")):
            g_t = grads.get(t)
            assert (g_t is None or not g_t.any()) and not grads.reached(t)
        if name.startswith("head.1.") or name.startswith("text_enc.0."):
            assert grads.reached(t)
