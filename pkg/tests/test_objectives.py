import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from encoderkd import oracles
from encoderkd import objectives as O
from encoderkd import tensor as T
from encoderkd import verify
from encoderkd.errors import (
    BatchTooSmall,
    HeadCountMismatch,
    InvalidDistribution,
    LengthMismatch,
    MissingProjection,
    MissingTerm,
    NonpositiveTemperature,
    ShapeMismatch,
)
from encoderkd.model import ForwardTrace, forward_with_trace
from encoderkd.objectives import ObjectiveSpec, ProjectionParams, Term
from encoderkd.tensor import Tensor

seeds = st.integers(0, 10_000)


def trace(hidden=None, scores=None, probs=None, values=None, mask=None, grad=False):
    def wrap(x):
        return None if x is None else [Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)]

    ref = next(np.asarray(x) for x in (hidden, scores, probs, values) if x is not None)
    if mask is None:
        B = ref.shape[0]
        l = ref.shape[1] if hidden is not None else ref.shape[2]
        mask = np.ones((B, l), dtype=bool)
    if scores is None and (probs is not None or values is not None):
        B, H, l = np.shape(probs if probs is not None else values)[:3]
        scores = np.zeros((B, H, l, l))
    return ForwardTrace(wrap(hidden), wrap(scores), wrap(probs), wrap(values), np.asarray(mask), None)


def identity_proj(term, d, layers=(1,)):
    return ProjectionParams({(s, term): Tensor(np.eye(d), requires_grad=True) for s in layers})


def random_probs(r, shape):
    return T.softmax(Tensor(r.normal(size=shape) * 2)).data


class TestPred:
    def test_hand_example(self):
        loss = O.pred_loss([math.log(1), math.log(3)], Tensor([0.0, 0.0]), t=1.0)
        assert float(loss.data) == pytest.approx(math.log(2), abs=1e-12)

    @given(seeds, st.floats(0.5, 4.0))
    def test_equal_logits_give_entropy(self, seed, t):
        z = np.random.default_rng(seed).normal(size=(3, 4))
        loss = O.pred_loss(z, Tensor(z), t, scale_by_t2=False)
        assert float(loss.data) - O.soft_entropy(z, t) == pytest.approx(0.0, abs=1e-10)

    def test_large_temperature_kl_vanishes(self, rng):
        zt, zs = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        kl = float(O.pred_loss(zt, Tensor(zs), 1e4, scale_by_t2=False).data) - O.soft_entropy(zt, 1e4)
        assert 0 <= kl < 1e-7

    def test_t2_scaling(self, rng):
        zt, zs = rng.normal(size=(2, 3)), Tensor(rng.normal(size=(2, 3)))
        assert float(O.pred_loss(zt, zs, 2.0).data) == pytest.approx(4 * float(O.pred_loss(zt, zs, 2.0, False).data))

    def test_errors(self):
        with pytest.raises(NonpositiveTemperature):
            O.pred_loss([0.0, 1.0], Tensor([0.0, 1.0]), t=0)
        with pytest.raises(ShapeMismatch):
            O.pred_loss([0.0, 1.0], Tensor([0.0, 1.0, 2.0]))


class TestHidden:
    def test_hand_mse(self):
        s, t = trace(hidden=[[[1.0, 2.0]]]), trace(hidden=[[[3.0, 2.0]]])
        loss = O.hid_loss(s, t, [(1, 1)], identity_proj(Term.HID_CLS, 2), "CLS")
        assert float(loss.data) == pytest.approx(2.0)

    @pytest.mark.parametrize("variant", ["CLS", "SEQ"])
    def test_identical_traces_zero(self, variant, rng):
        h = rng.normal(size=(2, 4, 3))
        term = Term.HID_CLS if variant == "CLS" else Term.HID_SEQ
        loss = O.hid_loss(trace(hidden=h), trace(hidden=h), [(1, 1)], identity_proj(term, 3), variant)
        assert abs(float(loss.data)) <= 1e-12

    def test_seq_ignores_padding(self, rng):
        h_s, h_t = rng.normal(size=(1, 3, 2)), rng.normal(size=(1, 3, 2))
        mask = np.array([[True, True, False]])
        h_t2 = h_t.copy()
        h_t2[0, 2] += 100
        proj = identity_proj(Term.HID_SEQ, 2)
        a = O.hid_loss(trace(hidden=h_s, mask=mask), trace(hidden=h_t, mask=mask), [(1, 1)], proj, "SEQ")
        b = O.hid_loss(trace(hidden=h_s, mask=mask), trace(hidden=h_t2, mask=mask), [(1, 1)], proj, "SEQ")
        assert float(a.data) == pytest.approx(float(b.data))

    def test_projection_bridges_widths(self, rng):
        s, t = trace(hidden=rng.normal(size=(2, 3, 4))), trace(hidden=rng.normal(size=(2, 3, 6)))
        spec = ObjectiveSpec(frozenset({Term.HID_CLS}), layer_pairs=((1, 1),))
        proj = ProjectionParams.for_spec(spec, 4, 6)
        assert proj.get(1, Term.HID_CLS).shape == (4, 6)
        assert float(O.hid_loss(s, t, [(1, 1)], proj, "CLS").data) >= 0

    def test_missing_projection(self, rng):
        h = rng.normal(size=(1, 2, 2))
        with pytest.raises(MissingProjection):
            O.hid_loss(trace(hidden=h), trace(hidden=h), [(1, 1)], ProjectionParams(), "CLS")

    def test_length_mismatch(self, rng):
        with pytest.raises(LengthMismatch):
            O.hid_loss(trace(hidden=rng.normal(size=(1, 2, 2))), trace(hidden=rng.normal(size=(1, 3, 2))),
                       [(1, 1)], identity_proj(Term.HID_CLS, 2))  # fmt: skip


class TestContrast:
    def test_hand_example(self):
        h = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        loss = O.contrast_loss(trace(hidden=h), trace(hidden=h), [(1, 1)], identity_proj(Term.HID_CONTRAST, 2), tau=1.0)
        assert float(loss.data) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-9)
        assert float(loss.data) == pytest.approx(0.3133, abs=1e-4)

    @given(seeds)
    def test_permuting_batch_invariant_and_positive(self, seed):
        r = np.random.default_rng(seed)
        hs, ht = r.normal(size=(4, 2, 3)), r.normal(size=(4, 2, 3))
        perm = r.permutation(4)
        proj = identity_proj(Term.HID_CONTRAST, 3)
        a = float(O.contrast_loss(trace(hidden=hs), trace(hidden=ht), [(1, 1)], proj, 0.5).data)
        b = float(O.contrast_loss(trace(hidden=hs[perm]), trace(hidden=ht[perm]), [(1, 1)], proj, 0.5).data)
        assert a == pytest.approx(b, abs=1e-12)
        assert a > 0

    def test_needs_two_examples(self, rng):
        h = rng.normal(size=(1, 2, 2))
        with pytest.raises(BatchTooSmall):
            O.contrast_loss(trace(hidden=h), trace(hidden=h), [(1, 1)], identity_proj(Term.HID_CONTRAST, 2))


class TestAttentionMSE:
    def test_hand_example(self):
        s = trace(scores=[[[[0.0, 1.0], [1.0, 0.0]]]])
        t = trace(scores=[[[[1.0, 1.0], [1.0, 1.0]]]])
        assert float(O.att_mse_loss(s, t, [(1, 1)]).data) == pytest.approx(0.5)

    @given(seeds)
    def test_duplicated_heads_same_mean(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(2, 2, 3, 3)), r.normal(size=(2, 2, 3, 3))
        one = O.att_mse_loss(trace(scores=a), trace(scores=b), [(1, 1)])
        two = O.att_mse_loss(trace(scores=np.concatenate([a, a], 1)), trace(scores=np.concatenate([b, b], 1)), [(1, 1)])
        assert float(one.data) == pytest.approx(float(two.data), abs=1e-12)

    def test_identical_zero(self, rng):
        a = rng.normal(size=(2, 2, 3, 3))
        assert abs(float(O.att_mse_loss(trace(scores=a), trace(scores=a), [(1, 1)]).data)) <= 1e-12

    def test_head_mismatch(self, rng):
        with pytest.raises(HeadCountMismatch):
            O.att_mse_loss(trace(scores=rng.normal(size=(1, 2, 3, 3))), trace(scores=rng.normal(size=(1, 3, 3, 3))), [(1, 1)])


class TestAttentionKL:
    def test_hand_example(self):
        t = trace(probs=[[[[1.0, 0.0], [1.0, 0.0]]]])
        s = trace(probs=[[[[0.5, 0.5], [0.5, 0.5]]]])
        assert float(O.att_kl_loss(s, t, [(1, 1)]).data) == pytest.approx(math.log(2), abs=1e-12)

    @pytest.mark.parametrize("seed", range(100))
    def test_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        p, q = random_probs(r, (2, 2, 4, 4)), random_probs(r, (2, 2, 4, 4))
        assert float(O.att_kl_loss(trace(probs=q), trace(probs=p), [(1, 1)]).data) >= 0

    @given(seeds)
    def test_head_permutation_invariant(self, seed):
        r = np.random.default_rng(seed)
        p, q = random_probs(r, (1, 3, 4, 4)), random_probs(r, (1, 3, 4, 4))
        perm = r.permutation(3)
        a = O.att_kl_loss(trace(probs=q), trace(probs=p), [(1, 1)])
        b = O.att_kl_loss(trace(probs=q[:, perm]), trace(probs=p[:, perm]), [(1, 1)])
        assert float(a.data) == pytest.approx(float(b.data), abs=1e-12)

    def test_rejects_unnormalised(self):
        with pytest.raises(InvalidDistribution):
            O.att_kl_loss(trace(probs=[[[[0.5, 0.6], [0.5, 0.5]]]]), trace(probs=[[[[0.5, 0.5], [0.5, 0.5]]]]), [(1, 1)])


class TestValueKL:
    def test_hand_example(self):
        t = trace(values=[[[[0.0], [0.0]]]])
        s = trace(values=[[[[1.0], [0.0]]]])
        q0 = np.array([math.e, 1.0]) / (math.e + 1)
        row0 = 0.5 * math.log(0.5 / q0[0]) + 0.5 * math.log(0.5 / q0[1])
        expected = (row0 + 0.0) / 2
        assert float(O.val_kl_loss(s, t, [(1, 1)]).data) == pytest.approx(expected, abs=1e-12)

    @given(seeds)
    def test_relation_rows_normalised(self, seed):
        v = np.random.default_rng(seed).normal(size=(2, 2, 5, 3))
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
        rel = O.value_relation(Tensor(v), mask).data
        np.testing.assert_allclose(rel.sum(-1), 1.0, atol=1e-10)
        assert np.all(rel[0, :, :, 3:] < 1e-300)

    @given(seeds)
    def test_head_permutation_invariant(self, seed):
        r = np.random.default_rng(seed)
        vs, vt = r.normal(size=(1, 3, 4, 2)), r.normal(size=(1, 3, 4, 2))
        perm = r.permutation(3)
        a = O.val_kl_loss(trace(values=vs), trace(values=vt), [(1, 1)])
        b = O.val_kl_loss(trace(values=vs[:, perm]), trace(values=vt[:, perm]), [(1, 1)])
        assert float(a.data) == pytest.approx(float(b.data), abs=1e-12)
        assert float(a.data) >= 0


class TestCombine:
    def test_single_term_unchanged(self):
        spec = ObjectiveSpec(frozenset({Term.PRED}), alpha=0.9)
        assert float(O.combine(spec, {Term.PRED: Tensor(4.0)}).data) == 4.0

    def test_alpha_one_supervised_only(self):
        spec = ObjectiveSpec(frozenset({Term.PRED, Term.SUPERVISED}), alpha=1.0)
        assert float(O.combine(spec, {Term.PRED: Tensor(4.0), Term.SUPERVISED: Tensor(2.0)}).data) == 2.0

    def test_half_mix(self):
        spec = ObjectiveSpec(frozenset({Term.PRED, Term.SUPERVISED}), alpha=0.5)
        assert float(O.combine(spec, {Term.PRED: Tensor(4.0), Term.SUPERVISED: Tensor(2.0)}).data) == 3.0

    def test_missing_term(self):
        with pytest.raises(MissingTerm):
            O.combine(ObjectiveSpec(frozenset({Term.PRED, Term.SUPERVISED})), {Term.PRED: Tensor(1.0)})


@pytest.mark.parametrize("term", verify.OBJECTIVE_TERMS, ids=lambda t: t.value)
def test_matches_scalar_loop_oracle(term):
    for seed in range(10):
        fast, slow = verify.oracle_values(term, seed)
        assert fast == pytest.approx(slow, abs=1e-8)


@pytest.mark.parametrize("term", verify.OBJECTIVE_TERMS, ids=lambda t: t.value)
def test_gradients_through_encoder(term):
    rep = verify.objective_grad_check(term, seed=3)
    assert rep.passed, (rep.max_error, rep.worst())


def test_fixed_points_are_zero():
    for name, value in verify.fixed_point_values(seed=4).items():
        assert abs(value) <= 1e-10, name


@pytest.mark.parametrize("term", verify.OBJECTIVE_TERMS, ids=lambda t: t.value)
def test_teacher_detached(term):
    student, teacher, tokens, mask = verify.tiny_pair(5)
    tr_t = forward_with_trace(teacher, tokens, mask)  # graph recorded on purpose
    tr_s = forward_with_trace(student, tokens, mask)
    proj = verify.random_projections([term], verify.PAIRS, 8, 0)
    if term is Term.PRED:
        from encoderkd.model import classify

        loss = O.pred_loss(classify(teacher, tr_t), classify(student, tr_s))
    else:
        spec = ObjectiveSpec(frozenset({term}), layer_pairs=verify.PAIRS, contrast_temperature=0.5)
        loss = O.intermediate_losses(spec, tr_s, tr_t, proj)[term]
    loss.backward()
    assert all(p.grad is None or not np.any(p.grad) for p in teacher.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in student.parameters())


def test_oracle_module_independent_of_objectives():
    import inspect

    src = inspect.getsource(oracles)
    assert "objectives" not in src.split('"""', 2)[2]
