import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from encoderkd import tensor as T
from encoderkd.errors import ConfigInvalid, MissingHead, PositionOutOfRange, SequenceTooLong, UnknownTokenId
from encoderkd.gradcheck import grad_check
from encoderkd.model import (
    CLS_ID,
    PAD_ID,
    EncoderModel,
    ModelConfig,
    classify,
    count_params,
    forward_with_trace,
    load_checkpoint,
    mlm_logits,
    save_checkpoint,
)


def tokens_for(rng, batch=2, length=5, vocab=12):
    t = rng.integers(5, vocab, size=(batch, length))
    t[:, 0] = CLS_ID
    return t


def closed_form_count(L, d, ffn, vocab, maxlen, labels):
    emb = vocab * d + maxlen * d + 2 * d
    layer = 4 * (d * d + d) + 2 * d + (d * ffn + ffn) + (ffn * d + d) + 2 * d
    return emb + L * layer + (d * labels + labels) + (d * vocab + vocab)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigInvalid):
            ModelConfig(1, 6, 4, 8, 10, 8)

    def test_vocab_reserves_specials(self):
        with pytest.raises(ConfigInvalid):
            ModelConfig(1, 4, 2, 8, 3, 8)


class TestCountParams:
    def test_tiny_closed_form(self):
        m = EncoderModel(ModelConfig(1, 4, 2, 8, 10, 8, num_labels=2))
        assert count_params(m) == 312 == closed_form_count(1, 4, 8, 10, 8, 2)

    @given(st.integers(1, 3), st.sampled_from([4, 8]), st.integers(1, 9))
    def test_matches_formula_and_is_monotone(self, L, d, ffn):
        cfg = ModelConfig(L, d, 2, ffn, 11, 7)
        n = count_params(EncoderModel(cfg))
        assert n == closed_form_count(L, d, ffn, 11, 7, 2)
        assert count_params(EncoderModel(ModelConfig(L + 1, d, 2, ffn, 11, 7))) > n
        assert count_params(EncoderModel(cfg, seed=5)) == n


class TestForward:
    def test_shapes(self, tiny_model, rng):
        tr = forward_with_trace(tiny_model, tokens_for(rng, batch=1))
        assert tr.num_layers == 2
        for h, s, a, v in zip(tr.hidden_states, tr.attention_scores, tr.attention_probs, tr.values):
            assert h.shape == (1, 5, 8)
            assert s.shape == a.shape == (1, 2, 5, 5)
            assert v.shape == (1, 2, 5, 4)

    def test_single_sequence_input(self, tiny_model, rng):
        tr = forward_with_trace(tiny_model, tokens_for(rng, batch=1)[0])
        assert tr.batch_size == 1

    @given(st.integers(0, 1000))
    def test_rows_sum_to_one(self, seed):
        r = np.random.default_rng(seed)
        m = EncoderModel(ModelConfig(2, 8, 2, 16, 12, 6, init_std=0.5), seed=seed)
        t = tokens_for(r, batch=3, length=6)
        t[1, 4:] = PAD_ID
        tr = forward_with_trace(m, t)
        for a in tr.attention_probs:
            np.testing.assert_allclose(a.data.sum(-1), 1.0, atol=1e-10)
            assert np.all(a.data[1, :, :, 4:] < 1e-300)

    def test_deterministic(self, tiny_config, rng):
        t = tokens_for(rng)
        a = forward_with_trace(EncoderModel(tiny_config, seed=3), t)
        b = forward_with_trace(EncoderModel(tiny_config, seed=3), t)
        for x, y in zip(a.hidden_states, b.hidden_states):
            assert np.array_equal(x.data, y.data)

    def test_padding_invariance(self, rng):
        m = EncoderModel(ModelConfig(2, 8, 2, 16, 12, 8, init_std=0.5), seed=1)
        t = tokens_for(rng, batch=1, length=5)
        short = forward_with_trace(m, t)
        padded = np.concatenate([t, np.zeros((1, 3), dtype=t.dtype)], axis=1)
        long = forward_with_trace(m, padded)
        np.testing.assert_allclose(long.hidden_states[-1].data[:, :5], short.hidden_states[-1].data, atol=1e-8)
        np.testing.assert_allclose(classify(m, long).data, classify(m, short).data, atol=1e-8)

    def test_errors(self, tiny_model):
        with pytest.raises(SequenceTooLong):
            forward_with_trace(tiny_model, [CLS_ID] + [5] * 5)
        with pytest.raises(UnknownTokenId):
            forward_with_trace(tiny_model, [CLS_ID, 12])
        with pytest.raises(ValueError):
            forward_with_trace(tiny_model, [5, 6])

    def test_gradient_flow(self, tiny_model, rng):
        t = tokens_for(rng)
        w = rng.normal(size=(2, 5, 8))
        params = [tiny_model.params[n] for n in ("emb.token", "layers.1.attn.q.weight", "layers.2.ffn.in.weight", "layers.2.ln2.gamma")]

        def f():
            return T.tsum(forward_with_trace(tiny_model, t).hidden_states[-1] * w)

        assert grad_check(f, params, max_entries=8).passed


class TestHeads:
    def test_zero_head_zero_logits(self, tiny_model, rng):
        tiny_model.params["cls.weight"].data[:] = 0
        tiny_model.params["cls.bias"].data[:] = 0
        tr = forward_with_trace(tiny_model, tokens_for(rng))
        assert np.array_equal(classify(tiny_model, tr).data, np.zeros((2, 2)))

    def test_hand_set_head(self, tiny_model, rng):
        tr = forward_with_trace(tiny_model, tokens_for(rng, batch=1))
        w = rng.normal(size=(8, 2))
        tiny_model.params["cls.weight"].data[:] = w
        tiny_model.params["cls.bias"].data[:] = [0.5, -1.0]
        h = tr.hidden_states[-1].data[0, 0]
        expect = [sum(h[r] * w[r, c] for r in range(8)) + b for c, b in enumerate([0.5, -1.0])]
        np.testing.assert_allclose(classify(tiny_model, tr).data[0], expect, atol=1e-12)

    def test_missing_heads(self, rng):
        m = EncoderModel(ModelConfig(1, 4, 2, 8, 10, 6, cls_head=False, mlm_head=False))
        tr = forward_with_trace(m, tokens_for(rng, length=4, vocab=10))
        with pytest.raises(MissingHead):
            classify(m, tr)
        with pytest.raises(MissingHead):
            mlm_logits(m, tr, [1])

    def test_mlm_empty_and_zero(self, tiny_model, rng):
        tr = forward_with_trace(tiny_model, tokens_for(rng, batch=1))
        assert mlm_logits(tiny_model, tr, []).shape == (0, 12)
        tiny_model.params["mlm.weight"].data[:] = 0
        tiny_model.params["mlm.bias"].data[:] = 0
        assert not np.any(mlm_logits(tiny_model, tr, [2]).data)

    def test_mlm_oracle(self, tiny_model, rng):
        tr = forward_with_trace(tiny_model, tokens_for(rng))
        out = mlm_logits(tiny_model, tr, [(0, 1), (1, 3)]).data
        w, b = tiny_model.params["mlm.weight"].data, tiny_model.params["mlm.bias"].data
        for row, (bi, pos) in enumerate([(0, 1), (1, 3)]):
            h = tr.hidden_states[-1].data[bi, pos]
            expect = [sum(h[r] * w[r, v] for r in range(8)) + b[v] for v in range(12)]
            np.testing.assert_allclose(out[row], expect, atol=1e-12)

    def test_mlm_out_of_range(self, tiny_model, rng):
        tr = forward_with_trace(tiny_model, tokens_for(rng, batch=1))
        with pytest.raises(PositionOutOfRange):
            mlm_logits(tiny_model, tr, [5])


def test_checkpoint_round_trip(tiny_model, tmp_path):
    path = save_checkpoint(tiny_model, tmp_path / "m.npz")
    back = load_checkpoint(path)
    assert back.config == tiny_model.config
    for name, p in tiny_model.params.items():
        assert np.array_equal(back.params[name].data, p.data)


def test_state_dict_rejects_wrong_shapes(tiny_model):
    state = tiny_model.state_dict()
    state["cls.bias"] = np.zeros(3)
    with pytest.raises(Exception):
        tiny_model.load_state_dict(state)
