import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmret.corpus import TEXT, TokenSequence, generate_corpus
from mmret.encoder import (
    BIDIRECTIONAL,
    CAUSAL,
    LAST_TOKEN,
    MASKED_MEAN,
    MEAN,
    EncoderConfig,
    Retriever,
    _attention,
    attention_mask,
    constant_nodes,
    encode,
    encode_batch,
    hidden_states,
    init_params,
    pool,
    readout_configs,
)
from mmret.errors import ConfigError, DegenerateInputError, LengthError
from mmret.tensor import as_node, ops

SMALL = EncoderConfig(d_model=16, n_layers=2, n_heads=2, max_len=40)


def _seq(tokens, span=None):
    return TokenSequence(tuple(int(t) for t in tokens), (TEXT,) * len(tokens), span)


def _random_seqs(rng, n, lo=3, hi=12):
    return [_seq(rng.integers(0, 4096, size=int(rng.integers(lo, hi)))) for _ in range(n)]


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            EncoderConfig(d_model=10, n_heads=4)

    def test_last_token_needs_readout(self):
        with pytest.raises(ConfigError):
            EncoderConfig(pooling_mode=LAST_TOKEN)

    def test_readout_grid_expressible(self):
        cfgs = readout_configs(SMALL)
        assert sorted(cfgs) == ["ID-0", "ID-1", "ID-2", "ID-3", "ID-4"]
        assert cfgs["ID-0"].attention_mode == CAUSAL and cfgs["ID-0"].pooling_mode == LAST_TOKEN
        assert cfgs["ID-4"].attention_mode == BIDIRECTIONAL and not cfgs["ID-4"].compression_suffix
        for c in cfgs.values():
            assert EncoderConfig.from_dict(c.to_dict()) == c

    def test_masked_mean_over_zero_tokens_rejected(self):
        cfg = SMALL.replace(pooling_mode=MASKED_MEAN)
        params = init_params(cfg, 0)
        with pytest.raises(DegenerateInputError):
            encode(cfg, params, _seq([1, 2, 3], span=(0, 3)))

    def test_too_long(self):
        with pytest.raises(LengthError):
            encode(SMALL, init_params(SMALL, 0), _seq(range(41)))


class TestPool:
    H = np.array([[1.0, 1.0], [3.0, 5.0], [5.0, 1.0]])

    def test_worked_masked_mean(self):
        np.testing.assert_array_equal(pool(self.H, MASKED_MEAN, (0, 1)), [4.0, 3.0])

    def test_empty_span_equals_mean(self):
        a = pool(self.H, MASKED_MEAN, None)
        b = pool(self.H, MEAN)
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("mode", [MEAN, MASKED_MEAN, LAST_TOKEN])
    def test_constant_rows(self, mode):
        v = np.array([0.25, -1.5, 2.0])
        np.testing.assert_allclose(pool(np.tile(v, (4, 1)), mode, (0, 1)), v, rtol=1e-6)

    def test_last_token(self):
        np.testing.assert_array_equal(pool(self.H, LAST_TOKEN), [5.0, 1.0])


class TestEncode:
    @pytest.mark.parametrize("mode", [MEAN, MASKED_MEAN])
    def test_single_token(self, mode):
        cfg = SMALL.replace(pooling_mode=mode)
        params = init_params(cfg, 1)
        h = hidden_states(cfg, constant_nodes(params), np.array([[42]])).data[0, 0].astype(np.float64)
        np.testing.assert_allclose(encode(cfg, params, _seq([42])), h / np.linalg.norm(h), atol=1e-6)

    @pytest.mark.parametrize("cfg", list(readout_configs(SMALL).values()) + [SMALL.replace(pooling_mode=MASKED_MEAN)])
    def test_unit_norm(self, cfg):
        rng = np.random.default_rng(0)
        E = encode_batch(cfg, init_params(cfg, 3), _random_seqs(rng, 10))
        np.testing.assert_allclose(np.linalg.norm(E, axis=1), 1.0, atol=1e-5)

    def test_permutation_invariance(self):
        cfg = SMALL.replace(positional_encoding=False)
        params = init_params(cfg, 2)
        rng = np.random.default_rng(0)
        toks = rng.integers(0, 4096, size=10)
        base = encode(cfg, params, _seq(toks))
        for _ in range(100):
            np.testing.assert_allclose(encode(cfg, params, _seq(rng.permutation(toks))), base, atol=1e-5)

    def test_positions_matter_by_default(self):
        params = init_params(SMALL, 2)
        a = encode(SMALL, params, _seq([5, 6, 7, 8]))
        b = encode(SMALL, params, _seq([8, 7, 6, 5]))
        assert np.abs(a - b).max() > 1e-4

    def test_causal_truncation(self):
        cfg = SMALL.replace(attention_mode=CAUSAL)
        P = constant_nodes(init_params(cfg, 4))
        rng = np.random.default_rng(1)
        ids = rng.integers(0, 4096, size=(1, 9))
        full = hidden_states(cfg, P, ids).data
        for i in range(9):
            cut = ids.copy()
            cut[0, i + 1 :] = 0
            assert hidden_states(cfg, P, cut).data[0, : i + 1].tobytes() == full[0, : i + 1].tobytes()

    def test_causal_weights_exactly_zero(self):
        cfg = SMALL.replace(attention_mode=CAUSAL)
        mask = attention_mask(cfg, 6)
        scores = np.random.default_rng(0).normal(size=(2, 6, 6))
        w = ops.softmax(scores, axis=-1, mask=mask).data
        assert np.all(w[:, np.triu_indices(6, 1)[0], np.triu_indices(6, 1)[1]] == 0.0)

    def test_instruction_masking_changes_embedding(self):
        masked = SMALL.replace(pooling_mode=MASKED_MEAN)
        params = init_params(masked, 5)
        s = _seq([8192, 8193, 8194, 100, 200, 300], span=(0, 3))
        a = encode(masked, params, s)
        b = encode(SMALL, params, s)
        assert np.abs(a - b).max() > 1e-4

    def test_instructions_visible_to_attention(self):
        masked = SMALL.replace(pooling_mode=MASKED_MEAN)
        params = init_params(masked, 5)
        a = encode(masked, params, _seq([8192, 8193, 100, 200], span=(0, 2)))
        b = encode(masked, params, _seq([8200, 8201, 100, 200], span=(0, 2)))
        assert np.abs(a - b).max() > 1e-6


class TestEncodeBatch:
    def test_batch_of_one(self):
        params = init_params(SMALL, 0)
        s = _seq([1, 2, 3, 4])
        assert encode_batch(SMALL, params, [s])[0].tobytes() == encode(SMALL, params, s).tobytes()

    def test_batch_matches_singles_bitwise(self):
        params = init_params(SMALL, 0)
        seqs = _random_seqs(np.random.default_rng(7), 64)
        E = encode_batch(SMALL, params, seqs)
        for i, s in enumerate(seqs):
            assert E[i].tobytes() == encode(SMALL, params, s).tobytes()

    def test_shuffle(self):
        params = init_params(SMALL, 0)
        rng = np.random.default_rng(8)
        seqs = _random_seqs(rng, 20)
        perm = rng.permutation(20)
        E = encode_batch(SMALL, params, seqs)
        Ep = encode_batch(SMALL, params, [seqs[i] for i in perm])
        assert Ep.tobytes() == E[perm].tobytes()

    def test_threads_do_not_change_output(self):
        params = init_params(SMALL, 0)
        seqs = _random_seqs(np.random.default_rng(9), 50, lo=3, hi=20)
        assert encode_batch(SMALL, params, seqs, threads=1).tobytes() == \
            encode_batch(SMALL, params, seqs, threads=4).tobytes()

    def test_retriever_on_corpus(self):
        c = generate_corpus(0, 4, 2, 0.1)
        r = Retriever(SMALL, init_params(SMALL, 0))
        E = r.embed(c.pools[0].sequences)
        assert E.shape == (4, SMALL.d_model) and E.dtype == np.float32

    def test_init_deterministic(self):
        a, b = init_params(SMALL, 11), init_params(SMALL, 11)
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)


class TestAttention:
    def test_output_shape(self):
        P = constant_nodes(init_params(SMALL, 0))
        x = as_node(np.random.default_rng(0).normal(size=(2, 5, 16)))
        assert _attention(SMALL, P, "layers.0.attn.", x, None).shape == (2, 5, 16)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 4095), min_size=1, max_size=12), st.integers(0, 3))
def test_embeddings_finite_unit_norm(tokens, seed):
    E = encode(SMALL, init_params(SMALL, seed), _seq(tokens))
    assert np.all(np.isfinite(E))
    assert abs(np.linalg.norm(E) - 1.0) < 1e-5
