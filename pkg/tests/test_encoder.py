import numpy as np
import pytest

from deld import tensor as T
from deld.encoder import (EncoderConfig, encode, freeze, init_encoder, load_encoder, pool,
                          pretrain_backbone, save_encoder, clone_encoder)
from deld.errors import CapacityError, ConfigError, ContractError
from gradcheck import finite_difference_grad, max_rel_error

SMALL = EncoderConfig(d=8, layers=2, heads=2, ffn_dim=16, vocab_size=20, n_max=10,
                      prompt_capacity=8, seed=3)


def random_input(cfg, rows, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    shape = (rows, cfg.d) if batch is None else (batch, rows, cfg.d)
    return T.Tensor(rng.normal(size=shape))


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = init_encoder(SMALL), init_encoder(SMALL)
        assert a.state_bytes() == b.state_bytes()

    def test_head_dim_arithmetic(self):
        assert EncoderConfig(d=8, heads=2, vocab_size=10).head_dim == 4

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            EncoderConfig(d=7, heads=2, vocab_size=10)

    def test_bad_layer_count_rejected(self):
        with pytest.raises(ConfigError):
            EncoderConfig(layers=0, vocab_size=10)


class TestEncode:
    def test_output_shape_matches_input(self):
        state = init_encoder(SMALL)
        rows = 2 * 4 + 10  # two 4-row prompts plus a 10-token article
        out = encode(state, random_input(SMALL, rows), [True] * rows)
        assert out.shape == (rows, 8)

    def test_capacity_error_names_limit(self):
        state = init_encoder(SMALL)
        rows = SMALL.max_rows + 1
        with pytest.raises(CapacityError) as exc:
            encode(state, random_input(SMALL, rows), [True] * rows)
        assert str(SMALL.max_rows) in str(exc.value)

    def test_pad_rows_cannot_leak_into_real_rows(self):
        state = freeze(init_encoder(SMALL))
        x = random_input(SMALL, 6, seed=1)
        mask = [True, False, False, False, False, False]
        base = encode(state, x, mask).data.copy()

        perturbed = x.data.copy()
        perturbed[1:] += np.random.default_rng(2).normal(size=(5, 8)) * 100
        out = encode(state, T.Tensor(perturbed), mask).data
        np.testing.assert_array_equal(out[0], base[0])

    def test_frozen_forward_is_pure(self):
        state = freeze(init_encoder(SMALL))
        x = random_input(SMALL, 5, seed=4)
        mask = [True] * 5
        a = encode(state, x, mask).data
        b = encode(state, x, mask).data
        assert a.tobytes() == b.tobytes()

    def test_batched_matches_single(self):
        state = freeze(init_encoder(SMALL))
        xb = random_input(SMALL, 5, seed=5, batch=3)
        mask = np.ones((3, 5), dtype=bool)
        mask[1, 3:] = False
        batched = encode(state, xb, mask).data
        for i in range(3):
            single = encode(state, T.Tensor(xb.data[i]), mask[i]).data
            np.testing.assert_allclose(batched[i], single, atol=1e-12)


class TestPool:
    def test_single_row_span_returns_row(self):
        h = T.Tensor(np.arange(12.0).reshape(3, 4))
        out = pool(h, slice(1, 2), [True, True, True])
        np.testing.assert_array_equal(out.data, h.data[1])

    def test_mean_idempotent_on_identical_rows(self):
        row = np.arange(4.0)
        h = T.Tensor(np.stack([row, row]))
        out = pool(h, slice(0, 2), [True, True])
        np.testing.assert_array_equal(out.data, row)

    def test_mean_matches_direct_summation(self):
        rng = np.random.default_rng(6)
        h = T.Tensor(rng.normal(size=(5, 4)))
        out = pool(h, slice(1, 4), [True] * 5)
        np.testing.assert_allclose(out.data, h.data[1:4].mean(axis=0), atol=1e-12)

    def test_empty_span_rejected(self):
        h = T.Tensor(np.zeros((3, 4)))
        with pytest.raises(ContractError):
            pool(h, slice(2, 2), [True, True, True])

    def test_pad_rows_excluded_from_mean(self):
        h = T.Tensor(np.stack([np.ones(4), 5 * np.ones(4), np.zeros(4)]))
        out = pool(h, slice(0, 3), [True, True, False])
        np.testing.assert_array_equal(out.data, 3 * np.ones(4))


class TestPretrain:
    def make_corpus(self, rng, n_seq=64):
        return [rng.integers(3, SMALL.vocab_size, size=rng.integers(4, SMALL.n_max)).tolist()
                for _ in range(n_seq)]

    def test_zero_steps_leaves_state_unchanged(self):
        state = init_encoder(SMALL)
        before = state.state_bytes()
        _, losses = pretrain_backbone(state, [[3, 4, 5]], steps=0)
        assert state.state_bytes() == before and losses == []

    def test_loss_decreases(self):
        state = init_encoder(SMALL)
        corpus = self.make_corpus(np.random.default_rng(7))
        _, losses = pretrain_backbone(state, corpus, steps=120, mask_prob=0.3, seed=1)
        assert np.mean(losses[-20:]) < np.mean(losses[:20])
        assert not state.frozen

    def test_zero_mask_prob_no_signal(self):
        state = init_encoder(SMALL)
        before = state.state_bytes()
        _, losses = pretrain_backbone(state, self.make_corpus(np.random.default_rng(8), 8),
                                      steps=5, mask_prob=0.0)
        assert losses == [0.0] * 5
        assert state.state_bytes() == before

    def test_frozen_state_rejected(self):
        state = freeze(init_encoder(SMALL))
        with pytest.raises(ContractError):
            pretrain_backbone(state, [[3, 4]], steps=1)


class TestFreeze:
    def test_adam_cannot_move_frozen_weights(self):
        state = freeze(init_encoder(SMALL))
        before = state.state_bytes()
        opt = T.Adam(state.parameters(), lr=0.5)
        for p in state.parameters():
            p.value.grad[...] = 1.0
        opt.step()
        assert state.state_bytes() == before

    def test_freeze_idempotent(self):
        state = freeze(init_encoder(SMALL))
        snap = state.state_bytes()
        freeze(state)
        assert state.frozen and state.state_bytes() == snap

    def test_encode_unchanged_while_training_other_params(self):
        state = freeze(init_encoder(SMALL))
        x = random_input(SMALL, 4, seed=9)
        mask = [True] * 4
        before = encode(state, x, mask).data.copy()

        live = T.Parameter(np.zeros((4, SMALL.d)))
        opt = T.Adam([live], lr=0.1)
        for _ in range(3):
            out = encode(state, T.add(x, live.value), mask)
            T.backward(T.sum_all(out))
            opt.step()
            opt.zero_grad()
        after = encode(state, x, mask).data
        assert after.tobytes() == before.tobytes()


class TestGradientsThroughEncoder:
    def test_full_stack_gradcheck(self):
        cfg = EncoderConfig(d=4, layers=1, heads=2, ffn_dim=6, vocab_size=8, n_max=4,
                            prompt_capacity=2, seed=11)
        state = init_encoder(cfg)
        x = T.Parameter(np.random.default_rng(12).normal(size=(3, 4)))
        mask = [True, True, False]
        c = np.random.default_rng(13).normal(size=(3, 4))

        def forward_value():
            with T.no_grad():
                out = encode(state, T.Tensor(x.data), mask)
            return float((out.data * c).sum())

        out = encode(state, x.value, mask)
        T.backward(T.sum_all(T.mul(out, T.Tensor(c))))
        fd = finite_difference_grad(forward_value, x.data)
        assert max_rel_error(x.grad, fd) < 1e-4


class TestSerialization:
    def test_round_trip_bit_identical(self, tmp_path):
        state = init_encoder(SMALL)
        pretrain_backbone(state, [[3, 4, 5, 6]] * 4, steps=3, seed=2)
        freeze(state)
        path = tmp_path / "enc.bin"
        save_encoder(state, str(path))
        loaded = load_encoder(str(path))
        assert loaded.state_bytes() == state.state_bytes()
        assert loaded.frozen and loaded.config == state.config

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a weights file")
        with pytest.raises(ConfigError):
            load_encoder(str(path))

    def test_clone_is_independent(self):
        state = freeze(init_encoder(SMALL))
        clone = clone_encoder(state, trainable=True)
        assert clone.state_bytes() == state.state_bytes()
        clone.token_embeddings.value.data += 1.0
        assert clone.state_bytes() != state.state_bytes()
        assert all(p.trainable for p in clone.parameters())
