"""Prefix bank, parse encodings, direct substitution, and the
parse-encoding loss."""


import numpy as np
import pytest

from synpara import model as M
from synpara import prefix as P
from synpara import tensor as T
from synpara.data import DEFAULT_GRAMMAR, SEP, build_vocab
from synpara.errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    ValidationError,
)
from synpara.tensor import Tensor


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(DEFAULT_GRAMMAR)


@pytest.fixture(scope="module")
def cfg(vocab):
    return M.toy_config(vocab.size)


@pytest.fixture(scope="module")
def frozen(cfg):
    w = M.init_weights(cfg, seed=41)
    w.set_frozen(True)
    return w


class TestInitPrefixBank:
    def test_same_seed_bitwise_identical(self, cfg):
        a = P.init_prefix_bank(cfg, seed=5)
        b = P.init_prefix_bank(cfg, seed=5)
        for (n1, t1), (n2, t2) in zip(a.named_tensors(), b.named_tensors()):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data)

    def test_different_seeds_differ(self, cfg):
        a = P.init_prefix_bank(cfg, seed=5)
        b = P.init_prefix_bank(cfg, seed=6)
        assert any(
            not np.array_equal(t1.data, t2.data)
            for (_, t1), (_, t2) in zip(a.named_tensors(), b.named_tensors())
        )

    def test_entry_mean_within_clt_bound(self, cfg):
        bank = P.init_prefix_bank(cfg, seed=7)
        entries = np.concatenate([t.data.ravel() for _, t in bank.named_tensors()])
        assert entries.size >= 3000
        # sigma=0.02; even at ~3k draws the mean stays well inside +-0.002
        assert abs(entries.mean()) < 0.002
        # std should sit near 0.02 too
        assert 0.015 < entries.std() < 0.025

    def test_one_pair_per_site(self, cfg):
        bank = P.init_prefix_bank(cfg, seed=7)
        assert len(bank.tensors) == 2 * len(M.attention_sites(cfg))
        for site in M.attention_sites(cfg):
            k, v = bank.kv(site.kind, site.layer_index)
            assert k.shape == v.shape == (cfg.prefix_len, cfg.dim_h)

    def test_unknown_site_rejected(self, cfg):
        bank = P.init_prefix_bank(cfg, seed=7)
        with pytest.raises(ValidationError):
            bank.kv("encoder-self", cfg.l_enc + 1)

    def test_reparameterized_bank(self, cfg):
        bank = P.init_prefix_bank(cfg, seed=7, reparameterize=True)
        assert bank.reparameterized and bank.dim_r == cfg.dim_h
        k, v = bank.kv("decoder-cross", 1)
        assert k.shape == v.shape == (cfg.prefix_len, cfg.dim_h)
        # strictly more trainable parameters than the plain bank
        plain = P.init_prefix_bank(cfg, seed=7)
        assert bank.param_count() > plain.param_count()
        with pytest.raises(ContractError):
            bank.dead_param_count()


class TestEncodeParse:
    def test_identity_pooling_when_lengths_match(self, cfg, frozen):
        ids = list(range(5, 5 + cfg.prefix_len))
        with T.no_grad():
            raw = M.encode(ids, None, frozen, cfg)
        enc = P.encode_parse(ids, frozen, cfg)
        assert np.array_equal(enc.values.data, raw.data)

    def test_pairwise_mean_at_double_length(self, cfg, frozen):
        ids = list(range(5, 5 + 2 * cfg.prefix_len))
        with T.no_grad():
            raw = M.encode(ids, None, frozen, cfg).data
        enc = P.encode_parse(ids, frozen, cfg)
        for j in range(cfg.prefix_len):
            expected = (raw[2 * j] + raw[2 * j + 1]) / 2.0
            assert np.array_equal(enc.values.data[j], expected)

    def test_short_parse_replicates_rows(self, cfg, frozen):
        enc = P.encode_parse([9], frozen, cfg)
        for j in range(1, cfg.prefix_len):
            assert np.array_equal(enc.values.data[j], enc.values.data[0])

    def test_detached_and_tape_free(self, cfg, frozen):
        T.reset_tape()
        enc = P.encode_parse([5, 6, 7], frozen, cfg)
        assert T.tape_size() == 0
        assert not enc.values.requires_grad

    def test_empty_parse_rejected(self, cfg, frozen):
        with pytest.raises(DegenerateInputError):
            P.encode_parse([], frozen, cfg)

    def test_cache_hit_agrees_with_recompute(self, cfg, frozen):
        cache = P.ParseEncodingCache(frozen, cfg)
        ids = [5, 6, 7, 8]
        first = cache.get("( S )", ids)
        second = cache.get("( S )", ids)
        assert second is first
        assert len(cache) == 1
        fresh = P.encode_parse(ids, frozen, cfg, "( S )")
        assert np.array_equal(first.values.data, fresh.values.data)

    def test_source_parse_recorded(self, cfg, frozen):
        enc = P.encode_parse([5, 6], frozen, cfg, source_parse="( S ( NP ) )")
        assert enc.source_parse == "( S ( NP ) )"


class TestApplyDirect:
    def test_untouched_sites_pass_through(self, cfg, frozen):
        bank = P.init_prefix_bank(cfg, seed=8)
        e_t = P.encode_parse([5, 6, 7], frozen, cfg)
        view = P.apply_direct(bank, e_t, cfg)
        for site in M.attention_sites(cfg):
            if site.kind == "encoder-self" and site.layer_index == cfg.l_enc:
                continue
            k0, v0 = bank.kv(site.kind, site.layer_index)
            k1, v1 = view.kv(site.kind, site.layer_index)
            assert k1 is k0 and v1 is v0

    def test_site_m_value_is_parse_encoding(self, cfg, frozen):
        bank = P.init_prefix_bank(cfg, seed=8)
        e_t = P.encode_parse([5, 6, 7], frozen, cfg)
        view = P.apply_direct(bank, e_t, cfg)
        k, v = view.kv("encoder-self", cfg.l_enc)
        assert v is e_t.values
        k0, _ = bank.kv("encoder-self", cfg.l_enc)
        assert k is k0

    def test_batched_encodings_stack(self, cfg, frozen):
        bank = P.init_prefix_bank(cfg, seed=8)
        encs = [P.encode_parse([5 + i, 6, 7], frozen, cfg) for i in range(3)]
        view = P.apply_direct(bank, encs, cfg)
        _, v = view.kv("encoder-self", cfg.l_enc)
        assert v.shape == (3, cfg.prefix_len, cfg.dim_h)
        for i, e in enumerate(encs):
            assert np.array_equal(v.data[i], e.values.data)

    def test_empty_batch_rejected(self, cfg):
        bank = P.init_prefix_bank(cfg, seed=8)
        with pytest.raises(ContractError):
            P.apply_direct(bank, [], cfg)

    def test_shape_mismatch_rejected(self, cfg, frozen):
        bank = P.init_prefix_bank(cfg, seed=8)
        bad = P.ParseEncoding(Tensor(np.zeros((3, cfg.dim_h))), "")
        with pytest.raises(DimensionError):
            P.apply_direct(bank, bad, cfg)

    def test_substituted_slot_gets_no_gradient(self, cfg, frozen, vocab):
        bank = P.init_prefix_bank(cfg, seed=8)
        e_t = P.encode_parse(vocab.encode(["(", "S", ")"]), frozen, cfg)
        view = P.apply_direct(bank, e_t, cfg)
        enc_ids = vocab.encode(["the", "dog"]) + [SEP] + vocab.encode(["(", "S", ")"])
        tgt_ids = vocab.encode(["the", "dog", "quickly"])
        T.reset_tape()
        loss = M.forward_loss(enc_ids, tgt_ids, view, frozen, cfg)
        T.backward(loss)
        dead = bank.tensors[bank.dead_tensor_name()]
        k_m, _ = bank.kv("encoder-self", cfg.l_enc)
        assert dead.grad is None
        assert k_m.grad is not None and np.any(k_m.grad != 0)
        # frozen backbone stays out of the graph entirely
        assert all(t.grad is None for _, t in frozen.named_tensors())
        T.reset_tape()


class TestPrefixAttend:
    def _setup(self, cfg, seed=9):
        instr = P.init_instructor(cfg, seed=seed, mode="indirect")
        rng = np.random.default_rng(seed)
        p, d = cfg.prefix_len, cfg.dim_h
        k_m = Tensor(rng.normal(size=(p, d)), requires_grad=True)
        v_m = Tensor(rng.normal(size=(p, d)), requires_grad=True)
        e_t = P.ParseEncoding(Tensor(rng.normal(size=(p, d))), "t")
        return instr, k_m, v_m, e_t

    def test_output_shape(self, cfg):
        instr, k_m, v_m, e_t = self._setup(cfg)
        out = P.prefix_attend(instr, k_m, v_m, e_t)
        assert out.shape == (cfg.prefix_len, cfg.dim_h)

    def test_zero_output_projection_zeroes_result(self, cfg):
        instr, k_m, v_m, e_t = self._setup(cfg)
        instr.tensors["attn.wo"].data[:] = 0.0
        instr.tensors["attn.bo"].data[:] = 0.0
        out = P.prefix_attend(instr, k_m, v_m, e_t)
        assert np.array_equal(out.data, np.zeros(out.shape))

    def test_direct_instructor_rejected(self, cfg):
        instr = P.init_instructor(cfg, seed=9, mode="direct")
        _, k_m, v_m, e_t = self._setup(cfg)
        with pytest.raises(ContractError):
            P.prefix_attend(instr, k_m, v_m, e_t)

    def test_shape_mismatch(self, cfg):
        instr, k_m, v_m, e_t = self._setup(cfg)
        with pytest.raises(DimensionError):
            P.prefix_attend(instr, Tensor(np.zeros((1, cfg.dim_h))), v_m, e_t)

    def test_gradients_against_finite_differences(self, vocab):
        cfg = M.micro_config(vocab.size)
        instr = P.init_instructor(cfg, seed=10, mode="indirect")
        rng = np.random.default_rng(10)
        p, d = cfg.prefix_len, cfg.dim_h
        k_m = Tensor(rng.normal(size=(p, d)), requires_grad=True)
        v_m = Tensor(rng.normal(size=(p, d)), requires_grad=True)
        e_t = P.ParseEncoding(Tensor(rng.normal(size=(p, d))), "t")
        for t in instr.tensors.values():
            t.data = rng.normal(size=t.data.shape)

        def f():
            return T.tsum(P.prefix_attend(instr, k_m, v_m, e_t))

        params = [k_m, v_m] + [t for _, t in instr.named_tensors()]
        assert T.grad_check(f, params, eps=1e-5) < 1e-4


class TestPelLoss:
    def _constant_phi_instructor(self, cfg, row):
        """Instructor whose H output is `row` for every position: zero H
        weight, bias = row."""
        instr = P.init_instructor(cfg, seed=11, mode="indirect")
        instr.tensors["head.w"].data[:] = 0.0
        instr.tensors["head.b"].data[:] = row
        return instr

    def test_range_on_random_inputs(self, cfg):
        rng = np.random.default_rng(12)
        p, d = cfg.prefix_len, cfg.dim_h
        for _ in range(10):
            instr = P.init_instructor(cfg, seed=int(rng.integers(1 << 30)), mode="indirect")
            for t in instr.tensors.values():
                t.data = rng.normal(size=t.data.shape)
            k_m = Tensor(rng.normal(size=(p, d)))
            v_m = Tensor(rng.normal(size=(p, d)))
            e_t = P.ParseEncoding(Tensor(rng.normal(size=(p, d))), "t")
            val = P.pel_loss(instr, k_m, v_m, e_t).item()
            assert 0.0 <= val <= 2.0

    def test_exact_zero_when_phi_equals_target(self, cfg):
        p, d = cfg.prefix_len, cfg.dim_h
        row = np.linspace(0.3, 1.7, d)
        instr = self._constant_phi_instructor(cfg, row)
        e_t = P.ParseEncoding(Tensor(np.tile(row, (p, 1))), "t")
        k_m = Tensor(np.ones((p, d)))
        v_m = Tensor(np.ones((p, d)))
        assert P.pel_loss(instr, k_m, v_m, e_t).item() == 0.0

    def test_exact_two_when_antipodal(self, cfg):
        p, d = cfg.prefix_len, cfg.dim_h
        row = np.linspace(0.3, 1.7, d)
        instr = self._constant_phi_instructor(cfg, -row)
        e_t = P.ParseEncoding(Tensor(np.tile(row, (p, 1))), "t")
        k_m = Tensor(np.ones((p, d)))
        v_m = Tensor(np.ones((p, d)))
        assert P.pel_loss(instr, k_m, v_m, e_t).item() == 2.0

    def test_half_for_identical_plus_orthogonal_rows(self, vocab):
        # prefix_len 2: one target row equals phi, the other is orthogonal
        cfg = M.micro_config(vocab.size)
        d = cfg.dim_h
        row = np.zeros(d)
        row[0] = 1.0
        orth = np.zeros(d)
        orth[1] = 1.0
        instr = self._constant_phi_instructor(cfg, row)
        e_t = P.ParseEncoding(Tensor(np.stack([row, orth])), "t")
        k_m = Tensor(np.ones((2, d)))
        v_m = Tensor(np.ones((2, d)))
        assert P.pel_loss(instr, k_m, v_m, e_t).item() == 0.5

    def test_zero_norm_phi_rejected(self, cfg):
        p, d = cfg.prefix_len, cfg.dim_h
        instr = self._constant_phi_instructor(cfg, np.zeros(d))
        e_t = P.ParseEncoding(Tensor(np.ones((p, d))), "t")
        with pytest.raises(DegenerateInputError):
            P.pel_loss(instr, Tensor(np.ones((p, d))), Tensor(np.ones((p, d))), e_t)

    def test_no_gradient_reaches_target(self, cfg):
        instr = P.init_instructor(cfg, seed=13, mode="indirect")
        rng = np.random.default_rng(13)
        p, d = cfg.prefix_len, cfg.dim_h
        k_m = Tensor(rng.normal(size=(p, d)), requires_grad=True)
        v_m = Tensor(rng.normal(size=(p, d)), requires_grad=True)
        e_t = P.ParseEncoding(Tensor(rng.normal(size=(p, d))), "t")
        T.reset_tape()
        T.backward(P.pel_loss(instr, k_m, v_m, e_t))
        assert e_t.values.grad is None
        assert k_m.grad is not None
        T.reset_tape()


class TestCombinedLoss:
    def test_zero_weight_preserves_lm_loss(self):
        lm = Tensor(np.asarray(3.25))
        pel = Tensor(np.asarray(1.5))
        assert P.combined_loss(lm, pel, 0.0).item() == lm.item()

    def test_arithmetic(self):
        lm = Tensor(np.asarray(2.0))
        pel = Tensor(np.asarray(0.5))
        assert P.combined_loss(lm, pel, 1.0).item() == 2.5

    def test_negative_weight_rejected(self):
        lm = Tensor(np.asarray(2.0))
        with pytest.raises(ValidationError):
            P.combined_loss(lm, lm, -0.1)
        with pytest.raises(ValidationError):
            P.init_instructor(M.micro_config(10), 1, "indirect", pel_weight=-1.0)

    def test_combined_gradient_is_lambda_times_pel_gradient(self, cfg, frozen, vocab):
        # the LM loss never touches A/H, so d(combined)/dA must equal
        # lambda * d(pel)/dA
        lam = 0.7
        bank = P.init_prefix_bank(cfg, seed=14)
        instr = P.init_instructor(cfg, seed=14, mode="indirect", pel_weight=lam)
        e_t = P.encode_parse(vocab.encode(["(", "S", ")"]), frozen, cfg)
        enc_ids = vocab.encode(["the", "dog"]) + [SEP] + vocab.encode(["(", "S", ")"])
        tgt_ids = vocab.encode(["the", "dog", "quickly"])

        def pel_only_grads():
            T.zero_grads([t for _, t in instr.named_tensors()])
            T.reset_tape()
            k_m, v_m = bank.kv("encoder-self", cfg.l_enc)
            T.backward(P.pel_loss(instr, k_m, v_m, e_t))
            return {n: t.grad.copy() for n, t in instr.named_tensors()}

        base = pel_only_grads()
        T.zero_grads([t for _, t in instr.named_tensors()])
        T.reset_tape()
        lm = M.forward_loss(enc_ids, tgt_ids, bank, frozen, cfg)
        k_m, v_m = bank.kv("encoder-self", cfg.l_enc)
        combined = P.combined_loss(lm, P.pel_loss(instr, k_m, v_m, e_t), lam)
        T.backward(combined)
        for name, t in instr.named_tensors():
            np.testing.assert_allclose(t.grad, lam * base[name], atol=1e-10)
        T.reset_tape()


class TestTrainableIsolation:
    def test_only_prefix_and_instructor_receive_grads(self, cfg, frozen, vocab):
        bank = P.init_prefix_bank(cfg, seed=15)
        instr = P.init_instructor(cfg, seed=15, mode="indirect")
        e_t = P.encode_parse(vocab.encode(["(", "S", ")"]), frozen, cfg)
        enc_ids = vocab.encode(["the", "cat"]) + [SEP] + vocab.encode(["(", "S", ")"])
        tgt_ids = vocab.encode(["the", "cat", "slowly"])
        T.reset_tape()
        lm = M.forward_loss(enc_ids, tgt_ids, bank, frozen, cfg)
        k_m, v_m = bank.kv("encoder-self", cfg.l_enc)
        T.backward(P.combined_loss(lm, P.pel_loss(instr, k_m, v_m, e_t), 1.0))
        assert all(t.grad is None for _, t in frozen.named_tensors())
        assert any(t.grad is not None for _, t in bank.named_tensors())
        assert any(t.grad is not None for _, t in instr.named_tensors())
        T.reset_tape()
