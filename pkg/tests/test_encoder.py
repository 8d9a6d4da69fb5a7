"""Probability vectors, inverse-CDF sampling and the encoder blocks."""

import numpy as np
import pytest

from htal import autodiff as ad
from htal.autodiff import Tensor
from htal.background import CombinedFeature
from htal.config import ModelConfig
from htal.encoder import (EncoderBlock, HierarchicalEncoder, SampledContext,
                          VanillaEncoder, ConvEncoder, encode_level,
                          inverse_transform_sample, pdf_from_features,
                          positional_encoding, stratified_u)


def make_config(**kw):
    base = dict(levels=3, channels=8, in_channels=8, num_classes=3, heads=2)
    base.update(kw)
    return ModelConfig(**base)


class TestPdf:
    def test_constant_features_give_uniform(self):
        pdf = pdf_from_features(np.full((10, 4), 3.3))
        assert np.allclose(pdf, 0.1)

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pdf = pdf_from_features(rng.normal(size=(int(rng.integers(2, 30)), 5)))
            assert abs(pdf.sum() - 1.0) < 1e-9
            assert (pdf >= 0).all()

    def test_log2_bump_doubles_probability(self):
        feats = np.zeros((6, 4))
        feats[2, :] = np.log(2.0)     # channel mean = ln 2 above the others
        pdf = pdf_from_features(feats)
        others = np.delete(pdf, 2)
        assert np.allclose(pdf[2] / others, 2.0, rtol=1e-12)


class TestInverseTransformSampling:
    def test_uniform_stratified(self):
        pdf = np.full(8, 1 / 8)
        idx = inverse_transform_sample(pdf, 4, stratified_u(4))
        assert list(idx) == [0, 2, 4, 6]

    def test_point_mass(self):
        pdf = np.zeros(10)
        pdf[3] = 1.0
        idx = inverse_transform_sample(pdf, 5, stratified_u(5))
        assert list(idx) == [3] * 5

    def test_u_zero_skips_zero_mass_head(self):
        idx = inverse_transform_sample(np.array([0.5, 0.5]), 1, np.array([0.0]))
        assert idx[0] == 0
        idx = inverse_transform_sample(np.array([0.0, 1.0]), 1, np.array([0.0]))
        assert idx[0] == 1

    def test_count_zero_and_duplicates(self):
        pdf = np.full(4, 0.25)
        assert len(inverse_transform_sample(pdf, 0, np.zeros(0))) == 0
        idx = inverse_transform_sample(pdf, 9, stratified_u(9))
        assert len(idx) == 9 and set(idx) <= {0, 1, 2, 3}

    def test_unsorted_u_rejected(self):
        with pytest.raises(ValueError, match="sorted"):
            inverse_transform_sample(np.full(4, 0.25), 2, np.array([0.9, 0.1]))

    def test_result_sorted_and_in_range(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pdf = rng.dirichlet(np.ones(int(rng.integers(2, 20))))
            k = int(rng.integers(1, 30))
            idx = inverse_transform_sample(pdf, k, np.sort(rng.random(k)))
            assert (np.diff(idx) >= 0).all()
            assert idx.min() >= 0 and idx.max() < len(pdf)

    def test_empirical_frequencies(self):
        rng = np.random.default_rng(2)
        pdf = rng.dirichlet(np.ones(6))
        draws = 100_000
        idx = inverse_transform_sample(pdf, draws, np.sort(rng.random(draws)))
        counts = np.bincount(idx, minlength=6)
        sigma = np.sqrt(draws * pdf * (1 - pdf))
        assert (np.abs(counts - draws * pdf) <= 3 * sigma + 1).all()


def reference_block(block, tokens):
    """Plain-numpy re-computation of one post-norm encoder block."""
    def linear(x, lin):
        y = x @ lin.weight.data
        return y + lin.bias.data if lin.bias is not None else y

    def layer_norm(x, ln):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + ln.eps) * ln.gain.data + ln.bias.data

    n, c = tokens.shape
    dh = c // block.heads
    q, k, v = linear(tokens, block.wq), linear(tokens, block.wk), linear(tokens, block.wv)
    outs = []
    for h in range(block.heads):
        qh = q[:, h * dh:(h + 1) * dh]
        kh = k[:, h * dh:(h + 1) * dh]
        vh = v[:, h * dh:(h + 1) * dh]
        logits = qh @ kh.T / np.sqrt(dh)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        attn = e / e.sum(axis=-1, keepdims=True)
        outs.append(attn @ vh)
    mixed = linear(np.concatenate(outs, axis=1), block.wo)
    x = layer_norm(tokens + mixed, block.norm1)
    ffn = linear(np.maximum(linear(x, block.ffn1), 0.0), block.ffn2)
    return layer_norm(x + ffn, block.norm2)


class TestEncoderBlock:
    def test_single_token_attention_weight_is_one(self):
        cfg = make_config(heads=1)
        block = EncoderBlock(cfg, np.random.default_rng(3), with_context=False)
        tokens = Tensor(np.random.default_rng(4).normal(size=(1, 8)))
        _, weights = block.attention(tokens, return_weights=True)
        assert np.allclose(weights[0], [[1.0]])

    def test_attention_rows_sum_to_one(self):
        cfg = make_config(heads=2)
        block = EncoderBlock(cfg, np.random.default_rng(5), with_context=False)
        tokens = Tensor(np.random.default_rng(6).normal(size=(9, 8)))
        _, weights = block.attention(tokens, return_weights=True)
        for w in weights:
            assert np.abs(w.sum(axis=-1) - 1.0).max() < 1e-9

    def test_two_token_hand_oracle(self):
        cfg = ModelConfig(levels=1, channels=2, in_channels=2, num_classes=2, heads=1)
        rng = np.random.default_rng(7)
        block = EncoderBlock(cfg, rng, with_context=False)
        block.wq.weight.data[:] = [[0.3, -0.1], [0.2, 0.4]]
        block.wq.bias.data[:] = [0.05, -0.02]
        block.wk.weight.data[:] = [[-0.2, 0.1], [0.3, 0.2]]
        block.wv.weight.data[:] = [[0.5, 0.1], [-0.3, 0.2]]
        block.wv.bias.data[:] = [0.01, 0.02]
        block.wo.weight.data[:] = [[1.0, 0.0], [0.0, 1.0]]
        block.wo.bias.data[:] = 0.0
        block.ffn1.weight.data[:] = rng.normal(size=(2, 8)) * 0.1
        block.ffn2.weight.data[:] = rng.normal(size=(8, 2)) * 0.1
        tokens = np.array([[0.4, -0.3], [0.1, 0.8]])
        got = block(Tensor(tokens)).data
        assert np.allclose(got, reference_block(block, tokens), atol=1e-10)

    def test_full_block_matches_reference_random(self):
        cfg = make_config(heads=2)
        block = EncoderBlock(cfg, np.random.default_rng(8), with_context=False)
        tokens = np.random.default_rng(9).normal(size=(12, 8))
        got = block(Tensor(tokens)).data
        assert np.allclose(got, reference_block(block, tokens), atol=1e-10)


class TestEncodeLevel:
    def _context(self, rng, source, count):
        idx = np.sort(rng.integers(0, source.shape[0], size=count))
        return SampledContext(source_level=1, indices=idx,
                              features=ad.gather_rows(Tensor(source), idx))

    def test_output_shape_ignores_context_length(self):
        cfg = make_config()
        rng = np.random.default_rng(10)
        block = EncoderBlock(cfg, rng, with_context=True)
        h = CombinedFeature(level=2, features=Tensor(rng.normal(size=(16, 8))))
        for k in (0, 4, 16, 40):
            ctx = self._context(rng, rng.normal(size=(32, 8)), k)
            z = encode_level(h, ctx, block)
            assert z.shape == (16, 8)

    def test_channel_mismatch_rejected(self):
        cfg = make_config()
        rng = np.random.default_rng(11)
        block = EncoderBlock(cfg, rng, with_context=True)
        h = CombinedFeature(level=2, features=Tensor(rng.normal(size=(16, 8))))
        bad = SampledContext(source_level=1, indices=np.array([0]),
                             features=Tensor(rng.normal(size=(1, 4))))
        with pytest.raises(ValueError, match="channels"):
            encode_level(h, bad, block)

    def test_context_permutation_invariance_is_exact(self):
        cfg = make_config()
        rng = np.random.default_rng(12)
        block = EncoderBlock(cfg, rng, with_context=True)
        h = CombinedFeature(level=2, features=Tensor(rng.normal(size=(10, 8))))
        source = rng.normal(size=(20, 8))
        idx = np.sort(rng.integers(0, 20, size=10))
        ctx = SampledContext(1, idx, ad.gather_rows(Tensor(source), idx))
        z1 = encode_level(h, ctx, block).data
        perm = rng.permutation(10)
        ctx2 = SampledContext(1, idx[perm], ad.gather_rows(Tensor(source), idx[perm]))
        z2 = encode_level(h, ctx2, block).data
        assert np.array_equal(z1, z2)


class TestEncodePyramid:
    def _combined(self, rng, lengths, c=8):
        return [CombinedFeature(level=i + 1, features=Tensor(rng.normal(size=(t, c))))
                for i, t in enumerate(lengths)]

    def test_single_level_needs_no_sampling(self):
        cfg = make_config(levels=1)
        enc = HierarchicalEncoder(cfg, np.random.default_rng(13))
        combined = self._combined(np.random.default_rng(14), [16])
        outs, plan = enc(combined, rng=None)
        assert len(outs) == 1 and plan.context_indices == [None]

    def test_context_sizes_match_level_lengths(self):
        cfg = make_config(levels=3)
        enc = HierarchicalEncoder(cfg, np.random.default_rng(15))
        combined = self._combined(np.random.default_rng(16), [64, 32, 16])
        outs, plan = enc(combined, rng=None)
        assert [o.shape for o in outs] == [(64, 8), (32, 8), (16, 8)]
        assert plan.context_indices[0] is None
        assert len(plan.context_indices[1]) == 32
        assert len(plan.context_indices[2]) == 16

    def test_seeded_runs_are_bitwise_identical(self):
        cfg = make_config(levels=3)
        enc = HierarchicalEncoder(cfg, np.random.default_rng(17))
        combined = self._combined(np.random.default_rng(18), [32, 16, 8])
        a, _ = enc(combined, rng=np.random.default_rng(55))
        b, _ = enc(combined, rng=np.random.default_rng(55))
        for x, y in zip(a, b):
            assert np.array_equal(x.data, y.data)

    def test_stratified_evaluation_is_deterministic(self):
        cfg = make_config(levels=2)
        enc = HierarchicalEncoder(cfg, np.random.default_rng(19))
        combined = self._combined(np.random.default_rng(20), [16, 8])
        a, plan_a = enc(combined, rng=None)
        b, plan_b = enc(combined, rng=None)
        assert np.array_equal(plan_a.context_indices[1], plan_b.context_indices[1])
        assert np.array_equal(a[1].data, b[1].data)

    def test_plan_replay_reproduces_outputs(self):
        cfg = make_config(levels=3)
        enc = HierarchicalEncoder(cfg, np.random.default_rng(21))
        combined = self._combined(np.random.default_rng(22), [32, 16, 8])
        a, plan = enc(combined, rng=np.random.default_rng(9))
        b, _ = enc(combined, plan=plan)
        for x, y in zip(a, b):
            assert np.array_equal(x.data, y.data)


class TestAblationEncoders:
    def test_vanilla_concatenates_and_splits(self):
        cfg = make_config(levels=3, encoder_type="vanilla")
        enc = VanillaEncoder(cfg, np.random.default_rng(23))
        rng = np.random.default_rng(24)
        combined = [CombinedFeature(level=i + 1, features=Tensor(rng.normal(size=(t, 8))))
                    for i, t in enumerate([32, 16, 8])]
        outs, _ = enc(combined)
        assert [o.shape for o in outs] == [(32, 8), (16, 8), (8, 8)]

    def test_cnn_stack_shapes(self):
        cfg = make_config(levels=2, encoder_type="cnn")
        enc = ConvEncoder(cfg, np.random.default_rng(25))
        rng = np.random.default_rng(26)
        combined = [CombinedFeature(level=i + 1, features=Tensor(rng.normal(size=(t, 8))))
                    for i, t in enumerate([16, 8])]
        outs, _ = enc(combined)
        assert [o.shape for o in outs] == [(16, 8), (8, 8)]
        assert len(list(enc.named_parameters())) == 8   # 2 levels x 2 convs x (w, b)


class TestPositionalEncoding:
    def test_shape_and_range(self):
        enc = positional_encoding(50, 16)
        assert enc.shape == (50, 16)
        assert np.abs(enc).max() <= 1.0

    def test_distinct_positions(self):
        enc = positional_encoding(32, 8)
        assert not np.allclose(enc[0], enc[1])
