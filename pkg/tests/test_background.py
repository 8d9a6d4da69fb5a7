"""Background sampling ranges, channelwise-max sampling and feature fusion."""

import numpy as np
import pytest

from htal import autodiff as ad
from htal.autodiff import Tensor
from htal.backbone import PyramidLevel
from htal.background import (FeatureRefiner, background_ranges,
                             sample_background)
from htal.config import ModelConfig


def naive_background(feats, segments, rate):
    """Double-loop oracle over locations and ranges."""
    t, c = feats.shape
    out = np.zeros((t, 2 * c))
    for i, (s, e) in enumerate(segments):
        a, b = int(round(rate * s)), int(round(s))
        lo, hi = int(round(e)), min(int(round(e + rate * (t - e))), t)
        if b > a:
            out[i, :c] = feats[a:b].max(axis=0)
        if hi > lo:
            out[i, c:] = feats[lo:hi].max(axis=0)
    return out


class TestRanges:
    def test_hand_example(self):
        r = background_ranges(40.0, 60.0, 100, 0.7)
        assert r.left == (28, 40)
        assert r.right == (60, 88)

    def test_boundary_at_edges_gives_empty(self):
        r = background_ranges(0.0, 100.0, 100, 0.7)
        assert r.left == (0, 0)
        assert r.right == (100, 100)

    def test_full_rate_right_side_covers_tail(self):
        # at rate 1 the right range spans [end, T]; the left range under the
        # literal formula [rate*start, start] collapses to the boundary point
        r = background_ranges(40.0, 60.0, 100, 1.0)
        assert r.right == (60, 100)
        assert r.left == (40, 40)

    def test_invalid_inputs_rejected(self):
        with pytest.raises(ValueError, match="start"):
            background_ranges(50.0, 40.0, 100, 0.7)
        with pytest.raises(ValueError, match="rate"):
            background_ranges(10.0, 20.0, 100, 0.0)

    def test_ranges_stay_inside_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            t = int(rng.integers(4, 50))
            s = rng.uniform(0, t)
            e = rng.uniform(s, t)
            rate = rng.uniform(0.05, 1.0)
            r = background_ranges(s, e, t, rate)
            for lo, hi in (r.left, r.right):
                assert 0 <= lo <= hi <= t

    def test_monotone_nesting_in_rate(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            t = 64
            s = rng.uniform(0, t)
            e = rng.uniform(s, t)
            r1, r2 = sorted(rng.uniform(0.05, 1.0, size=2))
            a = background_ranges(s, e, t, r1)
            b = background_ranges(s, e, t, r2)
            # smaller rate: wider left slice; larger rate: wider right slice
            assert a.left[0] <= b.left[0] and a.left[1] == b.left[1]
            assert a.right[0] == b.right[0] and a.right[1] <= b.right[1]


class TestSampling:
    def test_constant_features_sample_the_constant(self):
        feats = np.full((20, 3), 4.2)
        level = PyramidLevel(level=1, features=Tensor(feats), stride=1)
        segments = np.tile([5.0, 15.0], (20, 1))
        out = sample_background(level, segments, 0.7).data
        assert np.allclose(out, 4.2)

    def test_spike_lands_in_left_channels_only(self):
        feats = np.zeros((20, 2))
        feats[4, 0] = 9.0    # inside left range [round(0.7*10)=7 ... hmm]
        feats[3, 1] = 7.0
        level = PyramidLevel(level=1, features=Tensor(feats), stride=1)
        segments = np.tile([10.0, 15.0], (20, 1))
        out = sample_background(level, segments, 0.3).data
        # left range = [3, 10), right = [15, 17)
        assert out[0, 0] == 9.0 and out[0, 1] == 7.0
        assert np.allclose(out[0, 2:], 0.0)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            t = int(rng.integers(6, 40))
            c = int(rng.integers(1, 5))
            feats = rng.normal(size=(t, c))
            starts = rng.uniform(0, t / 2, size=t)
            ends = starts + rng.uniform(0, t - starts)
            segments = np.stack([starts, np.minimum(ends, t)], axis=1)
            rate = float(rng.uniform(0.1, 1.0))
            level = PyramidLevel(level=1, features=Tensor(feats), stride=1)
            got = sample_background(level, segments, rate).data
            assert np.array_equal(got, naive_background(feats, segments, rate))

    def test_max_dominates_range_values(self):
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(30, 4))
        level = PyramidLevel(level=1, features=Tensor(feats), stride=1)
        segments = np.tile([10.0, 20.0], (30, 1))
        out = sample_background(level, segments, 0.7).data
        a, b = 7, 10
        for i in range(30):
            assert (out[i, :4] >= feats[a:b].max(axis=0) - 1e-15).all()

    def test_level_units_conversion(self):
        # base-unit segments are rescaled by the level stride before ranging
        rng = np.random.default_rng(4)
        feats = rng.normal(size=(16, 2))
        level = PyramidLevel(level=2, features=Tensor(feats), stride=2)
        segments = np.tile([8.0, 16.0], (16, 1))   # level-2 units: (4, 8)
        got = sample_background(level, segments, 0.5).data
        expected = naive_background(feats, np.tile([4.0, 8.0], (16, 1)), 0.5)
        assert np.array_equal(got, expected)


class TestRefiner:
    def _refiner(self, channels=4):
        cfg = ModelConfig(levels=2, channels=channels, in_channels=channels,
                          num_classes=2, heads=1)
        return FeatureRefiner(cfg, np.random.default_rng(5)), cfg

    def test_identity_wiring(self):
        refiner, _ = self._refiner()
        c = 4
        refiner.reduce.weight.data[:] = 0.0
        refiner.reduce.bias.data[:] = 0.0
        for ch in range(c):
            refiner.reduce.weight.data[1, ch, ch] = 1.0   # center tap, first C channels
        rng = np.random.default_rng(6)
        feats = rng.normal(size=(12, c))
        level = PyramidLevel(level=1, features=Tensor(feats), stride=1)
        half = Tensor(np.full((12, c), 0.5))
        background = Tensor(np.zeros((12, 2 * c)))
        out = refiner(level, half, half, background)
        assert np.allclose(out.features.data, feats, atol=1e-12)
        assert out.level == 1

    def test_zero_attention_leaves_background_only(self):
        refiner, _ = self._refiner()
        rng = np.random.default_rng(7)
        feats_a = rng.normal(size=(10, 4))
        feats_b = rng.normal(size=(10, 4))
        zeros = Tensor(np.zeros((10, 4)))
        background = Tensor(rng.normal(size=(10, 8)))
        out_a = refiner(PyramidLevel(1, Tensor(feats_a), 1), zeros, zeros, background)
        out_b = refiner(PyramidLevel(1, Tensor(feats_b), 1), zeros, zeros, background)
        assert np.allclose(out_a.features.data, out_b.features.data)

    def test_matches_composed_primitives(self):
        refiner, _ = self._refiner()
        rng = np.random.default_rng(8)
        feats = Tensor(rng.normal(size=(10, 4)))
        ps = Tensor(rng.normal(size=(10, 4)))
        pe = Tensor(rng.normal(size=(10, 4)))
        background = Tensor(rng.normal(size=(10, 8)))
        got = refiner(PyramidLevel(1, feats, 1), ps, pe, background).features.data
        attended = ad.mul(feats, ps + pe)
        expected = ad.conv1d(ad.concat([attended, background], axis=1),
                             refiner.reduce.weight, refiner.reduce.bias,
                             stride=1, padding=1).data
        assert np.array_equal(got, expected)

    def test_output_shape_per_level(self):
        cfg = ModelConfig(levels=3, channels=8, in_channels=8, num_classes=2, heads=1)
        refiner = FeatureRefiner(cfg, np.random.default_rng(9))
        rng = np.random.default_rng(10)
        for level, t_l in ((1, 32), (2, 16), (3, 8)):
            feats = Tensor(rng.normal(size=(t_l, 8)))
            ps = Tensor(rng.normal(size=(t_l, 8)))
            bg = Tensor(rng.normal(size=(t_l, 16)))
            out = refiner(PyramidLevel(level, feats, 2 ** (level - 1)), ps, ps, bg)
            assert out.features.shape == (t_l, 8)
