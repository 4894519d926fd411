"""Blend formula and recursive midpoint subdivision."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from changecap.config import DataConfig
from changecap.errors import ConfigError
from changecap.interp import (BlendInterpolator, OracleInterpolator,
                              blend_frame, generate_procedure)
from changecap import synthdata as sd


def _pair(seed=0):
    rng = np.random.default_rng(seed)
    a = rng.random((8, 8, 3)).astype(np.float32)
    b = rng.random((8, 8, 3)).astype(np.float32)
    return a, b


class TestBlendFrame:
    def test_all_ones_mask_returns_before(self):
        a, b = _pair()
        np.testing.assert_array_equal(blend_frame(a, b, np.ones_like(a)), a)

    def test_all_zeros_mask_returns_after(self):
        a, b = _pair()
        np.testing.assert_array_equal(blend_frame(a, b, np.zeros_like(a)), b)

    def test_half_mask_midpoint(self):
        a = np.full((4, 4, 3), 0.2, dtype=np.float32)
        b = np.full((4, 4, 3), 0.8, dtype=np.float32)
        out = blend_frame(a, b, np.full_like(a, 0.5))
        np.testing.assert_allclose(out, 0.5, atol=1e-7)

    def test_shape_mismatch_raises(self):
        a, _ = _pair()
        with pytest.raises(ValueError):
            blend_frame(a, a[:4], np.ones_like(a))

    def test_residual_added_then_clamped(self):
        a = np.full((2, 2, 3), 0.9, dtype=np.float32)
        b = np.full((2, 2, 3), 0.9, dtype=np.float32)
        out = blend_frame(a, b, np.full_like(a, 0.5),
                          residual=np.full_like(a, 0.5))
        np.testing.assert_allclose(out, 1.0)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_output_within_endpoint_interval(self, pa, pb, h):
        a = np.full((2, 2, 3), pa, dtype=np.float32)
        b = np.full((2, 2, 3), pb, dtype=np.float32)
        out = blend_frame(a, b, np.full_like(a, h))
        lo, hi = min(pa, pb), max(pa, pb)
        assert out.min() >= lo - 1e-6 and out.max() <= hi + 1e-6


class TestGenerateProcedure:
    def test_l7_timestamps(self):
        a, b = _pair()
        seq = generate_procedure(BlendInterpolator(), a, b, 7)
        np.testing.assert_allclose(seq.timestamps,
                                   [i / 8 for i in range(1, 8)])

    def test_l1_single_midpoint(self):
        a, b = _pair()
        seq = generate_procedure(BlendInterpolator(), a, b, 1)
        assert len(seq) == 1
        np.testing.assert_allclose(seq.frames[0], 0.5 * (a + b), atol=1e-6)

    def test_constant_half_mask_closed_form(self):
        # unrolling the recursion: t=1/4 is 0.75/0.25, t=3/4 is 0.25/0.75
        a, b = _pair(1)
        seq = generate_procedure(BlendInterpolator(), a, b, 3)
        np.testing.assert_allclose(seq.frames[0], 0.75 * a + 0.25 * b, atol=1e-6)
        np.testing.assert_allclose(seq.frames[1], 0.5 * (a + b), atol=1e-6)
        np.testing.assert_allclose(seq.frames[2], 0.25 * a + 0.75 * b, atol=1e-6)

    @pytest.mark.parametrize("bad_l", [0, 2, 4, 5, 6, 8])
    def test_rejects_non_power_lengths(self, bad_l):
        a, b = _pair()
        with pytest.raises(ConfigError):
            generate_procedure(BlendInterpolator(), a, b, bad_l)

    def test_endpoints_never_included(self):
        a, b = _pair(2)
        seq = generate_procedure(BlendInterpolator(), a, b, 7)
        for frame in seq.frames:
            assert not np.array_equal(frame, a)
            assert not np.array_equal(frame, b)
        assert 0.0 not in seq.timestamps and 1.0 not in seq.timestamps

    def test_pixel_trajectories_monotone_for_constant_mask(self):
        a, b = _pair(3)
        seq = generate_procedure(BlendInterpolator(), a, b, 7)
        values = np.stack([a] + seq.frames + [b])
        diffs = np.diff(values, axis=0)
        sign = np.sign(b - a)
        assert np.all(diffs * sign >= -1e-6)

    def test_gated_mask_keeps_static_pixels(self):
        a = np.full((4, 4, 3), 0.4, dtype=np.float32)
        b = a.copy()
        b[0, 0] = 0.9
        seq = generate_procedure(BlendInterpolator(gate=True), a, b, 3)
        for frame in seq.frames:
            np.testing.assert_array_equal(frame[1:], a[1:])
        mids = [f[0, 0, 0] for f in seq.frames]
        assert mids[0] < mids[1] < mids[2]

    def test_oracle_interpolator_same_contract(self):
        cfg = DataConfig()
        scene = sd.generate_scene(11, cfg)
        change = sd.sample_change(scene, 11, cfg)
        after = sd.apply_change(scene, change)
        before_img, after_img = sd.render(scene, 32), sd.render(after, 32)
        oracle = OracleInterpolator(scene, change, 32)
        seq = generate_procedure(oracle, before_img, after_img, 7)
        assert seq.source == "oracle"
        assert len(seq) == 7
        np.testing.assert_allclose(seq.timestamps, [i / 8 for i in range(1, 8)])
        for t, frame in zip(seq.timestamps, seq.frames):
            np.testing.assert_array_equal(
                frame, sd.frame_at(scene, change, t, 32))
        assert all(f.shape == before_img.shape for f in seq.frames)

    def test_oracle_procedure_matches_recursive_oracle(self):
        # same frames whether built directly or through the recursion
        cfg = DataConfig()
        scene = sd.generate_scene(12, cfg)
        change = sd.sample_change(scene, 12, cfg)
        direct = sd.oracle_procedure(scene, change, 7, 32)
        after = sd.apply_change(scene, change)
        rec = generate_procedure(OracleInterpolator(scene, change, 32),
                                 sd.render(scene, 32), sd.render(after, 32), 7)
        for f1, f2 in zip(direct.frames, rec.frames):
            np.testing.assert_array_equal(f1, f2)
