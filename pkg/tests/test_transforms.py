"""Tests for geometric transforms, bilinear sampling and patch warping."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from drspot.transforms import (
    Transform,
    TransformRanges,
    bilinear_sample,
    cell_centers,
    map_coords,
    sample_transform,
    sample_transforms,
    warp_patch,
)

angles = st.floats(0, 2 * math.pi)
shifts = st.floats(-0.3, 0.3)
scales = st.floats(0.5, 1.5)


class TestTransform:
    def test_identity_maps_points_to_themselves(self):
        pts = np.random.default_rng(0).uniform(size=(20, 2))
        np.testing.assert_array_equal(map_coords(Transform(), pts), pts)

    def test_center_is_fixed_without_translation(self):
        t = Transform(1.3, (0, 0), 0.8)
        np.testing.assert_allclose(map_coords(t, [0.5, 0.5]), [0.5, 0.5], atol=1e-15)

    def test_quarter_turn_by_hand(self):
        # (1, 0.5) sits 0.5 right of center; +90 degrees sends it 0.5 down (y grows downward)
        out = map_coords(Transform(math.pi / 2), [1.0, 0.5])
        np.testing.assert_allclose(out, [0.5, 1.0], atol=1e-12)

    @given(angles, shifts, shifts, scales)
    @settings(max_examples=100, deadline=None)
    def test_inverse_round_trip(self, theta, tx, ty, s):
        t = Transform(theta, (tx, ty), s)
        pts = np.random.default_rng(1).uniform(size=(10, 2))
        np.testing.assert_allclose(map_coords(t.inverse(), map_coords(t, pts)), pts, atol=1e-9)

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            Transform(0.0, (0, 0), 0.0)

    def test_torch_and_numpy_agree(self):
        t = Transform(0.4, (0.1, -0.2), 1.1)
        pts = np.random.default_rng(2).uniform(size=(5, 2))
        np.testing.assert_allclose(map_coords(t, torch.tensor(pts)).numpy(), map_coords(t, pts), atol=1e-14)


class TestRanges:
    def test_default_ranges(self):
        r = TransformRanges()
        assert r.rotation_range == (0.0, 2 * math.pi)
        assert r.translation_range == (-0.2, 0.2)
        assert r.scaling_range == (0.7, 1.3)

    def test_samples_stay_in_range_and_are_seeded(self):
        r = TransformRanges()
        ts = sample_transforms(r, 200, 5)
        assert ts == sample_transforms(r, 200, 5)
        for t in ts:
            assert 0 <= t.rotation <= 2 * math.pi
            assert all(-0.2 <= v <= 0.2 for v in t.translation)
            assert 0.7 <= t.scaling <= 1.3

    def test_degenerate_identity_range(self):
        assert sample_transform(TransformRanges.identity(), 3).is_identity

    def test_rejects_reversed_interval(self):
        with pytest.raises(ValueError):
            TransformRanges(scaling_range=(1.3, 0.7))


def dense_bilinear(feat, x, y):
    """Per-point reference: explicit four-neighbor weights with zero outside."""
    c, h, w = feat.shape
    x0, y0 = math.floor(x), math.floor(y)
    out = np.zeros(c)
    for xi, yi in ((x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)):
        wgt = (1 - abs(x - xi)) * (1 - abs(y - yi))
        if 0 <= xi < w and 0 <= yi < h:
            out += wgt * feat[:, yi, xi]
    return out


class TestBilinear:
    def test_integer_points_are_exact(self):
        feat = torch.randn(1, 3, 5, 6, dtype=torch.float64)
        xy = torch.tensor([[[0.0, 0.0], [5.0, 4.0], [2.0, 3.0]]], dtype=torch.float64)
        out = bilinear_sample(feat, xy)[0]
        for p, (x, y) in enumerate(xy[0].long().tolist()):
            assert torch.equal(out[p], feat[0, :, y, x])

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(3)
        feat = rng.normal(size=(2, 7, 9))
        pts = rng.uniform(-1.5, 9.5, size=(50, 2))
        out = bilinear_sample(torch.tensor(feat)[None], torch.tensor(pts)[None])[0].numpy()
        ref = np.stack([dense_bilinear(feat, x, y) for x, y in pts])
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_gradcheck(self):
        feat = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        xy = torch.tensor([[[0.3, 1.7], [2.2, 0.6], [1.5, 2.9]]], dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(bilinear_sample, (feat, xy), eps=1e-6, atol=1e-6)


class TestWarpPatch:
    def test_identity_is_exact(self):
        patch = torch.randn(3, 12, 12, dtype=torch.float64)
        assert torch.equal(warp_patch(patch, Transform()), patch)

    def test_blob_lands_where_inverse_map_says(self):
        s = 70
        grid = cell_centers(s).reshape(s, s, 2)
        p = torch.tensor([0.3, 0.6], dtype=torch.float64)
        patch = torch.exp(-((grid - p) ** 2).sum(-1) / (2 * 0.02**2))[None]
        for t in (Transform(1.0, (0.1, -0.05), 1.2), Transform(3.0, (-0.1, 0.1), 0.8)):
            w = warp_patch(patch, t)[0]
            v = (w[..., None] * grid).sum((0, 1)) / w.sum()
            np.testing.assert_allclose(map_coords(t, v).numpy(), p.numpy(), atol=2e-3)

    def test_batch_with_per_sample_transforms(self):
        patch = torch.randn(2, 1, 8, 8, dtype=torch.float64)
        ts = [Transform(0.5), Transform(0.0, (0.1, 0.0))]
        out = warp_patch(patch, ts)
        for i in range(2):
            assert torch.allclose(out[i], warp_patch(patch[i], ts[i]))

    def test_rejects_non_square(self):
        with pytest.raises(ValueError, match="square"):
            warp_patch(torch.zeros(1, 4, 5), Transform())
