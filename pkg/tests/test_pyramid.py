import math

import numpy as np
import pytest

from pbrnet import tensor as T
from pbrnet.boxgeom import Box
from pbrnet.pyramid import (
    DESK_SCALE_ASSIGNMENT,
    FeaturePyramid,
    LevelAssignment,
    assign_level,
    refine_level,
    roi_align,
    roi_align_batch,
)


def bilinear_oracle(feat, y, x):
    """Direct 4-neighbor interpolation; out-of-map neighbors contribute 0."""
    c, h, w = feat.shape
    y0, x0 = math.floor(y), math.floor(x)
    ly, lx = y - y0, x - x0
    val = np.zeros(c, dtype=feat.dtype)
    for yy, xx, wt in [
        (y0, x0, (1 - ly) * (1 - lx)),
        (y0, x0 + 1, (1 - ly) * lx),
        (y0 + 1, x0, ly * (1 - lx)),
        (y0 + 1, x0 + 1, ly * lx),
    ]:
        if 0 <= yy < h and 0 <= xx < w:
            val += wt * feat[:, yy, xx]
    return val


def roi_align_oracle(feat, box, stride, k=7, s=2):
    """Scalar-loop RoI Align used as the independent reference."""
    c = feat.shape[0]
    fx1, fy1 = box.x1 / stride, box.y1 / stride
    bw = (box.x2 / stride - fx1) / k
    bh = (box.y2 / stride - fy1) / k
    out = np.zeros((c, k, k), dtype=feat.dtype)
    for i in range(k):
        for j in range(k):
            acc = np.zeros(c, dtype=feat.dtype)
            for u in range(s):
                for v in range(s):
                    sy = fy1 + (i + (u + 0.5) / s) * bh
                    sx = fx1 + (j + (v + 0.5) / s) * bw
                    acc += bilinear_oracle(feat, sy, sx)
            out[:, i, j] = acc / (s * s)
    return out


class TestAssignLevel:
    def test_canonical_scale_maps_to_canonical_level(self):
        a = LevelAssignment(k0=3, s0=48.0)
        assert assign_level(Box(0, 0, 48, 48), a) == 3

    def test_double_scale_moves_one_level_up(self):
        assert assign_level(Box(0, 0, 64, 64), LevelAssignment(k0=2, s0=32.0)) == 3

    def test_tiny_box_clamps_to_finest(self):
        assert assign_level(Box(0, 0, 1, 1), DESK_SCALE_ASSIGNMENT) == 2

    def test_huge_box_clamps_to_coarsest(self):
        assert assign_level(Box(0, 0, 4096, 4096), DESK_SCALE_ASSIGNMENT) == 5

    def test_monotone_in_scale(self):
        rng = np.random.default_rng(4)
        sizes = np.sort(rng.uniform(2, 2000, 200))
        levels = [assign_level(Box(0, 0, s, s), DESK_SCALE_ASSIGNMENT) for s in sizes]
        assert all(a <= b for a, b in zip(levels, levels[1:]))


class TestRefineLevel:
    @pytest.mark.parametrize("k,expected", [(5, 4), (4, 3), (3, 2), (2, 2)])
    def test_demotion(self, k, expected):
        assert refine_level(k) == expected

    @pytest.mark.parametrize("k", [1, 6, 0])
    def test_out_of_range_rejected(self, k):
        with pytest.raises(ValueError):
            refine_level(k)


class TestFeaturePyramid:
    def build(self, n=1, d=8, img=64):
        levels = {
            k: T.Tensor(np.zeros((n, d, img // 2 ** k, img // 2 ** k), dtype=np.float32))
            for k in range(2, 6)
        }
        return FeaturePyramid(levels, img_w=img, img_h=img)

    def test_valid_construction(self):
        p = self.build()
        assert p.channels == 8
        assert p.stride(3) == 8

    def test_channel_mismatch_rejected(self):
        levels = {
            k: T.Tensor(np.zeros((1, 8 if k != 4 else 4, 64 // 2 ** k, 64 // 2 ** k)))
            for k in range(2, 6)
        }
        with pytest.raises(ValueError):
            FeaturePyramid(levels, img_w=64, img_h=64)

    def test_wrong_spatial_size_rejected(self):
        levels = {
            k: T.Tensor(np.zeros((1, 8, 64 // 2 ** k, 64 // 2 ** k))) for k in range(2, 6)
        }
        levels[3] = T.Tensor(np.zeros((1, 8, 9, 8)))
        with pytest.raises(ValueError):
            FeaturePyramid(levels, img_w=64, img_h=64)


class TestRoiAlign:
    def test_constant_map_returns_constant(self):
        feat = T.Tensor(np.full((3, 8, 8), 2.5), dtype=np.float64)
        out = roi_align(feat, Box(3.0, 2.0, 21.0, 17.0), stride=4, out_size=7)
        np.testing.assert_allclose(out.data, 2.5, atol=1e-12)

    def test_x_ramp_gives_mean_sample_coordinate(self):
        # with f(x, y) = x, every pooled cell is the mean of its sample xs
        feat = np.broadcast_to(np.arange(16, dtype=np.float64), (1, 16, 16)).copy()
        box = Box(8.0, 8.0, 40.0, 40.0)
        stride, k, s = 4, 7, 2
        out = roi_align(T.Tensor(feat, dtype=np.float64), box, stride, k, s)
        bw = (box.x2 - box.x1) / stride / k
        fx1 = box.x1 / stride
        for j in range(k):
            expected = np.mean([fx1 + (j + (v + 0.5) / s) * bw for v in range(s)])
            np.testing.assert_allclose(out.data[0, :, j], expected, atol=1e-12)

    def test_matches_oracle_on_random_cases(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            feat = rng.normal(size=(1, 8, 8))
            w = rng.uniform(2, 28)
            h = rng.uniform(2, 28)
            x1 = rng.uniform(-2, 32 - w + 2)  # may straddle map edges
            y1 = rng.uniform(-2, 32 - h + 2)
            box = Box(x1, y1, x1 + w, y1 + h)
            got = roi_align(T.Tensor(feat, dtype=np.float64), box, stride=4).data
            want = roi_align_oracle(feat, box, stride=4)
            np.testing.assert_allclose(got, want, atol=1e-9)

    def test_linearity(self):
        rng = np.random.default_rng(7)
        f = rng.normal(size=(2, 8, 8))
        g = rng.normal(size=(2, 8, 8))
        box = Box(2.0, 3.0, 25.0, 28.0)
        a, b = 1.7, -0.6
        lhs = roi_align(T.Tensor(a * f + b * g, dtype=np.float64), box, stride=4).data
        rhs = a * roi_align(T.Tensor(f, dtype=np.float64), box, stride=4).data + \
            b * roi_align(T.Tensor(g, dtype=np.float64), box, stride=4).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_translation_equivariance_one_stride(self):
        rng = np.random.default_rng(8)
        feat = rng.normal(size=(1, 12, 12))
        shifted = np.roll(feat, 1, axis=2)  # shift one cell in x
        box = Box(8.0, 8.0, 24.0, 24.0)
        moved = Box(box.x1 + 4, box.y1, box.x2 + 4, box.y2)
        a = roi_align(T.Tensor(feat, dtype=np.float64), box, stride=4).data
        b = roi_align(T.Tensor(shifted, dtype=np.float64), moved, stride=4).data
        np.testing.assert_array_equal(a, b)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        feat = T.Tensor(rng.normal(size=(1, 6, 6)), requires_grad=True, dtype=np.float64)
        box = Box(1.5, 2.0, 19.0, 21.5)
        w = rng.uniform(-1, 1, (1, 7, 7))

        def make_loss():
            pooled = roi_align(feat, box, stride=4)
            return T.tsum(T.mul(pooled, T.Tensor(w, dtype=np.float64)))

        loss = make_loss()
        loss.backward()
        analytic = feat.grad.copy()

        h = 1e-3
        numeric = np.zeros_like(feat.data)
        it = np.nditer(feat.data, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = feat.data[i]
            feat.data[i] = old + h
            fp = float(make_loss().data)
            feat.data[i] = old - h
            fm = float(make_loss().data)
            feat.data[i] = old
            numeric[i] = (fp - fm) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(10)
        feats = rng.normal(size=(2, 3, 8, 8))
        boxes = [Box(2, 2, 20, 24), Box(5, 1, 30, 18)]
        rois = np.array([[0, *boxes[0].as_tuple()], [1, *boxes[1].as_tuple()]])
        batched = roi_align_batch(T.Tensor(feats, dtype=np.float64), rois, stride=4).data
        for i, (img, box) in enumerate(zip(feats, boxes)):
            single = roi_align(T.Tensor(img, dtype=np.float64), box, stride=4).data
            np.testing.assert_allclose(batched[i], single, atol=1e-12)

    def test_degenerate_roi_rejected(self):
        feat = T.Tensor(np.zeros((1, 2, 8, 8)))
        with pytest.raises(Exception):
            roi_align_batch(feat, np.array([[0.0, 5.0, 5.0, 5.0, 9.0]]), stride=4)
