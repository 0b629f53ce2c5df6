import numpy as np
import pytest

from dynca.grid import (
    IDENTITY,
    LAPLACIAN,
    PaddingMode,
    SOBEL_X,
    SOBEL_Y,
    bilinear_resize,
    bilinear_resize_adjoint,
    conv3x3_adjoint,
    conv3x3_depthwise,
    rotate_kernel,
)

PADS = [PaddingMode.ZERO, PaddingMode.REPLICATE, PaddingMode.CIRCULAR]


def conv_oracle(g, k, pad):
    """Direct per-cell 3x3 window evaluation."""
    h, w, c = g.shape
    out = np.zeros_like(g)
    for y in range(h):
        for x in range(w):
            for ch in range(c):
                acc = 0.0
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy, xx = y + dy, x + dx
                        if pad is PaddingMode.REPLICATE:
                            v = g[min(max(yy, 0), h - 1), min(max(xx, 0), w - 1), ch]
                        elif pad is PaddingMode.CIRCULAR:
                            v = g[yy % h, xx % w, ch]
                        else:
                            v = g[yy, xx, ch] if 0 <= yy < h and 0 <= xx < w else 0.0
                        acc += k[dy + 1, dx + 1] * v
                out[y, x, ch] = acc
    return out


class TestConv3x3:
    def test_constant_grid_sobel_is_zero(self):
        g = np.ones((5, 7, 3), dtype=np.float32)
        out = conv3x3_depthwise(g, SOBEL_X, PaddingMode.REPLICATE)
        np.testing.assert_allclose(out, 0.0, atol=1e-7)

    def test_identity_kernel_on_1x1(self):
        for pad in PADS:
            g = np.full((1, 1, 1), 3.25, dtype=np.float32)
            out = conv3x3_depthwise(g, IDENTITY, pad)
            if pad is PaddingMode.ZERO:
                assert out[0, 0, 0] == 3.25
            else:
                # replicate/circular make every tap see the single cell
                np.testing.assert_allclose(out, 3.25 * IDENTITY.sum(), rtol=1e-6)

    def test_ramp_center_cell(self):
        # g(i,j) = j: the center window holds columns [0,1,2]; hand
        # convolution with sobel-x/8 gives exactly 1.0 there.
        g = np.zeros((3, 3, 1), dtype=np.float32)
        g[:, :, 0] = [[0, 1, 2]] * 3
        out = conv3x3_depthwise(g, SOBEL_X, PaddingMode.REPLICATE)
        assert out[1, 1, 0] == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_allclose(
            out, conv_oracle(g.astype(np.float64), SOBEL_X, PaddingMode.REPLICATE), atol=1e-6
        )

    @pytest.mark.parametrize("pad", PADS)
    @pytest.mark.parametrize("k", [SOBEL_X, SOBEL_Y, LAPLACIAN, IDENTITY])
    def test_matches_oracle(self, pad, k):
        rng = np.random.default_rng(7)
        g = rng.standard_normal((6, 5, 2)).astype(np.float32)
        out = conv3x3_depthwise(g, k, pad)
        ref = conv_oracle(g.astype(np.float64), k.astype(np.float64), pad)
        np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-6)

    @pytest.mark.parametrize("pad", PADS)
    def test_linearity(self, pad):
        rng = np.random.default_rng(3)
        g1 = rng.standard_normal((8, 8, 3)).astype(np.float32)
        g2 = rng.standard_normal((8, 8, 3)).astype(np.float32)
        a, b = np.float32(0.7), np.float32(-1.3)
        lhs = conv3x3_depthwise(a * g1 + b * g2, SOBEL_X, pad)
        rhs = a * conv3x3_depthwise(g1, SOBEL_X, pad) + b * conv3x3_depthwise(g2, SOBEL_X, pad)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-6)

    def test_circular_shift_equivariance(self):
        rng = np.random.default_rng(11)
        g = rng.standard_normal((8, 6, 2)).astype(np.float32)
        for shift in [(1, 0), (0, 1), (3, 2)]:
            rolled = np.roll(g, shift, axis=(0, 1))
            a = conv3x3_depthwise(rolled, LAPLACIAN, PaddingMode.CIRCULAR)
            b = np.roll(conv3x3_depthwise(g, LAPLACIAN, PaddingMode.CIRCULAR), shift, axis=(0, 1))
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("pad", PADS)
    def test_adjoint_identity(self, pad):
        # <conv(g), u> == <g, adjoint(u)> for random g, u
        rng = np.random.default_rng(5)
        g = rng.standard_normal((7, 6, 2))
        u = rng.standard_normal((7, 6, 2))
        for k in [SOBEL_X, SOBEL_Y, LAPLACIAN]:
            lhs = np.sum(conv3x3_depthwise(g, k, pad) * u)
            rhs = np.sum(g * conv3x3_adjoint(u, k, pad))
            assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(9)
        g = rng.standard_normal((3, 6, 5, 2)).astype(np.float32)
        out = conv3x3_depthwise(g, SOBEL_Y, PaddingMode.REPLICATE)
        for b in range(3):
            np.testing.assert_array_equal(out[b], conv3x3_depthwise(g[b], SOBEL_Y, PaddingMode.REPLICATE))


class TestBilinearResize:
    def test_constant_preserved(self):
        g = np.full((5, 9, 2), 0.37, dtype=np.float32)
        out = bilinear_resize(g, 12, 4)
        assert out.shape == (12, 4, 2)
        np.testing.assert_allclose(out, 0.37, rtol=1e-6)

    def test_2x2_column_ramp_to_4x4(self):
        g = np.zeros((2, 2, 1), dtype=np.float32)
        g[:, :, 0] = [[0, 1], [0, 1]]
        out = bilinear_resize(g, 4, 4)[:, :, 0]
        np.testing.assert_allclose(out.mean(axis=0), [0.0, 0.25, 0.75, 1.0], atol=1e-7)

    def test_same_shape_is_bit_identical(self):
        rng = np.random.default_rng(2)
        g = rng.standard_normal((6, 7, 3)).astype(np.float32)
        out = bilinear_resize(g, 6, 7)
        assert out is not g
        np.testing.assert_array_equal(out, g)

    def test_down_up_constant_exact(self):
        g = np.full((8, 8, 1), -0.625, dtype=np.float32)
        down = bilinear_resize(g, 4, 4)
        up = bilinear_resize(down, 8, 8)
        np.testing.assert_array_equal(up, g)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(13)
        g = rng.standard_normal((6, 8, 2))
        u = rng.standard_normal((3, 4, 2))
        lhs = np.sum(bilinear_resize(g, 3, 4) * u)
        rhs = np.sum(g * bilinear_resize_adjoint(u, 6, 8))
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_bad_size_rejected(self):
        g = np.ones((4, 4, 1), dtype=np.float32)
        with pytest.raises(ValueError):
            bilinear_resize(g, 0, 4)


class TestRotateKernel:
    def test_zero_angle_unchanged(self):
        ku, kv = rotate_kernel(SOBEL_X, SOBEL_Y, 0.0)
        np.testing.assert_array_equal(ku, SOBEL_X)
        np.testing.assert_array_equal(kv, SOBEL_Y)

    def test_quarter_turn(self):
        ku, kv = rotate_kernel(SOBEL_X, SOBEL_Y, np.pi / 2)
        np.testing.assert_allclose(ku, SOBEL_Y, atol=1e-7)
        np.testing.assert_allclose(kv, -SOBEL_X, atol=1e-7)

    def test_eighth_turn_entries(self):
        ku, kv = rotate_kernel(SOBEL_X, SOBEL_Y, np.pi / 4)
        r = np.sqrt(2.0) / 2.0
        np.testing.assert_allclose(ku, r * (SOBEL_X + SOBEL_Y), rtol=1e-6)
        np.testing.assert_allclose(kv, r * (SOBEL_Y - SOBEL_X), rtol=1e-6)

    def test_roundtrip(self):
        for theta in [0.3, 1.1, -2.5]:
            ku, kv = rotate_kernel(SOBEL_X, SOBEL_Y, theta)
            kx, ky = rotate_kernel(ku, kv, -theta)
            np.testing.assert_allclose(kx, SOBEL_X, atol=1e-6)
            np.testing.assert_allclose(ky, SOBEL_Y, atol=1e-6)
