import numpy as np
import pytest

from ma3 import sampler as sp
from ma3.geometry import AffineMatrix

IDENTITY = np.eye(2, 3)


def gaussian_blob(H, W, cy, cx, width=2.0):
    yy, xx = np.mgrid[0:H, 0:W]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))


class TestAffineGrid:
    def test_identity_grid_is_own_coordinates(self):
        grid = sp.affine_grid(IDENTITY, 5, 7)
        np.testing.assert_allclose(grid, sp.identity_grid(5, 7), atol=0)

    def test_translation_shifts_by_half_width(self):
        A = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
        grid = sp.affine_grid(A, 3, 3)
        base = sp.identity_grid(3, 3)
        np.testing.assert_allclose(grid[..., 0], base[..., 0] + 1.0)
        np.testing.assert_allclose(grid[..., 1], base[..., 1])

    def test_scale_two_sends_corner_out_of_range(self):
        A = np.array([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
        grid = sp.affine_grid(A, 4, 4)
        assert grid[0, 0, 0] == -2.0 and grid[0, 0, 1] == -2.0

    def test_rejects_degenerate_size(self):
        with pytest.raises(ValueError, match="H, W >= 2"):
            sp.affine_grid(IDENTITY, 1, 5)

    def test_accepts_affine_matrix_type(self):
        grid = sp.affine_grid(AffineMatrix.identity(), 4, 4)
        np.testing.assert_allclose(grid, sp.identity_grid(4, 4))


class TestBilinearSample:
    def test_identity_warp_exact(self):
        rng = np.random.default_rng(0)
        img = rng.random((9, 6))
        out = sp.bilinear_sample(img, sp.affine_grid(IDENTITY, 9, 6))
        assert np.abs(out - img).max() <= 1e-6

    def test_constant_image_in_bounds_grid(self):
        img = np.full((8, 8), 0.37)
        A = np.array([[0.5, 0.0, 0.05], [0.0, 0.5, -0.05]])
        out = sp.bilinear_sample(img, sp.affine_grid(A, 8, 8))
        np.testing.assert_allclose(out, 0.37, atol=1e-12)

    def test_horizontal_ramp_one_pixel_shift(self):
        W = 5
        img = np.tile(np.arange(float(W)), (W, 1))
        A = np.array([[1.0, 0.0, 2.0 / (W - 1)], [0.0, 1.0, 0.0]])
        out = sp.bilinear_sample(img, sp.affine_grid(A, W, W))
        # interior columns read from source column j+1
        np.testing.assert_allclose(out[:, : W - 1], img[:, 1:], atol=1e-12)

    def test_out_of_range_reads_zero(self):
        img = np.ones((4, 4))
        A = np.array([[1.0, 0.0, 10.0], [0.0, 1.0, 0.0]])
        out = sp.bilinear_sample(img, sp.affine_grid(A, 4, 4))
        np.testing.assert_allclose(out, 0.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="grid"):
            sp.bilinear_sample(np.ones((4, 4)), np.zeros((4, 4)))

    def test_unsupported_border_rejected(self):
        with pytest.raises(ValueError, match="border"):
            sp.bilinear_sample(np.ones((4, 4)), sp.identity_grid(4, 4), border="reflect")

    def test_linearity(self):
        rng = np.random.default_rng(1)
        img1, img2 = rng.random((2, 6, 6))
        A = np.eye(2, 3) + rng.uniform(-0.2, 0.2, (2, 3))
        grid = sp.affine_grid(A, 6, 6)
        a, b = 0.7, -1.3
        lhs = sp.bilinear_sample(a * img1 + b * img2, grid)
        rhs = a * sp.bilinear_sample(img1, grid) + b * sp.bilinear_sample(img2, grid)
        assert np.abs(lhs - rhs).max() <= 1e-6

    def test_translation_composition_on_smooth_image(self):
        # needs a genuinely low-frequency image away from the border: the
        # double interpolation error scales with curvature, the zeros border
        # leaks wherever the image is nonzero at the edge
        N = 64
        img = gaussian_blob(N, N, (N - 1) / 2, (N - 1) / 2, width=8.0)
        t1, t2 = 0.05, 0.03
        A1 = np.array([[1.0, 0.0, t1], [0.0, 1.0, 0.0]])
        A2 = np.array([[1.0, 0.0, t2], [0.0, 1.0, 0.0]])
        A12 = np.array([[1.0, 0.0, t1 + t2], [0.0, 1.0, 0.0]])
        twice = sp.bilinear_sample(sp.bilinear_sample(img, sp.affine_grid(A1, N, N)), sp.affine_grid(A2, N, N))
        once = sp.bilinear_sample(img, sp.affine_grid(A12, N, N))
        assert np.abs(twice - once).max() <= 1e-3

    def test_channel_dimension_shared_grid(self):
        rng = np.random.default_rng(2)
        img = rng.random((3, 6, 6))
        grid = sp.affine_grid(np.eye(2, 3), 6, 6)
        out = sp.bilinear_sample(img, grid)
        assert out.shape == (3, 6, 6)
        np.testing.assert_allclose(out, img, atol=1e-12)


def fd_loss(img, A, proj, H, W):
    return float(np.sum(sp.bilinear_sample(img, sp.affine_grid(A, H, W)) * proj))


def grid_off_breakpoints(A, H, W, min_dist=1e-4):
    grid = sp.affine_grid(A, H, W)
    xf = (grid[..., 0] + 1.0) * (W - 1) / 2.0
    yf = (grid[..., 1] + 1.0) * (H - 1) / 2.0
    d = np.minimum(np.abs(xf - np.round(xf)), np.abs(yf - np.round(yf)))
    return d.min() > min_dist


class TestWarpBackward:
    def test_constant_upstream_identity_warp(self):
        img = np.random.default_rng(3).random((5, 5))
        grid = sp.affine_grid(IDENTITY, 5, 5)
        up = np.ones((5, 5))
        grad_img, _, _ = sp.warp_backward(img, grid, up)
        np.testing.assert_allclose(grad_img, up, atol=1e-12)

    def test_zero_upstream_zero_gradients(self):
        img = np.random.default_rng(4).random((5, 5))
        A = np.eye(2, 3) + 0.07
        grid = sp.affine_grid(A, 5, 5)
        grad_img, grad_grid, grad_affine = sp.warp_backward(img, grid, np.zeros((5, 5)))
        assert not grad_img.any() and not grad_grid.any() and not grad_affine.any()

    def test_gradients_match_finite_differences(self):
        # trimmed version of the acceptance suite: 20 random trials
        rng = np.random.default_rng(5)
        H = W = 8
        step = 1e-5
        for _ in range(20):
            img = rng.random((H, W))
            while True:
                A = np.eye(2, 3) + rng.uniform(-0.2, 0.2, (2, 3))
                if grid_off_breakpoints(A, H, W):
                    break
            proj = rng.standard_normal((H, W))
            grid = sp.affine_grid(A, H, W)
            grad_img, _, grad_affine = sp.warp_backward(img, grid, proj)
            for _ in range(6):
                i, j = rng.integers(0, H), rng.integers(0, W)
                d = np.zeros((H, W))
                d[i, j] = step
                num = (fd_loss(img + d, A, proj, H, W) - fd_loss(img - d, A, proj, H, W)) / (2 * step)
                assert abs(grad_img[i, j] - num) / max(abs(num), abs(grad_img[i, j]), 1e-6) <= 1e-4
            for r in range(2):
                for c in range(3):
                    d = np.zeros((2, 3))
                    d[r, c] = step
                    num = (fd_loss(img, A + d, proj, H, W) - fd_loss(img, A - d, proj, H, W)) / (2 * step)
                    assert abs(grad_affine[r, c] - num) / max(abs(num), abs(grad_affine[r, c]), 1e-6) <= 1e-4

    def test_upstream_shape_mismatch_rejected(self):
        img = np.ones((4, 4))
        grid = sp.identity_grid(4, 4)
        with pytest.raises(ValueError, match="upstream"):
            sp.warp_backward(img, grid, np.ones((5, 5)))

    def test_batched_matches_single(self):
        rng = np.random.default_rng(6)
        imgs = rng.random((3, 1, 6, 6))
        As = np.stack([np.eye(2, 3) + rng.uniform(-0.1, 0.1, (2, 3)) for _ in range(3)])
        grids = sp.affine_grid_batch(As, 6, 6)
        out, cache = sp.warp_forward(imgs, grids)
        up = rng.standard_normal(out.shape)
        dimgs, dgrids = sp.warp_backward_batch(up, cache)
        dA = sp.grid_grad_to_affine(dgrids)
        for i in range(3):
            single = sp.bilinear_sample(imgs[i, 0], grids[i])
            np.testing.assert_allclose(out[i, 0], single, atol=1e-12)
            gi, gg, ga = sp.warp_backward(imgs[i, 0], grids[i], up[i, 0])
            np.testing.assert_allclose(dimgs[i, 0], gi, atol=1e-12)
            np.testing.assert_allclose(dgrids[i], gg, atol=1e-12)
            np.testing.assert_allclose(dA[i], ga, atol=1e-12)
