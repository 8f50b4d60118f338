"""Differentiable affine image warping: grid generation + bilinear sampling.

Coordinate conventions, fixed across the whole package:

* Normalized coordinates: -1 and +1 are the CENTERS of the edge pixels.
  Output pixel (i, j) has target coordinates u = 2j/(W-1) - 1 (horizontal)
  and v = 2i/(H-1) - 1 (vertical).  This makes the identity warp read back
  exactly the pixel centers.
* A sample grid stores per-output-pixel SOURCE coordinates in normalized
  space, last axis ordered (x, y).  Values outside [-1, 1] are allowed and
  resolved by the border policy.
* Border policy is zeros: out-of-range corner reads contribute 0, which
  keeps the gradient defined everywhere.
* Bilinear interpolation weights are piecewise linear in the source
  coordinates; at integer-coordinate breakpoints the derivative is the
  right-sided limit (floor() assigns the breakpoint to the cell on its
  right).

Forward and backward are pure functions; batched variants take images
(N, C, H, W) and grids (N, H, W, 2) and exist because the trainer warps a
whole support set per step.
"""

from __future__ import annotations

import numpy as np

from .geometry import as_affine_array


def _normalized_axes(H: int, W: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    u = 2.0 * np.arange(W, dtype=dtype) / (W - 1) - 1.0
    v = 2.0 * np.arange(H, dtype=dtype) / (H - 1) - 1.0
    return u, v


def affine_grid(A, H: int, W: int) -> np.ndarray:
    """Sample grid (H, W, 2) mapping output pixels through the affine matrix.

    Output pixel (i, j) at normalized target (u, v) sources from
    A @ [u, v, 1]^T.  The identity matrix yields each pixel's own normalized
    coordinate.
    """
    grids = affine_grid_batch(as_affine_array(A)[None], H, W)
    return grids[0]


def affine_grid_batch(A: np.ndarray, H: int, W: int) -> np.ndarray:
    """Batched affine_grid: A is (N, 2, 3), result (N, H, W, 2)."""
    if H < 2 or W < 2:
        raise ValueError(f"grid needs H, W >= 2, got {H}x{W}")
    A = np.asarray(A)
    u, v = _normalized_axes(H, W, A.dtype)
    uu = np.broadcast_to(u[None, :], (H, W))
    vv = np.broadcast_to(v[:, None], (H, W))
    x = A[:, 0, 0, None, None] * uu + A[:, 0, 1, None, None] * vv + A[:, 0, 2, None, None]
    y = A[:, 1, 0, None, None] * uu + A[:, 1, 1, None, None] * vv + A[:, 1, 2, None, None]
    return np.stack([x, y], axis=-1)


def identity_grid(H: int, W: int, dtype=np.float64) -> np.ndarray:
    u, v = _normalized_axes(H, W, dtype)
    return np.stack(np.meshgrid(u, v, indexing="xy"), axis=-1)


def _as_nchw(img: np.ndarray) -> tuple[np.ndarray, int]:
    """Promote (H, W) or (C, H, W) to (1, C, H, W); return the original ndim."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img[None, None], 2
    if img.ndim == 3:
        return img[None], 3
    if img.ndim == 4:
        return img, 4
    raise ValueError(f"image must have 2-4 dims, got shape {img.shape}")


def _interp_terms(imgs: np.ndarray, grids: np.ndarray):
    """Shared forward geometry: corner indices, weights, corner values."""
    N, C, H, W = imgs.shape
    xf = (grids[..., 0] + 1.0) * (W - 1) / 2.0  # (N, H', W') source column
    yf = (grids[..., 1] + 1.0) * (H - 1) / 2.0  # source row
    x0 = np.floor(xf).astype(np.int64)
    y0 = np.floor(yf).astype(np.int64)
    wx = xf - x0
    wy = yf - y0

    nn = np.arange(N)[:, None, None, None]
    cc = np.arange(C)[None, :, None, None]

    def corner(ys, xs):
        inb = (ys >= 0) & (ys < H) & (xs >= 0) & (xs < W)
        vals = imgs[nn, cc, np.clip(ys, 0, H - 1)[:, None], np.clip(xs, 0, W - 1)[:, None]]
        return np.where(inb[:, None], vals, 0.0), inb

    v00, m00 = corner(y0, x0)
    v01, m01 = corner(y0, x0 + 1)
    v10, m10 = corner(y0 + 1, x0)
    v11, m11 = corner(y0 + 1, x0 + 1)
    return x0, y0, wx, wy, (v00, v01, v10, v11), (m00, m01, m10, m11)


def warp_forward(imgs: np.ndarray, grids: np.ndarray):
    """Batched bilinear sampling.  imgs (N, C, H, W), grids (N, H', W', 2).

    Returns (out, cache); out has shape (N, C, H', W').
    """
    imgs = np.asarray(imgs)
    grids = np.asarray(grids)
    if imgs.ndim != 4 or grids.ndim != 4 or grids.shape[-1] != 2:
        raise ValueError(f"bad shapes: imgs {imgs.shape}, grids {grids.shape}")
    if grids.shape[0] != imgs.shape[0]:
        raise ValueError(f"batch mismatch: imgs {imgs.shape[0]}, grids {grids.shape[0]}")
    x0, y0, wx, wy, (v00, v01, v10, v11), masks = _interp_terms(imgs, grids)
    wxe = wx[:, None]
    wye = wy[:, None]
    out = (1 - wye) * ((1 - wxe) * v00 + wxe * v01) + wye * ((1 - wxe) * v10 + wxe * v11)
    cache = (imgs.shape, x0, y0, wx, wy, (v00, v01, v10, v11), masks)
    return out, cache


def warp_backward_batch(dout: np.ndarray, cache):
    """Analytic gradients of warp_forward.

    Returns (dimgs, dgrids): dimgs scatters the upstream gradient through the
    four interpolation weights (out-of-range corners dropped); dgrids is the
    gradient with respect to the normalized source coordinates.
    """
    (ishape, x0, y0, wx, wy, (v00, v01, v10, v11), (m00, m01, m10, m11)) = cache
    N, C, H, W = ishape
    dout = np.asarray(dout)
    wxe = wx[:, None]
    wye = wy[:, None]

    dimgs = np.zeros(N * C * H * W, dtype=dout.dtype)
    nn = np.arange(N)[:, None, None, None]
    cc = np.arange(C)[None, :, None, None]

    def scatter(ys, xs, mask, weight):
        flat = ((nn * C + cc) * H + np.clip(ys, 0, H - 1)[:, None]) * W + np.clip(
            xs, 0, W - 1
        )[:, None]
        contrib = dout * weight
        keep = np.broadcast_to(mask[:, None], contrib.shape)
        np.add.at(dimgs, flat[keep], contrib[keep])

    scatter(y0, x0, m00, (1 - wye) * (1 - wxe))
    scatter(y0, x0 + 1, m01, (1 - wye) * wxe)
    scatter(y0 + 1, x0, m10, wye * (1 - wxe))
    scatter(y0 + 1, x0 + 1, m11, wye * wxe)

    # d(out)/d(source pixel coords): differences of the corner values.
    dxf = (dout * ((1 - wye) * (v01 - v00) + wye * (v11 - v10))).sum(axis=1)
    dyf = (dout * ((1 - wxe) * (v10 - v00) + wxe * (v11 - v01))).sum(axis=1)
    dgrids = np.stack([dxf * (W - 1) / 2.0, dyf * (H - 1) / 2.0], axis=-1)
    return dimgs.reshape(N, C, H, W), dgrids


def grid_grad_to_affine(dgrids: np.ndarray) -> np.ndarray:
    """Chain a grid gradient (N, H, W, 2) back to affine entries (N, 2, 3).

    The target coordinates (u, v) of each output pixel are implied by the
    output shape, so x = a1 u + a2 v + a3 and y = a4 u + a5 v + a6 give
    dA = [[sum dgx*u, sum dgx*v, sum dgx], [sum dgy*u, sum dgy*v, sum dgy]].
    """
    N, H, W, _ = dgrids.shape
    u, v = _normalized_axes(H, W, dgrids.dtype)
    uu = np.broadcast_to(u[None, :], (H, W))
    vv = np.broadcast_to(v[:, None], (H, W))
    dgx = dgrids[..., 0]
    dgy = dgrids[..., 1]
    dA = np.empty((N, 2, 3), dtype=dgrids.dtype)
    dA[:, 0, 0] = (dgx * uu).sum(axis=(1, 2))
    dA[:, 0, 1] = (dgx * vv).sum(axis=(1, 2))
    dA[:, 0, 2] = dgx.sum(axis=(1, 2))
    dA[:, 1, 0] = (dgy * uu).sum(axis=(1, 2))
    dA[:, 1, 1] = (dgy * vv).sum(axis=(1, 2))
    dA[:, 1, 2] = dgy.sum(axis=(1, 2))
    return dA


def bilinear_sample(img: np.ndarray, grid: np.ndarray, border: str = "zeros") -> np.ndarray:
    """Bilinear interpolation of `img` at `grid` source coordinates.

    img is (H, W) or (C, H, W); grid is (H', W', 2).  Out-of-range reads
    contribute zero.
    """
    if border != "zeros":
        raise ValueError(f"unsupported border policy: {border!r}")
    imgs, ndim = _as_nchw(img)
    grid = np.asarray(grid)
    if grid.ndim != 3 or grid.shape[-1] != 2:
        raise ValueError(f"grid must be (H, W, 2), got {grid.shape}")
    out, _ = warp_forward(imgs, grid[None])
    return out[0, 0] if ndim == 2 else out[0]


def warp_backward(img: np.ndarray, grid: np.ndarray, upstream_grad: np.ndarray):
    """Gradients of bilinear_sample for a single image.

    Returns (grad_img, grad_grid, grad_affine): grad_img matches img's shape,
    grad_grid is (H', W', 2) with respect to the normalized source
    coordinates, and grad_affine (2, 3) chain-rules grad_grid through an
    affine map evaluated at the output pixels' target coordinates.
    """
    imgs, ndim = _as_nchw(img)
    grid = np.asarray(grid)
    upstream = np.asarray(upstream_grad)
    up4, up_ndim = _as_nchw(upstream)
    _, cache = warp_forward(imgs, grid[None])
    expected = (imgs.shape[1], grid.shape[0], grid.shape[1])
    if up4.shape[1:] != expected:
        raise ValueError(f"upstream grad shape {upstream.shape} does not match output {expected}")
    dimgs, dgrids = warp_backward_batch(up4, cache)
    daffine = grid_grad_to_affine(dgrids)
    grad_img = dimgs[0, 0] if ndim == 2 else dimgs[0]
    return grad_img, dgrids[0], daffine[0]
