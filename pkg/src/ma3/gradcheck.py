"""Central finite-difference verification of every analytic gradient path.

Three components, each checked over many random trials at tiny scale:

* warp       - bilinear sampling gradients w.r.t. the image and the six
               affine entries,
* embed      - embedding-net parameter gradients (normalization frozen so
               the forward is deterministic per sample),
* chain      - adversary parameters through the full pipeline
               predict -> affine -> warp -> embed -> prototype loss,
               including the identity regularizer.

FD is central, step 1e-5, in 64-bit.  The piecewise-linear pieces of the
pipeline (bilinear interpolation cells, ReLU, max-pool) make the objective
non-differentiable on a measure-zero set; central differences straddling
such a kink are meaningless.  Two guards keep FD honest:

* warp trials resample the affine until no source coordinate is within
  1e-3 of an integer breakpoint (the analytic convention at a breakpoint
  is the right-sided limit, which FD cannot reproduce);
* per-coordinate, the second difference f(+h) + f(-h) - 2 f(0) is compared
  to the first difference: a kink inside the stencil shows up as a second
  difference of order h * slope-jump, and the coordinate is redrawn.

Relative error: |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
"""

from __future__ import annotations

import numpy as np

from .adversary import (
    AdversaryBounds,
    params_to_affine_backward,
    params_to_affine_batch,
    predict_params_backward,
    predict_params_batch,
)
from .errors import ConfigError
from .fewshot import compute_prototypes, protonet_backward, protonet_loss, prototypes_backward
from .geometry import identity_reg_loss
from .nn import AdversaryNet, EmbeddingNet
from .sampler import affine_grid_batch, bilinear_sample, grid_grad_to_affine, warp_backward, warp_backward_batch, warp_forward

FD_STEP = 1e-5
TOLERANCE = 1e-3
PRESETS = {"default": 100, "quick": 10, "forced-bug": 10}


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def _grid_off_breakpoints(A: np.ndarray, H: int, W: int, min_dist: float) -> bool:
    grid = affine_grid_batch(A[None], H, W)[0]
    xf = (grid[..., 0] + 1.0) * (W - 1) / 2.0
    yf = (grid[..., 1] + 1.0) * (H - 1) / 2.0
    dist = np.minimum(np.abs(xf - np.round(xf)), np.abs(yf - np.round(yf)))
    return bool(dist.min() > min_dist)


def _param_coords(params: dict, rng: np.random.Generator, n: int):
    """n random (key, flat index) coordinates across a parameter dict."""
    keys = list(params)
    sizes = np.array([params[k].size for k in keys])
    bounds = np.cumsum(sizes)
    out = []
    for r in rng.integers(0, bounds[-1], size=n):
        ki = int(np.searchsorted(bounds, r, side="right"))
        off = int(r - (bounds[ki - 1] if ki else 0))
        out.append((keys[ki], off))
    return out


def _fd_param(loss_fn, params: dict, key: str, off: int, f0: float, h: float = FD_STEP):
    """Central difference for one parameter coordinate, or None when the
    stencil straddles a kink (second difference far above curvature scale)."""
    orig = params[key].flat[off]
    params[key].flat[off] = orig + h
    plus = loss_fn()
    params[key].flat[off] = orig - h
    minus = loss_fn()
    params[key].flat[off] = orig
    first = plus - minus
    second = plus + minus - 2.0 * f0
    if abs(second) > max(1e-4 * abs(first), 1e-10):
        return None
    return first / (2.0 * h)


# ----------------------------------------------------------------- warp


def check_warp(trials: int, rng: np.random.Generator, sign: float = 1.0) -> float:
    """Warp gradients w.r.t. the source image and the affine entries."""
    H = W = 8
    worst = 0.0
    for _ in range(trials):
        img = rng.random((H, W))
        while True:
            A = np.eye(2, 3) + rng.uniform(-0.2, 0.2, size=(2, 3))
            # margin 1e-3: an FD step of 1e-5 on an affine entry moves source
            # coordinates by at most ~3e-4
            if _grid_off_breakpoints(A, H, W, 1e-3):
                break
        proj = rng.standard_normal((H, W))
        grid = affine_grid_batch(A[None], H, W)[0]

        def loss(img_=None, A_=None):
            g = affine_grid_batch((A if A_ is None else A_)[None], H, W)[0]
            return float(np.sum(bilinear_sample(img if img_ is None else img_, g) * proj))

        grad_img, _, grad_affine = warp_backward(img, grid, proj)
        grad_img = sign * grad_img
        for i in range(H):
            for j in range(W):
                delta = np.zeros((H, W))
                delta[i, j] = FD_STEP
                num = (loss(img_=img + delta) - loss(img_=img - delta)) / (2 * FD_STEP)
                worst = max(worst, rel_err(grad_img[i, j], num))
        for r in range(2):
            for c in range(3):
                delta = np.zeros((2, 3))
                delta[r, c] = FD_STEP
                num = (loss(A_=A + delta) - loss(A_=A - delta)) / (2 * FD_STEP)
                worst = max(worst, rel_err(grad_affine[r, c], num))
    return worst


# ---------------------------------------------------------------- embed


def _sweep_params(loss_fn, params, grads, rng, n_coords) -> float:
    """FD-check n_coords random parameter coordinates, redrawing any whose
    stencil hits a kink; returns the worst relative error."""
    worst = 0.0
    f0 = loss_fn()
    accepted = 0
    for key, off in _param_coords(params, rng, 4 * n_coords):
        num = _fd_param(loss_fn, params, key, off, f0)
        if num is None:
            continue
        worst = max(worst, rel_err(grads[key].flat[off], num))
        accepted += 1
        if accepted >= n_coords:
            break
    return worst


def check_embed(trials: int, rng: np.random.Generator, coords_per_trial: int = 8) -> float:
    """Embedding-net parameter gradients against FD (frozen normalization)."""
    worst = 0.0
    for _ in range(trials):
        net = EmbeddingNet((16, 16), blocks=2, filters=8, h_dim=32, rng=rng, dtype=np.float64)
        x = rng.random((2, 1, 16, 16))
        proj = rng.standard_normal((2, net.h_dim))

        def loss():
            emb, _ = net.forward(x, train=False)
            return float(np.sum(emb * proj))

        emb, cache = net.forward(x, train=False)
        _, grads = net.backward(proj.copy(), cache)
        worst = max(worst, _sweep_params(loss, net.params, grads, rng, coords_per_trial))
    return worst


# ---------------------------------------------------------------- chain


def _chain_objective(cls_net, adv_net, bounds, sx, qx, sy, qy, n_way, lam):
    """Forward of the full adversarial pipeline; returns the objective the
    adversary ascends and the caches needed for its backward."""
    H, W = cls_net.in_hw
    params, pcache = predict_params_batch(adv_net, sx, bounds)
    A, acache = params_to_affine_batch(params, H, W)
    grids = affine_grid_batch(A, H, W)
    warped, wcache = warp_forward(sx, grids)
    emb, cls_cache = cls_net.forward(np.concatenate([warped, qx]), train=False)
    n = sx.shape[0]
    protos = compute_prototypes(emb[:n], sy, n_way)
    loss, _, head_cache = protonet_loss(emb[n:], qy, protos)
    reg = sum(identity_reg_loss(m) for m in A)
    objective = float(loss - lam * reg)
    return objective, (A, pcache, acache, wcache, cls_cache, head_cache, n, n_way, lam)


def _chain_adv_grads(cls_net, adv_net, sy, caches):
    A, pcache, acache, wcache, cls_cache, head_cache, n, n_way, lam = caches
    dquery, dprotos = protonet_backward(head_cache)
    dsup = prototypes_backward(dprotos, sy, n_way)
    dx_all, _ = cls_net.backward(np.concatenate([dsup, dquery]), cls_cache)
    _, dgrids = warp_backward_batch(dx_all[:n], wcache)
    dA = grid_grad_to_affine(dgrids)
    dA -= lam * 2.0 * (A - np.eye(2, 3))
    dparams = params_to_affine_backward(dA, acache)
    _, grads = predict_params_backward(adv_net, dparams, pcache)
    return grads


def check_chain(trials: int, rng: np.random.Generator, coords_per_trial: int = 8) -> float:
    """Adversary parameter gradients through warp, embedding and loss."""
    H = W = 16
    n_way, k_shot, q = 2, 1, 2
    worst = 0.0
    done = 0
    while done < trials:
        cls_net = EmbeddingNet((H, W), blocks=2, filters=8, h_dim=32, rng=rng, dtype=np.float64)
        adv_net = AdversaryNet((H, W), filters=8, n_out=4, rng=rng, dtype=np.float64)
        bounds = AdversaryBounds.for_image(H, W)
        sx = rng.random((n_way * k_shot, 1, H, W))
        qx = rng.random((n_way * q, 1, H, W))
        sy = np.repeat(np.arange(n_way), k_shot)
        qy = np.repeat(np.arange(n_way), q)
        lam = 0.7

        params, _ = predict_params_batch(adv_net, sx, bounds)
        A, _ = params_to_affine_batch(params, H, W)
        if not all(_grid_off_breakpoints(a, H, W, 2e-3) for a in A):
            continue
        done += 1

        def objective():
            obj, _ = _chain_objective(cls_net, adv_net, bounds, sx, qx, sy, qy, n_way, lam)
            return obj

        _, caches = _chain_objective(cls_net, adv_net, bounds, sx, qx, sy, qy, n_way, lam)
        grads = _chain_adv_grads(cls_net, adv_net, sy, caches)
        worst = max(worst, _sweep_params(objective, adv_net.params, grads, rng, coords_per_trial))
    return worst


# ---------------------------------------------------------------- suite


def run_suite(preset: str = "default", seed: int = 0) -> dict:
    """Run all components; returns {component: max relative error}."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown gradcheck preset {preset!r}; expected one of {sorted(PRESETS)}")
    trials = PRESETS[preset]
    # The forced-bug preset flips the sign of one analytic gradient so the
    # suite can prove it actually detects failures.
    sign = -1.0 if preset == "forced-bug" else 1.0
    return {
        "warp": check_warp(trials, np.random.default_rng(np.random.SeedSequence([seed, 11])), sign=sign),
        "embed": check_embed(trials, np.random.default_rng(np.random.SeedSequence([seed, 12]))),
        "chain": check_chain(trials, np.random.default_rng(np.random.SeedSequence([seed, 13]))),
    }
