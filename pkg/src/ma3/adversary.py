"""The augmentation adversary: images -> bounded warp parameters -> affine.

A small conv net maps each support image (one at a time; the objective sums
per image) to four raw outputs, squashed by tanh into hard ranges:

    theta = theta0 * tanh(r1)          rotation, radians
    s     = 1 + eps_s * tanh(r2)       scale
    px    = T * tanh(r3)               translation, pixels
    py    = T * tanh(r4)

The affine matrix is built pose-style from (theta, s, px, py) with the pixel
translations converted to the sampler's normalized units.  Because the
bounds are structural (tanh), no training step can ever violate them.

STN dropout replaces a predicted matrix with the exact identity with fixed
probability; replaced matrices contribute no gradient to the adversary.

An experimental alternative predicts the six affine deviations directly
(bounded the same way); it is not the default path and carries no
performance claim.

The dropout generator is owned by the trainer and advanced once per support
batch in index order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import identity_reg_loss
from .nn import AdversaryNet


@dataclass(frozen=True)
class AdversaryBounds:
    """Hard ranges for the predicted parameters.  T is in pixels."""

    theta0: float = math.pi
    eps_s: float = 0.1
    T: float = 0.0

    def __post_init__(self):
        if self.theta0 < 0 or self.eps_s < 0 or self.T < 0:
            raise ValueError(f"bounds must be nonnegative: {self}")

    @classmethod
    def for_image(cls, H: int, W: int, theta0: float = math.pi, eps_s: float = 0.1, trans_frac: float = 0.1):
        return cls(theta0=theta0, eps_s=eps_s, T=trans_frac * max(H, W))


@dataclass(frozen=True)
class AugmentParams:
    theta: float
    s: float
    px: float
    py: float

    def within(self, bounds: AdversaryBounds) -> bool:
        # the scale interval endpoints are compared as computed (1 +- eps_s)
        # so that a fully saturated tanh sits exactly on the closed bound
        return (
            abs(self.theta) <= bounds.theta0
            and (1.0 - bounds.eps_s) <= self.s <= (1.0 + bounds.eps_s)
            and abs(self.px) <= bounds.T
            and abs(self.py) <= bounds.T
        )


def bound_raw(raw: np.ndarray, bounds: AdversaryBounds):
    """Squash raw net outputs (n, 4) into bounded parameters (n, 4)."""
    t = np.tanh(raw)
    params = np.empty_like(t)
    params[:, 0] = bounds.theta0 * t[:, 0]
    params[:, 1] = 1.0 + bounds.eps_s * t[:, 1]
    params[:, 2] = bounds.T * t[:, 2]
    params[:, 3] = bounds.T * t[:, 3]
    return params, (t, bounds)


def bound_raw_backward(dparams: np.ndarray, cache) -> np.ndarray:
    t, bounds = cache
    scale = np.array([bounds.theta0, bounds.eps_s, bounds.T, bounds.T], dtype=dparams.dtype)
    return dparams * scale[None, :] * (1.0 - t * t)


def predict_params(net: AdversaryNet, img: np.ndarray, bounds: AdversaryBounds) -> AugmentParams:
    """Single-image convenience wrapper around the batched path."""
    raw, _ = net.forward(np.asarray(img)[None, None])
    params, _ = bound_raw(raw, bounds)
    return AugmentParams(*(float(x) for x in params[0]))


def predict_params_batch(net: AdversaryNet, imgs: np.ndarray, bounds: AdversaryBounds):
    """imgs (n, 1, H, W) -> (params (n, 4), cache for the backward pass)."""
    raw, net_cache = net.forward(imgs)
    params, tanh_cache = bound_raw(raw, bounds)
    return params, (net_cache, tanh_cache)


def predict_params_backward(net: AdversaryNet, dparams: np.ndarray, cache):
    net_cache, tanh_cache = cache
    draw = bound_raw_backward(dparams, tanh_cache)
    dimg, grads = net.backward(draw, net_cache)
    return dimg, grads


def params_to_affine(p, H: int, W: int):
    """AugmentParams -> 2x3 affine on normalized coordinates.

    [[s cos(theta), -s sin(theta), px'], [s sin(theta), s cos(theta), py']]
    where px' = px / ((W-1)/2) and py' = py / ((H-1)/2) convert pixels to
    normalized units.
    """
    if isinstance(p, AugmentParams):
        arr = np.array([[p.theta, p.s, p.px, p.py]])
        A, _ = params_to_affine_batch(arr, H, W)
        return A[0]
    A, _ = params_to_affine_batch(np.asarray(p), H, W)
    return A


def params_to_affine_batch(params: np.ndarray, H: int, W: int):
    """params (n, 4) -> (A (n, 2, 3), cache)."""
    theta, s, px, py = params[:, 0], params[:, 1], params[:, 2], params[:, 3]
    c, sn = np.cos(theta), np.sin(theta)
    A = np.empty((params.shape[0], 2, 3), dtype=params.dtype)
    A[:, 0, 0] = s * c
    A[:, 0, 1] = -s * sn
    A[:, 0, 2] = px * (2.0 / (W - 1))
    A[:, 1, 0] = s * sn
    A[:, 1, 1] = s * c
    A[:, 1, 2] = py * (2.0 / (H - 1))
    return A, (c, sn, s, H, W)


def params_to_affine_backward(dA: np.ndarray, cache) -> np.ndarray:
    c, sn, s, H, W = cache
    dparams = np.empty((dA.shape[0], 4), dtype=dA.dtype)
    dparams[:, 0] = s * (-sn * dA[:, 0, 0] - c * dA[:, 0, 1] + c * dA[:, 1, 0] - sn * dA[:, 1, 1])
    dparams[:, 1] = c * dA[:, 0, 0] - sn * dA[:, 0, 1] + sn * dA[:, 1, 0] + c * dA[:, 1, 1]
    dparams[:, 2] = dA[:, 0, 2] * (2.0 / (W - 1))
    dparams[:, 3] = dA[:, 1, 2] * (2.0 / (H - 1))
    return dparams


# Experimental: predict the six affine deviations directly (n_out=6 net).
def deltas_to_affine_batch(raw: np.ndarray, delta_max: float = 0.2):
    """raw (n, 6) -> A = identity + delta_max * tanh(raw), reshaped (n, 2, 3)."""
    t = np.tanh(raw)
    deltas = delta_max * t
    A = deltas.reshape(-1, 2, 3).copy()
    A[:, 0, 0] += 1.0
    A[:, 1, 1] += 1.0
    return A, (t, delta_max)


def deltas_to_affine_backward(dA: np.ndarray, cache) -> np.ndarray:
    t, delta_max = cache
    return dA.reshape(dA.shape[0], 6) * delta_max * (1.0 - t * t)


_IDENTITY = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def stn_dropout(matrices: np.ndarray, rate: float, rng: np.random.Generator):
    """Independently replace each matrix with the exact identity with
    probability `rate`.

    Returns (matrices, dropped_mask).  Dropped matrices are constants: the
    trainer uses the mask to cut their gradient path to the adversary.
    Deterministic under a fixed generator state; one uniform draw per matrix
    in batch order.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must be in [0, 1], got {rate}")
    matrices = np.asarray(matrices)
    dropped = rng.random(matrices.shape[0]) < rate
    out = matrices.copy()
    out[dropped] = _IDENTITY.astype(matrices.dtype)
    return out, dropped


def adversary_objective(cls_loss: float, matrices, lam: float) -> float:
    """Classifier loss minus lam * total identity deviation of the (post-
    dropout) support matrices.  The adversary ascends this; the classifier
    descends the classification loss alone."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    reg = sum(identity_reg_loss(m) for m in np.asarray(matrices).reshape(-1, 2, 3))
    return float(cls_loss - lam * reg)
