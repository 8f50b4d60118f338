"""Small-perturbation camera geometry and affine-matrix algebra.

A distant object viewed through a pinhole camera, nudged by small yaw/pitch/roll
angles and a small translation, moves on the image plane by (approximately) an
affine map close to the identity.  This module holds that machinery:

* the second-order closed form of the rotation matrix for small angles,
* the exact rotation built from sin/cos (the oracle for the closed form),
* pinhole projection,
* a least-squares affine fit used to measure how affine the perturbed
  projection really is,
* the identity-deviation penalty used to regularize predicted warps.

Rotation composition order is fixed as Rz(yaw) @ Ry(pitch) @ Rx(roll); its
second-order Taylor expansion reproduces the closed form entry for entry.

All functions are pure and operate on small value types; safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

# Beyond this the second-order expansion error exceeds ~1% of coordinate
# range and ops reject rather than extrapolate.
REGIME_LIMIT = 0.3

_IDENTITY_2X3 = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


class Point3(NamedTuple):
    x: float
    y: float
    z: float


class Point2(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class PerturbationParams:
    """Small camera perturbation: yaw alpha, pitch beta, roll gamma (radians),
    translation t (3-vector, scene units), object depth z0 > 0."""

    alpha: float
    beta: float
    gamma: float
    t: tuple[float, float, float] = (0.0, 0.0, 0.0)
    z0: float = 1.0

    def __post_init__(self):
        if not np.isfinite([self.alpha, self.beta, self.gamma, *self.t, self.z0]).all():
            raise ValueError("perturbation parameters must be finite")
        if self.z0 <= 0:
            raise ValueError(f"z0 must be positive, got {self.z0}")

    @property
    def in_validity_regime(self) -> bool:
        angles_ok = max(abs(self.alpha), abs(self.beta), abs(self.gamma)) <= REGIME_LIMIT
        t_ok = float(np.linalg.norm(self.t)) / self.z0 <= REGIME_LIMIT
        return angles_ok and t_ok


@dataclass(frozen=True)
class RotationMatrix:
    array: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.asarray(self.array, dtype=float)
        if a.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {a.shape}")
        object.__setattr__(self, "array", a)

    def orthogonality_defect(self) -> float:
        """Frobenius norm of R^T R - I; ~0 for an exact rotation."""
        return float(np.linalg.norm(self.array.T @ self.array - np.eye(3)))


@dataclass(frozen=True)
class AffineMatrix:
    """2x3 matrix acting on homogeneous normalized coordinates [u, v, 1]^T."""

    array: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.asarray(self.array, dtype=float)
        if a.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError("affine matrix entries must be finite")
        object.__setattr__(self, "array", a)

    @classmethod
    def identity(cls) -> "AffineMatrix":
        return cls(_IDENTITY_2X3.copy())

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.array, _IDENTITY_2X3))

    @property
    def deltas(self) -> np.ndarray:
        """Deviation from the identity transform, entry by entry."""
        return self.array - _IDENTITY_2X3


def as_affine_array(a) -> np.ndarray:
    """Accept an AffineMatrix or a raw (2, 3) array; return the raw array."""
    if isinstance(a, AffineMatrix):
        return a.array
    arr = np.asarray(a, dtype=float)
    if arr.shape != (2, 3):
        raise ValueError(f"expected a 2x3 affine matrix, got shape {arr.shape}")
    return arr


def rotation_approx(p: PerturbationParams) -> RotationMatrix:
    """Second-order closed form of the rotation for small yaw/pitch/roll.

    Valid only inside the small-perturbation regime; rejects otherwise.
    """
    if not p.in_validity_regime:
        raise ValueError(
            "perturbation outside validity regime "
            f"(|angles| <= {REGIME_LIMIT}, |t|/z0 <= {REGIME_LIMIT}): {p}"
        )
    a, b, g = p.alpha, p.beta, p.gamma
    m = np.array(
        [
            [1.0 - a * a / 2.0 - b * b / 2.0, b * g - a, b + a * g],
            [a, 1.0 - a * a / 2.0 - g * g / 2.0, a * b - g],
            [-b, g, 1.0 - b * b / 2.0 - g * g / 2.0],
        ]
    )
    return RotationMatrix(m)


def rotation_exact(p: PerturbationParams) -> RotationMatrix:
    """Exact rotation Rz(alpha) @ Ry(beta) @ Rx(gamma)."""
    ca, sa = np.cos(p.alpha), np.sin(p.alpha)
    cb, sb = np.cos(p.beta), np.sin(p.beta)
    cg, sg = np.cos(p.gamma), np.sin(p.gamma)
    rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cg, -sg], [0.0, sg, cg]])
    return RotationMatrix(rz @ ry @ rx)


def project(point: Point3, R: RotationMatrix | np.ndarray, t: Sequence[float]) -> Point2:
    """Pinhole projection of the rotated + translated point.

    (u, v) = ((Rp + t)_x / (Rp + t)_z, (Rp + t)_y / (Rp + t)_z); the
    transformed depth must be positive.
    """
    r = R.array if isinstance(R, RotationMatrix) else np.asarray(R, dtype=float)
    q = r @ np.asarray(point, dtype=float) + np.asarray(t, dtype=float)
    if q[2] <= 0:
        raise ValueError(f"projection undefined: transformed depth {q[2]} <= 0")
    return Point2(q[0] / q[2], q[1] / q[2])


def _fit_affine_core(pairs: Sequence[tuple[Point2, Point2]]):
    if len(pairs) < 3:
        raise ValueError(f"need >= 3 point pairs, got {len(pairs)}")
    before = np.array([[p[0][0], p[0][1], 1.0] for p in pairs])
    after = np.array([[p[1][0], p[1][1]] for p in pairs])
    # Rank check before ridge: collinear points leave the affine underdetermined.
    s = np.linalg.svd(before, compute_uv=False)
    if s[-1] <= 1e-10 * s[0]:
        raise ValueError("rank-deficient fit: `before` points are collinear or degenerate")
    gram = before.T @ before + 1e-12 * np.eye(3)
    w = np.linalg.solve(gram, before.T @ after)  # (3, 2)
    return w, before @ w - after


def fit_affine(pairs: Sequence[tuple[Point2, Point2]]) -> tuple[AffineMatrix, float]:
    """Least-squares affine map from `before` to `after` points.

    Solves the normal equations with a tiny ridge (1e-12) for numerical
    safety; the ridge does not bias well-posed fits.  Returns the fitted
    matrix and the max absolute residual over all pairs and coordinates.
    Requires >= 3 non-collinear `before` points.
    """
    w, errors = _fit_affine_core(pairs)
    return AffineMatrix(w.T), float(np.abs(errors).max())


def fit_affine_sq_residual(pairs: Sequence[tuple[Point2, Point2]]) -> float:
    """The least-squares objective of the affine fit (sum of squared errors).

    This is the quantity whose scaling isolates the approximation order: a
    remainder growing linearly in the perturbation magnitude quadruples the
    squared residual per magnitude doubling.
    """
    _, errors = _fit_affine_core(pairs)
    return float(np.sum(errors * errors))


def affine_compose_on_point(A: AffineMatrix | np.ndarray, p: Point2) -> Point2:
    a = as_affine_array(A)
    u, v = p
    return Point2(
        a[0, 0] * u + a[0, 1] * v + a[0, 2],
        a[1, 0] * u + a[1, 1] * v + a[1, 2],
    )


def identity_reg_loss(A: AffineMatrix | np.ndarray) -> float:
    """Squared Frobenius norm of the deviation from the identity transform."""
    d = as_affine_array(A) - _IDENTITY_2X3
    return float(np.sum(d * d))


def identity_reg_grad(A: AffineMatrix | np.ndarray) -> np.ndarray:
    """Gradient of identity_reg_loss with respect to each matrix entry."""
    return 2.0 * (as_affine_array(A) - _IDENTITY_2X3)


def affine_approx_report(
    magnitudes: Sequence[float], n_points: int, z0: float, seed: int
) -> list[dict]:
    """Affine-fit residual at each magnitude plus consecutive-residual ratios.

    The same seeded point cloud and perturbation direction are reused at every
    magnitude, so the ratio between consecutive residuals isolates the scaling
    law (ideal ratio 4 per doubling for a second-order approximation).  Each
    row carries: magnitude, residual, ratio vs the previous row (None for the
    first), and whether the step from the previous magnitude was a doubling.
    """
    rows = []
    prev = None
    for m in magnitudes:
        residual = perturbed_projection_residual(m, n_points, z0, np.random.default_rng(seed))
        row = {"magnitude": float(m), "residual": residual, "ratio": None, "doubling": False}
        if prev is not None and prev["residual"] > 0:
            row["ratio"] = residual / prev["residual"]
            row["doubling"] = bool(np.isclose(m, 2.0 * prev["magnitude"], rtol=1e-9))
        rows.append(row)
        prev = row
    return rows


def perturbed_projection_residual(
    magnitude: float, n_points: int, z0: float, rng: np.random.Generator
) -> float:
    """Squared-error residual of an affine fit to exactly-projected perturbed
    points.

    Scene points are sampled in [-1, 1]^2 at depth z0 (so their image-plane
    extent, and with it the non-affine remainder, shrinks as z0 grows).  One
    unit-scale perturbation direction is drawn from `rng` and scaled by
    `magnitude`: the same generator seed therefore probes the same direction
    at every magnitude, isolating the scaling law.  The points are projected
    with the exact rotation and an affine map is fitted; the returned
    least-squares objective grows ~quadratically in `magnitude` inside the
    validity regime.
    """
    if magnitude < 0 or magnitude > REGIME_LIMIT:
        raise ValueError(f"magnitude {magnitude} outside [0, {REGIME_LIMIT}]")
    xy = rng.uniform(-1.0, 1.0, size=(n_points, 2))
    direction = rng.uniform(-1.0, 1.0, size=6)  # (alpha, beta, gamma, tx, ty, tz)
    d = direction * magnitude
    p = PerturbationParams(alpha=d[0], beta=d[1], gamma=d[2], t=(d[3], d[4], d[5]), z0=z0)
    r = rotation_exact(p)
    pairs = []
    for x, y in xy:
        before = Point2(x / z0, y / z0)
        after = project(Point3(x, y, z0), r, p.t)
        pairs.append((before, after))
    return fit_affine_sq_residual(pairs)
