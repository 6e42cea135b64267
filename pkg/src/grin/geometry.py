"""Planar homographies: decomposition, plausibility validation, warping.

Coordinate convention: points are (x, y) = (column, row); a homography acts
on homogeneous (x, y, 1) vectors. Matrices are stored normalized so that
m[2, 2] == 1.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ._kernels import warp_bilinear

SINGULAR_EPS = 1e-12


class SingularTransformError(ValueError):
    """Raised for non-invertible or degenerate transforms."""


@dataclass(frozen=True)
class Homography:
    """A 3x3 planar projective transform with m[2,2] normalized to 1."""

    matrix: np.ndarray

    @classmethod
    def from_matrix(cls, m) -> "Homography":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"expected a 3x3 matrix, got shape {m.shape}")
        if abs(m[2, 2]) < SINGULAR_EPS:
            raise SingularTransformError("matrix has m[2,2] ~ 0, cannot normalize")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) < SINGULAR_EPS:
            raise SingularTransformError("matrix is singular")
        m = np.ascontiguousarray(m)
        m.flags.writeable = False
        return cls(m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls.from_matrix(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = tx
        m[1, 2] = ty
        return cls.from_matrix(m)

    @classmethod
    def from_components(
        cls,
        tx: float = 0.0,
        ty: float = 0.0,
        sx: float = 1.0,
        sy: float = 1.0,
        theta_deg: float = 0.0,
        shear: float = 0.0,
    ) -> "Homography":
        """Compose an affine transform whose decomposition returns these
        components exactly (positive orientation, zero perspective)."""
        if not (-1.0 < shear < 1.0):
            raise ValueError("shear must lie in (-1, 1)")
        t = math.radians(theta_deg)
        r = np.array([math.cos(t), math.sin(t)])
        r_perp = np.array([-math.sin(t), math.cos(t)])
        col1 = sx * r
        col2 = sy * (shear * r + math.sqrt(1.0 - shear * shear) * r_perp)
        m = np.eye(3)
        m[:2, 0] = col1
        m[:2, 1] = col2
        m[0, 2] = tx
        m[1, 2] = ty
        return cls.from_matrix(m)

    def apply(self, pts) -> np.ndarray:
        """Map (N,2) points through the transform."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        ones = np.ones((pts.shape[0], 1))
        ph = np.hstack([pts, ones]) @ self.matrix.T
        return ph[:, :2] / ph[:, 2:3]

    def compose(self, other: "Homography") -> "Homography":
        """Return the transform applying `other` first, then `self`."""
        return Homography.from_matrix(self.matrix @ other.matrix)

    def invert(self) -> "Homography":
        try:
            inv = np.linalg.inv(self.matrix)
        except np.linalg.LinAlgError as exc:
            raise SingularTransformError("matrix is singular") from exc
        return Homography.from_matrix(inv)

    def to_bytes(self) -> bytes:
        """Serialize as 9 little-endian float64 values, row-major."""
        return struct.pack("<9d", *self.matrix.ravel())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Homography":
        if len(raw) != 72:
            raise ValueError(f"expected 72 bytes, got {len(raw)}")
        vals = struct.unpack("<9d", raw)
        return cls.from_matrix(np.array(vals).reshape(3, 3))


@dataclass(frozen=True)
class DecomposedTransform:
    """Interpretable components of a homography.

    tx/ty in pixels, sx/sy unitless scale, theta in degrees, shear and
    perspective unitless.
    """

    tx: float
    ty: float
    sx: float
    sy: float
    theta_deg: float
    shear: float
    perspective: float

    def as_dict(self) -> dict:
        return {
            "tx": self.tx,
            "ty": self.ty,
            "sx": self.sx,
            "sy": self.sy,
            "theta_deg": self.theta_deg,
            "shear": self.shear,
            "perspective": self.perspective,
        }


@dataclass(frozen=True)
class ValidationThresholds:
    """Plausibility bounds on decomposed components.

    Defaults: scale within [0.5, 2.0], rotation within 15 degrees, |shear|
    up to 0.5, perspective up to 0.01, translation unrestricted.
    """

    scale_min: float = 0.5
    scale_max: float = 2.0
    rot_max_deg: float = 15.0
    shear_max: float = 0.5
    persp_max: float = 0.01
    translation_max: float | None = None

    def __post_init__(self):
        if not (0.0 < self.scale_min < self.scale_max):
            raise ValueError("require 0 < scale_min < scale_max")
        if self.rot_max_deg <= 0 or self.shear_max <= 0 or self.persp_max <= 0:
            raise ValueError("rotation, shear and perspective bounds must be positive")


@dataclass(frozen=True)
class ValidationResult:
    valid: bool
    violations: tuple[str, ...] = field(default=())


def decompose(h: Homography) -> DecomposedTransform:
    """Split a homography into translation, scale, rotation, shear and
    perspective components.

    tx = m13, ty = m23; with A the upper-left 2x2 block, sx and sy are the
    L2 norms of its columns, theta = atan2(R21, R11) for the column-normalized
    R = A diag(1/sx, 1/sy), shear = (A11 A12 + A21 A22) / (sx sy), and
    perspective = sqrt(m31^2 + m32^2).
    """
    m = h.matrix
    a = m[:2, :2]
    sx = math.hypot(a[0, 0], a[1, 0])
    sy = math.hypot(a[0, 1], a[1, 1])
    if sx < SINGULAR_EPS or sy < SINGULAR_EPS:
        raise SingularTransformError("degenerate column in linear part")
    theta = math.degrees(math.atan2(a[1, 0] / sx, a[0, 0] / sx))
    shear = (a[0, 0] * a[0, 1] + a[1, 0] * a[1, 1]) / (sx * sy)
    persp = math.hypot(m[2, 0], m[2, 1])
    return DecomposedTransform(
        tx=float(m[0, 2]),
        ty=float(m[1, 2]),
        sx=float(sx),
        sy=float(sy),
        theta_deg=float(theta),
        shear=float(shear),
        perspective=float(persp),
    )


def recompose(d: DecomposedTransform) -> Homography:
    """Rebuild the affine transform from decomposed components.

    Assumes positive orientation (det > 0) and drops perspective; inverse of
    `decompose` on that family.
    """
    return Homography.from_components(
        tx=d.tx, ty=d.ty, sx=d.sx, sy=d.sy, theta_deg=d.theta_deg, shear=d.shear
    )


def validate(d: DecomposedTransform, t: ValidationThresholds) -> ValidationResult:
    """Check every component against its bound; names each violated one."""
    violations = []
    if not (t.scale_min <= d.sx <= t.scale_max and t.scale_min <= d.sy <= t.scale_max):
        violations.append("scale")
    if abs(d.theta_deg) > t.rot_max_deg:
        violations.append("rotation")
    if abs(d.shear) > t.shear_max:
        violations.append("shear")
    if d.perspective > t.persp_max:
        violations.append("perspective")
    if t.translation_max is not None and (
        abs(d.tx) > t.translation_max or abs(d.ty) > t.translation_max
    ):
        violations.append("translation")
    return ValidationResult(valid=not violations, violations=tuple(violations))


def warp(map_, h: Homography, out_h: int, out_w: int) -> np.ndarray:
    """Warp an (H,W) or (H,W,C) map by `h` into an out_h x out_w canvas.

    Output pixels are sampled at h^-1(x, y) with bilinear interpolation;
    samples outside the source contribute zeros, so probability maps stay
    convex combinations of valid values and zero.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output dimensions must be positive")
    arr = np.asarray(map_, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("expected an (H,W) or (H,W,C) array")
    inv = h.invert().matrix
    out = warp_bilinear(arr, inv, int(out_h), int(out_w))
    return out[:, :, 0] if squeeze else out
