"""Four-parameter homography family: axis scales and perspective factors.

The family consists of 3x3 matrices

    [[s_x, 0,   0],
     [0,   s_y, 0],
     [l_x, l_y, 1]]

acting on homogeneous 2D points.  ``(s_x, s_y)`` scale the x- and y-axes,
``(l_x, l_y)`` bend the image in perspective.  Scales are restricted to be
positive, which keeps every member invertible (the determinant equals
``s_x * s_y``) and makes the family closed under composition and inversion.

All point coordinates live in the normalized frame where an image spans
``[-1, 1] x [-1, 1]`` with the origin at the image center.  This makes a
parameter set resolution-independent: the same homography applies to a full
resolution image and to a downsampled feature map.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np

# Denominator cutoff below which a projected point is treated as degenerate.
EPS_DENOMINATOR = 1e-8


class GeometryError(ValueError):
    """Base class for errors raised by the homography family."""


class InvalidParameterError(GeometryError):
    """Parameters violate the family invariants (non-finite or s <= 0)."""


class DegeneratePointError(GeometryError):
    """A point projects to infinity (denominator within EPS of zero)."""


class UnmappablePointError(GeometryError):
    """The constructive point mapping needs a point with both coords nonzero."""


class SignDegenerateError(GeometryError):
    """The requested point mapping needs a negative scale, outside the family."""


@dataclasses.dataclass(frozen=True)
class HomographyParams:
    """The four degrees of freedom of one transformation.

    Attributes
    ----------
    s_x, s_y : float
        Scaling factors on the x- and y-axis.  Must be positive.
    l_x, l_y : float
        Perspective factors in x and y.
    """

    s_x: float
    s_y: float
    l_x: float
    l_y: float

    def __post_init__(self):
        vals = (self.s_x, self.s_y, self.l_x, self.l_y)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidParameterError(f"non-finite homography parameters: {vals}")
        if self.s_x <= 0 or self.s_y <= 0:
            raise InvalidParameterError(
                f"scales must be positive, got s_x={self.s_x}, s_y={self.s_y}"
            )

    @classmethod
    def identity(cls) -> "HomographyParams":
        return cls(1.0, 1.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "HomographyParams":
        """Build from a flat record ``[s_x, s_y, l_x, l_y]``."""
        a = np.asarray(arr, dtype=float).reshape(4)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def as_array(self) -> np.ndarray:
        """Flat record ``[s_x, s_y, l_x, l_y]`` used in checkpoints and configs."""
        return np.array([self.s_x, self.s_y, self.l_x, self.l_y], dtype=float)


def to_matrix(p: HomographyParams) -> np.ndarray:
    """Return the 3x3 matrix of ``p``, row-major, with entry (3,3) equal to 1."""
    return np.array(
        [
            [p.s_x, 0.0, 0.0],
            [0.0, p.s_y, 0.0],
            [p.l_x, p.l_y, 1.0],
        ]
    )


def apply_point(p: HomographyParams, q) -> np.ndarray:
    """Map point(s) ``q`` through ``p``.

    Parameters
    ----------
    p : HomographyParams
    q : array-like, shape (..., 2)
        Normalized coordinates.

    Returns
    -------
    np.ndarray, shape (..., 2)
        ``(s_x * x / w, s_y * y / w)`` with ``w = l_x * x + l_y * y + 1``.

    Raises
    ------
    DegeneratePointError
        If any denominator ``w`` satisfies ``|w| <= EPS_DENOMINATOR``.
    """
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != 2:
        raise ValueError(f"expected (...,2) points, got shape {q.shape}")
    x, y = q[..., 0], q[..., 1]
    w = p.l_x * x + p.l_y * y + 1.0
    if np.any(np.abs(w) <= EPS_DENOMINATOR):
        raise DegeneratePointError(
            "point(s) map to infinity: |l_x*x + l_y*y + 1| <= eps"
        )
    return np.stack([p.s_x * x / w, p.s_y * y / w], axis=-1)


def solve_point_mapping(p, d) -> HomographyParams:
    """Construct the parameters sending point ``p`` to point ``d``.

    Uses the pure-scaling solution ``(d_x/p_x, d_y/p_y, 0, 0)``, which exists
    whenever both coordinates of ``p`` are nonzero and both ratios are
    positive.

    Raises
    ------
    UnmappablePointError
        If ``p`` lies on a coordinate axis (|p_x| or |p_y| <= eps); the
        constructive formula divides by both coordinates.
    SignDegenerateError
        If a ratio is non-positive: the required scale falls outside the
        positive-scale family, and we report that instead of fabricating a
        sign flip.
    """
    p = np.asarray(p, dtype=float).reshape(2)
    d = np.asarray(d, dtype=float).reshape(2)
    if abs(p[0]) <= EPS_DENOMINATOR or abs(p[1]) <= EPS_DENOMINATOR:
        raise UnmappablePointError(
            f"source point {tuple(p)} lies on a coordinate axis"
        )
    s_x = d[0] / p[0]
    s_y = d[1] / p[1]
    if s_x <= 0 or s_y <= 0:
        raise SignDegenerateError(
            f"mapping {tuple(p)} -> {tuple(d)} needs scales ({s_x}, {s_y}); "
            "negative or zero scales are outside the family"
        )
    return HomographyParams(s_x, s_y, 0.0, 0.0)


def invert(p: HomographyParams) -> HomographyParams:
    """Inverse within the family: ``(1/s_x, 1/s_y, -l_x/s_x, -l_y/s_y)``."""
    return HomographyParams(
        1.0 / p.s_x, 1.0 / p.s_y, -p.l_x / p.s_x, -p.l_y / p.s_y
    )


def compose(a: HomographyParams, b: HomographyParams) -> HomographyParams:
    """Composition with ``to_matrix(compose(a, b)) = to_matrix(a) @ to_matrix(b)``.

    Applying the result to a point equals applying ``b`` first, then ``a``.
    """
    return HomographyParams(
        a.s_x * b.s_x,
        a.s_y * b.s_y,
        a.l_x * b.s_x + b.l_x,
        a.l_y * b.s_y + b.l_y,
    )
