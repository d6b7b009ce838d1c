"""Reference dense geometric mappings used as emulation targets.

A :class:`DenseMapping` is a deterministic pull-back function from the output
(normalized) frame to the input frame: to render the remapped image you
sample the input at ``mapping(q)`` for every output pixel ``q``.  The same
convention is used when a homography set is fitted to a mapping, so
``apply_point(h, q)`` is compared directly against ``mapping(q)``.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Mapping

import numpy as np

from .geometry import HomographyParams, InvalidParameterError, apply_point


@dataclasses.dataclass(frozen=True)
class DenseMapping:
    """A named pull-back function on normalized coordinates.

    ``fn`` maps an (..., 2) array of output-frame points to input-frame
    points; it must be deterministic and finite on the declared grid.
    """

    name: str
    params: Mapping[str, float]
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        out = np.asarray(self.fn(pts), dtype=float)
        if out.shape != pts.shape:
            raise ValueError(
                f"mapping {self.name!r} changed point shape {pts.shape} -> {out.shape}"
            )
        return out


def _check_fov(value: float, name: str) -> float:
    if not (0.0 < value < 180.0):
        raise InvalidParameterError(f"{name} must lie in (0, 180) degrees, got {value}")
    return float(value)


def spherical_fov_mapping(
    src_fov_x: float, src_fov_y: float, dst_fov_x: float, dst_fov_y: float
) -> DenseMapping:
    """Spherical field-of-view correction between two pinhole cameras.

    A normalized output coordinate ``x`` is read as a viewing angle
    ``theta = x * dst_fov_x / 2`` (angle-proportional image), then projected
    back to the source pinhole plane as ``tan(theta) / tan(src_fov_x / 2)``;
    the y-axis is treated the same way.  The construction fixes the origin,
    is odd in each coordinate, and compresses regions further from the
    center with a strictly higher ratio, which is the qualitative behaviour
    of spherical-surface remapping.
    """
    sx = _check_fov(src_fov_x, "src_fov_x")
    sy = _check_fov(src_fov_y, "src_fov_y")
    dx = _check_fov(dst_fov_x, "dst_fov_x")
    dy = _check_fov(dst_fov_y, "dst_fov_y")
    half_dx = math.radians(dx) / 2.0
    half_dy = math.radians(dy) / 2.0
    tan_sx = math.tan(math.radians(sx) / 2.0)
    tan_sy = math.tan(math.radians(sy) / 2.0)

    def fn(pts: np.ndarray) -> np.ndarray:
        x, y = pts[..., 0], pts[..., 1]
        return np.stack(
            [np.tan(x * half_dx) / tan_sx, np.tan(y * half_dy) / tan_sy], axis=-1
        )

    return DenseMapping(
        name="spherical_fov",
        params={
            "src_fov_x": sx,
            "src_fov_y": sy,
            "dst_fov_x": dx,
            "dst_fov_y": dy,
        },
        fn=fn,
    )


def viewpoint_tilt_mapping(
    tilt_deg: float, fov_x: float = 60.0, fov_y: float = 60.0
) -> DenseMapping:
    """Pull-back of a camera pitched by ``tilt_deg`` toward image-down.

    Output coordinates are in the tilted camera's frame; the returned point
    is where the level source camera saw the same ray.  Positive tilt looks
    toward +y (image down), so the output center maps below the source
    center.  Unlike the FoV mapping this does not fix the origin; it is a
    genuine 8-DOF homography and therefore not a member of the 4-parameter
    family, which makes it a useful adaptation target.
    """
    fx = _check_fov(fov_x, "fov_x")
    fy = _check_fov(fov_y, "fov_y")
    if not -90.0 < tilt_deg < 90.0:
        raise InvalidParameterError(f"tilt must lie in (-90, 90) degrees, got {tilt_deg}")
    phi = math.radians(tilt_deg)
    tan_x = math.tan(math.radians(fx) / 2.0)
    tan_y = math.tan(math.radians(fy) / 2.0)
    cos_p, sin_p = math.cos(phi), math.sin(phi)

    def fn(pts: np.ndarray) -> np.ndarray:
        x, y = pts[..., 0], pts[..., 1]
        # Ray through the tilted camera's pixel, expressed in the source frame.
        vx = x * tan_x
        vy = y * tan_y * cos_p + sin_p
        vz = -y * tan_y * sin_p + cos_p
        return np.stack([vx / (vz * tan_x), vy / (vz * tan_y)], axis=-1)

    return DenseMapping(
        name="viewpoint_tilt",
        params={"tilt_deg": float(tilt_deg), "fov_x": fx, "fov_y": fy},
        fn=fn,
    )


def fixed_homography_mapping(params: HomographyParams) -> DenseMapping:
    """A mapping that is exactly one member of the 4-parameter family."""
    return DenseMapping(
        name="fixed_homography",
        params={
            "s_x": params.s_x,
            "s_y": params.s_y,
            "l_x": params.l_x,
            "l_y": params.l_y,
        },
        fn=lambda pts: apply_point(params, pts),
    )


def identity_mapping() -> DenseMapping:
    return DenseMapping(name="identity", params={}, fn=lambda pts: pts.copy())
