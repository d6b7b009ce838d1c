"""Differentiable image/feature warping under the 4-parameter homography family.

Warps follow the inverse-mapping convention: the output value at normalized
coordinate ``q`` is bilinearly sampled from the input at ``invert(p)(q)``.
Samples that fall outside ``[-1, 1]^2`` or hit a degenerate projective
denominator are zero-filled and flagged in an explicit validity mask, so
downstream consumers can discount them instead of mistaking zeros for real
content.

Everything here is a pure function of its inputs and differentiable with
respect to both the image values and the four homography parameters (the
validity mask is treated as locally constant, as is standard for bilinear
samplers).
"""

from __future__ import annotations

import dataclasses

import torch
import torch.nn.functional as F

from .geometry import EPS_DENOMINATOR, HomographyParams


@dataclasses.dataclass
class WarpResult:
    """A warped map plus its per-pixel validity mask.

    ``data`` has the same shape as the input; ``valid`` is a boolean tensor
    over the spatial extent (H, W).  Invalid pixels hold value 0.
    """

    data: torch.Tensor
    valid: torch.Tensor


def params_tensor(p, dtype=torch.float32, device=None) -> torch.Tensor:
    """Coerce HomographyParams or array-like to a length-4 tensor."""
    if isinstance(p, HomographyParams):
        return torch.tensor([p.s_x, p.s_y, p.l_x, p.l_y], dtype=dtype, device=device)
    t = torch.as_tensor(p, dtype=dtype, device=device)
    if t.shape[-1] != 4:
        raise ValueError(f"expected (...,4) parameter tensor, got {tuple(t.shape)}")
    return t


def invert_params(t: torch.Tensor) -> torch.Tensor:
    """Inverse within the family, batched over leading dims of a (...,4) tensor."""
    s_x, s_y, l_x, l_y = t[..., 0], t[..., 1], t[..., 2], t[..., 3]
    return torch.stack([1.0 / s_x, 1.0 / s_y, -l_x / s_x, -l_y / s_y], dim=-1)


def apply_params(t: torch.Tensor, xy: torch.Tensor):
    """Map points through parameters, returning (mapped, denominator).

    ``t`` broadcasts against ``xy``: t is (..., 4), xy is (..., 2) with
    mutually broadcastable batch shapes.  The caller decides how to treat
    near-zero denominators; they are returned unclamped.
    """
    x, y = xy[..., 0], xy[..., 1]
    s_x, s_y = t[..., 0], t[..., 1]
    l_x, l_y = t[..., 2], t[..., 3]
    w = l_x * x + l_y * y + 1.0
    safe_w = torch.where(w.abs() > EPS_DENOMINATOR, w, torch.ones_like(w))
    mapped = torch.stack([s_x * x / safe_w, s_y * y / safe_w], dim=-1)
    return mapped, w


def normalized_grid(h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Pixel-center grid over [-1, 1]^2, shape (h, w, 2) with x then y.

    Pixel centers: ``x_j = (j + 0.5) / w * 2 - 1``, matching the
    align_corners=False convention where -1 and +1 are the outer pixel edges.
    """
    xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w * 2.0 - 1.0
    ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h * 2.0 - 1.0
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def _source_coords(params: torch.Tensor, h: int, w: int):
    """Source-sampling coordinates and validity for warping by ``params``.

    Returns (coords (..., h, w, 2), valid (..., h, w)) where leading dims
    follow the parameter batch shape.
    """
    grid = normalized_grid(h, w, dtype=params.dtype, device=params.device)
    batch_shape = params.shape[:-1]
    p = params.reshape(*batch_shape, *(1,) * 2, 4)
    coords, denom = apply_params(invert_params(p), grid)
    inside = (
        (coords[..., 0] >= -1.0)
        & (coords[..., 0] <= 1.0)
        & (coords[..., 1] >= -1.0)
        & (coords[..., 1] <= 1.0)
    )
    valid = inside & (denom.abs() > EPS_DENOMINATOR)
    return coords, valid


def warp_validity(p, h: int, w: int, device=None) -> torch.Tensor:
    """Validity mask of ``warp`` at resolution (h, w) without touching data."""
    with torch.no_grad():
        t = params_tensor(p, device=device)
        _, valid = _source_coords(t, h, w)
    return valid


def warp(image: torch.Tensor, p) -> WarpResult:
    """Warp a (..., H, W) tensor by homography parameters ``p``.

    All leading dimensions are treated as channels.  Output pixel ``q`` is
    sampled from the input at ``invert(p)(q)`` with bilinear interpolation
    (border replication at the frame edge, so a constant image stays
    constant on valid pixels).  Samples outside ``[-1, 1]^2`` or with a
    degenerate denominator are zero-filled and marked invalid.

    ``p`` may be HomographyParams or a length-4 tensor; gradients flow into
    a tensor ``p`` and into ``image``.
    """
    if image.ndim < 2 or image.shape[-1] < 2 or image.shape[-2] < 2:
        raise ValueError(f"image must be at least 2x2, got shape {tuple(image.shape)}")
    t = params_tensor(p, dtype=image.dtype, device=image.device)
    if t.ndim != 1:
        raise ValueError("warp takes a single parameter set; see warp_stack")
    h, w = image.shape[-2], image.shape[-1]
    coords, valid = _source_coords(t, h, w)

    lead = image.shape[:-2]
    flat = image.reshape(1, -1, h, w) if lead else image.reshape(1, 1, h, w)
    sampled = F.grid_sample(
        flat,
        coords.reshape(1, h, w, 2),
        mode="bilinear",
        padding_mode="border",
        align_corners=False,
    )
    data = sampled.reshape(*lead, h, w) if lead else sampled.reshape(h, w)
    data = data * valid.to(data.dtype)
    return WarpResult(data=data, valid=valid)


def warp_stack(images: torch.Tensor, params: torch.Tensor):
    """Warp a batch of images by every parameter set in a stack.

    Parameters
    ----------
    images : (B, C, H, W) tensor
    params : (N, 4) tensor

    Returns
    -------
    data : (N, B, C, H, W) tensor, invalid pixels zero-filled
    valid : (N, H, W) boolean tensor (shared across the batch)
    """
    if images.ndim != 4:
        raise ValueError(f"expected (B,C,H,W) images, got {tuple(images.shape)}")
    if params.ndim != 2 or params.shape[-1] != 4:
        raise ValueError(f"expected (N,4) params, got {tuple(params.shape)}")
    b, c, h, w = images.shape
    n = params.shape[0]
    coords, valid = _source_coords(params.to(images.dtype), h, w)  # (N,h,w,2), (N,h,w)
    grid = coords.unsqueeze(1).expand(n, b, h, w, 2).reshape(n * b, h, w, 2)
    inp = images.unsqueeze(0).expand(n, b, c, h, w).reshape(n * b, c, h, w)
    sampled = F.grid_sample(
        inp, grid, mode="bilinear", padding_mode="border", align_corners=False
    )
    data = sampled.reshape(n, b, c, h, w)
    data = data * valid.to(data.dtype).reshape(n, 1, 1, h, w)
    return data, valid
