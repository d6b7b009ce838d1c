"""Approximating dense geometric mappings with small homography sets.

Two regimes:

* one homography per grid cell (``pixelwise_emulation``) reproduces any
  axis-avoiding mapping exactly at the grid nodes, by construction;
* a small set of N homographies plus a per-cell selection map
  (``fit_homography_set``), fitted by alternating minimization: re-select
  each cell's best homography, then refit each homography to its assigned
  cells by gradient descent on squared remap error.

Errors are reported in pixel units at a declared reference resolution so the
numbers stay human-interpretable: one normalized unit spans half the image,
so an offset of ``e`` normalized units is ``e * resolution / 2`` pixels.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
import torch

from .geometry import (
    EPS_DENOMINATOR,
    HomographyParams,
    UnmappablePointError,
    apply_point,
    solve_point_mapping,
)
from .mappings import DenseMapping
from .warping import apply_params

DEFAULT_REFERENCE_RESOLUTION = 256


@dataclasses.dataclass
class FitConfig:
    """Settings for the alternating-minimization fit."""

    rounds: int = 20
    steps_per_round: int = 200
    lr: float = 0.05
    lr_decay: float = 0.85  # per-round learning-rate decay during refits
    reference_resolution: int = DEFAULT_REFERENCE_RESOLUTION
    tol_px: float = 1e-6
    seed: int = 0
    init: Sequence[HomographyParams] | None = None
    init_steps: int = 256  # per-piece least-squares steps for the band init


@dataclasses.dataclass
class FitReport:
    """Result of fitting a homography set to a dense mapping."""

    homographies: list[HomographyParams]
    selection: np.ndarray  # (h, w) int indices into homographies
    rmse: float  # pixels at reference_resolution
    max_error: float  # pixels
    iterations: int  # alternating rounds executed
    reference_resolution: int = DEFAULT_REFERENCE_RESOLUTION

    def to_dict(self) -> dict:
        return {
            "homographies": [list(h.as_array()) for h in self.homographies],
            "selection": self.selection.tolist(),
            "rmse": self.rmse,
            "max_error": self.max_error,
            "iterations": self.iterations,
            "reference_resolution": self.reference_resolution,
        }


def grid_points(h: int, w: int) -> np.ndarray:
    """Pixel-center grid over [-1, 1]^2, shape (h, w, 2).

    Cells sit at pixel centers, offset half a cell from the frame edge; for
    even ``h`` and ``w`` no grid point lands on a coordinate axis.
    """
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def pixelwise_emulation(mapping: DenseMapping, grid_shape: tuple[int, int]):
    """One homography per grid cell, each remapping exactly its own node.

    Returns ``(homographies, selection)`` where ``selection[i, j] = i*w + j``.
    The composite remap error at the grid nodes is zero up to floating-point
    rounding.  Raises the underlying unmappable/sign-degenerate error with
    the offending cell if a node cannot be represented.
    """
    h, w = grid_shape
    grid = grid_points(h, w)
    if np.any(np.abs(grid) <= EPS_DENOMINATOR):
        raise UnmappablePointError(
            f"grid {grid_shape} has a node on a coordinate axis; use even sizes"
        )
    targets = mapping(grid)
    homographies = []
    for i in range(h):
        for j in range(w):
            try:
                homographies.append(solve_point_mapping(grid[i, j], targets[i, j]))
            except Exception as exc:
                raise type(exc)(f"cell ({i}, {j}): {exc}") from exc
    selection = np.arange(h * w, dtype=np.int64).reshape(h, w)
    return homographies, selection


def remap_error(
    homographies: Sequence[HomographyParams],
    selection: np.ndarray,
    mapping: DenseMapping,
    grid_shape: tuple[int, int],
    reference_resolution: int = DEFAULT_REFERENCE_RESOLUTION,
):
    """Per-cell Euclidean remap error of a selected set against a mapping.

    Returns ``(rmse, max_error)`` in pixels at ``reference_resolution``.
    """
    h, w = grid_shape
    selection = np.asarray(selection)
    if selection.shape != (h, w):
        raise ValueError(f"selection shape {selection.shape} != grid {grid_shape}")
    if selection.min() < 0 or selection.max() >= len(homographies):
        raise ValueError("selection indices out of range")
    grid = grid_points(h, w)
    targets = mapping(grid)
    mapped = np.empty_like(targets)
    for k, params in enumerate(homographies):
        cells = selection == k
        if np.any(cells):
            mapped[cells] = apply_point(params, grid[cells])
    err = np.linalg.norm(mapped - targets, axis=-1) * (reference_resolution / 2.0)
    return float(np.sqrt(np.mean(err**2))), float(err.max())


def _pixel_errors_torch(params: torch.Tensor, grid: torch.Tensor, targets: torch.Tensor,
                        reference_resolution: int) -> torch.Tensor:
    """Squared pixel error of every homography at every cell, (n, cells)."""
    mapped, _ = apply_params(params[:, None, :], grid[None, :, :])
    d = mapped - targets[None, :, :]
    return (d**2).sum(-1) * (reference_resolution / 2.0) ** 2


def _fit_piece(grid: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor,
               init, steps: int, lr: float) -> torch.Tensor:
    """Least-squares fit of a single homography to the masked cells."""
    p = torch.tensor([list(init)], dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([p], lr=lr)
    sub_g, sub_t = grid[mask], targets[mask]
    for _ in range(steps):
        opt.zero_grad()
        mapped, _ = apply_params(p[:, None, :], sub_g[None])
        ((mapped - sub_t[None]) ** 2).sum(-1).mean().backward()
        opt.step()
        with torch.no_grad():
            p[:, :2].clamp_(min=1e-3)
    return p.detach()[0]


def _band_init(grid: torch.Tensor, targets: torch.Tensor, n: int, steps: int,
               lr: float) -> torch.Tensor:
    """Structured initialization: one homography per |x|-symmetric band.

    The sampled mappings vary most along x, so bands in x with equal cell
    counts give every piece a coherent region to start from.  Deterministic.
    """
    x = grid[:, 0]
    if n == 1:
        masks = [torch.ones_like(x, dtype=torch.bool)]
    else:
        # n contiguous bands of |x| with equal counts; bands beyond the first
        # are split into their positive and negative x halves alternately.
        qs = torch.quantile(x.abs(), torch.linspace(0, 1, n + 1, dtype=x.dtype))
        qs[0], qs[-1] = -1e-9, x.abs().max() + 1e-9
        masks = []
        for k in range(n):
            band = (x.abs() > qs[k]) & (x.abs() <= qs[k + 1])
            if k % 2 == 1:
                band &= x >= 0
            elif k > 0:
                band &= x < 0
            if not bool(band.any()):
                band = torch.ones_like(x, dtype=torch.bool)
            masks.append(band)
    return torch.stack(
        [_fit_piece(grid, targets, mk, (1.2, 1.2, 0.0, 0.0), steps, lr) for mk in masks]
    )


def fit_homography_set(
    mapping: DenseMapping,
    n: int,
    grid_shape: tuple[int, int],
    config: FitConfig | None = None,
) -> FitReport:
    """Fit ``n`` homographies plus a per-cell selection map to ``mapping``.

    Alternating minimization: (a) assign every cell to the homography with
    the smallest remap error (ties broken by lowest index); (b) refit each
    homography to its assigned cells by gradient descent (Adam) on squared
    pixel error, with the learning rate decayed every round.  A homography
    that owns no cells after a selection round is re-seeded onto the worst
    cell's exact pointwise solution so it can start competing again.  The
    best (parameters, selection) snapshot seen at any point is returned, so
    a fit seeded with a known-good initialization can never end up worse.

    Non-convergence is not an error; the report carries the number of
    rounds actually executed.
    """
    if n < 1:
        raise ValueError(f"need at least one homography, got n={n}")
    cfg = config or FitConfig()
    h, w = grid_shape
    grid_np = grid_points(h, w)
    if np.any(np.abs(grid_np) <= EPS_DENOMINATOR):
        raise UnmappablePointError(
            f"grid {grid_shape} has a node on a coordinate axis; use even sizes"
        )
    targets_np = mapping(grid_np)

    grid = torch.from_numpy(grid_np.reshape(-1, 2))
    targets = torch.from_numpy(targets_np.reshape(-1, 2))

    if cfg.init is not None:
        if len(cfg.init) != n:
            raise ValueError(f"init has {len(cfg.init)} homographies, expected {n}")
        params = torch.tensor(
            np.stack([p.as_array() for p in cfg.init]), dtype=torch.float64
        )
    else:
        params = _band_init(grid, targets, n, cfg.init_steps, cfg.lr)

    cell_idx = torch.arange(grid.shape[0])

    def select(p: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            errs = _pixel_errors_torch(p, grid, targets, cfg.reference_resolution)
        return np.argmin(errs.numpy(), axis=0)  # first minimum: lowest index wins

    def rmse_of(p: torch.Tensor, sel: np.ndarray) -> float:
        with torch.no_grad():
            errs = _pixel_errors_torch(p, grid, targets, cfg.reference_resolution)
            chosen = errs[torch.from_numpy(sel), cell_idx]
        return float(chosen.mean().sqrt())

    best = {"rmse": np.inf, "params": None, "selection": None}

    def consider(p: torch.Tensor, sel: np.ndarray) -> float:
        r = rmse_of(p, sel)
        if r < best["rmse"]:
            best.update(rmse=r, params=p.detach().clone(), selection=sel.copy())
        return r

    def reseed_orphans(p: torch.Tensor, sel: np.ndarray) -> np.ndarray:
        owned = np.bincount(sel, minlength=n)
        orphans = np.flatnonzero(owned == 0)
        if orphans.size == 0:
            return sel
        with torch.no_grad():
            errs = _pixel_errors_torch(p, grid, targets, cfg.reference_resolution)
            cell_err = errs[torch.from_numpy(sel), cell_idx].numpy()
        order = np.argsort(cell_err)[::-1]
        for rank, k in enumerate(orphans):
            cell = int(order[min(rank, order.size - 1)])
            try:
                exact = solve_point_mapping(grid[cell].numpy(), targets[cell].numpy())
            except Exception:
                continue
            with torch.no_grad():
                p[k] = torch.from_numpy(exact.as_array())
        return select(p)

    prev_rmse = np.inf
    rounds_done = 0
    for rnd in range(cfg.rounds):
        rounds_done += 1
        sel = select(params)
        sel = reseed_orphans(params, sel)
        round_rmse = consider(params, sel)
        sel_t = torch.from_numpy(sel)
        params = params.clone().requires_grad_(True)
        optimizer = torch.optim.Adam([params], lr=cfg.lr * cfg.lr_decay**rnd)
        for _ in range(cfg.steps_per_round):
            optimizer.zero_grad()
            errs = _pixel_errors_torch(params, grid, targets, cfg.reference_resolution)
            errs[sel_t, cell_idx].mean().backward()
            optimizer.step()
            with torch.no_grad():
                params[:, :2].clamp_(min=1e-3)
        params = params.detach()
        round_rmse = min(round_rmse, consider(params, select(params)))
        if prev_rmse - round_rmse < cfg.tol_px:
            break
        prev_rmse = round_rmse

    homographies = [HomographyParams.from_array(row) for row in best["params"].numpy()]
    selection = best["selection"].reshape(h, w)
    rmse, max_err = remap_error(
        homographies, selection, mapping, grid_shape, cfg.reference_resolution
    )
    return FitReport(
        homographies=homographies,
        selection=selection,
        rmse=rmse,
        max_error=max_err,
        iterations=rounds_done,
        reference_resolution=cfg.reference_resolution,
    )
