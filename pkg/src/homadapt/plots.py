"""Plot rendering for traces, sweeps, and mapping-approximation reports."""

from __future__ import annotations

import pathlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .approx import FitReport, grid_points
from .geometry import apply_point
from .mappings import DenseMapping

PARAM_NAMES = ("s_x", "s_y", "l_x", "l_y")


def plot_trace(trace: list[dict], out_dir) -> list[str]:
    """Loss curves, transform-evolution curves (one image per parameter),
    and the periodic target-AP curve when present.  Returns written paths."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    steps = [r["step"] for r in trace]

    fig, ax = plt.subplots(figsize=(7, 4))
    for key, label in [
        ("loss_src_cls", "source cls"),
        ("loss_src_reg", "source reg"),
        ("loss_tgt_cls", "target cls"),
    ]:
        if key in trace[0]:
            ax.plot(steps, [r[key] for r in trace], label=label, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    path = out / "losses.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(str(path))

    if trace[0].get("T_st") is not None:
        T = np.asarray([r["T_st"] for r in trace])  # (steps, N, 4)
        for k, name in enumerate(PARAM_NAMES):
            fig, ax = plt.subplots(figsize=(7, 4))
            for i in range(T.shape[1]):
                ax.plot(steps, T[:, i, k], linewidth=1, label=f"H{i + 1}")
            ax.set_xlabel("step")
            ax.set_ylabel(name)
            ax.legend(fontsize=8)
            fig.tight_layout()
            path = out / f"evolution_{name}.png"
            fig.savefig(path, dpi=110)
            plt.close(fig)
            written.append(str(path))

    ap_steps = [r["step"] for r in trace if "target_AP" in r]
    if ap_steps:
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(ap_steps, [r["target_AP"] for r in trace if "target_AP" in r], "o-")
        ax.set_xlabel("step")
        ax.set_ylabel("target AP@0.5")
        fig.tight_layout()
        path = out / "target_ap.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(str(path))
    return written


def plot_sweep(summary: dict, out_dir) -> list[str]:
    """AP versus swept value with per-seed scatter and mean +/- std bars."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    values = [entry["value"] for entry in summary["results"]]
    means = [entry["mean_target_ap50"] for entry in summary["results"]]
    stds = [entry["std_target_ap50"] for entry in summary["results"]]
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(values))
    ax.errorbar(xs, means, yerr=stds, fmt="o-", capsize=4)
    for x, entry in zip(xs, summary["results"]):
        for ap in entry["target_ap50"]:
            ax.plot([x], [ap], "k.", alpha=0.4, markersize=4)
    ax.set_xticks(xs)
    ax.set_xticklabels([str(v) for v in values])
    ax.set_xlabel(summary["param"])
    ax.set_ylabel("target AP@0.5")
    fig.tight_layout()
    path = out / f"sweep_{summary['param']}.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return [str(path)]


def _test_pattern(size: int = 256) -> np.ndarray:
    """Checkerboard with a circle: remapping distortions are easy to see."""
    xs = (np.arange(size) + 0.5) / size * 2 - 1
    gx, gy = np.meshgrid(xs, xs)
    checker = ((np.floor(gx * 6) + np.floor(gy * 6)) % 2).astype(float)
    img = np.stack([checker * 0.7 + 0.15] * 3, axis=-1)
    ring = np.abs(np.hypot(gx, gy) - 0.6) < 0.03
    img[ring] = [0.9, 0.2, 0.2]
    return img


def _remap_pattern(img, coords):
    from scipy.ndimage import map_coordinates

    size = img.shape[0]
    cols = (coords[..., 0] + 1) * 0.5 * size - 0.5
    rows = (coords[..., 1] + 1) * 0.5 * size - 0.5
    inside = (np.abs(coords[..., 0]) <= 1) & (np.abs(coords[..., 1]) <= 1)
    out = np.stack(
        [
            map_coordinates(img[..., c], [rows.ravel(), cols.ravel()], order=1,
                            mode="constant", cval=0.0).reshape(rows.shape)
            for c in range(3)
        ],
        axis=-1,
    )
    return out * inside[..., None]


def plot_fit_report(report: FitReport, mapping: DenseMapping, out_dir) -> list[str]:
    """Side-by-side: test pattern, true remap, homography-set remap, selection."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = 256
    pattern = _test_pattern(size)
    xs = (np.arange(size) + 0.5) / size * 2 - 1
    gx, gy = np.meshgrid(xs, xs)
    frame = np.stack([gx, gy], axis=-1)

    true_coords = mapping(frame)
    sel_h, sel_w = report.selection.shape
    rows = np.clip(((gy + 1) * 0.5 * sel_h).astype(int), 0, sel_h - 1)
    cols = np.clip(((gx + 1) * 0.5 * sel_w).astype(int), 0, sel_w - 1)
    sel_full = report.selection[rows, cols]
    fit_coords = np.empty_like(frame)
    for k, params in enumerate(report.homographies):
        cells = sel_full == k
        if np.any(cells):
            fit_coords[cells] = apply_point(params, frame[cells])

    fig, axes = plt.subplots(1, 4, figsize=(16, 4.2))
    axes[0].imshow(pattern)
    axes[0].set_title("test pattern")
    axes[1].imshow(_remap_pattern(pattern, true_coords))
    axes[1].set_title(f"{mapping.name} remap")
    axes[2].imshow(_remap_pattern(pattern, fit_coords))
    axes[2].set_title(
        f"{len(report.homographies)} homographies (rmse {report.rmse:.2f}px)"
    )
    im = axes[3].imshow(report.selection, cmap="tab10", interpolation="nearest")
    axes[3].set_title("selection map")
    fig.colorbar(im, ax=axes[3], shrink=0.8)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    path = out / "fit_approx.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return [str(path)]
