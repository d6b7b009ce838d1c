"""Deterministic synthetic detection benchmark with controllable geometric shifts.

Every image is an independent scene of simple shapes (disk, square,
triangle) rendered on a world canvas large enough to cover the chosen
shift's field of view.  Source images sample the world identically; target
images sample it through the shift's dense pull-back mapping, so the two
domains differ purely by image-formation geometry.  Truth boxes are
recomputed from each object's resampled mask, never by warping box corners.

The on-disk layout is an ``images/`` directory plus ``annotations.jsonl``
(one record per image) and a ``manifest.json`` holding the full specs and
seed.  The unlabeled target training split carries no annotation fields at
all; target validation keeps its boxes for evaluation only.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates

from .geometry import HomographyParams
from .mappings import (
    DenseMapping,
    fixed_homography_mapping,
    identity_mapping,
    spherical_fov_mapping,
    viewpoint_tilt_mapping,
)

FORMAT_VERSION = 1
SPLITS = ("src_train", "src_val", "tgt_train", "tgt_val")


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    """What one rendered scene looks like."""

    image_size: int = 128
    min_objects: int = 2
    max_objects: int = 5
    classes: tuple = ("disk", "square", "triangle")
    size_range: tuple = (0.10, 0.26)  # object half-extent, normalized units
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not self.classes:
            raise ValueError("need at least one shape class")


@dataclasses.dataclass(frozen=True)
class ShiftSpec:
    """The geometric (and optional photometric) source-to-target shift."""

    kind: str = "none"  # none | fov | viewpoint | fixed_homography
    src_fov: tuple = (50.0, 26.0)
    dst_fov: tuple = (90.0, 34.0)
    tilt_deg: float = 25.0
    view_fov: tuple = (60.0, 60.0)
    homography: tuple | None = None  # flat record [s_x, s_y, l_x, l_y]
    jitter: float = 0.0  # photometric jitter strength on target images

    def __post_init__(self):
        if self.kind not in ("none", "fov", "viewpoint", "fixed_homography"):
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if self.kind == "fixed_homography" and self.homography is None:
            raise ValueError("fixed_homography shift needs a parameter record")
        if self.jitter < 0:
            raise ValueError("jitter strength cannot be negative")

    def mapping(self) -> DenseMapping:
        if self.kind == "none":
            return identity_mapping()
        if self.kind == "fov":
            return spherical_fov_mapping(*self.src_fov, *self.dst_fov)
        if self.kind == "viewpoint":
            return viewpoint_tilt_mapping(self.tilt_deg, *self.view_fov)
        return fixed_homography_mapping(HomographyParams.from_array(self.homography))


@dataclasses.dataclass(frozen=True)
class Counts:
    src_train: int = 500
    src_val: int = 100
    tgt_train: int = 500
    tgt_val: int = 100

    def of(self, split: str) -> int:
        return getattr(self, split)


@dataclasses.dataclass
class DomainSample:
    """One loaded image with (possibly absent) annotations."""

    image: np.ndarray  # (H, W, 3) uint8
    boxes: np.ndarray | None  # (M, 4) float32 pixel boxes, or None if unlabeled
    classes: np.ndarray | None  # (M,) int64, or None
    domain: str
    split: str
    file: str


def _mapping_extent(mapping: DenseMapping, probe: int = 33) -> tuple[float, float]:
    """Per-axis extent of the mapping's outputs over the output frame."""
    xs = np.linspace(-1, 1, probe)
    grid = np.stack(np.meshgrid(xs, xs), axis=-1)
    out = mapping(grid)
    return (
        max(1.0, float(np.abs(out[..., 0]).max())),
        max(1.0, float(np.abs(out[..., 1]).max())),
    )


def _shape_coverage(kind, cx, cy, half, angle, ux, uy, px):
    """Antialiased coverage in [0,1] of one shape over world pixel grids."""
    dx, dy = ux - cx, uy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    rx = ca * dx + sa * dy
    ry = -sa * dx + ca * dy
    if kind == "disk":
        dist = np.hypot(dx, dy) - half
    elif kind == "square":
        dist = np.maximum(np.abs(rx), np.abs(ry)) - half
    elif kind == "triangle":
        # equilateral triangle with circumradius ``half``: intersection of
        # three half-planes, signed distance = max over edge lines
        dist = None
        for k in range(3):
            phi = angle + np.pi / 2 + 2 * np.pi * k / 3
            nx, ny = np.cos(phi), np.sin(phi)
            d = nx * dx + ny * dy - half * 0.5
            dist = d if dist is None else np.maximum(dist, d)
    else:
        raise ValueError(f"unknown shape class {kind!r}")
    return np.clip(0.5 - dist / px, 0.0, 1.0)


class _SceneRenderer:
    """Renders one scene on the world canvas and resamples it to a domain view."""

    def __init__(self, scene: SceneSpec, extent: tuple[float, float]):
        self.scene = scene
        self.ex, self.ey = extent
        self.ww = max(2, round(scene.image_size * self.ex))
        self.wh = max(2, round(scene.image_size * self.ey))
        # world pixel centers in normalized source units
        self.px = 2.0 * self.ex / self.ww  # world pixel pitch
        us = (np.arange(self.ww) + 0.5) / self.ww * 2.0 * self.ex - self.ex
        vs = (np.arange(self.wh) + 0.5) / self.wh * 2.0 * self.ey - self.ey
        self.ux, self.uy = np.meshgrid(us, vs)

    def render_world(self, rng, placements):
        """Background plus shapes; returns (image (wh,ww,3), list of masks)."""
        scene = self.scene
        base = rng.uniform(0.12, 0.30, size=3)
        gdir = rng.uniform(-1, 1, size=2)
        gstrength = rng.uniform(0.0, 0.08)
        img = np.empty((self.wh, self.ww, 3))
        grad = gstrength * (gdir[0] * self.ux / self.ex + gdir[1] * self.uy / self.ey)
        for c in range(3):
            img[..., c] = base[c] + grad
        img += rng.normal(0.0, scene.noise_std, size=img.shape)
        masks = []
        for obj in placements:
            cov = _shape_coverage(
                obj["kind"], obj["cx"], obj["cy"], obj["half"], obj["angle"],
                self.ux, self.uy, self.px,
            )
            img = img * (1.0 - cov[..., None]) + obj["color"] * cov[..., None]
            masks.append(cov)
        return np.clip(img, 0.0, 1.0), masks

    def sample_view(self, world, coords):
        """Bilinear resample of a world array at normalized source coords."""
        cols = (coords[..., 0] / self.ex + 1.0) * 0.5 * self.ww - 0.5
        rows = (coords[..., 1] / self.ey + 1.0) * 0.5 * self.wh - 0.5
        stack = np.stack([rows.ravel(), cols.ravel()])
        if world.ndim == 2:
            out = map_coordinates(world, stack, order=1, mode="nearest")
            return out.reshape(coords.shape[:-1])
        chans = [
            map_coordinates(world[..., c], stack, order=1, mode="nearest").reshape(
                coords.shape[:-1]
            )
            for c in range(world.shape[-1])
        ]
        return np.stack(chans, axis=-1)


def _place_objects(rng, scene: SceneSpec, mapping: DenseMapping, shifted: bool):
    """Random non-crowding object placements, positions in world units."""
    n = int(rng.integers(scene.min_objects, scene.max_objects + 1))
    placements = []
    tries = 0
    while len(placements) < n and tries < 200:
        tries += 1
        q = rng.uniform(-0.82, 0.82, size=2)
        pos = mapping(q) if shifted else q
        half = rng.uniform(*scene.size_range)
        if any(
            np.hypot(pos[0] - o["cx"], pos[1] - o["cy"]) < 0.9 * (half + o["half"])
            for o in placements
        ):
            continue
        placements.append(
            {
                "kind": scene.classes[int(rng.integers(len(scene.classes)))],
                "class_id": None,  # filled below, after kind is known
                "cx": float(pos[0]),
                "cy": float(pos[1]),
                "half": float(half),
                "angle": float(rng.uniform(0, 2 * np.pi)),
                "color": rng.uniform(0.45, 1.0, size=3),
            }
        )
    for obj in placements:
        obj["class_id"] = scene.classes.index(obj["kind"])
    return placements


def _boxes_from_masks(masks_view, min_pixels=12):
    """Tight pixel boxes of thresholded masks; tiny remnants are dropped."""
    boxes = []
    keep = []
    for idx, mask in enumerate(masks_view):
        on = mask >= 0.5
        if on.sum() < min_pixels:
            continue
        rows, cols = np.nonzero(on)
        boxes.append(
            [float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1)]
        )
        keep.append(idx)
    return boxes, keep


def _photometric_jitter(rng, img, strength):
    if strength <= 0:
        return img
    gain = rng.uniform(1 - strength, 1 + strength)
    bias = rng.uniform(-0.2 * strength, 0.2 * strength)
    return np.clip(img * gain + bias, 0.0, 1.0)


def render_sample(scene: SceneSpec, shift: ShiftSpec, split: str, index: int):
    """Render one domain sample deterministically from (scene.seed, split, index).

    Returns (image (H, W, 3) uint8, boxes list, classes list).
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    shifted = split.startswith("tgt")
    mapping = shift.mapping()
    # shared world extent keeps source and target rendering statistics equal
    renderer = _SceneRenderer(scene, _mapping_extent(mapping))
    rng = np.random.default_rng([scene.seed, SPLITS.index(split), index])

    placements = _place_objects(rng, scene, mapping, shifted)
    world, masks = renderer.render_world(rng, placements)

    size = scene.image_size
    xs = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    gx, gy = np.meshgrid(xs, xs)
    frame = np.stack([gx, gy], axis=-1)
    coords = mapping(frame) if shifted else frame

    img = renderer.sample_view(world, coords)
    masks_view = [renderer.sample_view(m, coords) for m in masks]
    boxes, keep = _boxes_from_masks(masks_view)
    classes = [placements[k]["class_id"] for k in keep]
    if shifted:
        img = _photometric_jitter(rng, img, shift.jitter)
    img8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return img8, boxes, classes


def generate_domain_pair(
    scene: SceneSpec,
    shift: ShiftSpec,
    counts: Counts,
    out_dir,
) -> dict:
    """Render and serialize a full source/target dataset; returns the manifest."""
    out = pathlib.Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for split in SPLITS:
        for idx in range(counts.of(split)):
            img, boxes, classes = render_sample(scene, shift, split, idx)
            name = f"images/{split}_{idx:04d}.png"
            Image.fromarray(img).save(out / name)
            rec = {
                "file": name,
                "domain": "source" if split.startswith("src") else "target",
                "split": split,
                "width": scene.image_size,
                "height": scene.image_size,
            }
            if split != "tgt_train":  # the unlabeled split carries no labels at all
                rec["boxes"] = boxes
                rec["classes"] = classes
            records.append(rec)
    with open(out / "annotations.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {
        "format_version": FORMAT_VERSION,
        "scene": dataclasses.asdict(scene),
        "shift": dataclasses.asdict(shift),
        "counts": dataclasses.asdict(counts),
        "num_classes": len(scene.classes),
        "seed": scene.seed,
    }
    manifest = json.loads(json.dumps(manifest))  # tuples -> lists, as read back
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def load_split(dataset_dir, split: str) -> list[DomainSample]:
    """Load one split into memory; unlabeled records get boxes=None."""
    root = pathlib.Path(dataset_dir)
    samples = []
    with open(root / "annotations.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["split"] != split:
                continue
            img = np.asarray(Image.open(root / rec["file"]).convert("RGB"))
            if "boxes" in rec:
                boxes = np.asarray(rec["boxes"], dtype=np.float32).reshape(-1, 4)
                classes = np.asarray(rec["classes"], dtype=np.int64)
            else:
                boxes = classes = None
            samples.append(
                DomainSample(
                    image=img,
                    boxes=boxes,
                    classes=classes,
                    domain=rec["domain"],
                    split=split,
                    file=rec["file"],
                )
            )
    if not samples:
        raise ValueError(f"split {split!r} not found in {dataset_dir}")
    return samples


def load_manifest(dataset_dir) -> dict:
    with open(pathlib.Path(dataset_dir) / "manifest.json") as fh:
        return json.load(fh)
