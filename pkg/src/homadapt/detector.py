"""Desk-scale single-stage detector: backbone, anchor-free head, losses, NMS.

The detector keeps the classification/regression split of two-stage training
losses but collapses the two stages into one: every feature-map cell predicts
class logits (with a background class at the last index) and the distances
from its center to the four box edges, in units of the feature stride.
Positive cells are those whose center falls inside a ground-truth box; when
centers fall inside several boxes the smallest box wins.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class InvalidTargetError(ValueError):
    """Training targets are malformed (inverted or out-of-bounds boxes)."""


@dataclasses.dataclass(frozen=True)
class BackboneConfig:
    """Feature extractor layout.

    Four conv blocks (3x3 conv, BatchNorm, ReLU); the per-block strides
    multiply to the output stride.  ``channels[-1]`` is the feature width C.
    """

    channels: tuple = (16, 32, 64, 64)
    strides: tuple = (2, 2, 2, 1)

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have equal length")
        if self.out_channels < 8:
            raise ValueError(f"need C >= 8, got {self.out_channels}")

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def out_channels(self) -> int:
        return int(self.channels[-1])


@dataclasses.dataclass(frozen=True)
class Detection:
    """One detected object: pixel box, class id, confidence score."""

    box: tuple  # (x_min, y_min, x_max, y_max) in image pixels
    class_id: int
    score: float

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score {self.score}")


@dataclasses.dataclass
class LossBreakdown:
    """Classification and regression terms; ``total`` is what gets optimized."""

    cls: torch.Tensor
    reg: torch.Tensor
    total: torch.Tensor


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig = BackboneConfig(), in_channels: int = 3):
        super().__init__()
        self.config = config
        layers = []
        prev = in_channels
        for ch, st in zip(config.channels, config.strides):
            layers += [
                nn.Conv2d(prev, ch, 3, stride=st, padding=1),
                nn.BatchNorm2d(ch),
                nn.ReLU(inplace=True),
            ]
            prev = ch
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        stride = self.config.stride
        if x.shape[-1] % stride or x.shape[-2] % stride:
            raise ValueError(
                f"spatial extent {tuple(x.shape[-2:])} not divisible by stride {stride}"
            )
        return self.body(x)


class DetectionHead(nn.Module):
    """Per-cell class logits (num_classes + background) and ltrb offsets."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.tower = nn.Sequential(
            nn.Conv2d(in_channels, in_channels, 3, padding=1),
            nn.BatchNorm2d(in_channels),
            nn.ReLU(inplace=True),
        )
        self.cls_out = nn.Conv2d(in_channels, num_classes + 1, 1)
        self.reg_out = nn.Conv2d(in_channels, 4, 1)

    def forward(self, feats: torch.Tensor):
        t = self.tower(feats)
        return self.cls_out(t), self.reg_out(t)


def iou(a, b) -> float:
    """Intersection over union of two (x0, y0, x1, y1) boxes."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(inter / union)


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy class-wise NMS.

    Candidates are visited by descending score with ties broken by box
    coordinates (lexicographically) and class id, so the result does not
    depend on input order.  A survivor suppresses same-class boxes whose
    IoU with it exceeds ``iou_threshold``.
    """
    ordered = sorted(detections, key=lambda d: (-d.score, d.box, d.class_id))
    kept: list[Detection] = []
    for cand in ordered:
        if any(
            k.class_id == cand.class_id and iou(k.box, cand.box) > iou_threshold
            for k in kept
        ):
            continue
        kept.append(cand)
    return kept


def _cell_centers(h: int, w: int, stride: int, device=None):
    ys = (torch.arange(h, device=device, dtype=torch.float32) + 0.5) * stride
    xs = (torch.arange(w, device=device, dtype=torch.float32) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    return cx, cy


def decode_boxes(reg: torch.Tensor, stride: int) -> torch.Tensor:
    """Decode (4, h, w) ltrb offsets (in stride units) to pixel boxes."""
    _, h, w = reg.shape
    cx, cy = _cell_centers(h, w, stride, device=reg.device)
    left, top, right, bottom = reg * stride
    return torch.stack([cx - left, cy - top, cx + right, cy + bottom], dim=0)


def detect(
    cls_logits: torch.Tensor,
    reg: torch.Tensor,
    stride: int,
    score_threshold: float,
    nms_iou: float = 0.5,
    image_size: tuple[int, int] | None = None,
) -> list[Detection]:
    """Turn one image's head outputs into a final detection list.

    ``cls_logits`` is (num_classes+1, h, w) with background last; ``reg`` is
    (4, h, w).  Per-cell foreground probabilities come from a softmax over
    all classes; every (cell, class) with probability >= ``score_threshold``
    becomes a candidate, then class-wise NMS keeps the survivors, sorted by
    descending score.
    """
    if cls_logits.ndim != 3 or reg.ndim != 3:
        raise ValueError("detect expects single-image (C,h,w) head outputs")
    num_classes = cls_logits.shape[0] - 1
    with torch.no_grad():
        probs = F.softmax(cls_logits, dim=0)[:num_classes]
        boxes = decode_boxes(reg, stride)
        keep = probs >= score_threshold
        if not bool(keep.any()):
            return []
        cls_idx, ys, xs = keep.nonzero(as_tuple=True)
        candidates = []
        for c, y, x in zip(cls_idx.tolist(), ys.tolist(), xs.tolist()):
            x0, y0, x1, y1 = boxes[:, y, x].tolist()
            if image_size is not None:
                wpx, hpx = image_size
                x0, x1 = max(0.0, x0), min(float(wpx), x1)
                y0, y1 = max(0.0, y0), min(float(hpx), y1)
            if x1 - x0 <= 1e-6 or y1 - y0 <= 1e-6:
                continue
            candidates.append(
                Detection((x0, y0, x1, y1), c, float(probs[c, y, x]))
            )
    return nms(candidates, nms_iou)


def assign_targets(
    boxes: torch.Tensor,
    classes: torch.Tensor,
    num_classes: int,
    grid_hw: tuple[int, int],
    stride: int,
    image_hw: tuple[int, int],
):
    """Per-cell classification target and ltrb regression targets.

    Returns (cls_target (h, w) long with background = num_classes,
    reg_target (4, h, w), positive (h, w) bool).
    """
    h, w = grid_hw
    img_h, img_w = image_hw
    cls_target = torch.full((h, w), num_classes, dtype=torch.long)
    reg_target = torch.zeros(4, h, w)
    positive = torch.zeros(h, w, dtype=torch.bool)
    if boxes.numel() == 0:
        return cls_target, reg_target, positive
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise InvalidTargetError(f"boxes must be (M,4), got {tuple(boxes.shape)}")
    if (
        (boxes[:, 0] >= boxes[:, 2]).any()
        or (boxes[:, 1] >= boxes[:, 3]).any()
        or (boxes < -1e-6).any()
        or (boxes[:, [0, 2]] > img_w + 1e-6).any()
        or (boxes[:, [1, 3]] > img_h + 1e-6).any()
    ):
        raise InvalidTargetError("boxes inverted or outside image bounds")
    if ((classes < 0) | (classes >= num_classes)).any():
        raise InvalidTargetError("class ids out of range")

    cx, cy = _cell_centers(h, w, stride)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    best_area = torch.full((h, w), float("inf"))
    for m in torch.argsort(areas, descending=True):
        x0, y0, x1, y1 = boxes[m]
        inside = (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)
        take = inside & (areas[m] <= best_area)
        if not bool(take.any()):
            continue
        best_area[take] = areas[m]
        cls_target[take] = int(classes[m])
        positive |= take
        reg_target[0][take] = (cx[take] - x0) / stride
        reg_target[1][take] = (cy[take] - y0) / stride
        reg_target[2][take] = (x1 - cx[take]) / stride
        reg_target[3][take] = (y1 - cy[take]) / stride
    return cls_target, reg_target, positive


def detection_loss(
    cls_logits: torch.Tensor,
    reg: torch.Tensor,
    targets: Sequence[tuple],
    mode: str,
    stride: int,
    image_hw: tuple[int, int],
    reg_weight: float = 1.0,
) -> LossBreakdown:
    """Detection loss over a batch.

    ``targets`` holds one ``(boxes (M,4) tensor, classes (M,) tensor)`` pair
    per image; an image with zero boxes contributes pure-background
    classification loss.  Classification is cross-entropy over all cells;
    regression is smooth-L1 summed over the four offsets and averaged over
    positive cells.  ``mode='source'`` optimizes cls + reg_weight * reg;
    ``mode='target'`` optimizes the classification term only (the regression
    term is still reported).
    """
    if mode not in ("source", "target"):
        raise ValueError(f"unknown mode {mode!r}")
    b, ncls_p1, h, w = cls_logits.shape
    num_classes = ncls_p1 - 1
    cls_t = []
    reg_t = []
    pos = []
    for boxes, classes in targets:
        ct, rt, pt = assign_targets(
            boxes, classes, num_classes, (h, w), stride, image_hw
        )
        cls_t.append(ct)
        reg_t.append(rt)
        pos.append(pt)
    cls_target = torch.stack(cls_t)
    reg_target = torch.stack(reg_t)
    positive = torch.stack(pos)

    cls_loss = F.cross_entropy(cls_logits, cls_target, reduction="mean")
    if bool(positive.any()):
        pred = reg.permute(0, 2, 3, 1)[positive]
        true = reg_target.permute(0, 2, 3, 1)[positive]
        reg_loss = F.smooth_l1_loss(pred, true, reduction="none").sum(-1).mean()
    else:
        reg_loss = torch.zeros((), dtype=cls_loss.dtype, device=cls_loss.device)
    if mode == "source":
        total = cls_loss + reg_weight * reg_loss
    else:
        total = cls_loss
    return LossBreakdown(cls=cls_loss, reg=reg_loss, total=total)
