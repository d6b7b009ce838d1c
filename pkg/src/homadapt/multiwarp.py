"""Warp / extract / unwarp / aggregate detection architecture.

The input image is warped by every homography in an ordered set, features
are extracted by a shared backbone, unwarped with the inverse homographies
to restore spatial correspondence, multiplied by their validity masks,
concatenated along channels, and fused back to a C-channel map either by a
learned aggregator (three 3x3 conv+BN+ReLU blocks and a final 1x1 conv) or
by a built-in masked reducer (mean or max).  The output extent is H x W x C
regardless of how many homographies the set holds.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .detector import Backbone, BackboneConfig, DetectionHead
from .geometry import HomographyParams
from .warping import invert_params, warp_stack, warp_validity


@dataclasses.dataclass
class HomographySet:
    """Ordered set of homographies; order is load-bearing for the aggregator."""

    params: list[HomographyParams]
    learnable: bool = True

    def __post_init__(self):
        if len(self.params) < 1:
            raise ValueError("a homography set needs at least one member")

    def __len__(self):
        return len(self.params)

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(
            np.stack([p.as_array() for p in self.params]), dtype=dtype
        )

    @classmethod
    def identities(cls, n: int, learnable: bool = True) -> "HomographySet":
        return cls([HomographyParams.identity() for _ in range(n)], learnable)

    @classmethod
    def from_tensor(cls, t: torch.Tensor, learnable: bool = True) -> "HomographySet":
        return cls(
            [HomographyParams.from_array(row) for row in t.detach().cpu().numpy()],
            learnable,
        )


@dataclasses.dataclass
class FeatureStack:
    """N unwarped feature maps plus validity masks.

    ``maps`` is (N, B, C, h, w); ``valid`` is (N, B, 1, h, w) boolean.  The
    concatenated view interleaves branches along channels: (B, N*C, h, w).
    """

    maps: torch.Tensor
    valid: torch.Tensor

    @property
    def concatenated(self) -> torch.Tensor:
        n, b, c, h, w = self.maps.shape
        return (self.maps * self.valid.to(self.maps.dtype)).permute(
            1, 0, 2, 3, 4
        ).reshape(b, n * c, h, w)


def reduce_stack(stack: FeatureStack, kind: str) -> torch.Tensor:
    """Masked elementwise mean or max over the N maps; all-invalid cells -> 0."""
    maps, valid = stack.maps, stack.valid.to(stack.maps.dtype)
    if kind == "mean":
        count = valid.sum(0).clamp(min=1.0)
        return (maps * valid).sum(0) / count
    if kind == "max":
        neg_inf = torch.finfo(maps.dtype).min
        masked = torch.where(stack.valid, maps, torch.full_like(maps, neg_inf))
        out = masked.max(0).values
        any_valid = stack.valid.any(0)
        return torch.where(any_valid, out, torch.zeros_like(out))
    raise ValueError(f"unknown reducer {kind!r}; use 'mean' or 'max'")


class Aggregator(nn.Module):
    """Learned fusion of N concatenated feature maps back to C channels."""

    def __init__(self, feature_channels: int, n_homographies: int):
        super().__init__()
        self.feature_channels = feature_channels
        self.n_homographies = n_homographies
        c, n = feature_channels, n_homographies
        self.net = nn.Sequential(
            nn.Conv2d(c * n, c, 3, padding=1),
            nn.BatchNorm2d(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1),
            nn.BatchNorm2d(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1),
            nn.BatchNorm2d(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 1),
        )

    def forward(self, concatenated: torch.Tensor) -> torch.Tensor:
        if concatenated.shape[1] != self.feature_channels * self.n_homographies:
            raise ValueError(
                f"aggregator built for N={self.n_homographies}, C="
                f"{self.feature_channels}; got {concatenated.shape[1]} channels"
            )
        return self.net(concatenated)


class BaseDetector(nn.Module):
    """Plain backbone + head, no transformations: the stage-one detector."""

    def __init__(self, backbone_config: BackboneConfig, num_classes: int):
        super().__init__()
        self.backbone = Backbone(backbone_config)
        self.head = DetectionHead(backbone_config.out_channels, num_classes)
        self.num_classes = num_classes

    @property
    def stride(self) -> int:
        return self.backbone.config.stride

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images)

    def forward(self, images: torch.Tensor):
        return self.head(self.features(images))


class MultiWarpDetector(nn.Module):
    """The full warp / extract / unwarp / aggregate detector.

    ``aggregator`` may be an :class:`Aggregator` (fixed N) or the name of a
    built-in reducer ('mean' / 'max'), which accepts any set size.  The
    homography set lives in ``self.homographies`` as an (N, 4) parameter;
    gradients flow into it whenever the set is learnable.
    """

    def __init__(
        self,
        backbone_config: BackboneConfig,
        num_classes: int,
        homographies: HomographySet,
        aggregator: Aggregator | str = "mean",
    ):
        super().__init__()
        self.backbone = Backbone(backbone_config)
        self.head = DetectionHead(backbone_config.out_channels, num_classes)
        self.num_classes = num_classes
        if isinstance(aggregator, Aggregator):
            if aggregator.n_homographies != len(homographies):
                raise ValueError(
                    f"aggregator expects N={aggregator.n_homographies}, "
                    f"set has {len(homographies)}"
                )
            if aggregator.feature_channels != backbone_config.out_channels:
                raise ValueError("aggregator channel width does not match backbone")
        self.aggregator = aggregator if isinstance(aggregator, Aggregator) else None
        self.reducer = aggregator if isinstance(aggregator, str) else None
        if self.reducer is not None and self.reducer not in ("mean", "max"):
            raise ValueError(f"unknown reducer {self.reducer!r}")
        self.homographies = nn.Parameter(
            homographies.as_tensor(), requires_grad=homographies.learnable
        )

    @property
    def stride(self) -> int:
        return self.backbone.config.stride

    @property
    def n_homographies(self) -> int:
        return int(self.homographies.shape[0])

    def homography_set(self) -> HomographySet:
        return HomographySet.from_tensor(
            self.homographies, self.homographies.requires_grad
        )

    def feature_stack(
        self, images: torch.Tensor, homographies: torch.Tensor | None = None
    ) -> FeatureStack:
        """Run the N warp/extract/unwarp branches.

        ``homographies`` overrides the stored set (used when training the
        aggregator with freshly sampled sets each iteration).
        """
        params = self.homographies if homographies is None else homographies
        warped, _ = warp_stack(images, params)  # (N,B,3,H,W)
        n, b = warped.shape[0], warped.shape[1]
        feats = self.backbone(warped.reshape(n * b, *warped.shape[2:]))
        fh, fw = feats.shape[-2:]
        feats = feats.reshape(n, b, -1, fh, fw)

        # Trustworthiness of extracted features at feature resolution: the
        # warped image is only defined where the warp sampled in-view.
        src_valid = torch.stack(
            [warp_validity(params[i], fh, fw, device=feats.device) for i in range(n)]
        )
        feats = feats * src_valid.to(feats.dtype).reshape(n, 1, 1, fh, fw)

        # Unwarp features and the validity channel in one pass.
        inv = invert_params(params)
        flat = torch.cat(
            [feats, src_valid.to(feats.dtype).reshape(n, 1, 1, fh, fw).expand(n, b, 1, fh, fw)],
            dim=2,
        )
        unwarped_list = []
        unwarp_valid = []
        for i in range(n):
            data, valid = warp_stack(flat[i], inv[i : i + 1])
            unwarped_list.append(data[0])
            unwarp_valid.append(valid[0])
        unwarped = torch.stack(unwarped_list)  # (N,B,C+1,fh,fw)
        maps = unwarped[:, :, :-1]
        carried = unwarped[:, :, -1:] > 0.5
        valid = carried & torch.stack(unwarp_valid).reshape(n, 1, 1, fh, fw)
        return FeatureStack(maps=maps, valid=valid)

    def aggregate(self, stack: FeatureStack) -> torch.Tensor:
        if self.aggregator is not None:
            return self.aggregator(stack.concatenated)
        return reduce_stack(stack, self.reducer)

    def features(
        self, images: torch.Tensor, homographies: torch.Tensor | None = None
    ) -> torch.Tensor:
        return self.aggregate(self.feature_stack(images, homographies))

    def forward(self, images: torch.Tensor, homographies: torch.Tensor | None = None):
        return self.head(self.features(images, homographies))


CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    model: nn.Module,
    config: dict,
    step: int,
    extra: dict | None = None,
):
    """Serialize a detector (either kind) with its config snapshot."""
    record = {
        "version": CHECKPOINT_VERSION,
        "kind": type(model).__name__,
        "backbone": model.backbone.state_dict(),
        "head": model.head.state_dict(),
        "aggregator": None,
        "homographies": None,
        "reducer": None,
        "config": config,
        "step": step,
        "extra": extra or {},
    }
    if isinstance(model, MultiWarpDetector):
        record["homographies"] = model.homographies.detach().clone()
        record["reducer"] = model.reducer
        if model.aggregator is not None:
            record["aggregator"] = model.aggregator.state_dict()
    torch.save(record, path)


def load_checkpoint(path) -> dict:
    record = torch.load(path, weights_only=False)
    if record.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {record.get('version')}")
    return record


def model_from_checkpoint(record: dict) -> nn.Module:
    """Rebuild the saved detector from a checkpoint record.

    The checkpoint's config snapshot must carry ``backbone`` (BackboneConfig
    fields) and ``num_classes``.
    """
    cfg = record["config"]
    backbone_cfg = BackboneConfig(
        channels=tuple(cfg["backbone"]["channels"]),
        strides=tuple(cfg["backbone"]["strides"]),
    )
    num_classes = int(cfg["num_classes"])
    if record["kind"] == "BaseDetector":
        model = BaseDetector(backbone_cfg, num_classes)
    elif record["kind"] == "MultiWarpDetector":
        homs = HomographySet.from_tensor(record["homographies"])
        if record["aggregator"] is not None:
            agg = Aggregator(backbone_cfg.out_channels, len(homs))
            model = MultiWarpDetector(backbone_cfg, num_classes, homs, agg)
            model.aggregator.load_state_dict(record["aggregator"])
        else:
            model = MultiWarpDetector(
                backbone_cfg, num_classes, homs, record["reducer"] or "mean"
            )
    else:
        raise ValueError(f"unknown checkpoint kind {record['kind']!r}")
    model.backbone.load_state_dict(record["backbone"])
    model.head.load_state_dict(record["head"])
    return model
