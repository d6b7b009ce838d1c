"""Three-stage training: source-only base, aggregator, mean-teacher adaptation.

Stage one trains the plain detector on labeled source images with random
crop and flip augmentation.  Stage two bolts on the aggregator and trains
only it, sampling a fresh random homography set every iteration with the
base network frozen.  Stage three learns the transformations (and optionally
everything) with a mean teacher: the teacher is an exponential moving
average of the student, generates pseudo-labels on clean target images, and
the student minimizes source loss plus a down-weighted target
classification loss on jittered inputs.

Transform parameters are optimized with Adam, network parameters with SGD
with momentum.  Every stage is bit-reproducible from its config seed.
"""

from __future__ import annotations

import copy
import dataclasses

import numpy as np
import torch
import torch.nn.functional as F

from .detector import BackboneConfig, detect, detection_loss
from .evaluation import EvalReport, ap50
from .geometry import HomographyParams
from .multiwarp import Aggregator, BaseDetector, HomographySet, MultiWarpDetector
from .synthbench import DomainSample


class ConfigError(ValueError):
    """Invalid training configuration."""


@dataclasses.dataclass
class TrainingConfig:
    """Everything the three stages need; see the spec of each field's stage."""

    # mean-teacher core
    tau: float = 0.6
    lam: float = 0.1
    alpha: float = 0.99
    n_homographies: int = 5
    scale_range: tuple = (0.5, 2.0)
    persp_range: tuple = (-0.5, 0.5)
    # optimizers
    lr_transform: float = 2e-2
    lr_network: float = 1e-2
    lr_aggregator: float = 1e-2
    momentum: float = 0.9
    # per-stage budgets
    base_steps: int = 1500
    aggregator_steps: int = 700
    adapt_steps: int = 1200
    warmup_steps: int = 400
    # batching
    base_batch: int = 8
    adapt_batch: int = 2  # per domain: 2 source + 2 target images
    # augmentation
    crop_scale: tuple = (0.7, 1.0)
    flip: bool = True
    jitter_strength: float = 0.15
    # adaptation mode
    mode: str = "full"  # full | transforms_only
    init_transforms: str = "random"  # random | identity
    model_kind: str = "multiwarp"  # multiwarp | plain (mean-teacher baseline)
    scale_clamp: tuple = (0.1, 10.0)
    # detection / evaluation
    nms_iou: float = 0.5
    eval_tau: float = 0.05
    eval_every: int = 300
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.lam < 0.0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode not in ("full", "transforms_only"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.init_transforms not in ("random", "identity"):
            raise ConfigError(f"unknown transform init {self.init_transforms!r}")
        if self.model_kind not in ("multiwarp", "plain"):
            raise ConfigError(f"unknown model kind {self.model_kind!r}")
        if self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ConfigError(f"invalid scale range {self.scale_range}")
        if self.n_homographies < 1:
            raise ConfigError("need at least one homography")


def sample_homography_set(n, scale_range, persp_range, rng) -> HomographySet:
    """Draw n independent homographies, each parameter uniform in its range."""
    params = [
        HomographyParams(
            float(rng.uniform(*scale_range)),
            float(rng.uniform(*scale_range)),
            float(rng.uniform(*persp_range)),
            float(rng.uniform(*persp_range)),
        )
        for _ in range(n)
    ]
    return HomographySet(params)


# ---------------------------------------------------------------------------
# data plumbing and augmentation


def to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1)


def _boxes_tensor(sample: DomainSample):
    if sample.boxes is None:
        return torch.zeros(0, 4), torch.zeros(0, dtype=torch.long)
    return (
        torch.from_numpy(np.asarray(sample.boxes, dtype=np.float32)),
        torch.from_numpy(np.asarray(sample.classes, dtype=np.int64)),
    )


def random_flip(img, boxes, rng):
    if rng.random() < 0.5:
        w = img.shape[-1]
        img = torch.flip(img, dims=[-1])
        if boxes.numel():
            boxes = boxes.clone()
            boxes[:, [0, 2]] = w - boxes[:, [2, 0]]
    return img, boxes


def random_crop(img, boxes, classes, rng, crop_scale, min_side=4.0):
    """Crop a random sub-window and resize back to the original extent."""
    h, w = img.shape[-2:]
    s = rng.uniform(*crop_scale)
    ch, cw = max(8, round(h * s)), max(8, round(w * s))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    patch = img[..., y0 : y0 + ch, x0 : x0 + cw]
    out = F.interpolate(
        patch.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False
    )[0]
    if boxes.numel():
        sx, sy = w / cw, h / ch
        boxes = boxes.clone()
        boxes[:, [0, 2]] = (boxes[:, [0, 2]] - x0) * sx
        boxes[:, [1, 3]] = (boxes[:, [1, 3]] - y0) * sy
        boxes[:, [0, 2]] = boxes[:, [0, 2]].clamp(0, w)
        boxes[:, [1, 3]] = boxes[:, [1, 3]].clamp(0, h)
        keep = (boxes[:, 2] - boxes[:, 0] >= min_side) & (
            boxes[:, 3] - boxes[:, 1] >= min_side
        )
        boxes, classes = boxes[keep], classes[keep]
    return out, boxes, classes


def color_jitter(img, rng, strength):
    """Photometric jitter: global gain/bias plus mild per-channel gains."""
    if strength <= 0:
        return img
    gain = float(rng.uniform(1 - strength, 1 + strength))
    bias = float(rng.uniform(-0.1 * strength, 0.1 * strength))
    cgain = torch.tensor(
        rng.uniform(1 - 0.5 * strength, 1 + 0.5 * strength, size=3),
        dtype=img.dtype,
    ).reshape(3, 1, 1)
    return (img * gain * cgain + bias).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# mean-teacher machinery


@dataclasses.dataclass
class TeacherStudentState:
    """Paired student/teacher models plus the EMA coefficient."""

    student: torch.nn.Module
    teacher: torch.nn.Module
    alpha: float
    step: int = 0
    warmup_steps: int = 0

    def ema_update(self):
        ema_update(self.teacher, self.student, self.alpha)


def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, alpha: float):
    """teacher <- alpha * teacher + (1 - alpha) * student, parameter-wise.

    Floating-point buffers (batch-norm running statistics) follow the same
    rule; integer buffers are copied from the student.  The student is never
    touched and the teacher never requires gradients.
    """
    with torch.no_grad():
        t_state = dict(teacher.state_dict())
        s_state = dict(student.state_dict())
        if t_state.keys() != s_state.keys():
            raise ValueError("teacher/student parameter shapes do not match")
        for name, t_val in t_state.items():
            s_val = s_state[name]
            if t_val.shape != s_val.shape:
                raise ValueError(f"shape mismatch for {name}")
            if t_val.dtype.is_floating_point:
                # spelled exactly like the update rule so the convex
                # combination is bitwise-checkable
                t_val.copy_(alpha * t_val + (1.0 - alpha) * s_val)
            else:
                t_val.copy_(s_val)


@dataclasses.dataclass
class PseudoLabelBatch:
    """Teacher detections promoted to training targets."""

    boxes: list  # per-image (M, 4) tensors
    classes: list  # per-image (M,) tensors
    scores: list  # per-image (M,) tensors; kept for analysis, unused by Eq-style loss
    teacher_step: int
    tau: float


def generate_pseudo_labels(
    teacher: torch.nn.Module,
    images: torch.Tensor,
    tau: float,
    nms_iou: float,
    teacher_step: int = 0,
) -> PseudoLabelBatch:
    """Run the teacher in evaluation mode, one image at a time.

    Per-image inference makes the labels trivially independent of batch
    composition.  Empty label lists are valid.
    """
    was_training = teacher.training
    teacher.eval()
    boxes_all, classes_all, scores_all = [], [], []
    h, w = images.shape[-2:]
    with torch.no_grad():
        for img in images:
            cls_logits, reg = teacher(img.unsqueeze(0))
            dets = detect(
                cls_logits[0],
                reg[0],
                teacher.stride,
                tau,
                nms_iou,
                image_size=(w, h),
            )
            boxes_all.append(
                torch.tensor([d.box for d in dets], dtype=torch.float32).reshape(-1, 4)
            )
            classes_all.append(torch.tensor([d.class_id for d in dets], dtype=torch.long))
            scores_all.append(torch.tensor([d.score for d in dets]))
    if was_training:
        teacher.train()
    return PseudoLabelBatch(boxes_all, classes_all, scores_all, teacher_step, tau)


def evaluate_detector(model, samples, eval_tau=0.05, nms_iou=0.5) -> EvalReport:
    """AP@0.5 of a detector over labeled samples (any split with boxes)."""
    was_training = model.training
    model.eval()
    preds, truths = [], []
    with torch.no_grad():
        for s in samples:
            img = to_tensor(s.image).unsqueeze(0)
            cls_logits, reg = model(img)
            h, w = s.image.shape[:2]
            preds.append(
                detect(cls_logits[0], reg[0], model.stride, eval_tau, nms_iou, (w, h))
            )
            truths.append(
                (s.boxes if s.boxes is not None else np.zeros((0, 4)),
                 s.classes if s.classes is not None else np.zeros(0, dtype=int))
            )
    if was_training:
        model.train()
    return ap50(preds, truths)


# ---------------------------------------------------------------------------
# stage 1: source-only base detector


def train_base(
    source_train,
    num_classes: int,
    config: TrainingConfig,
    backbone: BackboneConfig = BackboneConfig(),
    source_val=None,
):
    """Train backbone + head on labeled source data.

    Returns (model, trace).  The trace carries per-step losses and, when a
    validation split is given, the final source AP@0.5.
    """
    if not source_train:
        raise ValueError("source training set is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng([config.seed, 1])
    model = BaseDetector(backbone, num_classes)
    model.train()
    opt = torch.optim.SGD(
        model.parameters(), lr=config.lr_network, momentum=config.momentum
    )
    drop_at = max(1, int(config.base_steps * 0.8))
    images = [to_tensor(s.image) for s in source_train]
    labels = [_boxes_tensor(s) for s in source_train]
    h, w = source_train[0].image.shape[:2]
    trace = []
    for step in range(config.base_steps):
        if step == drop_at:
            for g in opt.param_groups:
                g["lr"] *= 0.1
        idx = rng.integers(0, len(images), size=config.base_batch)
        batch_imgs, batch_targets = [], []
        for i in idx:
            img, boxes, classes = images[i], *labels[i]
            img, boxes, classes = random_crop(img, boxes, classes, rng, config.crop_scale)
            if config.flip:
                img, boxes = random_flip(img, boxes, rng)
            batch_imgs.append(img)
            batch_targets.append((boxes, classes))
        batch = torch.stack(batch_imgs)
        cls_logits, reg = model(batch)
        loss = detection_loss(
            cls_logits, reg, batch_targets, "source", model.stride, (h, w)
        )
        opt.zero_grad()
        loss.total.backward()
        opt.step()
        trace.append(
            {
                "step": step,
                "loss_src_cls": float(loss.cls.detach()),
                "loss_src_reg": float(loss.reg.detach()),
            }
        )
    result = {"trace": trace}
    if source_val is not None:
        report = evaluate_detector(model, source_val, config.eval_tau, config.nms_iou)
        result["source_val_ap50"] = report.mean_ap50
    return model, result


# ---------------------------------------------------------------------------
# stage 2: aggregator with random homography sets


def train_aggregator(
    base_model: BaseDetector,
    source_train,
    num_classes: int,
    config: TrainingConfig,
):
    """Attach and train the aggregator; backbone and head stay frozen.

    A fresh homography set is sampled every iteration so the aggregator
    learns to fuse arbitrary members of the sampling ranges.
    """
    if not source_train:
        raise ValueError("source training set is empty")
    torch.manual_seed(config.seed + 1)
    rng = np.random.default_rng([config.seed, 2])
    backbone_cfg = base_model.backbone.config
    model = MultiWarpDetector(
        backbone_cfg,
        num_classes,
        HomographySet.identities(config.n_homographies, learnable=False),
        Aggregator(backbone_cfg.out_channels, config.n_homographies),
    )
    model.backbone.load_state_dict(base_model.backbone.state_dict())
    model.head.load_state_dict(base_model.head.state_dict())
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    for p in model.head.parameters():
        p.requires_grad_(False)
    # frozen parts run in eval mode so their normalization stats stay put
    model.backbone.eval()
    model.head.eval()
    model.aggregator.train()

    opt = torch.optim.SGD(
        model.aggregator.parameters(), lr=config.lr_aggregator, momentum=config.momentum
    )
    images = [to_tensor(s.image) for s in source_train]
    labels = [_boxes_tensor(s) for s in source_train]
    h, w = source_train[0].image.shape[:2]
    trace = []
    for step in range(config.aggregator_steps):
        homs = sample_homography_set(
            config.n_homographies, config.scale_range, config.persp_range, rng
        ).as_tensor()
        idx = rng.integers(0, len(images), size=config.adapt_batch * 2)
        batch_imgs, batch_targets = [], []
        for i in idx:
            img, boxes, classes = images[i], *labels[i]
            if config.flip:
                img, boxes = random_flip(img, boxes, rng)
            batch_imgs.append(img)
            batch_targets.append((boxes, classes))
        batch = torch.stack(batch_imgs)
        cls_logits, reg = model(batch, homographies=homs)
        loss = detection_loss(
            cls_logits, reg, batch_targets, "source", model.stride, (h, w)
        )
        opt.zero_grad()
        loss.total.backward()
        opt.step()
        trace.append(
            {
                "step": step,
                "loss_src_cls": float(loss.cls.detach()),
                "loss_src_reg": float(loss.reg.detach()),
            }
        )
    return model, {"trace": trace}


def aggregator_source_loss(model, samples, homography_sets, config: TrainingConfig):
    """Mean source loss of a multi-warp model over fixed random sets.

    Deterministic diagnostic used to verify aggregator training helps.
    """
    model_training = model.training
    model.eval()
    h, w = samples[0].image.shape[:2]
    total = 0.0
    with torch.no_grad():
        for k, s in enumerate(samples):
            homs = homography_sets[k % len(homography_sets)].as_tensor()
            img = to_tensor(s.image).unsqueeze(0)
            boxes, classes = _boxes_tensor(s)
            cls_logits, reg = model(img, homographies=homs)
            loss = detection_loss(
                cls_logits, reg, [(boxes, classes)], "source", model.stride, (h, w)
            )
            total += float(loss.total)
    if model_training:
        model.train()
    return total / len(samples)


# ---------------------------------------------------------------------------
# stage 3: mean-teacher adaptation


def _build_student(base_or_agg_model, config: TrainingConfig, rng):
    """Student init: copy trained weights, attach the (learnable) transforms."""
    if config.model_kind == "plain":
        student = copy.deepcopy(base_or_agg_model)
        if not isinstance(student, BaseDetector):
            raise ConfigError("plain adaptation expects a BaseDetector checkpoint")
        return student
    if not isinstance(base_or_agg_model, MultiWarpDetector):
        raise ConfigError("multiwarp adaptation expects an aggregator checkpoint")
    if config.init_transforms == "identity":
        hs = HomographySet.identities(config.n_homographies)
    else:
        hs = sample_homography_set(
            config.n_homographies, config.scale_range, config.persp_range, rng
        )
    backbone_cfg = base_or_agg_model.backbone.config
    student = MultiWarpDetector(
        backbone_cfg,
        base_or_agg_model.num_classes,
        hs,
        Aggregator(backbone_cfg.out_channels, config.n_homographies),
    )
    student.backbone.load_state_dict(base_or_agg_model.backbone.state_dict())
    student.head.load_state_dict(base_or_agg_model.head.state_dict())
    student.aggregator.load_state_dict(base_or_agg_model.aggregator.state_dict())
    return student


def _set_network_phase(student, train_network: bool):
    """Train/eval flags for the network parts; the transform tensor is exempt."""
    student.backbone.train(train_network)
    student.head.train(train_network)
    if getattr(student, "aggregator", None) is not None:
        student.aggregator.train(train_network)


def adapt(
    base_or_agg_model,
    source_train,
    target_train,
    num_classes: int,
    config: TrainingConfig,
    target_val=None,
):
    """Mean-teacher adaptation; returns (state, trace).

    ``state`` is a TeacherStudentState; the trace is a list of per-step
    records {step, loss_src_cls, loss_src_reg, loss_tgt_cls, lambda, tau,
    T_st, n_pseudo, target_AP?} suitable for line-delimited serialization.
    """
    if not source_train or not target_train:
        raise ValueError("both source and target training sets must be non-empty")
    torch.manual_seed(config.seed + 2)
    rng = np.random.default_rng([config.seed, 3])
    student = _build_student(base_or_agg_model, config, rng)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    state = TeacherStudentState(
        student=student,
        teacher=teacher,
        alpha=config.alpha,
        warmup_steps=config.warmup_steps if config.model_kind == "multiwarp" else 0,
    )

    is_multiwarp = isinstance(student, MultiWarpDetector)
    opt_transform = (
        torch.optim.Adam([student.homographies], lr=config.lr_transform)
        if is_multiwarp
        else None
    )
    network_params = [
        p
        for name, p in student.named_parameters()
        if name != "homographies"
    ]
    opt_network = torch.optim.SGD(
        network_params, lr=config.lr_network, momentum=config.momentum
    )

    src_images = [to_tensor(s.image) for s in source_train]
    src_labels = [_boxes_tensor(s) for s in source_train]
    tgt_images = [to_tensor(s.image) for s in target_train]
    h, w = source_train[0].image.shape[:2]
    trace = []

    for step in range(config.adapt_steps):
        in_warmup = step < state.warmup_steps
        train_network = config.mode == "full" and not in_warmup
        if config.model_kind == "plain":
            train_network = True
        _set_network_phase(student, train_network)

        src_idx = rng.integers(0, len(src_images), size=config.adapt_batch)
        tgt_idx = rng.integers(0, len(tgt_images), size=config.adapt_batch)

        clean_tgt = torch.stack([tgt_images[i] for i in tgt_idx])
        pseudo = generate_pseudo_labels(
            state.teacher, clean_tgt, config.tau, config.nms_iou, teacher_step=step
        )

        src_batch = torch.stack(
            [
                color_jitter(src_images[i], rng, config.jitter_strength)
                for i in src_idx
            ]
        )
        tgt_batch = torch.stack(
            [color_jitter(img, rng, config.jitter_strength) for img in clean_tgt]
        )
        src_targets = [src_labels[i] for i in src_idx]

        cls_s, reg_s = student(src_batch)
        loss_src = detection_loss(
            cls_s, reg_s, src_targets, "source", student.stride, (h, w)
        )
        if config.lam > 0:
            cls_t, reg_t = student(tgt_batch)
            loss_tgt = detection_loss(
                cls_t,
                reg_t,
                list(zip(pseudo.boxes, pseudo.classes)),
                "target",
                student.stride,
                (h, w),
            )
            total = loss_src.total + config.lam * loss_tgt.total
            loss_tgt_cls = float(loss_tgt.cls.detach())
        else:
            total = loss_src.total
            loss_tgt_cls = 0.0

        if opt_transform is not None:
            opt_transform.zero_grad()
        opt_network.zero_grad()
        total.backward()
        if opt_transform is not None:
            opt_transform.step()
            with torch.no_grad():
                student.homographies[:, :2].clamp_(*config.scale_clamp)
        if train_network:
            opt_network.step()

        state.step = step + 1
        state.ema_update()

        record = {
            "step": step,
            "loss_src_cls": float(loss_src.cls.detach()),
            "loss_src_reg": float(loss_src.reg.detach()),
            "loss_tgt_cls": loss_tgt_cls,
            "lambda": config.lam,
            "tau": config.tau,
            "T_st": student.homographies.detach().tolist() if is_multiwarp else None,
            "n_pseudo": int(sum(len(b) for b in pseudo.boxes)),
        }
        if (
            target_val is not None
            and config.eval_every > 0
            and (step + 1) % config.eval_every == 0
        ):
            report = evaluate_detector(
                student, target_val, config.eval_tau, config.nms_iou
            )
            record["target_AP"] = report.mean_ap50
            _set_network_phase(student, train_network)
        trace.append(record)

    return state, trace
