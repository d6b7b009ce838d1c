"""AP@0.5 evaluation with all-point interpolated precision-recall curves.

Matching is greedy in descending score: a prediction is a true positive if
its IoU with an unmatched same-class truth box exceeds 0.5; each truth box
is matched at most once, so duplicates count once as TP and the rest as FP.
Classes with zero truth instances are excluded from the mean.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .detector import Detection, iou

IOU_THRESHOLD = 0.5


@dataclasses.dataclass
class EvalReport:
    ap50: dict  # class_id -> AP (classes with truths only)
    mean_ap50: float
    pr_curves: dict  # class_id -> (recalls, precisions) arrays
    tp: dict
    fp: dict
    fn: dict
    config: dict

    def to_dict(self) -> dict:
        return {
            "ap50": {str(k): v for k, v in self.ap50.items()},
            "mean_ap50": self.mean_ap50,
            "tp": {str(k): v for k, v in self.tp.items()},
            "fp": {str(k): v for k, v in self.fp.items()},
            "fn": {str(k): v for k, v in self.fn.items()},
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _average_precision(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """Area under the all-point interpolated PR curve."""
    r = np.concatenate([[0.0], recalls, [1.0]])
    p = np.concatenate([[0.0], precisions, [0.0]])
    # precision envelope: best precision at any recall >= r
    for k in range(len(p) - 2, -1, -1):
        p[k] = max(p[k], p[k + 1])
    steps = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def ap50(
    predictions,
    truths,
    iou_threshold: float = IOU_THRESHOLD,
) -> EvalReport:
    """Compute per-class and mean AP@0.5.

    Parameters
    ----------
    predictions : sequence of per-image Detection lists
    truths : sequence of per-image (boxes (M,4) array, classes (M,) array)
        Boxes use (x_min, y_min, x_max, y_max) pixel coordinates.
    """
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths must align image-by-image")
    class_ids = set()
    for boxes, classes in truths:
        class_ids.update(int(c) for c in np.asarray(classes).reshape(-1))
    for dets in predictions:
        class_ids.update(d.class_id for d in dets)

    per_class_ap = {}
    pr_curves = {}
    tp_count, fp_count, fn_count = {}, {}, {}
    for cid in sorted(class_ids):
        truth_boxes = []
        for img_idx, (boxes, classes) in enumerate(truths):
            classes = np.asarray(classes).reshape(-1)
            boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
            for b, c in zip(boxes, classes):
                if int(c) == cid:
                    truth_boxes.append((img_idx, tuple(b), [False]))
        n_truth = len(truth_boxes)
        dets = []
        for img_idx, img_dets in enumerate(predictions):
            for d in img_dets:
                if d.class_id == cid:
                    dets.append((img_idx, d))
        # deterministic order: score desc, then image and box for ties
        dets.sort(key=lambda t: (-t[1].score, t[0], t[1].box))
        tp = np.zeros(len(dets))
        fp = np.zeros(len(dets))
        for k, (img_idx, det) in enumerate(dets):
            best, best_iou = None, iou_threshold
            for entry in truth_boxes:
                if entry[0] != img_idx or entry[2][0]:
                    continue
                overlap = iou(det.box, entry[1])
                if overlap > best_iou:
                    best, best_iou = entry, overlap
            if best is not None:
                best[2][0] = True
                tp[k] = 1
            else:
                fp[k] = 1
        tp_cum = np.cumsum(tp)
        fp_cum = np.cumsum(fp)
        tp_count[cid] = int(tp_cum[-1]) if len(dets) else 0
        fp_count[cid] = int(fp_cum[-1]) if len(dets) else 0
        fn_count[cid] = n_truth - tp_count[cid]
        if n_truth == 0:
            # no truth instances: excluded from the mean (see module docs)
            pr_curves[cid] = (np.zeros(0), np.zeros(0))
            continue
        recalls = tp_cum / n_truth
        precisions = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
        pr_curves[cid] = (recalls, precisions)
        per_class_ap[cid] = _average_precision(recalls, precisions)

    mean = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    return EvalReport(
        ap50=per_class_ap,
        mean_ap50=mean,
        pr_curves=pr_curves,
        tp=tp_count,
        fp=fp_count,
        fn=fn_count,
        config={"iou_threshold": iou_threshold},
    )
