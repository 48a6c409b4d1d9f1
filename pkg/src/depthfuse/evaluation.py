"""Detection mAP under the strict IoU > 0.5 criterion and segmentation IoU."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class Detection:
    image_id: int
    class_id: int
    score: float
    box: np.ndarray  # (x1, y1, x2, y2)

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)


@dataclass
class GroundTruth:
    image_id: int
    class_id: int
    box: np.ndarray

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)


def iou(box_a, box_b):
    """Intersection over union of two (x1, y1, x2, y2) boxes, areas continuous."""
    ax1, ay1, ax2, ay2 = np.asarray(box_a, dtype=np.float64)
    bx1, by1, bx2, by2 = np.asarray(box_b, dtype=np.float64)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return float(inter / union)


def iou_matrix(boxes_a, boxes_b):
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.maximum(union, 1e-300), 0.0)


def _pr_points(detections, ground_truths, iou_threshold):
    """Greedy matching by descending score (ties by input order). A detection
    is a true positive when it matches a previously unmatched ground truth of
    its image with IoU strictly greater than the threshold; duplicates and
    IoU == threshold are false positives."""
    order = np.argsort(-np.array([d.score for d in detections]), kind="stable")
    gts_by_image = {}
    for gi, g in enumerate(ground_truths):
        gts_by_image.setdefault(g.image_id, []).append(gi)
    matched = np.zeros(len(ground_truths), dtype=bool)
    tp = np.zeros(len(order))
    for rank, di in enumerate(order):
        det = detections[di]
        best_iou, best_gi = 0.0, -1
        for gi in gts_by_image.get(det.image_id, []):
            if matched[gi]:
                continue
            v = iou(det.box, ground_truths[gi].box)
            if v > best_iou:
                best_iou, best_gi = v, gi
        if best_gi >= 0 and best_iou > iou_threshold:
            matched[best_gi] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / len(ground_truths)
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-300)
    return recall, precision


def average_precision(detections, ground_truths, iou_threshold=0.5, interpolation="all"):
    """AP for one class. interpolation='all' integrates the interpolated
    precision envelope over every recall change (VOC2010+ style);
    '11point' averages interpolated precision at recalls 0, 0.1, ..., 1.
    Returns None when there are no ground truths (AP undefined)."""
    if not ground_truths:
        return None
    if not detections:
        return 0.0
    recall, precision = _pr_points(detections, ground_truths, iou_threshold)
    if interpolation == "all":
        mrec = np.concatenate([[0.0], recall, [1.0]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        for i in range(len(mpre) - 2, -1, -1):
            mpre[i] = max(mpre[i], mpre[i + 1])
        idx = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    if interpolation == "11point":
        ap = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            sel = recall >= r
            ap += float(precision[sel].max()) if sel.any() else 0.0
        return ap / 11.0
    raise ValueError(f"unknown interpolation {interpolation!r}")


def mean_average_precision(detections, ground_truths, class_ids, iou_threshold=0.5,
                           interpolation="all"):
    """Per-class AP dict plus the mean over classes with defined AP."""
    per_class = {}
    for cls in class_ids:
        dets = [d for d in detections if d.class_id == cls]
        gts = [g for g in ground_truths if g.class_id == cls]
        per_class[cls] = average_precision(dets, gts, iou_threshold, interpolation)
    defined = [v for v in per_class.values() if v is not None]
    mAP = float(np.mean(defined)) if defined else None
    return per_class, mAP


IGNORE_LABEL = 255


def segmentation_iou(pred_labels, gt_labels, num_classes):
    """Per-class IoU = TP / (TP + FP + FN), ignoring gt pixels labelled 255.
    The mean runs over classes present in the ground truth or the prediction."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    keep = gt != IGNORE_LABEL
    pred = pred[keep]
    gt = gt[keep]
    per_class = {}
    present = []
    for cls in range(num_classes):
        p = pred == cls
        g = gt == cls
        tp = np.count_nonzero(p & g)
        fp = np.count_nonzero(p & ~g)
        fn = np.count_nonzero(~p & g)
        if tp + fp + fn == 0:
            per_class[cls] = None
            continue
        per_class[cls] = float(tp / (tp + fp + fn))
        present.append(per_class[cls])
    mean = float(np.mean(present)) if present else None
    return per_class, mean


@dataclass
class EvalReport:
    """Per-class metrics for one pipeline mode."""

    mode: str
    per_class_ap: dict = field(default_factory=dict)
    map_score: float = None
    per_class_iou: dict = field(default_factory=dict)
    mean_iou: float = None
