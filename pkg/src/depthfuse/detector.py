"""Region-based detector training: proposal labeling, per-class linear SVMs
with hard negative mining, non-maximum suppression, and detection file I/O.

The SVM is the L2-regularized L1-hinge problem

    min_w  0.5 ||w||^2 + C * sum_i c_i * max(0, 1 - y_i w.(x_i, B))

with the bias handled by augmenting every feature vector with the constant B,
and c_i = w1 * sample_weight_i for positives, sample_weight_i for negatives.
It is solved to near-exact optimality by deterministic cyclic dual coordinate
descent on the box-constrained QP dual.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import CapacityError, ParseError, TrainingError
from .evaluation import Detection, iou_matrix


@dataclass
class Proposal:
    image_id: int
    box: np.ndarray  # (x1, y1, x2, y2) in pixels
    feature: np.ndarray = None

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)


FINETUNE_POSITIVE_IOU = 0.5  # > 0.5 counts as the proposal's class
SVM_NEGATIVE_IOU = 0.3  # < 0.3 against every ground truth of the class


def assign_labels(proposal_boxes, gt_boxes, gt_classes, mode, num_classes=None):
    """Label proposals for detector training.

    mode='finetune': a proposal takes the class of its best-overlapping ground
    truth when IoU > 0.5, else background (0). Returns an (n,) int array.

    mode='svm': per-class +1/-1/0 matrix of shape (n, num_classes): a box that
    coincides with a class-c ground-truth box is +1 for c, a box whose IoU
    with every class-c ground truth is < 0.3 is -1, anything else is 0
    (ignored). Positives normally enter training as the ground-truth boxes
    appended to the proposal list.
    """
    proposal_boxes = np.asarray(proposal_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    if mode == "finetune":
        labels = np.zeros(len(proposal_boxes), dtype=np.int64)
        if len(gt_boxes):
            m = iou_matrix(proposal_boxes, gt_boxes)
            best = m.argmax(axis=1)
            best_iou = m[np.arange(len(proposal_boxes)), best]
            hit = best_iou > FINETUNE_POSITIVE_IOU
            labels[hit] = gt_classes[best[hit]]
        return labels
    if mode == "svm":
        if num_classes is None:
            num_classes = int(gt_classes.max()) if len(gt_classes) else 0
        out = np.zeros((len(proposal_boxes), num_classes), dtype=np.int64)
        m = iou_matrix(proposal_boxes, gt_boxes) if len(gt_boxes) else None
        for cls in range(1, num_classes + 1):
            sel = gt_classes == cls
            if m is None or not sel.any():
                out[:, cls - 1] = -1
                continue
            max_iou = m[:, sel].max(axis=1)
            out[max_iou < SVM_NEGATIVE_IOU, cls - 1] = -1
            exact = np.zeros(len(proposal_boxes), dtype=bool)
            for g in gt_boxes[sel]:
                exact |= np.all(np.abs(proposal_boxes - g) < 1e-9, axis=1)
            out[exact, cls - 1] = 1
        return out
    raise ValueError(f"unknown labeling mode {mode!r}")


def svm_objective(w, X, y, C, pos_weight=2.0, bias_scale=10.0, sample_weight=None):
    """Primal objective at augmented weight vector w (last entry is the bias slot)."""
    Xa = np.concatenate([X, np.full((len(X), 1), bias_scale)], axis=1)
    margins = 1.0 - y * (Xa @ w)
    hinge = np.maximum(margins, 0.0)
    costs = np.where(y > 0, pos_weight, 1.0)
    if sample_weight is not None:
        costs = costs * np.asarray(sample_weight, dtype=np.float64)
    return 0.5 * float(w @ w) + C * float(np.sum(costs * hinge))


class LinearHingeSvm(BaseEstimator):
    """Binary linear SVM via deterministic cyclic dual coordinate descent.

    Parameters mirror the reference solver usage: C is the trade-off, B the
    bias augmentation value, and pos_weight the extra cost on positive hinge
    terms. Labels must be in {-1, +1}.
    """

    def __init__(self, C=0.001, bias_scale=10.0, pos_weight=2.0, tol=1e-12, max_sweeps=4000):
        self.C = C
        self.bias_scale = bias_scale
        self.pos_weight = pos_weight
        self.tol = tol
        self.max_sweeps = max_sweeps

    def fit(self, X, y, sample_weight=None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if set(np.unique(y)) - {-1.0, 1.0}:
            raise ValueError("labels must be -1/+1")
        if not (np.any(y > 0) and np.any(y < 0)):
            raise TrainingError("SVM training needs at least one positive and one negative")
        Xa = np.concatenate([X, np.full((len(X), 1), float(self.bias_scale))], axis=1)
        cap = np.where(y > 0, self.C * self.pos_weight, self.C)
        if sample_weight is not None:
            cap = cap * np.asarray(sample_weight, dtype=np.float64)
        qdiag = np.einsum("ij,ij->i", Xa, Xa)
        alpha = np.zeros(len(Xa))
        w = np.zeros(Xa.shape[1])
        for sweep in range(self.max_sweeps):
            worst = 0.0
            for i in range(len(Xa)):
                g = y[i] * (Xa[i] @ w) - 1.0
                # projected gradient for the box constraint 0 <= alpha_i <= cap_i
                if alpha[i] <= 0.0:
                    pg = min(g, 0.0)
                elif alpha[i] >= cap[i]:
                    pg = max(g, 0.0)
                else:
                    pg = g
                if pg != 0.0:
                    worst = max(worst, abs(pg))
                    new = min(max(alpha[i] - g / qdiag[i], 0.0), cap[i])
                    w += (new - alpha[i]) * y[i] * Xa[i]
                    alpha[i] = new
            if worst < self.tol:
                break
        self.w_ = w
        self.alpha_ = alpha
        self.n_sweeps_ = sweep + 1
        self.objective_ = svm_objective(
            w, X, y, self.C, self.pos_weight, self.bias_scale, sample_weight
        )
        return self

    @property
    def coef_(self):
        return self.w_[:-1]

    @property
    def intercept_(self):
        return self.w_[-1] * self.bias_scale

    def decision_function(self, X):
        if not hasattr(self, "w_"):
            raise NotFittedError("LinearHingeSvm is not fitted")
        X = np.asarray(X, dtype=np.float64)
        return X @ self.coef_ + self.intercept_

    def predict(self, X):
        return np.where(self.decision_function(X) >= 0.0, 1, -1)


@dataclass
class MiningReport:
    passes: int
    working_size: int
    max_outside_score: float
    certificate_ok: bool
    history: list = field(default_factory=list)


def hard_negative_mine(svm: LinearHingeSvm, X_pos, X_neg, initial=200,
                       margin_eps=1e-3, round_cap=5000, max_working=100000,
                       rng=None):
    """Train with standard hard negative mining.

    Start from a subsample of negatives, then repeatedly score all negatives,
    add margin violators (decision > -1 + margin_eps) to the working set
    (at most round_cap per round) and retrain, until no new violators exist.
    Returns (fitted svm, MiningReport) with the margin certificate over the
    negatives left outside the working set.
    """
    X_pos = np.asarray(X_pos, dtype=np.float64)
    X_neg = np.asarray(X_neg, dtype=np.float64)
    rng = rng or np.random.default_rng(0)
    if len(X_neg) <= initial:
        working = np.arange(len(X_neg))
    else:
        working = np.sort(rng.choice(len(X_neg), size=initial, replace=False))
    in_set = np.zeros(len(X_neg), dtype=bool)
    in_set[working] = True
    report = MiningReport(0, 0, -np.inf, False)

    def _fit():
        X = np.concatenate([X_pos, X_neg[in_set]])
        y = np.concatenate([np.ones(len(X_pos)), -np.ones(int(in_set.sum()))])
        svm.fit(X, y)

    _fit()
    for _ in range(100):
        report.passes += 1
        scores = svm.decision_function(X_neg)
        violators = (scores > -1.0 + margin_eps) & ~in_set
        report.history.append(int(violators.sum()))
        if not violators.any():
            break
        idx = np.flatnonzero(violators)
        if len(idx) > round_cap:
            order = np.argsort(-scores[idx], kind="stable")
            idx = idx[order[:round_cap]]
        if in_set.sum() + len(idx) > max_working:
            raise CapacityError(
                f"mining working set would exceed {max_working} negatives; "
                "raise max_working or shrink the negative pool"
            )
        in_set[idx] = True
        _fit()
    outside = ~in_set
    report.working_size = int(in_set.sum())
    report.max_outside_score = float(svm.decision_function(X_neg[outside]).max()) if outside.any() else -np.inf
    report.certificate_ok = report.max_outside_score <= -1.0 + margin_eps
    return svm, report


def nms(boxes, scores, iou_threshold=0.3):
    """Greedy non-maximum suppression; returns kept indices in score order
    (ties broken by input order). A box is suppressed when its IoU with an
    already-kept box exceeds the threshold."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if iou_matrix(boxes[i : i + 1], boxes[j : j + 1])[0, 0] > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(int(i))
    return kept


# ---------------------------------------------------------------------------
# File formats: detections CSV and the per-class SVM model file.
# ---------------------------------------------------------------------------


def write_detections(path, detections):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("image_id,class,score,x1,y1,x2,y2\n")
        for d in detections:
            b = d.box
            fh.write(f"{d.image_id},{d.class_id},{d.score!r},{b[0]!r},{b[1]!r},{b[2]!r},{b[3]!r}\n")


def read_detections(path):
    out = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != "image_id,class,score,x1,y1,x2,y2":
            raise ParseError(f"bad detections header {header!r}", offset=0)
        for line in fh:
            line = line.strip()
            if not line:
                continue
            img, cls, score, x1, y1, x2, y2 = line.split(",")
            out.append(
                Detection(
                    image_id=int(img), class_id=int(cls), score=float(score),
                    box=np.array([float(x1), float(y1), float(x2), float(y2)]),
                )
            )
    return out


def save_svm_models(path, models, class_ids):
    """Text header (hyperparameters, one line per class) + binary float64
    little-endian weight vectors in header order."""
    models = list(models)
    with open(path, "wb") as fh:
        first = models[0]
        fh.write(
            f"svmdetector classes {len(models)} dim {len(first.w_)} "
            f"C {first.C!r} B {first.bias_scale!r} w1 {first.pos_weight!r}\n".encode("ascii")
        )
        for cid in class_ids:
            fh.write(f"class {cid}\n".encode("ascii"))
        for m in models:
            fh.write(np.ascontiguousarray(m.w_, dtype="<f8").tobytes())


def load_svm_models(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"\n")
    head = blob[:end].decode("ascii").split()
    if head[0] != "svmdetector":
        raise ParseError("bad SVM model magic", offset=0)
    n_classes = int(head[2])
    dim = int(head[4])
    c, b, w1 = float(head[6]), float(head[8]), float(head[10])
    cursor = end + 1
    class_ids = []
    for _ in range(n_classes):
        end = blob.find(b"\n", cursor)
        parts = blob[cursor:end].decode("ascii").split()
        if parts[0] != "class":
            raise ParseError("expected class line", offset=cursor)
        class_ids.append(int(parts[1]))
        cursor = end + 1
    models = []
    for _ in range(n_classes):
        w = np.frombuffer(blob[cursor : cursor + dim * 8], dtype="<f8").astype(np.float64)
        if len(w) != dim:
            raise ParseError("truncated SVM weights", offset=cursor)
        m = LinearHingeSvm(C=c, bias_scale=b, pos_weight=w1)
        m.w_ = w
        models.append(m)
        cursor += dim * 8
    return models, class_ids
