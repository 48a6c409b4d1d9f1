"""Two-stream fusion machinery: RoI max pooling, channel concatenation,
nearest-neighbour upscaling, and the detection/segmentation task losses."""

from dataclasses import dataclass

import numpy as np

from .errors import ConstraintError, DataError, ShapeError, UsageError
from .netcore import FeatureMap


@dataclass
class RoIBox:
    """Rectangular window on a feature map: top-left (r, c), extent (h, w),
    all in feature-map cells."""

    r: int
    c: int
    h: int
    w: int
    image_id: int = 0

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ShapeError(f"RoI extent must be >= 1, got h={self.h}, w={self.w}")

    def clamped(self, map_h, map_w):
        r = min(max(self.r, 0), map_h - 1)
        c = min(max(self.c, 0), map_w - 1)
        h = max(1, min(self.h, map_h - r))
        w = max(1, min(self.w, map_w - c))
        return RoIBox(r, c, h, w, self.image_id)


@dataclass
class BoxTarget:
    """Per-RoI supervision: class u (0 = background), regression target v, and
    the predicted per-class tuple t once the head has run."""

    u: int
    v: np.ndarray = None
    t: np.ndarray = None


@dataclass
class LossBundle:
    """Scalar task losses plus their advertised combination."""

    total: float
    lambda_: float
    l_color: float = None
    l_depth: float = None
    l_cls: float = None
    l_loc: float = None

    @classmethod
    def detection(cls, l_cls, l_loc, u, lambda_det):
        total = l_cls + (lambda_det * l_loc if u >= 1 else 0.0)
        return cls(total=total, lambda_=lambda_det, l_cls=l_cls, l_loc=l_loc)

    @classmethod
    def segmentation(cls, l_color, l_depth, lambda_):
        return cls(total=combined_seg_loss(l_color, l_depth, lambda_),
                   lambda_=lambda_, l_color=l_color, l_depth=l_depth)


def _bin_edges(extent, bins):
    # start=floor(i*extent/bins), end=ceil((i+1)*extent/bins); never empty.
    starts = (np.arange(bins) * extent) // bins
    ends = -((-(np.arange(1, bins + 1) * extent)) // bins)
    return starts.astype(np.int64), ends.astype(np.int64)


class RoIPool:
    """Max-pool each RoI into a fixed H x W grid.

    The RoI is split into H*W near-equal integer bins via the floor/ceil rule,
    which cannot produce an empty bin for h,w >= 1; the nearest-nonempty-cell
    expansion is therefore a documented no-op guard. Backward routes each
    output gradient to the argmax cell it came from.
    """

    def __init__(self, out_h, out_w):
        if out_h < 1 or out_w < 1:
            raise ValueError("pooled output extent must be >= 1")
        self.out_h = out_h
        self.out_w = out_w
        self._cache = None

    def forward(self, fm, rois):
        if not isinstance(fm, FeatureMap):
            fm = FeatureMap(np.asarray(fm, dtype=np.float64))
        n, c, mh, mw = fm.shape
        if n != 1:
            raise ShapeError("RoIPool expects a single-image feature map")
        rois = [roi.clamped(mh, mw) for roi in rois]
        out = np.zeros((len(rois), c, self.out_h, self.out_w))
        arg_rows = np.zeros((len(rois), c, self.out_h, self.out_w), dtype=np.int64)
        arg_cols = np.zeros_like(arg_rows)
        data = fm.data[0]
        for ri, roi in enumerate(rois):
            rs, re = _bin_edges(roi.h, self.out_h)
            cs, ce = _bin_edges(roi.w, self.out_w)
            for i in range(self.out_h):
                for j in range(self.out_w):
                    window = data[:, roi.r + rs[i] : roi.r + re[i], roi.c + cs[j] : roi.c + ce[j]]
                    flat = window.reshape(c, -1)
                    a = flat.argmax(axis=1)
                    out[ri, :, i, j] = flat[np.arange(c), a]
                    ww = ce[j] - cs[j]
                    arg_rows[ri, :, i, j] = roi.r + rs[i] + a // ww
                    arg_cols[ri, :, i, j] = roi.c + cs[j] + a % ww
        self._cache = (fm, arg_rows, arg_cols)
        return out

    def backward(self, dout):
        if self._cache is None:
            raise UsageError("RoIPool.backward called before forward")
        fm, arg_rows, arg_cols = self._cache
        dout = np.asarray(dout, dtype=np.float64)
        dmap = np.zeros_like(fm.data)
        nroi, c = arg_rows.shape[:2]
        cc = np.broadcast_to(np.arange(c)[None, :, None, None], arg_rows.shape)
        np.add.at(dmap[0], (cc, arg_rows, arg_cols), dout)
        fm.grad += dmap
        return dmap


class ConcatChannels:
    """Stack two feature blocks along the channel/feature axis; backward splits
    the upstream gradient with no mixing. No normalization is applied after
    concatenation."""

    def __init__(self, axis=1):
        self.axis = axis
        self._cache = None

    def forward(self, a, b):
        da = a.data if isinstance(a, FeatureMap) else np.asarray(a, dtype=np.float64)
        db = b.data if isinstance(b, FeatureMap) else np.asarray(b, dtype=np.float64)
        if da.ndim != db.ndim:
            raise ShapeError(f"rank mismatch: {da.shape} vs {db.shape}")
        for ax in range(da.ndim):
            if ax != self.axis % da.ndim and da.shape[ax] != db.shape[ax]:
                raise ShapeError(f"non-channel dims must agree: {da.shape} vs {db.shape}")
        self._cache = (a, b, da.shape[self.axis])
        return np.concatenate([da, db], axis=self.axis)

    def backward(self, dout):
        if self._cache is None:
            raise UsageError("ConcatChannels.backward called before forward")
        a, b, split = self._cache
        dout = np.asarray(dout, dtype=np.float64)
        da, db = np.split(dout, [split], axis=self.axis)
        if isinstance(a, FeatureMap):
            a.grad += da
        if isinstance(b, FeatureMap):
            b.grad += db
        return da, db


def concat_features(a, b, axis=1):
    """Functional concat (forward only); see ConcatChannels for the paired backward."""
    return ConcatChannels(axis=axis).forward(a, b)


class UpscaleNearest:
    """Nearest-neighbour upscaling to (target_h, target_w):
    output(i, j) = input(floor(i*sh/th), floor(j*sw/tw)). Backward sums each
    source cell's gradient over its replicas."""

    def __init__(self, target_h, target_w):
        self.th = int(target_h)
        self.tw = int(target_w)
        self._cache = None

    def forward(self, x):
        data = x.data if isinstance(x, FeatureMap) else np.asarray(x, dtype=np.float64)
        n, c, sh, sw = data.shape
        if self.th < sh or self.tw < sw:
            raise ValueError(
                f"target {self.th}x{self.tw} smaller than source {sh}x{sw}"
            )
        rows = (np.arange(self.th) * sh) // self.th
        cols = (np.arange(self.tw) * sw) // self.tw
        self._cache = (x, (n, c, sh, sw), rows, cols)
        return data[:, :, rows[:, None], cols[None, :]]

    def backward(self, dout):
        if self._cache is None:
            raise UsageError("UpscaleNearest.backward called before forward")
        x, (n, c, sh, sw), rows, cols = self._cache
        dout = np.asarray(dout, dtype=np.float64)
        dtmp = np.zeros((n, c, sh, self.tw))
        np.add.at(dtmp, (slice(None), slice(None), rows), dout)
        dx = np.zeros((n, c, sh, sw))
        np.add.at(dx, (slice(None), slice(None), slice(None), cols), dtmp)
        if isinstance(x, FeatureMap):
            x.grad += dx
        return dx


def upscale_nearest(x, target_h, target_w):
    return UpscaleNearest(target_h, target_w).forward(x)


def smooth_l1(x):
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise (elementwise)."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.where(np.abs(x) < 1.0, x, np.sign(x))
    return float(out) if out.ndim == 0 else out


def detection_loss(p, u, t_u, v, lambda_det=1.0):
    """Multi-task RoI loss: -log p_u plus, for non-background u, lambda times
    the smooth-L1 box regression loss over (x, y, w, h)."""
    p = np.asarray(p, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-6 or np.any(p < 0):
        raise ConstraintError(f"p must be a probability vector; sum={p.sum()!r}")
    u = int(u)
    if not 0 <= u < len(p):
        raise DataError(f"class {u} outside [0, {len(p) - 1}]")
    l_cls = -float(np.log(p[u]))
    l_loc = 0.0
    if u >= 1:
        t_u = np.asarray(t_u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        l_loc = float(np.sum(smooth_l1(t_u - v)))
    return LossBundle.detection(l_cls, l_loc, u, lambda_det)


def detection_loss_grads(p, u, t_u, v, lambda_det=1.0):
    """Gradients of detection_loss w.r.t. p and t_u."""
    p = np.asarray(p, dtype=np.float64)
    dp = np.zeros_like(p)
    dp[u] = -1.0 / p[u]
    dt = np.zeros(4)
    if u >= 1:
        dt = lambda_det * smooth_l1_grad(np.asarray(t_u, dtype=np.float64) - np.asarray(v, dtype=np.float64))
    return dp, dt


class SpatialSoftmaxLoss:
    """Pixelwise softmax log-loss summed over the map (and over the batch):
    L = -sum_{i,j} (M_ijc - log sum_k exp(M_ijk)). Log-sum-exp is max-shifted.
    With normalize=True the sum is divided by the number of labelled pixels."""

    def __init__(self, normalize=False):
        self.normalize = normalize
        self._cache = None

    def forward(self, logits, labels):
        data = logits.data if isinstance(logits, FeatureMap) else np.asarray(logits, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        labels = np.asarray(labels)
        if labels.ndim == 2:
            labels = labels[None]
        n, d, h, w = data.shape
        if labels.shape != (n, h, w):
            raise ShapeError(f"labels shape {labels.shape} vs logits {data.shape}")
        if labels.min() < 0 or labels.max() >= d:
            raise DataError(f"labels must lie in [0, {d - 1}]")
        shifted = data - data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))  # (n, h, w)
        picked = np.take_along_axis(shifted, labels[:, None], axis=1)[:, 0]
        per_pixel = lse - picked
        scale = 1.0 / (n * h * w) if self.normalize else 1.0
        self._cache = (logits, data, labels, scale)
        return float(per_pixel.sum() * scale)

    def backward(self):
        if self._cache is None:
            raise UsageError("SpatialSoftmaxLoss.backward called before forward")
        logits, data, labels, scale = self._cache
        shifted = data - data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        soft = e / e.sum(axis=1, keepdims=True)
        onehot = np.zeros_like(soft)
        np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
        grad = (soft - onehot) * scale
        if isinstance(logits, FeatureMap):
            logits.grad += grad
        return grad


def spatial_softmax_loss(logits, labels, normalize=False):
    return SpatialSoftmaxLoss(normalize=normalize).forward(logits, labels)


class DepthRegressionLoss:
    """Least-squares depth loss L = sum_{i,j} (F_ij - z_ij)^2 with gradient
    2 (F - z); computed densely on pixels, never on superpixels."""

    def __init__(self, normalize=False):
        self.normalize = normalize
        self._cache = None

    def forward(self, pred, target):
        data = pred.data if isinstance(pred, FeatureMap) else np.asarray(pred, dtype=np.float64)
        squeezed = data.reshape(data.shape[-2], data.shape[-1]) if data.ndim == 4 else data
        target = np.asarray(target, dtype=np.float64)
        if squeezed.shape != target.shape:
            raise ShapeError(f"prediction {squeezed.shape} vs target {target.shape}")
        diff = squeezed - target
        scale = 1.0 / diff.size if self.normalize else 1.0
        self._cache = (pred, data.shape if data.ndim == 4 else None, diff, scale)
        return float(np.sum(diff * diff) * scale)

    def backward(self):
        if self._cache is None:
            raise UsageError("DepthRegressionLoss.backward called before forward")
        pred, shape4, diff, scale = self._cache
        grad = 2.0 * diff * scale
        if shape4 is not None:
            grad = grad.reshape(shape4)
        if isinstance(pred, FeatureMap):
            pred.grad += grad
        return grad


def depth_regression_loss(pred, target, normalize=False):
    return DepthRegressionLoss(normalize=normalize).forward(pred, target)


def combined_seg_loss(l_color, l_depth, lambda_):
    """L = L_color + lambda * L_depth (exactly affine in lambda)."""
    if lambda_ < 0:
        raise ValueError(f"lambda must be non-negative, got {lambda_}")
    return float(l_color) + float(lambda_) * float(l_depth)


# ---------------------------------------------------------------------------
# Standard box regression parameterization used by the detection heads:
# t_x=(x-x_a)/w_a, t_y=(y-y_a)/h_a, t_w=log(w/w_a), t_h=log(h/h_a).
# ---------------------------------------------------------------------------


def _xyxy_to_cxcywh(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    cx = boxes[..., 0] + 0.5 * w
    cy = boxes[..., 1] + 0.5 * h
    return cx, cy, w, h


def bbox_transform(anchors, targets):
    """Regression targets v for target boxes relative to anchor boxes (xyxy)."""
    acx, acy, aw, ah = _xyxy_to_cxcywh(anchors)
    tcx, tcy, tw, th = _xyxy_to_cxcywh(targets)
    return np.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)], axis=-1
    )


def bbox_transform_inv(anchors, deltas):
    """Apply predicted deltas t to anchor boxes, returning refined xyxy boxes."""
    acx, acy, aw, ah = _xyxy_to_cxcywh(anchors)
    deltas = np.asarray(deltas, dtype=np.float64)
    cx = acx + deltas[..., 0] * aw
    cy = acy + deltas[..., 1] * ah
    w = aw * np.exp(deltas[..., 2])
    h = ah * np.exp(deltas[..., 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
