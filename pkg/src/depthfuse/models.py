"""Trainable networks built from the layer kit: regional feature learning,
the two-stream RoI-pooled detector, and both segmentation schemes."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import TrainingError
from .fusion import (
    ConcatChannels,
    DepthRegressionLoss,
    RoIBox,
    RoIPool,
    SpatialSoftmaxLoss,
    UpscaleNearest,
    bbox_transform,
    bbox_transform_inv,
    detection_loss,
    detection_loss_grads,
)
from .evaluation import Detection, iou_matrix
from .netcore import (
    Conv2d,
    Dense,
    Flatten,
    MaxPool2d,
    ReLU,
    Sequential,
    Softmax,
    StepDecay,
    sgd_step,
)

DEPTH_STREAM_PLANS = {2: [128, 1], 3: [256, 128, 1], 5: [512, 512, 256, 128, 1]}


def depth_stream_channels(n, width_scale=1.0):
    """Channel plan of the depth processing stream for n in {2, 3, 5}.

    The documented full-scale plans taper 128->1, 256->128->1 and
    512->512->256->128->1; width_scale shrinks every non-final width for
    desk-scale runs while preserving the taper and the single-channel output.
    """
    if n not in DEPTH_STREAM_PLANS:
        raise ValueError(f"depth stream depth must be one of {sorted(DEPTH_STREAM_PLANS)}, got {n}")
    plan = DEPTH_STREAM_PLANS[n]
    return [max(1, int(round(c * width_scale))) for c in plan[:-1]] + [1]


def _rng_streams(seed, count):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def image_to_tensor(image):
    """(h, w, 3) float RGB -> (1, 3, h, w) network input."""
    return np.ascontiguousarray(np.asarray(image, dtype=np.float64).transpose(2, 0, 1)[None])


def encoded_depth_to_tensor(encoded):
    """EncodedDepthImage -> (1, 3, h, w) float input scaled to [0, 1]."""
    return np.ascontiguousarray(encoded.channels.astype(np.float64)[None] / 255.0)


def crop_resize(image, box, out_size):
    """Nearest-neighbour crop of an (h, w, 3) image to (out, out, 3)."""
    h, w = image.shape[:2]
    x1 = int(max(0, min(round(box[0]), w - 1)))
    y1 = int(max(0, min(round(box[1]), h - 1)))
    x2 = int(max(x1 + 1, min(round(box[2]), w)))
    y2 = int(max(y1 + 1, min(round(box[3]), h)))
    crop = image[y1:y2, x1:x2]
    ch, cw = crop.shape[:2]
    rows = (np.arange(out_size) * ch) // out_size
    cols = (np.arange(out_size) * cw) // out_size
    return crop[rows[:, None], cols[None, :]]


class PatchClassifier(BaseEstimator):
    """Regional feature learner: a small convnet trained to classify fixed-size
    patches into N+1 classes with the softmax log-loss; detection features are
    the penultimate fully-connected activations."""

    def __init__(self, num_classes, patch_size=24, conv_channels=(8, 16), feat_dim=32,
                 epochs=3, batch_size=32, lr=5e-3, weight_decay=5e-4, seed=0):
        self.num_classes = num_classes
        self.patch_size = patch_size
        self.conv_channels = conv_channels
        self.feat_dim = feat_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed

    def _build(self):
        rng_b, rng_h = _rng_streams(self.seed, 2)
        c1, c2 = self.conv_channels
        side = self.patch_size // 4
        self.backbone_ = Sequential(
            [
                Conv2d(3, c1, 3, rng=rng_b, name="pc_conv1"),
                ReLU(),
                MaxPool2d(2),
                Conv2d(c1, c2, 3, rng=rng_b, name="pc_conv2"),
                ReLU(),
                MaxPool2d(2),
                Flatten(),
                Dense(c2 * side * side, self.feat_dim, rng=rng_b, name="pc_fc1"),
                ReLU(),
            ]
        )
        self.head_ = Dense(self.feat_dim, self.num_classes + 1, rng=rng_h, name="pc_fc2")

    def fit(self, patches, labels):
        patches = np.asarray(patches, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        self._build()
        rng = np.random.default_rng(np.random.SeedSequence(self.seed).spawn(3)[2])
        loss = SpatialSoftmaxLoss(normalize=True)
        params = self.backbone_.params() + self.head_.params()
        self.history_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(patches))
            total = 0.0
            for start in range(0, len(order), self.batch_size):
                idx = order[start : start + self.batch_size]
                feats = self.backbone_.forward(patches[idx])
                logits = self.head_.forward(feats)
                value = loss.forward(logits[:, :, None, None], labels[idx][:, None, None])
                total += value * len(idx)
                dlogits = loss.backward()[:, :, 0, 0]
                self.backbone_.backward(self.head_.backward(dlogits))
                sgd_step(params, self.lr, self.weight_decay)
            self.history_.append(total / len(patches))
        return self

    def features(self, patches):
        if not hasattr(self, "backbone_"):
            raise NotFittedError("PatchClassifier is not fitted")
        return self.backbone_.forward(np.asarray(patches, dtype=np.float64))

    def predict_proba(self, patches):
        logits = self.head_.forward(self.features(patches))
        return Softmax(axis=1).forward(logits)


class FastRcnnDetector(BaseEstimator):
    """Two-stream detector: whole-image conv features per stream, per-RoI max
    pooling, channel concatenation, then joint classification + box-regression
    heads trained with the multi-task RoI loss."""

    def __init__(self, num_classes, streams=("rgb", "depth"), conv_channels=(8, 16),
                 pooled=3, fc_dim=48, lambda_det=1.0, epochs=10, lr=5e-3,
                 weight_decay=5e-4, lr_decay=0.4, lr_decay_every=5,
                 rois_per_image=32, fg_fraction=0.25, seed=0, score_min=0.05,
                 nms_threshold=0.3):
        self.num_classes = num_classes
        self.streams = tuple(streams)
        self.conv_channels = conv_channels
        self.pooled = pooled
        self.fc_dim = fc_dim
        self.lambda_det = lambda_det
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.rois_per_image = rois_per_image
        self.fg_fraction = fg_fraction
        self.seed = seed
        self.score_min = score_min
        self.nms_threshold = nms_threshold

    # stream feature maps sit at stride 2 (one 2x2 pool)
    STRIDE = 2

    def _build(self):
        rngs = _rng_streams(self.seed, len(self.streams) + 2)
        c1, c2 = self.conv_channels
        self.nets_ = {}
        for stream, rng in zip(self.streams, rngs):
            self.nets_[stream] = Sequential(
                [
                    Conv2d(3, c1, 3, rng=rng, name=f"{stream}_conv1"),
                    ReLU(),
                    MaxPool2d(2),
                    Conv2d(c1, c2, 3, rng=rng, name=f"{stream}_conv2"),
                    ReLU(),
                ]
            )
        self.pools_ = {stream: RoIPool(self.pooled, self.pooled) for stream in self.streams}
        self.concat_ = ConcatChannels(axis=1)
        in_dim = len(self.streams) * c2 * self.pooled * self.pooled
        rng_t, rng_h = rngs[-2], rngs[-1]
        self.trunk_ = Sequential([Dense(in_dim, self.fc_dim, rng=rng_t, name="frc_fc"), ReLU()])
        self.cls_head_ = Dense(self.fc_dim, self.num_classes + 1, rng=rng_h, name="frc_cls")
        self.box_head_ = Dense(self.fc_dim, 4 * self.num_classes, rng=rng_h, name="frc_box")
        self.softmax_ = Softmax(axis=1)

    def _params(self):
        out = []
        for stream in self.streams:
            out.extend(self.nets_[stream].params())
        out.extend(self.trunk_.params())
        out.extend(self.cls_head_.params())
        out.extend(self.box_head_.params())
        return out

    def _roi_cells(self, boxes):
        s = self.STRIDE
        rois = []
        for b in boxes:
            r = int(b[1] // s)
            c = int(b[0] // s)
            h = max(1, int(round((b[3] - b[1]) / s)))
            w = max(1, int(round((b[2] - b[0]) / s)))
            rois.append(RoIBox(r=r, c=c, h=h, w=w))
        return rois

    def _inputs(self, scene_rgb, depth_tensor):
        tensors = {}
        if "rgb" in self.streams:
            tensors["rgb"] = image_to_tensor(scene_rgb)
        if "depth" in self.streams:
            tensors["depth"] = depth_tensor
        return tensors

    def _forward(self, tensors, boxes):
        pooled = []
        rois = self._roi_cells(boxes)
        for stream in self.streams:
            fmap = self.nets_[stream].forward(tensors[stream])
            pooled.append(self.pools_[stream].forward(fmap, rois).reshape(len(boxes), -1))
        if len(pooled) == 2:
            feats = self.concat_.forward(pooled[0], pooled[1])
        else:
            feats = pooled[0]
        hidden = self.trunk_.forward(feats)
        logits = self.cls_head_.forward(hidden)
        probs = self.softmax_.forward(logits)
        deltas = self.box_head_.forward(hidden)
        return probs, deltas

    def _backward(self, dprobs, ddeltas):
        dlogits = self.softmax_.backward(dprobs)
        dhidden = self.cls_head_.backward(dlogits) + self.box_head_.backward(ddeltas)
        dfeats = self.trunk_.backward(dhidden)
        if len(self.streams) == 2:
            parts = self.concat_.backward(dfeats)
        else:
            parts = (dfeats,)
        for stream, dpart in zip(self.streams, parts):
            m = dpart.shape[0]
            dmap = self.pools_[stream].backward(
                dpart.reshape(m, -1, self.pooled, self.pooled)
            )
            self.nets_[stream].backward(dmap)

    def _sample_rois(self, boxes, gt_boxes, gt_classes, rng):
        n_take = min(self.rois_per_image, len(boxes))
        if len(gt_boxes):
            m = iou_matrix(boxes, gt_boxes)
            best = m.argmax(axis=1)
            best_iou = m[np.arange(len(boxes)), best]
        else:
            best = np.zeros(len(boxes), dtype=np.int64)
            best_iou = np.zeros(len(boxes))
        fg = np.flatnonzero(best_iou > 0.5)
        bg = np.flatnonzero(best_iou <= 0.5)
        n_fg = min(len(fg), max(1, int(round(n_take * self.fg_fraction)))) if len(fg) else 0
        pick_fg = rng.choice(fg, size=n_fg, replace=False) if n_fg else np.array([], dtype=np.int64)
        n_bg = min(len(bg), n_take - n_fg)
        pick_bg = rng.choice(bg, size=n_bg, replace=False) if n_bg else np.array([], dtype=np.int64)
        picks = np.concatenate([pick_fg, pick_bg]).astype(np.int64)
        labels = np.zeros(len(picks), dtype=np.int64)
        targets = np.zeros((len(picks), 4))
        for i, pi in enumerate(picks):
            if best_iou[pi] > 0.5:
                labels[i] = gt_classes[best[pi]]
                targets[i] = bbox_transform(boxes[pi], gt_boxes[best[pi]])
        return picks, labels, targets

    def fit(self, scenes, proposals_by_image, depth_tensors):
        """scenes: SyntheticScene list; proposals_by_image: image_id -> (n, 4)
        pixel boxes; depth_tensors: image_id -> (1, 3, h, w) encoded depth."""
        self._build()
        rng = np.random.default_rng(np.random.SeedSequence(self.seed).spawn(5)[4])
        params = self._params()
        schedule = StepDecay(self.lr, self.lr_decay, self.lr_decay_every)
        self.history_ = []
        k = self.num_classes
        for epoch in range(self.epochs):
            lr = schedule(epoch)
            order = rng.permutation(len(scenes))
            tot_cls = tot_loc = 0.0
            count = 0
            for si in order:
                scene = scenes[si]
                boxes = proposals_by_image[scene.image_id]
                if len(boxes) == 0:
                    continue
                gt_boxes = np.array([inst.box for inst in scene.instances]).reshape(-1, 4)
                gt_classes = np.array([inst.class_id for inst in scene.instances], dtype=np.int64)
                picks, labels, targets = self._sample_rois(boxes, gt_boxes, gt_classes, rng)
                tensors = self._inputs(scene.rgb, depth_tensors.get(scene.image_id))
                probs, deltas = self._forward(tensors, boxes[picks])
                m = len(picks)
                dprobs = np.zeros_like(probs)
                ddeltas = np.zeros_like(deltas)
                for i in range(m):
                    u = int(labels[i])
                    t_u = deltas[i, 4 * (u - 1) : 4 * u] if u >= 1 else None
                    bundle = detection_loss(probs[i], u, t_u, targets[i], self.lambda_det)
                    tot_cls += bundle.l_cls
                    tot_loc += bundle.l_loc
                    dp, dt = detection_loss_grads(probs[i], u, t_u, targets[i], self.lambda_det)
                    dprobs[i] = dp / m
                    if u >= 1:
                        ddeltas[i, 4 * (u - 1) : 4 * u] = dt / m
                self._backward(dprobs, ddeltas)
                sgd_step(params, lr, self.weight_decay)
                count += m
            mean_cls = tot_cls / max(count, 1)
            mean_loc = tot_loc / max(count, 1)
            self.history_.append(
                {"epoch": epoch, "l_cls": mean_cls, "l_loc": mean_loc,
                 "total": mean_cls + self.lambda_det * mean_loc}
            )
            if not np.isfinite(self.history_[-1]["total"]):
                raise TrainingError(f"detector loss diverged at epoch {epoch}")
        return self

    def predict(self, scene, boxes, depth_tensor):
        """Detections for one image: per-class scores, class-specific box
        refinement, then per-class NMS."""
        from .detector import nms

        if not hasattr(self, "nets_"):
            raise NotFittedError("FastRcnnDetector is not fitted")
        if len(boxes) == 0:
            return []
        tensors = self._inputs(scene.rgb, depth_tensor)
        probs, deltas = self._forward(tensors, boxes)
        out = []
        for cls in range(1, self.num_classes + 1):
            scores = probs[:, cls]
            keep = scores >= self.score_min
            if not keep.any():
                continue
            refined = bbox_transform_inv(boxes[keep], deltas[keep][:, 4 * (cls - 1) : 4 * cls])
            kept = nms(refined, scores[keep], self.nms_threshold)
            for i in kept:
                out.append(
                    Detection(image_id=scene.image_id, class_id=cls,
                              score=float(scores[keep][i]), box=refined[i])
                )
        return out


class _ConvStack:
    @staticmethod
    def build(channels, rng, name, final_relu=True):
        layers = []
        for i in range(len(channels) - 1):
            layers.append(Conv2d(channels[i], channels[i + 1], 3, rng=rng, name=f"{name}{i + 1}"))
            if final_relu or i < len(channels) - 2:
                layers.append(ReLU())
        return Sequential(layers)


class MultiTaskSegmenter(BaseEstimator):
    """Shared-trunk segmentation network with two sibling streams: semantic
    logits and a 1-channel depth regression map. Both are upscaled to the
    input size by nearest neighbour; the losses combine as color + lambda*depth
    and jointly update the trunk."""

    def __init__(self, num_classes, lambda_=1.0, depth_layers=2, width_scale=0.0625,
                 trunk_channels=(12, 12), color_channels=(16,), epochs=20, lr=5e-3,
                 weight_decay=5e-4, lr_decay=0.4, lr_decay_every=5, seed=0,
                 rgb_only=False, normalize_loss=False):
        self.num_classes = num_classes
        self.lambda_ = lambda_
        self.depth_layers = depth_layers
        self.width_scale = width_scale
        self.trunk_channels = trunk_channels
        self.color_channels = color_channels
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.seed = seed
        self.rgb_only = rgb_only
        self.normalize_loss = normalize_loss

    def _build(self):
        rng_t, rng_c, rng_d = _rng_streams(self.seed, 3)
        t1, t2 = self.trunk_channels
        self.trunk_ = Sequential(
            [
                Conv2d(3, t1, 3, rng=rng_t, name="seg_trunk1"),
                ReLU(),
                MaxPool2d(2),
                Conv2d(t1, t2, 3, rng=rng_t, name="seg_trunk2"),
                ReLU(),
            ]
        )
        self.color_ = _ConvStack.build(
            [t2, *self.color_channels, self.num_classes + 1], rng_c, "seg_color", final_relu=False
        )
        if not self.rgb_only:
            plan = depth_stream_channels(self.depth_layers, self.width_scale)
            self.depth_ = _ConvStack.build([t2, *plan], rng_d, "seg_depth", final_relu=False)
        else:
            self.depth_ = None

    def _params(self):
        out = self.trunk_.params() + self.color_.params()
        if self.depth_ is not None:
            out.extend(self.depth_.params())
        return out

    def _forward(self, tensor, out_h, out_w):
        feats = self.trunk_.forward(tensor)
        self._up_c = UpscaleNearest(out_h, out_w)
        logits = self._up_c.forward(self.color_.forward(feats))
        depth_map = None
        if self.depth_ is not None:
            self._up_d = UpscaleNearest(out_h, out_w)
            depth_map = self._up_d.forward(self.depth_.forward(feats))
        return logits, depth_map

    def fit(self, images, label_maps, depth_targets=None):
        """depth_targets: per-image (h, w) log-depth arrays (the estimator's
        output converted to log space); required unless rgb_only."""
        if not self.rgb_only and depth_targets is None:
            raise ValueError("multi-task training needs depth_targets (use rgb_only=True otherwise)")
        self._build()
        rng = np.random.default_rng(np.random.SeedSequence(self.seed).spawn(4)[3])
        params = self._params()
        schedule = StepDecay(self.lr, self.lr_decay, self.lr_decay_every)
        closs = SpatialSoftmaxLoss(normalize=self.normalize_loss)
        dloss = DepthRegressionLoss(normalize=self.normalize_loss)
        self.history_ = []
        for epoch in range(self.epochs):
            lr = schedule(epoch)
            order = rng.permutation(len(images))
            tot_c = tot_d = 0.0
            for i in order:
                h, w = np.asarray(images[i]).shape[:2]
                logits, depth_map = self._forward(image_to_tensor(images[i]), h, w)
                l_color = closs.forward(logits, np.asarray(label_maps[i])[None])
                tot_c += l_color
                dtrunk_color = self.color_.backward(self._up_c.backward(closs.backward()))
                if self.depth_ is not None:
                    l_depth = dloss.forward(depth_map, depth_targets[i])
                    tot_d += l_depth
                    ddepth = self.lambda_ * dloss.backward()
                    dtrunk_depth = self.depth_.backward(self._up_d.backward(ddepth))
                    self.trunk_.backward(dtrunk_color + dtrunk_depth)
                else:
                    self.trunk_.backward(dtrunk_color)
                sgd_step(params, lr, self.weight_decay)
            l_color_epoch = tot_c / len(images)
            l_depth_epoch = tot_d / len(images)
            self.history_.append(
                {"epoch": epoch, "l_color": l_color_epoch, "l_depth": l_depth_epoch,
                 "total": l_color_epoch + self.lambda_ * l_depth_epoch}
            )
        return self

    def predict(self, image):
        if not hasattr(self, "trunk_"):
            raise NotFittedError("MultiTaskSegmenter is not fitted")
        h, w = np.asarray(image).shape[:2]
        logits, _ = self._forward(image_to_tensor(image), h, w)
        return logits[0].argmax(axis=0)


class ConcatSegmenter(BaseEstimator):
    """Feature-concatenation segmentation: separate RGB and depth conv streams,
    channel concat at a selectable stage, shared head convs to N+1 logits."""

    FUSION_POINTS = ("pool5", "fc6", "fc7")

    def __init__(self, num_classes, fusion_point="fc6", stream_channels=(10, 12, 12),
                 head_channels=(16,), epochs=20, lr=5e-3, weight_decay=5e-4,
                 lr_decay=0.4, lr_decay_every=5, seed=0, normalize_loss=False):
        self.num_classes = num_classes
        self.fusion_point = fusion_point
        self.stream_channels = stream_channels
        self.head_channels = head_channels
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.seed = seed
        self.normalize_loss = normalize_loss

    def _build(self):
        if self.fusion_point not in self.FUSION_POINTS:
            raise ValueError(f"fusion_point must be one of {self.FUSION_POINTS}")
        depth_idx = self.FUSION_POINTS.index(self.fusion_point) + 1
        rng_r, rng_d, rng_h = _rng_streams(self.seed, 3)
        c = self.stream_channels

        def stream(rng, name):
            layers = [Conv2d(3, c[0], 3, rng=rng, name=f"{name}1"), ReLU(), MaxPool2d(2)]
            for i in range(1, depth_idx):
                layers += [Conv2d(c[i - 1], c[i], 3, rng=rng, name=f"{name}{i + 1}"), ReLU()]
            return Sequential(layers), c[depth_idx - 1]

        self.rgb_, width = stream(rng_r, "cat_rgb")
        self.depth_, _ = stream(rng_d, "cat_depth")
        self.concat_ = ConcatChannels(axis=1)
        self.head_ = _ConvStack.build(
            [2 * width, *self.head_channels, self.num_classes + 1], rng_h, "cat_head",
            final_relu=False,
        )

    def _params(self):
        return self.rgb_.params() + self.depth_.params() + self.head_.params()

    def _forward(self, rgb_tensor, depth_tensor, out_h, out_w):
        fa = self.rgb_.forward(rgb_tensor)
        fb = self.depth_.forward(depth_tensor)
        fused = self.concat_.forward(fa, fb)
        self._up = UpscaleNearest(out_h, out_w)
        return self._up.forward(self.head_.forward(fused))

    def fit(self, images, depth_tensors, label_maps):
        self._build()
        rng = np.random.default_rng(np.random.SeedSequence(self.seed).spawn(4)[3])
        params = self._params()
        schedule = StepDecay(self.lr, self.lr_decay, self.lr_decay_every)
        closs = SpatialSoftmaxLoss(normalize=self.normalize_loss)
        self.history_ = []
        for epoch in range(self.epochs):
            lr = schedule(epoch)
            order = rng.permutation(len(images))
            tot = 0.0
            for i in order:
                h, w = np.asarray(images[i]).shape[:2]
                logits = self._forward(image_to_tensor(images[i]), depth_tensors[i], h, w)
                tot += closs.forward(logits, np.asarray(label_maps[i])[None])
                dfused = self.head_.backward(self._up.backward(closs.backward()))
                da, db = self.concat_.backward(dfused)
                self.rgb_.backward(da)
                self.depth_.backward(db)
                sgd_step(params, lr, self.weight_decay)
            self.history_.append(
                {"epoch": epoch, "l_color": tot / len(images), "l_depth": 0.0,
                 "total": tot / len(images)}
            )
        return self

    def predict(self, image, depth_tensor):
        if not hasattr(self, "rgb_"):
            raise NotFittedError("ConcatSegmenter is not fitted")
        h, w = np.asarray(image).shape[:2]
        logits = self._forward(image_to_tensor(image), depth_tensor, h, w)
        return logits[0].argmax(axis=0)
