"""Experiment orchestration: configuration, the R-CNN / Fast-R-CNN detection
pipelines, both segmentation schemes, and the lambda x depth-stream sweep."""

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .crf import DcnfDepthEstimator
from .depth_io import encode_depth
from .detector import (
    LinearHingeSvm,
    assign_labels,
    hard_negative_mine,
    nms,
    write_detections,
)
from .errors import ParseError
from .evaluation import (
    Detection,
    EvalReport,
    GroundTruth,
    mean_average_precision,
    segmentation_iou,
)
from .models import (
    ConcatSegmenter,
    FastRcnnDetector,
    MultiTaskSegmenter,
    PatchClassifier,
    crop_resize,
    encoded_depth_to_tensor,
)
from .report import (
    pr_curve_points,
    svg_line_plot,
    write_detection_report,
    write_segmentation_report,
    write_sweep_table,
    write_telemetry,
)
from .synthetic import generate_proposals, generate_synthetic, load_dataset

SWEEP_LAMBDAS = (0.0, 0.1, 1.0, 10.0, 50.0)
SWEEP_DEPTHS = (2, 3, 5)


def max_threads():
    """Parallelism cap from DEPTHFUSE_THREADS (default 1 = sequential)."""
    raw = os.environ.get("DEPTHFUSE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        warnings.warn(f"ignoring non-integer DEPTHFUSE_THREADS={raw!r}")
        return 1


@dataclass
class ExperimentConfig:
    pipeline: str = "rcnn"  # rcnn | fast-rcnn | segment | sweep
    data_dir: str = ""  # empty -> generate a dataset in memory
    out_dir: str = "runs/out"
    num_images: int = 80
    num_classes: int = 2
    image_size: int = 48
    train_fraction: float = 0.7
    seed: int = 0
    scene_kind: str = ""  # default chosen per pipeline
    rgb_noise: float = 0.05
    # superpixels / depth estimation
    superpixels: int = 80
    gamma: float = 8.0
    segmentation_method: str = "slic"
    dcnf_epochs: int = 24
    dcnf_lr: float = 3e-4
    dcnf_lr_beta: float = 3e-5
    dcnf_lr_decay_every: int = 10
    depth_source: str = "estimated"  # estimated | gt (ceiling mode)
    # regional features and SVM detectors
    patch_size: int = 24
    feat_epochs: int = 4
    feat_lr: float = 3e-2
    svm_c: float = 0.001
    svm_bias: float = 10.0
    svm_pos_weight: float = 2.0
    nms_threshold: float = 0.3
    proposals_per_gt: int = 4
    random_proposals: int = 8
    # joint detector / segmentation training
    lambda_det: float = 1.0
    rois_per_image: int = 32
    fg_fraction: float = 0.25
    epochs: int = 10
    lr: float = 5e-3
    weight_decay: float = 5e-4
    lr_decay: float = 0.4
    lr_decay_every: int = 5
    scheme: str = "multitask"  # multitask | concat
    lambda_: float = 1.0
    depth_layers: int = 2
    width_scale: float = 0.0625
    fusion_point: str = "fc6"
    normalize_loss: bool = False
    svg_plots: bool = False

    def validate(self):
        if self.pipeline not in ("rcnn", "fast-rcnn", "segment", "sweep"):
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if self.depth_source not in ("estimated", "gt"):
            raise ValueError(f"depth_source must be estimated|gt, got {self.depth_source!r}")
        if self.scheme not in ("multitask", "concat"):
            raise ValueError(f"scheme must be multitask|concat, got {self.scheme!r}")
        if self.pipeline == "segment" and self.scheme == "concat" and self.lambda_ != 1.0:
            warnings.warn("lambda has no effect in the concat scheme; ignoring it")
        return self


def load_config(path):
    """Flat key=value config file (comments with '#')."""
    cfg = ExperimentConfig()
    with open(path, "r", encoding="ascii") as fh:
        pairs = []
        for ln, line in enumerate(fh):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"config line {ln + 1} is not key=value: {line!r}", offset=ln)
            key, value = line.split("=", 1)
            pairs.append((key.strip(), value.strip()))
    return apply_overrides(cfg, pairs)


def apply_overrides(cfg, pairs):
    """Apply (key, value-string) pairs with types taken from the dataclass."""
    by_name = {f.name: f for f in fields(ExperimentConfig)}
    updates = {}
    for key, value in pairs:
        key = key.replace("-", "_")
        if key not in by_name:
            raise ValueError(f"unknown config key {key!r}")
        kind = type(getattr(cfg, key))
        if kind is bool:
            updates[key] = value.lower() in ("1", "true", "yes", "on")
        elif kind is int:
            updates[key] = int(value)
        elif kind is float:
            updates[key] = float(value)
        else:
            updates[key] = value
    return replace(cfg, **updates)


# ---------------------------------------------------------------------------
# Shared plumbing.
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    train: list
    test: list
    num_classes: int
    proposals: dict  # image_id -> (n, 4) pixel boxes
    depth_maps: dict  # image_id -> DepthMap (per depth_source)
    depth_tensors: dict  # image_id -> (1, 3, h, w) encoded depth input
    dcnf: DcnfDepthEstimator = None


def _ground_truths(scenes):
    out = []
    for scene in scenes:
        for inst in scene.instances:
            out.append(GroundTruth(image_id=scene.image_id, class_id=inst.class_id, box=inst.box))
    return out


def prepare_data(cfg, kind):
    if cfg.data_dir:
        scenes, num_classes, _, proposals = load_dataset(cfg.data_dir)
    else:
        scenes = generate_synthetic(
            cfg.num_images, cfg.num_classes, cfg.seed,
            size=(cfg.image_size, cfg.image_size), kind=kind, rgb_noise=cfg.rgb_noise,
        )
        num_classes = cfg.num_classes
        proposals = None
    if proposals is None:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]).generate_state(1)[0])
        proposals = {s.image_id: generate_proposals(s, rng, cfg.proposals_per_gt,
                                                    cfg.random_proposals) for s in scenes}
    n_train = max(1, int(round(len(scenes) * cfg.train_fraction)))
    train, test = scenes[:n_train], scenes[n_train:]
    dcnf = None
    depth_maps = {}
    if cfg.depth_source == "gt":
        for s in scenes:
            depth_maps[s.image_id] = s.depth
    else:
        dcnf = DcnfDepthEstimator(
            n_superpixels=cfg.superpixels, gamma=cfg.gamma,
            segmentation=cfg.segmentation_method, epochs=cfg.dcnf_epochs,
            lr=cfg.dcnf_lr, lr_beta=cfg.dcnf_lr_beta, weight_decay=cfg.weight_decay,
            lr_decay_every=cfg.dcnf_lr_decay_every, seed=cfg.seed,
        )
        dcnf.fit([s.rgb for s in train], [s.depth for s in train])
        for s in scenes:
            depth_maps[s.image_id] = dcnf.predict(s.rgb)
    depth_tensors = {
        iid: encoded_depth_to_tensor(encode_depth(dm)) for iid, dm in depth_maps.items()
    }
    return PreparedData(train=train, test=test, num_classes=num_classes,
                        proposals=proposals, depth_maps=depth_maps,
                        depth_tensors=depth_tensors, dcnf=dcnf)


def _encoded_image(depth_tensor):
    # (1, 3, h, w) float -> (h, w, 3) image for patch cropping
    return np.ascontiguousarray(depth_tensor[0].transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# RGB-D R-CNN: patch feature nets -> concatenated features -> per-class SVMs
# with hard negative mining -> NMS -> mAP.
# ---------------------------------------------------------------------------


def _patch_sets(cfg, data, scenes):
    """Per image: boxes = proposals then ground truths; patches per stream."""
    sets = {}
    for scene in scenes:
        iid = scene.image_id
        gt_boxes = np.array([inst.box for inst in scene.instances]).reshape(-1, 4)
        gt_classes = np.array([inst.class_id for inst in scene.instances], dtype=np.int64)
        prop = data.proposals[iid]
        boxes = np.concatenate([prop, gt_boxes]) if len(gt_boxes) else prop
        fine = assign_labels(prop, gt_boxes, gt_classes, mode="finetune")
        labels = np.concatenate([fine, gt_classes]).astype(np.int64)
        depth_img = _encoded_image(data.depth_tensors[iid])
        rgb_patches = np.stack(
            [crop_resize(scene.rgb, b, cfg.patch_size).transpose(2, 0, 1) for b in boxes]
        )
        depth_patches = np.stack(
            [crop_resize(depth_img, b, cfg.patch_size).transpose(2, 0, 1) for b in boxes]
        )
        sets[iid] = {
            "boxes": boxes, "labels": labels, "n_proposals": len(prop),
            "gt_boxes": gt_boxes, "gt_classes": gt_classes,
            "rgb": rgb_patches, "depth": depth_patches,
        }
    return sets


def _train_feature_net(cfg, sets, scenes, stream, seed_tag):
    patches = np.concatenate([sets[s.image_id][stream] for s in scenes])
    labels = np.concatenate([sets[s.image_id]["labels"] for s in scenes])
    net = PatchClassifier(
        num_classes=int(max(sets[s.image_id]["gt_classes"].max(initial=0) for s in scenes)),
        patch_size=cfg.patch_size, epochs=cfg.feat_epochs, lr=cfg.feat_lr,
        weight_decay=cfg.weight_decay, seed=cfg.seed + seed_tag,
    )
    net.fit(patches, labels)
    return net


def _svm_training_features(sets, scenes, feats, num_classes):
    """Per class: positives are the ground-truth boxes (appended after the
    proposals in each image's box list), negatives the proposals with IoU < 0.3
    against every ground truth of the class."""
    pos = {c: [] for c in range(1, num_classes + 1)}
    neg = {c: [] for c in range(1, num_classes + 1)}
    for scene in scenes:
        entry = sets[scene.image_id]
        svm_labels = assign_labels(entry["boxes"], entry["gt_boxes"], entry["gt_classes"],
                                   mode="svm", num_classes=num_classes)
        f = feats[scene.image_id]
        for c in range(1, num_classes + 1):
            col = svm_labels[:, c - 1]
            if (col == 1).any():
                pos[c].append(f[col == 1])
            neg_sel = np.flatnonzero(col[: entry["n_proposals"]] == -1)
            if len(neg_sel):
                neg[c].append(f[neg_sel])
    stack = lambda parts, dim: np.concatenate(parts) if parts else np.zeros((0, dim))
    dim = next(iter(feats.values())).shape[1]
    return ({c: stack(pos[c], dim) for c in pos}, {c: stack(neg[c], dim) for c in neg})


def _train_class_svms(cfg, pos, neg, num_classes, seed):
    def _one(c):
        svm = LinearHingeSvm(C=cfg.svm_c, bias_scale=cfg.svm_bias,
                             pos_weight=cfg.svm_pos_weight)
        model, report = hard_negative_mine(
            svm, pos[c], neg[c], initial=min(200, len(neg[c])),
            rng=np.random.default_rng(np.random.SeedSequence([seed, c]).generate_state(1)[0]),
        )
        return model, report

    classes = list(range(1, num_classes + 1))
    threads = max_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_one, classes))
    else:
        results = [_one(c) for c in classes]
    return dict(zip(classes, results))


def _score_detections(cfg, sets, scenes, feats, svms):
    detections = []
    for scene in scenes:
        iid = scene.image_id
        entry = sets[iid]
        n = entry["n_proposals"]
        boxes = entry["boxes"][:n]
        if n == 0:
            continue
        f = feats[iid][:n]
        for cls, (model, _) in svms.items():
            scores = model.decision_function(f)
            keep = nms(boxes, scores, cfg.nms_threshold)
            for i in keep:
                detections.append(Detection(image_id=iid, class_id=cls,
                                            score=float(scores[i]), box=boxes[i]))
    return detections


def run_rcnn_pipeline(cfg):
    """Multi-stage detection: DCNF depth -> encoding -> two patch feature nets
    -> per-class SVMs with mining. Emits RGB-only, depth-only, and RGB-D rows
    (labels mention ground-truth depth when ceiling mode is on)."""
    cfg.validate()
    data = prepare_data(cfg, kind=cfg.scene_kind or "detection")
    sets = {}
    sets.update(_patch_sets(cfg, data, data.train))
    sets.update(_patch_sets(cfg, data, data.test))
    rgb_net = _train_feature_net(cfg, sets, data.train, "rgb", seed_tag=1)
    depth_net = _train_feature_net(cfg, sets, data.train, "depth", seed_tag=2)
    all_scenes = data.train + data.test
    feats = {"rgb": {}, "depth": {}}
    for scene in all_scenes:
        iid = scene.image_id
        feats["rgb"][iid] = rgb_net.features(sets[iid]["rgb"])
        feats["depth"][iid] = depth_net.features(sets[iid]["depth"])
    feats["rgbd"] = {
        iid: np.concatenate([feats["rgb"][iid], feats["depth"][iid]], axis=1)
        for iid in feats["rgb"]
    }
    suffix = "(gt)" if cfg.depth_source == "gt" else "(estimated)"
    mode_labels = {"rgb": "rgb", "depth": f"depth {suffix}", "rgbd": f"rgb-d {suffix}"}
    gts = _ground_truths(data.test)
    class_ids = list(range(1, data.num_classes + 1))
    reports = []
    detections_by_mode = {}
    for mode in ("rgb", "depth", "rgbd"):
        pos, neg = _svm_training_features(sets, data.train, feats[mode], data.num_classes)
        svms = _train_class_svms(cfg, pos, neg, data.num_classes, seed=cfg.seed)
        dets = _score_detections(cfg, sets, data.test, feats[mode], svms)
        per_class, map_score = mean_average_precision(dets, gts, class_ids)
        reports.append(EvalReport(mode=mode_labels[mode], per_class_ap=per_class,
                                  map_score=map_score))
        detections_by_mode[mode] = dets
    _emit_detection_outputs(cfg, reports, detections_by_mode, gts, class_ids)
    return reports


def _emit_detection_outputs(cfg, reports, detections_by_mode, gts, class_ids):
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_detection_report(os.path.join(cfg.out_dir, "report.md"),
                           os.path.join(cfg.out_dir, "report.csv"), reports, class_ids)
    for mode, dets in detections_by_mode.items():
        write_detections(os.path.join(cfg.out_dir, f"detections_{mode}.csv"), dets)
    if cfg.svg_plots:
        for mode, dets in detections_by_mode.items():
            series = {}
            for cls in class_ids:
                pts = pr_curve_points([d for d in dets if d.class_id == cls],
                                      [g for g in gts if g.class_id == cls])
                if pts:
                    series[f"class{cls}"] = pts
            svg_line_plot(os.path.join(cfg.out_dir, f"pr_{mode}.svg"), series,
                          f"precision-recall ({mode})", "recall", "precision")


def run_fast_rcnn_pipeline(cfg):
    """Joint two-stream detector with RoI pooling and the multi-task loss;
    emits RGB-only, depth-only, and RGB-D rows like the R-CNN pipeline."""
    cfg.validate()
    data = prepare_data(cfg, kind=cfg.scene_kind or "detection")
    gts = _ground_truths(data.test)
    class_ids = list(range(1, data.num_classes + 1))
    suffix = "(gt)" if cfg.depth_source == "gt" else "(estimated)"
    stream_sets = {"rgb": ("rgb",), "depth": ("depth",), "rgbd": ("rgb", "depth")}
    mode_labels = {"rgb": "rgb", "depth": f"depth {suffix}", "rgbd": f"rgb-d {suffix}"}
    reports = []
    detections_by_mode = {}
    histories = {}
    for mode, streams in stream_sets.items():
        det = FastRcnnDetector(
            num_classes=data.num_classes, streams=streams, lambda_det=cfg.lambda_det,
            epochs=cfg.epochs, lr=cfg.lr, weight_decay=cfg.weight_decay,
            lr_decay=cfg.lr_decay, lr_decay_every=cfg.lr_decay_every,
            rois_per_image=cfg.rois_per_image, fg_fraction=cfg.fg_fraction,
            seed=cfg.seed, nms_threshold=cfg.nms_threshold,
        )
        det.fit(data.train, data.proposals, data.depth_tensors)
        dets = []
        for scene in data.test:
            dets.extend(det.predict(scene, data.proposals[scene.image_id],
                                    data.depth_tensors[scene.image_id]))
        per_class, map_score = mean_average_precision(dets, gts, class_ids)
        reports.append(EvalReport(mode=mode_labels[mode], per_class_ap=per_class,
                                  map_score=map_score))
        detections_by_mode[mode] = dets
        histories[mode] = det.history_
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_telemetry(os.path.join(cfg.out_dir, "telemetry.csv"), histories["rgbd"],
                    ["epoch", "l_cls", "l_loc", "total"])
    _emit_detection_outputs(cfg, reports, detections_by_mode, gts, class_ids)
    if cfg.svg_plots:
        series = {m: [(h["epoch"], h["total"]) for h in hist] for m, hist in histories.items()}
        svg_line_plot(os.path.join(cfg.out_dir, "loss_curve.svg"), series,
                      "training loss", "epoch", "loss")
    return reports


# ---------------------------------------------------------------------------
# Segmentation pipelines.
# ---------------------------------------------------------------------------


def _log_depth_targets(data, scenes):
    return {s.image_id: np.log(data.depth_maps[s.image_id].values) for s in scenes}


def _segmentation_eval(model, scenes, num_classes, depth_tensors=None):
    per_class_sums = {}
    preds, gts = [], []
    for scene in scenes:
        if depth_tensors is None:
            pred = model.predict(scene.rgb)
        else:
            pred = model.predict(scene.rgb, depth_tensors[scene.image_id])
        preds.append(pred)
        gts.append(scene.label_map)
    pred_all = np.concatenate([p.ravel() for p in preds])
    gt_all = np.concatenate([g.ravel() for g in gts])
    return segmentation_iou(pred_all, gt_all, num_classes + 1)


def run_segmentation_pipeline(cfg, scheme=None):
    """Train one segmentation network (multitask or concat scheme) and report
    IoU on the held-out images, with an RGB-only baseline row."""
    cfg.validate()
    scheme = scheme or cfg.scheme
    data = prepare_data(cfg, kind=cfg.scene_kind or "segmentation")
    train_images = [s.rgb for s in data.train]
    train_labels = [s.label_map for s in data.train]
    reports = []
    histories = {}
    if scheme == "multitask":
        targets = _log_depth_targets(data, data.train)
        target_list = [targets[s.image_id] for s in data.train]
        model = MultiTaskSegmenter(
            num_classes=data.num_classes, lambda_=cfg.lambda_, depth_layers=cfg.depth_layers,
            width_scale=cfg.width_scale, epochs=cfg.epochs, lr=cfg.lr,
            weight_decay=cfg.weight_decay, lr_decay=cfg.lr_decay,
            lr_decay_every=cfg.lr_decay_every, seed=cfg.seed,
            normalize_loss=cfg.normalize_loss,
        )
        model.fit(train_images, train_labels, target_list)
        per_class, mean_iou = _segmentation_eval(model, data.test, data.num_classes)
        reports.append(EvalReport(mode=f"rgb-d multitask (lambda={cfg.lambda_:g}, n={cfg.depth_layers})",
                                  per_class_iou=per_class, mean_iou=mean_iou))
        histories["multitask"] = model.history_
        baseline = MultiTaskSegmenter(
            num_classes=data.num_classes, lambda_=0.0, rgb_only=True,
            epochs=cfg.epochs, lr=cfg.lr, weight_decay=cfg.weight_decay,
            lr_decay=cfg.lr_decay, lr_decay_every=cfg.lr_decay_every, seed=cfg.seed,
            normalize_loss=cfg.normalize_loss,
        )
        baseline.fit(train_images, train_labels)
        per_class_b, mean_b = _segmentation_eval(baseline, data.test, data.num_classes)
        reports.append(EvalReport(mode="rgb", per_class_iou=per_class_b, mean_iou=mean_b))
        histories["rgb"] = baseline.history_
    else:
        model = ConcatSegmenter(
            num_classes=data.num_classes, fusion_point=cfg.fusion_point,
            epochs=cfg.epochs, lr=cfg.lr, weight_decay=cfg.weight_decay,
            lr_decay=cfg.lr_decay, lr_decay_every=cfg.lr_decay_every, seed=cfg.seed,
            normalize_loss=cfg.normalize_loss,
        )
        train_tensors = [data.depth_tensors[s.image_id] for s in data.train]
        model.fit(train_images, train_tensors, train_labels)
        per_class, mean_iou = _segmentation_eval(model, data.test, data.num_classes,
                                                 data.depth_tensors)
        reports.append(EvalReport(mode=f"rgb-d concat ({cfg.fusion_point})",
                                  per_class_iou=per_class, mean_iou=mean_iou))
        histories["concat"] = model.history_
    os.makedirs(cfg.out_dir, exist_ok=True)
    first = next(iter(histories.values()))
    write_telemetry(os.path.join(cfg.out_dir, "telemetry.csv"), first,
                    ["epoch", "l_color", "l_depth", "total"])
    write_segmentation_report(os.path.join(cfg.out_dir, "report.md"),
                              os.path.join(cfg.out_dir, "report.csv"),
                              reports, data.num_classes)
    if cfg.svg_plots:
        series = {m: [(h["epoch"], h["total"]) for h in hist] for m, hist in histories.items()}
        svg_line_plot(os.path.join(cfg.out_dir, "loss_curve.svg"), series,
                      "training loss", "epoch", "loss")
    return reports


def run_sweep(cfg, lambdas=SWEEP_LAMBDAS, depths=SWEEP_DEPTHS):
    """Mean IoU over the multitask lambda x depth-stream-depth grid; lambda=0
    collapses to the RGB-only baseline and is evaluated once."""
    cfg.validate()
    data = prepare_data(cfg, kind=cfg.scene_kind or "segmentation")
    train_images = [s.rgb for s in data.train]
    train_labels = [s.label_map for s in data.train]
    targets = _log_depth_targets(data, data.train)
    target_list = [targets[s.image_id] for s in data.train]
    grid = {}
    rgb_iou = None
    for n in depths:
        for lam in lambdas:
            if lam == 0.0:
                if rgb_iou is None:
                    baseline = MultiTaskSegmenter(
                        num_classes=data.num_classes, lambda_=0.0, rgb_only=True,
                        epochs=cfg.epochs, lr=cfg.lr, weight_decay=cfg.weight_decay,
                        seed=cfg.seed, normalize_loss=cfg.normalize_loss,
                    )
                    baseline.fit(train_images, train_labels)
                    _, rgb_iou = _segmentation_eval(baseline, data.test, data.num_classes)
                grid[(n, lam)] = rgb_iou
                continue
            model = MultiTaskSegmenter(
                num_classes=data.num_classes, lambda_=lam, depth_layers=n,
                width_scale=cfg.width_scale, epochs=cfg.epochs, lr=cfg.lr,
                weight_decay=cfg.weight_decay, seed=cfg.seed,
                normalize_loss=cfg.normalize_loss,
            )
            model.fit(train_images, train_labels, target_list)
            _, mean_iou = _segmentation_eval(model, data.test, data.num_classes)
            grid[(n, lam)] = mean_iou
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_sweep_table(os.path.join(cfg.out_dir, "sweep.md"),
                      os.path.join(cfg.out_dir, "sweep.csv"), grid, lambdas, depths)
    return grid
