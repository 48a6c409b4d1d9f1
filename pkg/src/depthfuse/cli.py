"""Command-line entry point: dataset generation, depth-estimator training and
prediction, the three fusion pipelines, evaluation, and the sweep."""

import argparse
import sys

import numpy as np

from .crf import DcnfDepthEstimator
from .depth_io import load_ppm, save_depth_pgm
from .detector import read_detections
from .errors import DepthfuseError
from .evaluation import EvalReport, mean_average_precision
from .pipelines import (
    ExperimentConfig,
    apply_overrides,
    load_config,
    run_fast_rcnn_pipeline,
    run_rcnn_pipeline,
    run_segmentation_pipeline,
    run_sweep,
)
from .report import write_detection_report
from .superpixel import load_graph, save_graph
from .synthetic import generate_proposals, generate_synthetic, load_dataset, save_dataset


def _add_config_args(p):
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None)


def _build_config(args, pipeline):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    pairs = [("pipeline", pipeline)]
    if args.data is not None:
        pairs.append(("data_dir", args.data))
    if args.out is not None:
        pairs.append(("out_dir", args.out))
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    for item in args.overrides:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs.append((key, value))
    return apply_overrides(cfg, pairs)


def _cmd_gen_data(args):
    scenes = generate_synthetic(args.images, args.classes, args.seed,
                                size=(args.size, args.size), kind=args.kind,
                                rgb_noise=args.noise)
    proposals = None
    if not args.no_proposals:
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, 17]).generate_state(1)[0])
        proposals = {s.image_id: generate_proposals(s, rng) for s in scenes}
    save_dataset(args.out, scenes, args.classes, args.kind, args.seed, proposals)
    print(f"wrote {len(scenes)} scenes to {args.out}")


def _cmd_dcnf_train(args):
    scenes, _, _, _ = load_dataset(args.data)
    est = DcnfDepthEstimator(
        n_superpixels=args.superpixels, gamma=args.gamma, segmentation=args.method,
        epochs=args.epochs, lr=args.lr, seed=args.seed,
    )
    est.fit([s.rgb for s in scenes], [s.depth for s in scenes])
    est.save(args.out)
    nlls = ", ".join(f"{v:.4f}" for v in est.history_)
    print(f"trained on {len(scenes)} images; epoch NLL: {nlls}")
    print(f"model written to {args.out}")


def _cmd_dcnf_predict(args):
    est = DcnfDepthEstimator.load(args.model)
    rgb = load_ppm(args.image).astype(np.float64) / 255.0
    graph = est._segment(rgb)
    if args.graph:
        loaded = load_graph(args.graph)
        if len(loaded) != len(graph):
            raise DepthfuseError(
                f"graph file has {len(loaded)} nodes but the image segments into {len(graph)}"
            )
        if not np.allclose(loaded.centroids(), graph.centroids(), atol=1e-9):
            raise DepthfuseError("graph file centroids do not match this image's segmentation")
        graph.edges = loaded.edges
    depth = est.predict(rgb, graph=graph)
    save_depth_pgm(args.out, depth)
    if args.graph_dump:
        save_graph(args.graph_dump, graph)
    print(f"depth written to {args.out}")


def _cmd_eval(args):
    detections = read_detections(args.detections)
    scenes, num_classes, _, _ = load_dataset(args.data)
    from .evaluation import GroundTruth

    gts = []
    for scene in scenes:
        for inst in scene.instances:
            gts.append(GroundTruth(image_id=scene.image_id, class_id=inst.class_id, box=inst.box))
    class_ids = list(range(1, num_classes + 1))
    per_class, map_score = mean_average_precision(
        detections, gts, class_ids, iou_threshold=args.iou_threshold,
        interpolation=args.interpolation,
    )
    report = EvalReport(mode=args.label, per_class_ap=per_class, map_score=map_score)
    import os

    os.makedirs(args.out, exist_ok=True)
    write_detection_report(os.path.join(args.out, "report.md"),
                           os.path.join(args.out, "report.csv"), [report], class_ids)
    cells = " ".join(f"class{c}={per_class[c] if per_class[c] is not None else 'n/a'}"
                     for c in class_ids)
    print(f"{cells} mAP={map_score}")


def _print_detection_reports(reports):
    for rep in reports:
        aps = " ".join(
            f"class{c}={v:.4f}" if v is not None else f"class{c}=n/a"
            for c, v in sorted(rep.per_class_ap.items())
        )
        map_str = "n/a" if rep.map_score is None else f"{rep.map_score:.4f}"
        print(f"{rep.mode}: {aps} mAP={map_str}")


def _print_segmentation_reports(reports):
    for rep in reports:
        mean_str = "n/a" if rep.mean_iou is None else f"{rep.mean_iou:.4f}"
        print(f"{rep.mode}: meanIoU={mean_str}")


def main(argv=None):
    parser = argparse.ArgumentParser(prog="depthfuse",
                                     description="RGB-D detection and segmentation on estimated depth")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=80)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--kind", choices=("detection", "segmentation"), default="detection")
    p.add_argument("--noise", type=float, default=0.04)
    p.add_argument("--no-proposals", action="store_true")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("dcnf-train", help="train the CRF depth estimator")
    p.add_argument("--data", required=True)
    p.add_argument("--superpixels", type=int, default=400)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--method", choices=("slic", "grid"), default="slic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_dcnf_train)

    p = sub.add_parser("dcnf-predict", help="predict a depth map for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--graph", default=None, help="reuse edges from a graph dump")
    p.add_argument("--graph-dump", default=None, help="write the superpixel graph")
    p.set_defaults(func=_cmd_dcnf_predict)

    for name, runner, printer in (
        ("rcnn", run_rcnn_pipeline, _print_detection_reports),
        ("fast-rcnn", run_fast_rcnn_pipeline, _print_detection_reports),
    ):
        p = sub.add_parser(name, help=f"run the {name} detection pipeline")
        _add_config_args(p)
        p.set_defaults(func=lambda a, r=runner, pr=printer, n=name: pr(r(_build_config(a, n))))

    p = sub.add_parser("segment", help="run a segmentation pipeline")
    _add_config_args(p)
    p.add_argument("--scheme", choices=("multitask", "concat"), default=None)
    p.set_defaults(func=lambda a: _print_segmentation_reports(
        run_segmentation_pipeline(_build_config_with_scheme(a), scheme=a.scheme)))

    p = sub.add_parser("sweep", help="lambda x depth-stream sweep for multitask segmentation")
    _add_config_args(p)
    p.set_defaults(func=lambda a: _run_sweep_cmd(a))

    p = sub.add_parser("eval", help="evaluate a detections CSV against a dataset")
    p.add_argument("--detections", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", default="detections")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--interpolation", choices=("all", "11point"), default="all")
    p.set_defaults(func=_cmd_eval)

    args = parser.parse_args(argv)
    try:
        args.func(args)
    except DepthfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _build_config_with_scheme(args):
    cfg = _build_config(args, "segment")
    if args.scheme is not None:
        cfg = apply_overrides(cfg, [("scheme", args.scheme)])
    return cfg


def _run_sweep_cmd(args):
    grid = run_sweep(_build_config(args, "sweep"))
    for (n, lam), iou in sorted(grid.items()):
        print(f"n={n} lambda={lam:g}: meanIoU={iou:.4f}")


if __name__ == "__main__":
    sys.exit(main())
