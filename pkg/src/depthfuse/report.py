"""Deterministic report tables (Markdown + CSV), telemetry files, and small
hand-rolled SVG plots (matplotlib's SVG output embeds nondeterministic ids,
which would break byte-identical reruns)."""

import numpy as np


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def write_detection_report(md_path, csv_path, reports, class_ids):
    """One row per pipeline mode, per-class AP columns plus mAP."""
    header = ["mode"] + [f"class{c}" for c in class_ids] + ["mAP"]
    rows = []
    for rep in reports:
        rows.append([rep.mode] + [_fmt(rep.per_class_ap.get(c)) for c in class_ids]
                    + [_fmt(rep.map_score)])
    _write_md_table(md_path, "Detection results (AP at IoU > 0.5)", header, rows)
    _write_csv(csv_path, header, rows)


def write_segmentation_report(md_path, csv_path, reports, num_classes):
    header = ["mode"] + [f"class{c}" for c in range(num_classes + 1)] + ["meanIoU"]
    rows = []
    for rep in reports:
        rows.append([rep.mode] + [_fmt(rep.per_class_iou.get(c)) for c in range(num_classes + 1)]
                    + [_fmt(rep.mean_iou)])
    _write_md_table(md_path, "Segmentation results (IoU score)", header, rows)
    _write_csv(csv_path, header, rows)


def write_sweep_table(md_path, csv_path, grid, lambdas, depths):
    """grid: {(n, lambda): mean IoU}."""
    header = ["n"] + [f"lambda={lam:g}" for lam in lambdas]
    rows = []
    for n in depths:
        rows.append([f"n={n}"] + [_fmt(grid.get((n, lam))) for lam in lambdas])
    _write_md_table(md_path, "Mean IoU over the lambda x depth-stream grid", header, rows)
    _write_csv(csv_path, header, rows)


def _write_md_table(path, title, header, rows):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# {title}\n\n")
        fh.write("| " + " | ".join(header) + " |\n")
        fh.write("|" + "|".join(["---"] * len(header)) + "|\n")
        for row in rows:
            fh.write("| " + " | ".join(str(v) for v in row) + " |\n")


def _write_csv(path, header, rows):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def write_telemetry(path, history, fields):
    """history: list of dicts; fields: ordered column names (epoch first)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(fields) + "\n")
        for row in history:
            fh.write(",".join(_cell(row[f]) for f in fields) + "\n")


def _cell(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def svg_line_plot(path, series, title, xlabel, ylabel, width=480, height=320):
    """series: {name: [(x, y), ...]}; deterministic standalone SVG."""
    pad = 46
    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="11">{xlabel}</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {height / 2:.1f})">{ylabel}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{height - pad + 14}" font-size="9" text-anchor="middle">{x0:.3g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 14}" font-size="9" text-anchor="middle">{x1:.3g}</text>',
        f'<text x="{pad - 4}" y="{height - pad}" font-size="9" text-anchor="end">{y0:.3g}</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" font-size="9" text-anchor="end">{y1:.3g}</text>',
    ]
    for i, (name, pts) in enumerate(series.items()):
        if not pts:
            continue
        color = colors[i % len(colors)]
        path_d = " ".join(f"{sx(px):.2f},{sy(py):.2f}" for px, py in pts)
        lines.append(f'<polyline points="{path_d}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        lines.append(
            f'<text x="{width - pad + 2}" y="{pad + 14 * i + 10}" font-size="10" fill="{color}">{name}</text>'
        )
    lines.append("</svg>")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def pr_curve_points(detections, ground_truths, iou_threshold=0.5):
    """(recall, precision) points for an SVG PR plot."""
    from .evaluation import _pr_points

    if not detections or not ground_truths:
        return []
    recall, precision = _pr_points(detections, ground_truths, iou_threshold)
    return list(zip(recall.tolist(), precision.tolist()))
