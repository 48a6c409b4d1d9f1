"""Deterministic synthetic RGB-D scenes for desk-scale experiments.

Scenes are rendered with a z-buffer: a far wall with a mild depth gradient and
textured color, plus shaped objects. Depth is informative by construction:

* kind='detection' - classes come in appearance-sharing pairs. Odd class ids
  2k+1 are solid objects in a near depth band; even ids 2k+2 are 'decals'
  painted flat on the wall with the same palette and shape. RGB alone cannot
  tell a solid from its decal twin; depth separates them crisply.
* kind='segmentation' - each class occupies its own depth band and palettes
  contrast only weakly with the wall, so depth carries most of the class
  signal.

RGB is quantized to uint8 steps and depth to millimeters at generation time,
so in-memory scenes match their PPM/PGM round trips exactly.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .depth_io import (
    DepthMap,
    load_depth_pgm,
    load_label_pgm,
    load_ppm,
    save_depth_pgm,
    save_label_pgm,
    save_ppm,
)
from .errors import ParseError

# palettes share one luminance (0.52) so that image brightness tracks depth
# through the shading law alone; hue is the nuisance/class-pair signal.
_RAW_PALETTES = [
    (0.75, 0.35, 0.30),
    (0.30, 0.55, 0.75),
    (0.40, 0.70, 0.35),
    (0.75, 0.65, 0.30),
    (0.60, 0.40, 0.70),
]
PALETTES = [tuple(0.52 * np.array(p) / np.mean(p)) for p in _RAW_PALETTES]
SHAPES = ["square", "circle", "triangle"]


@dataclass
class Instance:
    class_id: int
    box: np.ndarray  # (x1, y1, x2, y2) pixels
    mask: np.ndarray  # (h, w) bool, visible pixels only

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)


@dataclass
class SyntheticScene:
    image_id: int
    rgb: np.ndarray  # (h, w, 3) float64, exact uint8 steps
    depth: DepthMap
    instances: list = field(default_factory=list)

    @property
    def label_map(self):
        lab = np.zeros(self.rgb.shape[:2], dtype=np.int64)
        for inst in self.instances:
            lab[inst.mask] = inst.class_id
        return lab


def _shape_mask(kind, h, w, cy, cx, half):
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    if kind == "square":
        return (np.abs(rr - cy) <= half) & (np.abs(cc - cx) <= half)
    if kind == "circle":
        return (rr - cy) ** 2 + (cc - cx) ** 2 <= half**2
    # upright triangle
    dy = rr - (cy - half)
    return (dy >= 0) & (dy <= 2 * half) & (np.abs(cc - cx) <= dy / 2)


def _paint(rgb, mask, color, texture_phase):
    rr, cc = np.nonzero(mask)
    checker = 0.92 + 0.16 * (((rr + cc + texture_phase) // 3) % 2)
    rgb[rr, cc] = np.clip(color[None, :] * checker[:, None], 0.0, 1.0)


def _object_class_geometry(kind, cls, rng):
    if kind == "detection":
        palette_id = (cls - 1) // 2
        solid = (cls - 1) % 2 == 0
    else:
        palette_id = cls - 1
        solid = True
    shape = SHAPES[palette_id % len(SHAPES)]
    return palette_id, solid, shape


def _depth_shade(depth):
    # atmospheric/lighting falloff: brightness decays linearly with depth.
    # This is the monocular cue the depth estimator learns from.
    return np.clip(1.32 - 0.125 * depth, 0.35, 1.25)


def generate_scene(image_id, rng, num_classes=2, size=(48, 48), kind="detection",
                   rgb_noise=0.05, min_objects=2, max_objects=4, return_draws=False):
    h, w = size
    # wall: vertical depth gradient plus smooth banding, textured color
    base_depth = 3.4 + 0.8 * (np.arange(h) / max(h - 1, 1))
    wall_depth = np.tile(base_depth[:, None], (1, w))
    wall_depth += 0.1 * np.sin(np.arange(w) / 7.0)[None, :]
    rgb = np.empty((h, w, 3))
    wall_jitter = rng.uniform(-0.03, 0.03, size=3)
    wall_base = np.array([0.50, 0.51, 0.55]) + wall_jitter - wall_jitter.mean()
    rgb[:] = wall_base[None, None, :] * _depth_shade(wall_depth)[:, :, None]
    depth = wall_depth.copy()

    n_obj = int(rng.integers(min_objects, max_objects + 1))
    half_lo = max(2, min(h, w) // 9)
    half_hi = max(half_lo + 1, min(h, w) // 6)
    drawn = []
    for _ in range(n_obj):
        cls = int(rng.integers(1, num_classes + 1))
        palette_id, solid, shape = _object_class_geometry(kind, cls, rng)
        half = int(rng.integers(half_lo, half_hi + 1))
        cy = int(rng.integers(half + 1, h - half - 1))
        cx = int(rng.integers(half + 1, w - half - 1))
        mask = _shape_mask(shape, h, w, cy, cx, half)
        jitter = rng.uniform(-0.05, 0.05, size=3)
        color = np.array(PALETTES[palette_id % len(PALETTES)]) + jitter - jitter.mean()
        if kind == "segmentation":
            # muted palettes: pull towards the wall color so RGB contrast is weak
            color = 0.45 * color + 0.55 * wall_base
        if solid:
            if kind == "segmentation":
                lo = 1.0 + 0.9 * (cls - 1)
            else:
                lo = 1.1 + 0.25 * palette_id
            obj_depth = float(rng.uniform(lo, lo + 0.5))
        else:
            obj_depth = None  # painted on the wall
        phase = int(rng.integers(0, 6))
        drawn.append((cls, mask, color, obj_depth, phase, cy, cx, half, shape))

    # decals first (color only, wall depth), then solids far-to-near with a
    # z-test; `owner` tracks which instance each pixel finally shows.
    owner = np.full((h, w), -1, dtype=np.int64)
    for idx, (cls, mask, color, obj_depth, phase, *_) in enumerate(drawn):
        if obj_depth is None:
            shade = _depth_shade(wall_depth[mask]).mean()
            _paint(rgb, mask, color * shade, phase)
            owner[mask] = idx
    solid_order = sorted(
        (i for i, d in enumerate(drawn) if d[3] is not None), key=lambda i: -drawn[i][3]
    )
    for idx in solid_order:
        cls, mask, color, obj_depth, phase, *_ = drawn[idx]
        win = mask & (obj_depth < depth)
        _paint(rgb, win, color * _depth_shade(obj_depth), phase)
        depth[win] = obj_depth
        owner[win] = idx

    instances = []
    for idx, (cls, mask, color, obj_depth, phase, cy, cx, half, shape) in enumerate(drawn):
        visible = owner == idx
        if visible.sum() < 12:
            continue
        rr, cc = np.nonzero(mask)
        box = np.array([cc.min(), rr.min(), cc.max() + 1, rr.max() + 1], dtype=np.float64)
        instances.append(Instance(class_id=cls, box=box, mask=visible))

    rgb += rng.normal(0.0, rgb_noise, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)
    rgb = np.rint(rgb * 255.0) / 255.0
    depth = np.rint(depth * 1000.0) / 1000.0
    scene = SyntheticScene(
        image_id=image_id,
        rgb=rgb,
        depth=DepthMap(values=depth, valid_mask=np.ones((h, w), dtype=bool)),
        instances=instances,
    )
    if return_draws:
        draws = [
            {"class_id": cls, "mask": mask, "depth": obj_depth}
            for cls, mask, color, obj_depth, *_ in drawn
        ]
        return scene, {"wall_depth": np.rint(wall_depth * 1000.0) / 1000.0, "draws": draws}
    return scene


def generate_synthetic(num_images, num_classes, seed, size=(48, 48), kind="detection",
                       rgb_noise=0.05):
    """Deterministic dataset: the same seed always yields identical scenes."""
    if num_images < 1 or num_classes < 1:
        raise ValueError("num_images and num_classes must be >= 1")
    root = np.random.SeedSequence(seed)
    scenes = []
    for i, child in enumerate(root.spawn(num_images)):
        scenes.append(
            generate_scene(i, np.random.default_rng(child), num_classes=num_classes,
                           size=size, kind=kind, rgb_noise=rgb_noise)
        )
    return scenes


def generate_proposals(scene, rng, per_gt=4, n_random=8):
    """Grid-free synthetic proposals: jittered copies of each ground-truth box
    plus random boxes. Stands in for selective search / RPN output."""
    h, w = scene.rgb.shape[:2]
    boxes = []
    for inst in scene.instances:
        x1, y1, x2, y2 = inst.box
        bw, bh = x2 - x1, y2 - y1
        for _ in range(per_gt):
            jx = rng.normal(0, 0.18) * bw
            jy = rng.normal(0, 0.18) * bh
            sx = float(np.exp(rng.normal(0, 0.18)))
            sy = float(np.exp(rng.normal(0, 0.18)))
            cx, cy = (x1 + x2) / 2 + jx, (y1 + y2) / 2 + jy
            nw, nh = max(4.0, bw * sx), max(4.0, bh * sy)
            boxes.append([cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2])
    for _ in range(n_random):
        bw = float(rng.uniform(8, 22))
        bh = float(rng.uniform(8, 22))
        x1 = float(rng.uniform(0, w - bw))
        y1 = float(rng.uniform(0, h - bh))
        boxes.append([x1, y1, x1 + bw, y1 + bh])
    out = []
    for b in boxes:
        x1 = max(0.0, min(b[0], w - 4))
        y1 = max(0.0, min(b[1], h - 4))
        x2 = min(float(w), max(b[2], x1 + 4))
        y2 = min(float(h), max(b[3], y1 + 4))
        out.append(np.array([x1, y1, x2, y2]))
    return np.rint(np.stack(out))


# ---------------------------------------------------------------------------
# On-disk dataset layout.
# ---------------------------------------------------------------------------


def save_dataset(directory, scenes, num_classes, kind, seed, proposals=None):
    os.makedirs(directory, exist_ok=True)
    h, w = scenes[0].rgb.shape[:2]
    with open(os.path.join(directory, "index.txt"), "w", encoding="ascii") as fh:
        fh.write(f"images {len(scenes)} classes {num_classes} height {h} width {w} "
                 f"kind {kind} seed {seed}\n")
    with open(os.path.join(directory, "instances.csv"), "w", encoding="ascii") as fh:
        fh.write("image_id,class,x1,y1,x2,y2\n")
        for scene in scenes:
            for inst in scene.instances:
                b = inst.box
                fh.write(f"{scene.image_id},{inst.class_id},{b[0]:.0f},{b[1]:.0f},{b[2]:.0f},{b[3]:.0f}\n")
    for scene in scenes:
        sid = f"{scene.image_id:05d}"
        save_ppm(os.path.join(directory, f"img_{sid}.ppm"), scene.rgb)
        save_depth_pgm(os.path.join(directory, f"dep_{sid}.pgm"), scene.depth)
        save_label_pgm(os.path.join(directory, f"lab_{sid}.pgm"), scene.label_map)
    if proposals is not None:
        with open(os.path.join(directory, "proposals.csv"), "w", encoding="ascii") as fh:
            fh.write("image_id,x1,y1,x2,y2\n")
            for image_id, boxes in proposals.items():
                for b in boxes:
                    fh.write(f"{image_id},{b[0]:.0f},{b[1]:.0f},{b[2]:.0f},{b[3]:.0f}\n")


def load_dataset(directory):
    """Returns (scenes, num_classes, kind, proposals-or-None). Loaded scenes
    carry visible masks only through the label map (instance masks are the
    label-map pixels of their class inside the box)."""
    index_path = os.path.join(directory, "index.txt")
    with open(index_path, "r", encoding="ascii") as fh:
        parts = fh.readline().split()
    if len(parts) < 12 or parts[0] != "images":
        raise ParseError(f"bad dataset index {' '.join(parts)!r}", offset=0)
    n_images, num_classes = int(parts[1]), int(parts[3])
    kind = parts[9]
    boxes_by_image = {i: [] for i in range(n_images)}
    with open(os.path.join(directory, "instances.csv"), "r", encoding="ascii") as fh:
        fh.readline()
        for line in fh:
            if not line.strip():
                continue
            img, cls, x1, y1, x2, y2 = line.strip().split(",")
            boxes_by_image[int(img)].append(
                (int(cls), np.array([float(x1), float(y1), float(x2), float(y2)]))
            )
    scenes = []
    for i in range(n_images):
        sid = f"{i:05d}"
        rgb = load_ppm(os.path.join(directory, f"img_{sid}.ppm")).astype(np.float64) / 255.0
        depth = load_depth_pgm(os.path.join(directory, f"dep_{sid}.pgm"))
        labels = load_label_pgm(os.path.join(directory, f"lab_{sid}.pgm"))
        instances = []
        for cls, box in boxes_by_image[i]:
            x1, y1, x2, y2 = (int(v) for v in box)
            mask = np.zeros(labels.shape, dtype=bool)
            mask[y1:y2, x1:x2] = labels[y1:y2, x1:x2] == cls
            instances.append(Instance(class_id=cls, box=box, mask=mask))
        scenes.append(SyntheticScene(image_id=i, rgb=rgb, depth=depth, instances=instances))
    prop_path = os.path.join(directory, "proposals.csv")
    proposals = None
    if os.path.exists(prop_path):
        proposals = {i: [] for i in range(n_images)}
        with open(prop_path, "r", encoding="ascii") as fh:
            fh.readline()
            for line in fh:
                if not line.strip():
                    continue
                img, x1, y1, x2, y2 = line.strip().split(",")
                proposals[int(img)].append(np.array([float(x1), float(y1), float(x2), float(y2)]))
        proposals = {k: (np.stack(v) if v else np.zeros((0, 4))) for k, v in proposals.items()}
    return scenes, num_classes, kind, proposals
