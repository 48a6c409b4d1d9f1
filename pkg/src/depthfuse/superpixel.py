"""Superpixel oversegmentation, the neighbour graph with appearance
similarities, and pooling of convolutional features per superpixel."""

from dataclasses import dataclass, field

import numpy as np
from skimage.feature import local_binary_pattern

from .errors import ShapeError
from .netcore import FeatureMap
from .validation import as_float_image

HIST_BINS = 8  # per color channel, L1-normalized
LBP_BINS = 59  # 8-neighbour non-rotation-invariant uniform patterns


@dataclass
class Superpixel:
    id: int
    pixel_indices: np.ndarray  # (m, 2) int rows of (row, col)
    centroid: tuple  # (row, col), arithmetic mean of member pixels
    npixels: int = None  # only set on graphs loaded from a dump

    @property
    def size(self):
        if len(self.pixel_indices) == 0 and self.npixels is not None:
            return self.npixels
        return len(self.pixel_indices)


@dataclass
class SuperpixelGraph:
    """Nodes plus neighbour edges; edge (p, q, s) stored once with p < q and a
    3-vector of appearance similarities in (0, 1]."""

    nodes: list
    edges: list
    image_shape: tuple
    _label_map: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.nodes)

    @property
    def label_map(self):
        if self._label_map is None:
            lab = np.full(self.image_shape, -1, dtype=np.int64)
            for node in self.nodes:
                lab[node.pixel_indices[:, 0], node.pixel_indices[:, 1]] = node.id
            self._label_map = lab
        return self._label_map

    def centroids(self):
        return np.array([n.centroid for n in self.nodes])


def _nodes_from_labels(labels):
    h, w = labels.shape
    nodes = []
    order = np.argsort(labels.ravel(), kind="stable")
    flat_sorted = labels.ravel()[order]
    boundaries = np.flatnonzero(np.diff(flat_sorted)) + 1
    groups = np.split(order, boundaries)
    rr, cc = np.divmod(np.arange(h * w), w)
    for new_id, grp in enumerate(groups):
        pix = np.stack([rr[grp], cc[grp]], axis=1)
        nodes.append(Superpixel(new_id, pix, (pix[:, 0].mean(), pix[:, 1].mean())))
    relabel = labels.copy()
    for new_id, grp in enumerate(groups):
        relabel.ravel()[grp] = new_id
    return nodes, relabel


def _adjacent_pairs(labels):
    pairs = set()
    a, b = labels[:, :-1], labels[:, 1:]
    diff = a != b
    for p, q in zip(a[diff].ravel(), b[diff].ravel()):
        pairs.add((min(p, q), max(p, q)))
    a, b = labels[:-1, :], labels[1:, :]
    diff = a != b
    for p, q in zip(a[diff].ravel(), b[diff].ravel()):
        pairs.add((min(p, q), max(p, q)))
    return sorted(pairs)


def _grid_labels(h, w, target):
    best = None
    r0 = max(1, int(round(np.sqrt(target * h / w))))
    for rows in {max(1, r0 - 1), r0, r0 + 1}:
        rows = min(rows, h)
        cols = min(max(1, int(round(target / rows))), w)
        cand = (abs(rows * cols - target), rows, cols)
        if best is None or cand < best:
            best = cand
    _, rows, cols = best
    ri = np.minimum((np.arange(h) * rows) // h, rows - 1)
    ci = np.minimum((np.arange(w) * cols) // w, cols - 1)
    return ri[:, None] * cols + ci[None, :]


def _slic_labels(image, target, iters=10, compactness=0.2):
    """k-means in joint (scaled position, color) space, seeded from a grid.

    Pixels are assigned to their globally nearest center, so after convergence
    the partition is exactly the nearest-center partition of the final centers.
    """
    h, w = image.shape[:2]
    step = np.sqrt(h * w / target)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pos = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    feats = np.concatenate([pos * (compactness / step), image.reshape(-1, 3)], axis=1)
    init = _grid_labels(h, w, target)
    k = init.max() + 1
    feats_sq = (feats * feats).sum(axis=1)

    def _means(labels):
        counts = np.bincount(labels, minlength=k).astype(np.float64)
        sums = np.zeros((k, feats.shape[1]))
        np.add.at(sums, labels, feats)
        keep = counts > 0
        sums[keep] /= counts[keep, None]
        return sums, keep

    centers, alive = _means(init.ravel())
    labels = init.ravel()
    for _ in range(iters):
        d2 = feats_sq[:, None] - 2.0 * (feats @ centers.T) + (centers * centers).sum(axis=1)[None, :]
        d2[:, ~alive] = np.inf
        new_labels = d2.argmin(axis=1)
        converged = bool(np.array_equal(new_labels, labels))
        labels = new_labels
        new_centers, now_alive = _means(labels)
        centers[now_alive] = new_centers[now_alive]
        alive &= now_alive
        if converged:
            break
    return labels.reshape(h, w)


def oversegment(image, target_count, method="slic", gamma=1.0, with_similarities=True):
    """Partition the image into roughly target_count superpixels and build the
    neighbour graph. method is 'grid' (deterministic blocks, for tests) or
    'slic' (k-means in color+position)."""
    image = as_float_image(image)
    h, w = image.shape[:2]
    if not 1 <= target_count <= h * w:
        raise ValueError(f"target_count must be in [1, {h * w}], got {target_count}")
    if method == "grid":
        labels = _grid_labels(h, w, target_count)
    elif method == "slic":
        labels = _slic_labels(image, target_count)
    else:
        raise ValueError(f"unknown segmentation method {method!r}")
    nodes, labels = _nodes_from_labels(labels)
    graph = SuperpixelGraph(nodes=nodes, edges=[], image_shape=(h, w), _label_map=labels)
    pairs = _adjacent_pairs(labels)
    if with_similarities:
        feats = appearance_features(image, graph)
        graph.edges = [(p, q, _pair_similarity(feats, p, q, gamma)) for p, q in pairs]
    else:
        graph.edges = [(p, q, None) for p, q in pairs]
    return graph


def appearance_features(image, graph):
    """Per-node appearance cues: mean color, 8-bin-per-channel color histogram,
    and 59-bin uniform-LBP texture histogram (both L1-normalized)."""
    image = as_float_image(image)
    gray = np.rint(image.mean(axis=2) * 255.0).astype(np.uint8)
    # edge-replicate so border pixels see real neighbours, not implicit zeros
    padded = np.pad(gray, 1, mode="edge")
    lbp = local_binary_pattern(padded, P=8, R=1, method="nri_uniform")[1:-1, 1:-1].astype(np.int64)
    mean_color = np.zeros((len(graph), 3))
    color_hist = np.zeros((len(graph), 3 * HIST_BINS))
    lbp_hist = np.zeros((len(graph), LBP_BINS))
    bins = np.minimum((image * HIST_BINS).astype(np.int64), HIST_BINS - 1)
    for node in graph.nodes:
        r, c = node.pixel_indices[:, 0], node.pixel_indices[:, 1]
        mean_color[node.id] = image[r, c].mean(axis=0)
        for ch in range(3):
            hist = np.bincount(bins[r, c, ch], minlength=HIST_BINS)
            color_hist[node.id, ch * HIST_BINS : (ch + 1) * HIST_BINS] = hist
        lbp_hist[node.id] = np.bincount(lbp[r, c], minlength=LBP_BINS)
    color_hist /= np.maximum(color_hist.sum(axis=1, keepdims=True), 1)
    lbp_hist /= np.maximum(lbp_hist.sum(axis=1, keepdims=True), 1)
    return {"color": mean_color, "hist": color_hist, "lbp": lbp_hist}


def _pair_similarity(feats, p, q, gamma):
    out = np.empty(3)
    for k, key in enumerate(("color", "hist", "lbp")):
        out[k] = np.exp(-gamma * np.linalg.norm(feats[key][p] - feats[key][q]))
    return out


def similarity(p, q, image, graph, gamma=1.0):
    """Similarity 3-vector exp(-gamma*||s_p - s_q||_2) over the three cues."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    feats = appearance_features(image, graph)
    return _pair_similarity(feats, p, q, gamma)


class SuperpixelPool:
    """Pool a convolutional feature map into one vector per superpixel.

    A feature column (cell) contributes to the superpixel containing its
    receptive-field center. Superpixels that catch no column fall back to the
    column nearest their centroid; their ids are recorded in
    ``fallback_nodes_`` after forward.
    """

    def __init__(self, aggregator="mean"):
        if aggregator not in ("mean", "max"):
            raise ValueError(f"unknown aggregator {aggregator!r}")
        self.aggregator = aggregator
        self._cache = None
        self.fallback_nodes_ = []

    def forward(self, fm: FeatureMap, graph: SuperpixelGraph):
        if not isinstance(fm, FeatureMap):
            fm = FeatureMap(np.asarray(fm, dtype=np.float64))
        n, c, hf, wf = fm.shape
        if n != 1:
            raise ShapeError("superpixel pooling expects a single-image feature map")
        h, w = graph.image_shape
        sh, sw = h / hf, w / wf
        rows = np.minimum(((np.arange(hf) + 0.5) * sh).astype(np.int64), h - 1)
        cols = np.minimum(((np.arange(wf) + 0.5) * sw).astype(np.int64), w - 1)
        cell_node = graph.label_map[rows[:, None], cols[None, :]]  # (hf, wf)
        flat_node = cell_node.ravel()
        n_nodes = len(graph)
        counts = np.bincount(flat_node, minlength=n_nodes)
        self.fallback_nodes_ = [i for i in range(n_nodes) if counts[i] == 0]
        owner = [np.flatnonzero(flat_node == i) for i in range(n_nodes)]
        if self.fallback_nodes_:
            centers = np.stack(
                [np.repeat(rows, wf).astype(np.float64), np.tile(cols, hf).astype(np.float64)],
                axis=1,
            )
            for i in self.fallback_nodes_:
                cr, cc2 = graph.nodes[i].centroid
                d2 = (centers[:, 0] - cr) ** 2 + (centers[:, 1] - cc2) ** 2
                owner[i] = np.array([int(d2.argmin())])
        flat = fm.data[0].reshape(c, hf * wf)
        vecs = np.zeros((n_nodes, c))
        argmax = [None] * n_nodes
        for i, cells in enumerate(owner):
            block = flat[:, cells]
            if self.aggregator == "mean":
                vecs[i] = block.mean(axis=1)
            else:
                a = block.argmax(axis=1)
                argmax[i] = cells[a]
                vecs[i] = block[np.arange(c), a]
        self._cache = (fm, owner, argmax, (c, hf, wf))
        return vecs

    def backward(self, dvecs):
        if self._cache is None:
            from .errors import UsageError

            raise UsageError("SuperpixelPool.backward called before forward")
        fm, owner, argmax, (c, hf, wf) = self._cache
        dvecs = np.asarray(dvecs, dtype=np.float64)
        dflat = np.zeros((c, hf * wf))
        for i, cells in enumerate(owner):
            if self.aggregator == "mean":
                dflat[:, cells] += dvecs[i][:, None] / len(cells)
            else:
                dflat[np.arange(c), argmax[i]] += dvecs[i]
        dmap = dflat.reshape(1, c, hf, wf)
        fm.grad += dmap
        return dmap


def save_graph(path, graph: SuperpixelGraph):
    """Text dump: one `id centroid_r centroid_c npixels` line per node followed
    by one `p q s1 s2 s3` line per edge. Pixel membership is not serialized."""
    with open(path, "w", encoding="ascii") as fh:
        for node in graph.nodes:
            fh.write(f"{node.id} {float(node.centroid[0])!r} {float(node.centroid[1])!r} {node.size}\n")
        for p, q, s in graph.edges:
            fh.write(f"{p} {q} {float(s[0])!r} {float(s[1])!r} {float(s[2])!r}\n")


def load_graph(path):
    """Read a graph dump (4-token lines are nodes, 5-token lines are edges).

    Nodes come back with centroids and pixel counts but empty pixel index
    lists: the dump format does not carry membership, so the returned graph
    supports inference-level work (energy, MAP, NLL) but not pixel scatter.
    """
    from .errors import ParseError

    nodes, edges = [], []
    offset = 0
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) == 4:
                sid, cr, cc, npix = parts
                nodes.append(
                    Superpixel(int(sid), np.zeros((0, 2), dtype=np.int64),
                               (float(cr), float(cc)), npixels=int(npix))
                )
            elif len(parts) == 5:
                p, q, s1, s2, s3 = parts
                edges.append((int(p), int(q), np.array([float(s1), float(s2), float(s3)])))
            elif parts:
                raise ParseError(f"graph line with {len(parts)} fields: {line.strip()!r}", offset=offset)
            offset += len(line)
    if [n.id for n in nodes] != list(range(len(nodes))):
        raise ParseError("node ids must be 0..n-1 in order", offset=0)
    return SuperpixelGraph(nodes=nodes, edges=edges, image_shape=(0, 0))
