"""Continuous CRF over the superpixel graph: quadratic energy, closed-form MAP
inference, exact negative log-likelihood, and joint training of the unary
convnet with the pairwise weights.

With n nodes, unary outputs z (log-depths), per-edge weights
R_pq = sum_k beta_k * S_pq^(k) and edges stored once each, the energy is

    E(y) = sum_p (y_p - z_p)^2 + sum_(p,q) (1/2) R_pq (y_p - y_q)^2
         = y^T A y - 2 z^T y + z^T z,      A = I + (1/2) L_R,

where L_R is the graph Laplacian of the R-weighted adjacency. A is symmetric
positive definite for beta >= 0, so MAP inference is the solve A y* = z and
the Gaussian integral gives the exact partition function:

    log Z = (n/2) log(pi) - (1/2) log det A + z^T A^{-1} z - z^T z.

Gradients of NLL = E(y_gt) + log Z are closed-form:

    dNLL/dz      = 2 (y* - y_gt)
    dNLL/dbeta_k = y_gt^T M_k y_gt - y*^T M_k y* - (1/2) tr(A^{-1} M_k),

with M_k = dA/dbeta_k = (1/2) L_{S^(k)}.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .depth_io import DepthMap
from .errors import ConstraintError, NumericalError, TrainingError
from .netcore import (
    Conv2d,
    Dense,
    FeatureMap,
    MaxPool2d,
    ReLU,
    Sequential,
    StepDecay,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from .superpixel import SuperpixelGraph, SuperpixelPool, oversegment


@dataclass
class CrfInstance:
    """One CRF problem: graph structure, unary outputs z (log-space), pairwise
    parameters beta, and optionally ground-truth log-depths at the centroids."""

    graph: SuperpixelGraph
    z: np.ndarray
    beta: np.ndarray
    y_gt: np.ndarray = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.z.shape != (len(self.graph),):
            raise ConstraintError(
                f"z must have length {len(self.graph)}, got shape {self.z.shape}"
            )
        if np.any(self.beta < 0):
            raise ConstraintError(f"beta must be non-negative, got {self.beta.tolist()}")
        if not np.all(np.isfinite(self.z)):
            raise ConstraintError("z must be finite")
        if self.y_gt is not None:
            self.y_gt = np.asarray(self.y_gt, dtype=np.float64)


@dataclass
class CrfSolution:
    y_star: np.ndarray
    energy: float
    nll: float = None


def pairwise_weight(similarity_vector, beta):
    """R_pq = sum_k beta_k * S_pq^(k), non-negative for beta >= 0."""
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta < 0):
        raise ConstraintError(f"beta must be non-negative, got {beta.tolist()}")
    return float(np.dot(beta, np.asarray(similarity_vector, dtype=np.float64)))


def _edge_arrays(graph):
    if not graph.edges:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    p = np.array([e[0] for e in graph.edges], dtype=np.int64)
    q = np.array([e[1] for e in graph.edges], dtype=np.int64)
    s = np.stack([np.asarray(e[2], dtype=np.float64) for e in graph.edges])
    return p, q, s


def _half_laplacian(n, p, q, w):
    """(1/2) * Laplacian of the graph weighted by w (one entry per stored edge)."""
    m = np.zeros((n, n))
    hw = 0.5 * w
    np.add.at(m, (p, p), hw)
    np.add.at(m, (q, q), hw)
    np.subtract.at(m, (p, q), hw)
    np.subtract.at(m, (q, p), hw)
    return m


def precision_matrix(instance: CrfInstance):
    """A = I + (1/2) L_R as a dense array (n stays desk-scale)."""
    n = len(instance.graph)
    p, q, s = _edge_arrays(instance.graph)
    r = s @ instance.beta
    return np.eye(n) + _half_laplacian(n, p, q, r)


def energy(instance: CrfInstance, y):
    y = np.asarray(y, dtype=np.float64)
    p, q, s = _edge_arrays(instance.graph)
    unary = float(np.sum((y - instance.z) ** 2))
    if len(p) == 0:
        return unary
    r = s @ instance.beta
    return unary + float(0.5 * np.sum(r * (y[p] - y[q]) ** 2))


def _factorize(instance):
    a = precision_matrix(instance)
    try:
        chol = scipy.linalg.cho_factor(a, lower=True)
    except scipy.linalg.LinAlgError as exc:
        cond = np.linalg.cond(a)
        raise NumericalError(
            f"Cholesky factorization of the precision matrix failed "
            f"(cond(A)~{cond:.3e}): numerically singular or indefinite"
        ) from exc
    return a, chol


def map_inference(instance: CrfInstance) -> CrfSolution:
    """Closed-form MAP: solve A y* = z by Cholesky factorization."""
    a, chol = _factorize(instance)
    y_star = scipy.linalg.cho_solve(chol, instance.z)
    resid = np.max(np.abs(a @ y_star - instance.z)) if len(y_star) else 0.0
    tol = 1e-8 * (1.0 + (np.max(np.abs(instance.z)) if len(instance.z) else 0.0))
    if resid > tol:
        raise NumericalError(
            f"MAP solve residual {resid:.3e} exceeds {tol:.3e} (cond(A)~{np.linalg.cond(a):.3e})"
        )
    return CrfSolution(y_star=y_star, energy=energy(instance, y_star))


def log_partition(instance: CrfInstance):
    """log Z = (n/2) log(pi) - (1/2) log det A + z^T A^{-1} z - z^T z."""
    n = len(instance.graph)
    a, chol = _factorize(instance)
    logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
    y_star = scipy.linalg.cho_solve(chol, instance.z)
    return 0.5 * n * np.log(np.pi) - 0.5 * logdet + float(instance.z @ y_star) - float(
        instance.z @ instance.z
    )


def nll(instance: CrfInstance):
    """Exact negative log-likelihood of the ground-truth depths."""
    if instance.y_gt is None:
        raise ConstraintError("nll requires y_gt")
    return energy(instance, instance.y_gt) + log_partition(instance)


def nll_grads(instance: CrfInstance):
    """Exact gradients of the NLL w.r.t. z and beta."""
    if instance.y_gt is None:
        raise ConstraintError("nll_grads requires y_gt")
    n = len(instance.graph)
    a, chol = _factorize(instance)
    y_star = scipy.linalg.cho_solve(chol, instance.z)
    dz = 2.0 * (y_star - instance.y_gt)
    p, q, s = _edge_arrays(instance.graph)
    dbeta = np.zeros_like(instance.beta)
    if len(p):
        y_gt = instance.y_gt
        diff_gt = (y_gt[p] - y_gt[q]) ** 2
        diff_star = (y_star[p] - y_star[q]) ** 2
        ainv = scipy.linalg.cho_solve(chol, np.eye(n))
        # tr(A^{-1} M_k) with M_k = (1/2) L_{S_k}: per edge (p,q) the Laplacian
        # contributes ainv[pp] + ainv[qq] - 2*ainv[pq], halved.
        tr_edge = ainv[p, p] + ainv[q, q] - 2.0 * ainv[p, q]
        for k in range(len(dbeta)):
            dbeta[k] = (
                0.5 * np.sum(s[:, k] * diff_gt)
                - 0.5 * np.sum(s[:, k] * diff_star)
                - 0.25 * np.sum(s[:, k] * tr_edge)
            )
    return dz, dbeta


# ---------------------------------------------------------------------------
# Joint training of the unary convnet and beta.
# ---------------------------------------------------------------------------


@dataclass
class DcnfSample:
    """Pre-processed training sample: image tensor, graph, and log-depth targets."""

    image: np.ndarray  # (1, 3, h, w)
    graph: SuperpixelGraph
    y_gt: np.ndarray  # (n,) log-depths at superpixel centroids


def centroid_log_depths(depth: DepthMap, graph: SuperpixelGraph):
    """Ground-truth log-depth per superpixel, read at the centroid pixel
    (nearest valid member pixel when the centroid itself is invalid)."""
    h, w = depth.shape
    out = np.empty(len(graph))
    for node in graph.nodes:
        r = min(int(round(node.centroid[0])), h - 1)
        c = min(int(round(node.centroid[1])), w - 1)
        if depth.valid_mask[r, c]:
            out[node.id] = np.log(depth.values[r, c])
        else:
            rr, cc = node.pixel_indices[:, 0], node.pixel_indices[:, 1]
            ok = depth.valid_mask[rr, cc]
            if not ok.any():
                raise ConstraintError(f"superpixel {node.id} has no valid depth")
            d2 = (rr[ok] - node.centroid[0]) ** 2 + (cc[ok] - node.centroid[1]) ** 2
            pick = np.argmin(d2)
            out[node.id] = np.log(depth.values[rr[ok][pick], cc[ok][pick]])
    return out


class UnaryNet:
    """Toy-scale unary regressor: 3 same-padded convs (one 2x2 pool after the
    first), superpixel pooling, then 2 fully-connected layers down to one
    log-depth per superpixel."""

    def __init__(self, conv_channels=(8, 12, 16), hidden=32, rng=None):
        rng = rng or np.random.default_rng(0)
        c1, c2, c3 = conv_channels
        self.conv = Sequential(
            [
                Conv2d(3, c1, 3, rng=rng, name="conv1"),
                ReLU(),
                MaxPool2d(2),
                Conv2d(c1, c2, 3, rng=rng, name="conv2"),
                ReLU(),
                Conv2d(c2, c3, 3, rng=rng, name="conv3"),
                ReLU(),
            ]
        )
        self.pool = SuperpixelPool(aggregator="mean")
        self.head = Sequential(
            [Dense(c3, hidden, rng=rng, name="fc1"), ReLU(), Dense(hidden, 1, rng=rng, name="fc2")]
        )
        self.conv_channels = tuple(conv_channels)
        self.hidden = hidden

    def forward(self, image, graph):
        fmap = FeatureMap(self.conv.forward(image))
        vecs = self.pool.forward(fmap, graph)
        z = self.head.forward(vecs)[:, 0]
        self._fmap = fmap
        return z

    def backward(self, dz):
        dvecs = self.head.backward(np.asarray(dz)[:, None])
        dmap = self.pool.backward(dvecs)
        self.conv.backward(dmap)

    def params(self):
        return self.conv.params() + self.head.params()


def train_dcnf(samples, unary: UnaryNet, beta, epochs, lr_schedule, weight_decay=5e-4,
               lr_beta=None, freeze_beta=False, callback=None):
    """Minimize the NLL over samples by SGD (one image per step).

    beta stays non-negative by projection after each step. Aborts with
    TrainingError when the epoch NLL grows 5 consecutive epochs.
    """
    beta = np.asarray(beta, dtype=np.float64).copy()
    if np.any(beta < 0):
        raise ConstraintError("initial beta must be non-negative")
    if np.isscalar(lr_schedule):
        lr_schedule = StepDecay(lr_schedule)
    history = []
    grow_streak = 0
    for epoch in range(epochs):
        lr = lr_schedule(epoch)
        lrb = lr if lr_beta is None else lr_beta
        total = 0.0
        for sample in samples:
            z = unary.forward(sample.image, sample.graph)
            inst = CrfInstance(graph=sample.graph, z=z, beta=beta, y_gt=sample.y_gt)
            total += nll(inst)
            dz, dbeta = nll_grads(inst)
            unary.backward(dz)
            sgd_step(unary.params(), lr, weight_decay)
            if not freeze_beta:
                beta = np.maximum(beta - lrb * dbeta, 0.0)
        epoch_nll = total / len(samples)
        history.append(epoch_nll)
        if callback is not None:
            callback(epoch, epoch_nll, beta)
        if len(history) >= 2 and history[-1] > history[-2]:
            grow_streak += 1
            if grow_streak >= 5:
                raise TrainingError(
                    "NLL grew 5 consecutive epochs; last values "
                    + ", ".join(f"{v:.6g}" for v in history[-6:])
                )
        else:
            grow_streak = 0
    return beta, history


class DcnfDepthEstimator(BaseEstimator):
    """Monocular depth estimator: CNN unary over superpixels + learned pairwise
    smoothing weights, trained jointly by exact NLL; prediction is the
    closed-form MAP solve scattered back to pixels.
    """

    def __init__(self, n_superpixels=400, gamma=1.0, segmentation="slic",
                 conv_channels=(8, 12, 16), hidden=32, epochs=10, lr=3e-4,
                 lr_beta=None, weight_decay=5e-4, lr_decay=0.4, lr_decay_every=5,
                 beta_init=(0.1, 0.1, 0.1), seed=0):
        self.n_superpixels = n_superpixels
        self.gamma = gamma
        self.segmentation = segmentation
        self.conv_channels = conv_channels
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.lr_beta = lr_beta
        self.weight_decay = weight_decay
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.beta_init = beta_init
        self.seed = seed

    def _segment(self, image):
        return oversegment(
            image, self.n_superpixels, method=self.segmentation, gamma=self.gamma
        )

    def _prepare(self, images, depths):
        samples = []
        for image, depth in zip(images, depths):
            graph = self._segment(image)
            tensor = np.ascontiguousarray(
                np.asarray(image, dtype=np.float64).transpose(2, 0, 1)[None]
            )
            samples.append(DcnfSample(tensor, graph, centroid_log_depths(depth, graph)))
        return samples

    def fit(self, images, depths):
        samples = self._prepare(images, depths)
        rng = np.random.default_rng(self.seed)
        self.net_ = UnaryNet(self.conv_channels, self.hidden, rng=rng)
        # start the regressor at the mean target so early epochs fit structure,
        # not the global offset
        mean_target = float(np.mean(np.concatenate([s.y_gt for s in samples])))
        self.net_.head.layers[-1].p.bias[...] = mean_target
        schedule = StepDecay(self.lr, self.lr_decay, self.lr_decay_every)
        self.beta_, self.history_ = train_dcnf(
            samples, self.net_, np.asarray(self.beta_init, dtype=np.float64),
            self.epochs, schedule, weight_decay=self.weight_decay, lr_beta=self.lr_beta,
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("DcnfDepthEstimator is not fitted; call fit first")

    def predict(self, image, graph=None) -> DepthMap:
        """Estimate a dense depth map: every pixel of a superpixel receives the
        exponentiated MAP log-depth of its node."""
        self._check_fitted()
        if graph is None:
            graph = self._segment(image)
        tensor = np.ascontiguousarray(np.asarray(image, dtype=np.float64).transpose(2, 0, 1)[None])
        z = self.net_.forward(tensor, graph)
        sol = map_inference(CrfInstance(graph=graph, z=z, beta=self.beta_))
        # log-depths leave log-space only here; clip keeps exp() finite-positive
        values = np.exp(np.clip(sol.y_star, -50.0, 50.0))[graph.label_map]
        return DepthMap(values=values, valid_mask=np.ones(graph.image_shape, dtype=bool))

    def unary_depths(self, image, graph=None):
        """Unary-only log-depth vector for one image (diagnostics/tests)."""
        self._check_fitted()
        if graph is None:
            graph = self._segment(image)
        return self.net_.forward(
            np.ascontiguousarray(np.asarray(image, dtype=np.float64).transpose(2, 0, 1)[None]),
            graph,
        ), graph

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        self._check_fitted()
        tensors = {
            "config.n_superpixels": np.array(float(self.n_superpixels)),
            "config.gamma": np.array(float(self.gamma)),
            "config.segmentation": np.array(1.0 if self.segmentation == "slic" else 0.0),
            "config.hidden": np.array(float(self.hidden)),
            "config.conv_channels": np.array([float(c) for c in self.conv_channels]),
            "beta": self.beta_,
        }
        for i, p in enumerate(self.net_.params()):
            tensors[f"param{i}.weights"] = p.weights
            tensors[f"param{i}.bias"] = p.bias
        save_checkpoint(path, tensors)

    @classmethod
    def load(cls, path):
        tensors = load_checkpoint(path)
        est = cls(
            n_superpixels=int(tensors["config.n_superpixels"]),
            gamma=float(tensors["config.gamma"]),
            segmentation="slic" if tensors["config.segmentation"] else "grid",
            conv_channels=tuple(int(c) for c in tensors["config.conv_channels"]),
            hidden=int(tensors["config.hidden"]),
        )
        est.net_ = UnaryNet(est.conv_channels, est.hidden)
        est.beta_ = tensors["beta"]
        est.history_ = []
        for i, p in enumerate(est.net_.params()):
            p.weights[...] = tensors[f"param{i}.weights"]
            p.bias[...] = tensors[f"param{i}.bias"]
        return est
