"""
Comparison scores: MSP, MaxLogit, ODIN, Mahalanobis, LOF and Isolation Forest.

Every scorer returns larger values for more in-distribution samples. The
logit-based ones accept a single logit vector or a batch (last axis = labels);
the feature-based ones score a batch of penultimate features.
"""

import logging
import math
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import digamma, expit

from backend.src.errors import ConfigError, DimensionError, MissingAuxiliaryError
from backend.src.seeding import make_rng

logger = logging.getLogger(__name__)

# === DEFAULTS ===
ODIN_TEMPERATURE = 1000.0
ODIN_EPSILON = 0.0
MAHALANOBIS_RIDGE = 1e-6
LOF_NEIGHBORS = 20
IFOREST_TREES = 100
IFOREST_SUBSAMPLE = 256

# Zero distances between duplicates are replaced by this fraction of the
# smallest positive pairwise distance
LOF_DUPLICATE_SCALE = 1e-6

# Upper bound on the cells of one distance block (8 bytes each)
LOF_BLOCK_ELEMENTS = 1 << 22

EULER_GAMMA = 0.5772156649015329


def _squeeze(result):
    return float(result) if np.ndim(result) == 0 else result


# === LOGIT SCORES ===
def msp_score(logits):
    """Largest label-wise sigmoid probability."""
    return _squeeze(np.max(expit(np.asarray(logits, dtype=np.float64)), axis=-1))


def maxlogit_score(logits):
    return _squeeze(np.max(np.asarray(logits, dtype=np.float64), axis=-1))


def odin_score(logits_fn, x, temperature=ODIN_TEMPERATURE, epsilon=ODIN_EPSILON):
    """
    max_i sigmoid(f_i(x) / T), optionally after one signed-gradient input step.

    With epsilon > 0, `logits_fn` must expose `input_gradient(x, dlogits)`
    (a trained ResidualClassifier does).
    """
    if not temperature > 0:
        raise ConfigError(f"ODIN temperature must be positive, got {temperature!r}")
    if epsilon < 0:
        raise ConfigError(f"ODIN epsilon must be nonnegative, got {epsilon!r}")
    x = np.asarray(x, dtype=np.float64)
    if epsilon > 0:
        input_gradient = getattr(logits_fn, "input_gradient", None)
        if input_gradient is None:
            raise ConfigError("ODIN with epsilon > 0 needs a differentiable scorer")
        logits = np.asarray(logits_fn(x), dtype=np.float64)
        # gradient of the max-sigmoid score has the sign of grad f_argmax
        onehot = np.zeros_like(logits)
        np.put_along_axis(onehot, np.argmax(logits, axis=-1)[..., None], 1.0, axis=-1)
        x = x + epsilon * np.sign(input_gradient(x, onehot))
    scaled = np.asarray(logits_fn(x), dtype=np.float64) / temperature
    return _squeeze(np.max(expit(scaled), axis=-1))


# === MAHALANOBIS ===
@dataclass(frozen=True, eq=False)
class MahalanobisModel:
    label_means: np.ndarray
    shared_covariance_inverse: np.ndarray
    ridge_lambda: float = MAHALANOBIS_RIDGE


def mahalanobis_fit(features, labels, ridge_lambda=MAHALANOBIS_RIDGE):
    """
    One mean per label over the samples where that label is active, one
    covariance pooled over every (label, sample) pair, ridge-regularized.
    """
    Z = np.asarray(features, dtype=np.float64)
    Y = np.asarray(labels)
    if Z.ndim != 2 or Y.shape[0] != Z.shape[0]:
        raise DimensionError("features and labels must have the same number of rows")
    if not ridge_lambda > 0:
        raise ConfigError(f"ridge_lambda must be positive, got {ridge_lambda!r}")
    counts = Y.sum(axis=0)
    if np.any(counts < 2):
        raise ConfigError(f"every label needs >= 2 active samples, got counts {counts.tolist()}")

    d = Z.shape[1]
    means = np.stack([Z[Y[:, i] == 1].mean(axis=0) for i in range(Y.shape[1])])
    scatter = np.zeros((d, d))
    for i in range(Y.shape[1]):
        centered = Z[Y[:, i] == 1] - means[i]
        scatter += centered.T @ centered
    covariance = scatter / counts.sum()
    covariance += ridge_lambda * (np.trace(covariance) / d) * np.eye(d)
    try:
        np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError as e:
        raise ConfigError("singular feature covariance despite ridge regularization") from e
    return MahalanobisModel(means, np.linalg.inv(covariance), float(ridge_lambda))


def mahalanobis_score(model, features):
    """-min_i (z - mu_i)^T Sigma^-1 (z - mu_i)."""
    Z = np.atleast_2d(np.asarray(features, dtype=np.float64))
    diffs = Z[:, None, :] - model.label_means[None, :, :]
    dist = np.einsum("nkd,de,nke->nk", diffs, model.shared_covariance_inverse, diffs)
    scores = -dist.min(axis=1)
    return _squeeze(scores[0]) if np.ndim(features) == 1 else scores


# === LOCAL OUTLIER FACTOR ===
class NeighborIndex:
    """
    Exact brute-force k-NN index over training features with the
    per-point k-distance and local reachability density precomputed.
    Neighborhoods include every point tied with the k-th distance.
    Distances are computed in row blocks of at most LOF_BLOCK_ELEMENTS cells.
    """

    def __init__(self, points, k):
        self.points = np.asarray(points, dtype=np.float64)
        self.k = int(k)
        n = self.points.shape[0]
        if self.k < 2:
            raise ConfigError(f"LOF needs k >= 2, got {k}")
        if self.k >= n:
            raise ConfigError(f"LOF needs k < number of points ({n}), got {k}")

        smallest = np.inf
        for _, D in self._blocks(self.points):
            positive = D[D > 0]
            if positive.size:
                smallest = min(smallest, float(positive.min()))
        self.min_positive = smallest if np.isfinite(smallest) else 0.0
        if self.min_positive == 0:
            # every training point is a duplicate of the first one
            self.k_distance = np.zeros(n)
            self.lrd = None
            return

        self.k_distance = np.empty(n)
        for start, D in self._training_blocks():
            self.k_distance[start:start + D.shape[0]] = self._kth(D)
        self.lrd = np.empty(n)
        for start, D in self._training_blocks():
            self.lrd[start:start + D.shape[0]] = self._lrd(D, self.k_distance[start:start + D.shape[0]])

    def _blocks(self, Z):
        step = max(1, LOF_BLOCK_ELEMENTS // self.points.shape[0])
        for start in range(0, Z.shape[0], step):
            yield start, cdist(Z[start:start + step], self.points)

    def _training_blocks(self):
        for start, D in self._blocks(self.points):
            D = self._replace_zeros(D)
            rows = np.arange(D.shape[0])
            D[rows, start + rows] = np.inf
            yield start, D

    def _replace_zeros(self, D):
        return np.where(D == 0, self.min_positive * LOF_DUPLICATE_SCALE, D)

    def _kth(self, D):
        return np.partition(D, self.k - 1, axis=1)[:, self.k - 1]

    def _lrd(self, D, own_k_distance):
        neighborhood = D <= own_k_distance[:, None]
        reach = np.maximum(self.k_distance[None, :], D)
        mean_reach = np.where(neighborhood, reach, 0.0).sum(axis=1) / neighborhood.sum(axis=1)
        return 1.0 / mean_reach

    def lof(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != self.points.shape[1]:
            raise DimensionError(f"query has {Z.shape[1]} features, index has {self.points.shape[1]}")
        out = np.empty(Z.shape[0])
        for start, D in self._blocks(Z):
            stop = start + D.shape[0]
            if self.lrd is None:
                # identical data is not an outlier; anything else is infinitely sparser
                out[start:stop] = np.where(D.min(axis=1) == 0, 1.0, 1.0 / LOF_DUPLICATE_SCALE)
                continue
            D = self._replace_zeros(D)
            k_distance = self._kth(D)
            lrd_query = self._lrd(D, k_distance)
            neighborhood = D <= k_distance[:, None]
            neighbor_lrd = np.where(neighborhood, self.lrd[None, :], 0.0).sum(axis=1) / neighborhood.sum(axis=1)
            out[start:stop] = neighbor_lrd / lrd_query
        return out


def lof_fit(features, k=LOF_NEIGHBORS):
    return NeighborIndex(features, k)


def lof_score(index, features):
    """-LOF(z)."""
    scores = -index.lof(features)
    return _squeeze(scores[0]) if np.ndim(features) == 1 else scores


# === ISOLATION FOREST ===
def c_factor(n):
    """Average unsuccessful-search path length of a BST with n nodes: 2 H(n-1) - 2 (n-1) / n."""
    n = np.asarray(n, dtype=np.float64)
    safe = np.maximum(n, 2.0)
    value = np.where(n >= 2, 2.0 * (digamma(safe) + EULER_GAMMA) - 2.0 * (safe - 1.0) / safe, 0.0)
    return _squeeze(value)


@dataclass(frozen=True, eq=False)
class IsolationTree:
    """Flat node arrays; `feature` is -1 on leaves."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray

    @property
    def height(self):
        return int(self.depth.max())


def _grow_tree(X, height_limit, rng):
    feature, threshold, left, right, size, depth = [], [], [], [], [], []

    def new_node(n, d):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        depth.append(d)
        return len(feature) - 1

    stack = [(new_node(X.shape[0], 0), np.arange(X.shape[0]))]
    while stack:
        node, idx = stack.pop()
        if depth[node] >= height_limit or idx.size <= 1:
            continue
        sub = X[idx]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        splittable = np.flatnonzero(hi > lo)
        if splittable.size == 0:
            continue
        q = int(splittable[rng.integers(splittable.size)])
        p = float(rng.uniform(lo[q], hi[q]))
        goes_left = sub[:, q] < p
        left_node = new_node(int(goes_left.sum()), depth[node] + 1)
        right_node = new_node(int((~goes_left).sum()), depth[node] + 1)
        feature[node], threshold[node] = q, p
        left[node], right[node] = left_node, right_node
        stack.append((right_node, idx[~goes_left]))
        stack.append((left_node, idx[goes_left]))

    return IsolationTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        size=np.array(size, dtype=np.int64),
        depth=np.array(depth, dtype=np.int64),
    )


def _path_lengths(tree, Z):
    node = np.zeros(Z.shape[0], dtype=np.int64)
    rows = np.arange(Z.shape[0])
    for _ in range(tree.height):
        f = tree.feature[node]
        internal = f >= 0
        if not np.any(internal):
            break
        goes_left = Z[rows, np.maximum(f, 0)] < tree.threshold[node]
        node = np.where(internal, np.where(goes_left, tree.left[node], tree.right[node]), node)
    # truncated leaves still hold `size` points: add their expected remaining depth
    return tree.depth[node] + c_factor(tree.size[node])


@dataclass(frozen=True, eq=False)
class IsolationForestModel:
    trees: List[IsolationTree]
    subsample_size: int
    num_trees: int
    seed: int


def iforest_fit(features, num_trees=IFOREST_TREES, subsample_size=IFOREST_SUBSAMPLE, seed=0):
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ConfigError("Isolation Forest needs at least 2 training points")
    if num_trees < 1 or subsample_size < 2:
        raise ConfigError("Isolation Forest needs num_trees >= 1 and subsample_size >= 2")
    psi = min(int(subsample_size), n)
    if psi < subsample_size:
        logger.debug("Isolation Forest subsample clipped to dataset size %d", psi)
    height_limit = int(math.ceil(math.log2(psi)))
    rng = make_rng(seed, "iforest")
    trees = []
    for _ in range(num_trees):
        idx = rng.choice(n, size=psi, replace=False)
        trees.append(_grow_tree(X[idx], height_limit, rng))
    return IsolationForestModel(trees=trees, subsample_size=psi, num_trees=int(num_trees), seed=int(seed))


def iforest_anomaly(model, features):
    """s(z) = 2^(-E[h(z)] / c(psi)); close to 1 for anomalies."""
    Z = np.atleast_2d(np.asarray(features, dtype=np.float64))
    mean_path = np.mean([_path_lengths(tree, Z) for tree in model.trees], axis=0)
    return np.power(2.0, -mean_path / c_factor(model.subsample_size))


def iforest_score(model, features):
    """-s(z)."""
    scores = -iforest_anomaly(model, features)
    return _squeeze(scores[0]) if np.ndim(features) == 1 else scores


def require_fitted(method, auxiliary):
    if auxiliary is None:
        raise MissingAuxiliaryError(
            f"method '{method}' needs fitted auxiliaries: pass --fit-features and --fit-labels"
        )
    return auxiliary
