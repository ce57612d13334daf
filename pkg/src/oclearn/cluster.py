"""Neighbourhood-graph clustering via L1-normalised power iteration.

Groups one class's feature vectors into sub-clusters in three stages:

1. build a sparse affinity graph whose row ``i`` holds Gaussian-kernel
   weights ``exp(-||x_i - x_j||^2 / bandwidth^2)`` for the ``k`` nearest
   neighbours of ``i`` (zero diagonal),
2. run the damped power update ``s <- normalize(alpha * (G + G^T) s +
   (1 - alpha) * s)`` from a uniform start until the L1 change falls below
   ``tol`` or the iteration budget runs out; with a small ``alpha`` the
   vector stays near-uniform globally while entries inside a tight
   neighbourhood drift toward locally flat values,
3. point every vertex at the stored neighbour maximising
   ``w_ij * (s_j - s_i)`` when that gain is positive (vertices whose
   neighbours all score lower emit no edge) and read clusters off as the
   weakly connected components of the resulting arrow graph.

Step 3 degenerates when ``s`` is exactly constant, which happens for
perfectly symmetric inputs such as identical points: every vertex is then
a root, and vertices connected in the undirected graph are merged into one
cluster instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, ClusterMixin

from ._validation import check_feature_matrix, check_positive_int

__all__ = [
    "AffinityGraph",
    "ClusterAssignment",
    "build_affinity_graph",
    "power_iteration_vector",
    "extract_clusters",
    "cluster_class",
    "PowerIterationClustering",
]

#: tolerance below which the iteration vector counts as exactly constant
_FLAT_S_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class AffinityGraph:
    """Sparse directed k-NN affinity graph with Gaussian-kernel weights."""

    matrix: sparse.csr_matrix
    neighbor_count: int
    bandwidth: float

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def build_affinity_graph(features, k: int = 10, sigma: float = 0.5) -> AffinityGraph:
    """Connect each point to its ``k`` nearest neighbours.

    Weights are ``exp(-d^2 / sigma^2)``; the diagonal is zero and each row
    stores at most ``k`` entries. Distance ties are broken toward the lower
    index. Weights that underflow to zero are dropped, so a point far from
    everything can end up isolated.
    """
    X = check_feature_matrix(features, name="features")
    check_positive_int(k, "k")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    n = X.shape[0]
    if n == 1:
        return AffinityGraph(sparse.csr_matrix((1, 1)), neighbor_count=k, bandwidth=float(sigma))

    d2 = cdist(X, X, metric="sqeuclidean")
    np.fill_diagonal(d2, np.inf)
    k_eff = min(k, n - 1)
    # stable sort keeps equal distances in index order
    order = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]
    rows = np.repeat(np.arange(n), k_eff)
    cols = order.reshape(-1)
    weights = np.exp(-d2[rows, cols] / (sigma * sigma))
    keep = weights > 0.0
    graph = sparse.csr_matrix(
        (weights[keep], (rows[keep], cols[keep])), shape=(n, n)
    )
    return AffinityGraph(graph, neighbor_count=k, bandwidth=float(sigma))


def power_iteration_vector(
    graph: AffinityGraph,
    alpha: float = 0.001,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> tuple[np.ndarray, int]:
    """Iterate ``s <- L1-normalize(alpha * (G + G^T) s + (1 - alpha) * s)``.

    Starts from the uniform vector and stops once the L1 change drops below
    ``tol`` or after ``max_iter`` rounds. Returns the vector and the number
    of iterations performed. Entries stay non-negative and sum to 1.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if tol < 0:
        raise ValueError(f"tol must be non-negative, got {tol}")
    if max_iter < 0:
        raise ValueError(f"max_iter must be non-negative, got {max_iter}")
    n = graph.size
    s = np.full(n, 1.0 / n)
    if n == 1:
        return s, 0
    sym = (graph.matrix + graph.matrix.T).tocsr()
    for iteration in range(1, max_iter + 1):
        nxt = alpha * (sym @ s) + (1.0 - alpha) * s
        nxt /= nxt.sum()
        delta = np.abs(nxt - s).sum()
        s = nxt
        if delta < tol:
            return s, iteration
    return s, max_iter


def _best_neighbor_edges(graph: AffinityGraph, s: np.ndarray) -> list[tuple[int, int]]:
    """Edge ``i -> argmax_j w_ij * (s_j - s_i)`` when the best gain is positive."""
    matrix = graph.matrix
    edges: list[tuple[int, int]] = []
    indptr, indices, data = matrix.indptr, matrix.indices, matrix.data
    for i in range(graph.size):
        lo, hi = indptr[i], indptr[i + 1]
        if lo == hi:
            continue
        gains = data[lo:hi] * (s[indices[lo:hi]] - s[i])
        best = int(np.argmax(gains))  # first maximum, i.e. lowest stored index
        if gains[best] > 0.0:
            edges.append((i, int(indices[lo:hi][best])))
    return edges


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """Disjoint clusters covering ``0..n-1`` as sorted index arrays."""

    clusters: tuple[np.ndarray, ...]
    iterations_used: int

    def __post_init__(self):
        clusters = tuple(np.asarray(c, dtype=np.intp) for c in self.clusters)
        object.__setattr__(self, "clusters", clusters)
        seen: set[int] = set()
        for c in clusters:
            if c.size == 0:
                raise ValueError("clusters must be non-empty")
            members = set(int(i) for i in c)
            if seen & members:
                raise ValueError("clusters overlap")
            seen |= members
        if seen != set(range(len(seen))):
            raise ValueError("clusters must cover 0..n-1 without gaps")

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(int(c.size) for c in self.clusters)

    def labels(self) -> np.ndarray:
        """Cluster id per point, aligned with the clustered feature rows."""
        n = sum(c.size for c in self.clusters)
        out = np.empty(n, dtype=np.intp)
        for cid, members in enumerate(self.clusters):
            out[members] = cid
        return out


def _components_to_assignment(
    n: int, n_components: int, labels: np.ndarray, iterations_used: int
) -> ClusterAssignment:
    clusters = tuple(
        np.flatnonzero(labels == cid) for cid in range(n_components)
    )
    # order clusters by their smallest member for a stable, input-driven id
    clusters = tuple(sorted(clusters, key=lambda c: int(c[0])))
    return ClusterAssignment(clusters=clusters, iterations_used=iterations_used)


def extract_clusters(
    graph: AffinityGraph, s: np.ndarray, *, iterations_used: int = 0
) -> ClusterAssignment:
    """Partition vertices via best-gain arrows over the iteration vector.

    Each vertex points at its stored neighbour with the largest positive
    ``w_ij * (s_j - s_i)``; clusters are weakly connected components of the
    arrow graph. When no arrows exist and ``s`` is constant (the fully
    symmetric case), vertices connected in the undirected graph collapse
    into a single cluster; isolated vertices always stay singletons.
    """
    s = np.asarray(s, dtype=np.float64)
    n = graph.size
    if s.shape != (n,):
        raise ValueError(f"s has shape {s.shape}, expected ({n},)")
    if n == 1:
        return ClusterAssignment(clusters=(np.array([0]),), iterations_used=iterations_used)

    edges = _best_neighbor_edges(graph, s)
    if edges:
        rows = np.array([e[0] for e in edges])
        cols = np.array([e[1] for e in edges])
        arrow = sparse.csr_matrix((np.ones(len(edges)), (rows, cols)), shape=(n, n))
        n_comp, labels = csgraph.connected_components(arrow, directed=True, connection="weak")
        return _components_to_assignment(n, n_comp, labels, iterations_used)
    if np.ptp(s) <= _FLAT_S_TOL:
        n_comp, labels = csgraph.connected_components(
            graph.matrix, directed=True, connection="weak"
        )
        return _components_to_assignment(n, n_comp, labels, iterations_used)
    # no arrows but s is not flat: nothing links the vertices
    return _components_to_assignment(n, n, np.arange(n), iterations_used)


def cluster_class(
    features,
    *,
    k: int = 10,
    sigma: float = 0.5,
    alpha: float = 0.001,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> ClusterAssignment:
    """Cluster one class's feature rows with the default pipeline settings."""
    graph = build_affinity_graph(features, k=k, sigma=sigma)
    s, iterations = power_iteration_vector(graph, alpha=alpha, tol=tol, max_iter=max_iter)
    return extract_clusters(graph, s, iterations_used=iterations)


class PowerIterationClustering(BaseEstimator, ClusterMixin):
    """Cluster points by power iteration over a k-NN affinity graph.

    Parameters
    ----------
    n_neighbors : int, default=10
        Neighbours stored per graph row.
    bandwidth : float, default=0.5
        Gaussian-kernel width; weights are ``exp(-d^2 / bandwidth^2)``.
    alpha : float, default=0.001
        Damping of the power update; small values keep the vector near
        uniform while local structure accumulates.
    tol : float, default=1e-6
        L1 convergence threshold on the iteration vector.
    max_iter : int, default=200
        Iteration budget.

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
        Cluster id per input row.
    clusters_ : tuple of ndarray
        Sorted member indices per cluster.
    iteration_vector_ : ndarray of shape (n_samples,)
        Final L1-normalised iteration vector.
    n_iter_ : int
        Iterations performed.
    graph_ : AffinityGraph
        The affinity graph the labels were derived from.
    """

    def __init__(self, n_neighbors=10, bandwidth=0.5, alpha=0.001, tol=1e-6, max_iter=200):
        self.n_neighbors = n_neighbors
        self.bandwidth = bandwidth
        self.alpha = alpha
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        graph = build_affinity_graph(X, k=self.n_neighbors, sigma=self.bandwidth)
        s, iterations = power_iteration_vector(
            graph, alpha=self.alpha, tol=self.tol, max_iter=self.max_iter
        )
        assignment = extract_clusters(graph, s, iterations_used=iterations)
        self.graph_ = graph
        self.iteration_vector_ = s
        self.n_iter_ = iterations
        self.clusters_ = assignment.clusters
        self.labels_ = assignment.labels()
        return self
