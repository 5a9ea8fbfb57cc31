"""Synthetic mixture datasets and two-stage hierarchical k-means sharding.

The dataset stands in for a large image corpus: points drawn from a known
Gaussian mixture, so the generating spec doubles as the oracle's ground
truth. Clustering runs in two stages — k-means into M_fine fine groups,
then size-weighted k-means over the fine centroids into K coarse clusters —
and every point finally goes to its nearest coarse centroid, which is also
what makes the assignment invariant (assignment == argmin centroid
distance) checkable.

Determinism and permutation-equivariance: k-means++ draws are made against
the lexicographic ordering of the points, so permuting the input rows
permutes the assignment identically, and results never depend on thread
scheduling. Lloyd iterations run to an assignment fixpoint (at most 200
rounds); an empty cluster re-seeds from the point farthest from its
assigned centroid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SpecError
from .io_utils import write_csv
from .rngstream import stream

MAX_LLOYD_ITERATIONS = 200


@dataclass(frozen=True)
class MixtureSpec:
    """Gaussian mixture description shared by the generator and the oracle."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        cov = np.asarray(self.covariances, dtype=np.float64)
        if mu.ndim != 2:
            raise SpecError("means must be (K, dim)")
        k, dim = mu.shape
        if w.shape != (k,) or np.any(w <= 0) or abs(float(w.sum()) - 1.0) > 1e-12:
            raise SpecError("weights must be positive and sum to 1")
        if cov.shape == (k, dim):
            if np.any(cov <= 0):
                raise SpecError("diagonal variances must be positive")
        elif cov.shape == (k, dim, dim):
            for j in range(k):
                try:
                    np.linalg.cholesky(cov[j])
                except np.linalg.LinAlgError:
                    raise SpecError(f"covariance {j} is not positive definite") from None
        else:
            raise SpecError("covariances must be (K, dim) or (K, dim, dim)")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]


def octagon_spec(radius: float = 5.0, variance: float = 0.1, k: int = 8) -> MixtureSpec:
    """The standard benchmark: k equal blobs on a circle of the given radius."""
    angles = np.arange(k) * (2.0 * np.pi / k)
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return MixtureSpec(np.full(k, 1.0 / k), means, np.full((k, 2), variance))


@dataclass
class SyntheticDataset:
    points: np.ndarray
    true_component: np.ndarray | None = None
    generator_spec: MixtureSpec | None = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise SpecError("dataset points must be a (N, dim) array")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def generate_mixture(spec: MixtureSpec, n: int, seed: int) -> SyntheticDataset:
    """Draw n points; deterministic in seed, component frequencies ~ weights."""
    rng = stream(seed, "datagen")
    comp = rng.choice(spec.n_components, size=n, p=spec.weights)
    points = np.empty((n, spec.dim))
    normals = rng.standard_normal((n, spec.dim))
    diagonal = spec.covariances.ndim == 2
    for k in range(spec.n_components):
        mask = comp == k
        if not np.any(mask):
            continue
        if diagonal:
            points[mask] = spec.means[k] + np.sqrt(spec.covariances[k]) * normals[mask]
        else:
            chol = np.linalg.cholesky(spec.covariances[k])
            points[mask] = spec.means[k] + normals[mask] @ chol.T
    return SyntheticDataset(points.reshape(n, spec.dim), comp, spec)


@dataclass
class ClusterAssignment:
    k: int
    assignment: np.ndarray
    centroids: np.ndarray
    fine_centroids: np.ndarray
    fine_assignment: np.ndarray
    stage1_inertia: list[float]
    stage2_inertia: list[float]


def _canonical_order(points: np.ndarray) -> np.ndarray:
    return np.lexsort(points.T[::-1])


def _normalize_rows(points: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(points, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise SpecError("cosine metric undefined for zero vectors")
    return points / norms


def _sq_distances(points: np.ndarray, centroids: np.ndarray, cosine: bool) -> np.ndarray:
    if cosine:
        return 1.0 - points @ centroids.T  # rows already unit norm
    cross = points @ centroids.T
    return (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * cross
        + np.sum(centroids * centroids, axis=1)[None, :]
    )


def _kmeans_pp_init(points, k, weights, rng, cosine):
    """k-means++ over the canonical point order, so the draw is independent
    of input row order."""
    order = _canonical_order(points)
    ordered = points[order]
    w = weights[order]

    def draw(mass):
        cum = np.cumsum(mass)
        u = rng.random() * cum[-1]
        return order[min(int(np.searchsorted(cum, u, side="right")), len(order) - 1)]

    chosen = [draw(w)]
    for _ in range(1, k):
        d2 = np.min(_sq_distances(ordered, points[np.array(chosen)], cosine), axis=1)
        mass = w * np.maximum(d2, 0.0)
        if float(mass.sum()) <= 0.0:
            mass = w  # all residual distance exhausted (duplicate points)
        chosen.append(draw(mass))
    return points[np.array(chosen)].copy()


def _lloyd(points, k, weights, rng, cosine):
    """Weighted Lloyd iterations to an assignment fixpoint; returns
    (centroids, labels, inertia history)."""
    n = points.shape[0]
    if k > n:
        raise SpecError(f"cannot form {k} clusters from {n} points")
    centroids = _kmeans_pp_init(points, k, weights, rng, cosine)
    labels = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(MAX_LLOYD_ITERATIONS):
        d2 = _sq_distances(points, centroids, cosine)
        new_labels = np.argmin(d2, axis=1)
        for j in range(k):
            if not np.any(new_labels == j):
                far = int(np.argmax(d2[np.arange(n), new_labels]))
                centroids[j] = points[far]
                d2 = _sq_distances(points, centroids, cosine)
                new_labels = np.argmin(d2, axis=1)
        history.append(float(np.sum(weights * d2[np.arange(n), new_labels])))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            mask = labels == j
            total = float(weights[mask].sum())
            centroids[j] = (weights[mask, None] * points[mask]).sum(axis=0) / total
        if cosine:
            centroids = _normalize_rows(centroids)
    return centroids, labels, history


def hierarchical_kmeans(
    data: SyntheticDataset,
    m_fine: int,
    k: int,
    metric: str = "euclidean",
    seed: int = 0,
) -> ClusterAssignment:
    """Two-stage clustering into k shards (fine groups, then coarse merge).

    Fine centroids carry their group sizes as weights into stage 2. Points
    inherit the coarse label of their fine group to form coarse centroids,
    then take a final nearest-centroid assignment so the returned labels
    satisfy assignment == argmin distance.
    """
    if metric not in ("euclidean", "cosine"):
        raise SpecError(f"unknown metric {metric!r}")
    cosine = metric == "cosine"
    n = len(data)
    if not (1 <= k <= m_fine <= n):
        raise SpecError(f"need 1 <= K ({k}) <= M_fine ({m_fine}) <= N ({n})")
    points = _normalize_rows(data.points) if cosine else data.points

    fine_centroids, fine_labels, hist1 = _lloyd(
        points, m_fine, np.ones(n), stream(seed, "kmeans", "fine"), cosine
    )
    sizes = np.bincount(fine_labels, minlength=m_fine).astype(np.float64)
    _, coarse_of_fine, hist2 = _lloyd(
        fine_centroids, k, np.maximum(sizes, 1e-12), stream(seed, "kmeans", "coarse"), cosine
    )

    inherited = coarse_of_fine[fine_labels]
    centroids = np.empty((k, points.shape[1]))
    for j in range(k):
        mask = inherited == j
        centroids[j] = points[mask].mean(axis=0) if np.any(mask) else fine_centroids[0]
    if cosine:
        centroids = _normalize_rows(centroids)

    d2 = _sq_distances(points, centroids, cosine)
    assignment = np.argmin(d2, axis=1)
    for _ in range(k):
        empty = [j for j in range(k) if not np.any(assignment == j)]
        if not empty:
            break
        for j in empty:  # documented fallback: re-seed from the farthest point
            far = int(np.argmax(d2[np.arange(n), assignment]))
            centroids[j] = points[far]
        d2 = _sq_distances(points, centroids, cosine)
        assignment = np.argmin(d2, axis=1)

    return ClusterAssignment(
        k=k,
        assignment=assignment,
        centroids=centroids,
        fine_centroids=fine_centroids,
        fine_assignment=fine_labels,
        stage1_inertia=hist1,
        stage2_inertia=hist2,
    )


def shard(data: SyntheticDataset, assignment: ClusterAssignment | np.ndarray, k: int) -> SyntheticDataset:
    """Order-stable subset of the points assigned to cluster k."""
    labels = assignment.assignment if isinstance(assignment, ClusterAssignment) else np.asarray(assignment)
    if labels.shape != (len(data),):
        raise SpecError("assignment length does not match dataset")
    mask = labels == k
    return SyntheticDataset(
        data.points[mask],
        None if data.true_component is None else data.true_component[mask],
        data.generator_spec,
    )


# -- persistence ----------------------------------------------------------------


def save_dataset_csv(path, data: SyntheticDataset, assignment=None) -> None:
    dim = data.dim
    header = [f"x{i}" for i in range(dim)] + ["true_component", "assignment"]
    truth = data.true_component
    labels = None
    if assignment is not None:
        labels = assignment.assignment if isinstance(assignment, ClusterAssignment) else assignment
    rows = []
    for i in range(len(data)):
        row = [float(v) for v in data.points[i]]
        row.append(-1 if truth is None else int(truth[i]))
        row.append(-1 if labels is None else int(labels[i]))
        rows.append(row)
    write_csv(path, header, rows)


def load_dataset_csv(path):
    """Returns (dataset, assignment array or None)."""
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    dim = sum(1 for h in header if h.startswith("x"))
    points, truth, labels = [], [], []
    for line in lines[1:]:
        cells = line.split(",")
        points.append([float(c) for c in cells[:dim]])
        truth.append(int(cells[dim]))
        labels.append(int(cells[dim + 1]))
    truth_arr = np.asarray(truth, dtype=np.int64)
    label_arr = np.asarray(labels, dtype=np.int64)
    data = SyntheticDataset(
        np.asarray(points, dtype=np.float64).reshape(len(points), dim),
        None if np.all(truth_arr == -1) else truth_arr,
    )
    return data, (None if np.all(label_arr == -1) else label_arr)


def save_centroids_csv(path, assignment: ClusterAssignment) -> None:
    dim = assignment.centroids.shape[1]
    write_csv(
        path,
        ["cluster"] + [f"c{i}" for i in range(dim)],
        [[j] + [float(v) for v in assignment.centroids[j]] for j in range(assignment.k)],
    )
