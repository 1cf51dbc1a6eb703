"""K-means over frame embeddings, keyframe extraction and recursive sub-clustering.

All distances are squared Euclidean. Ties resolve to the lowest frame index
everywhere, and cluster ids are renumbered so they ascend with each cluster's
earliest member frame index; together with seeded initialisation this makes
every result reproducible bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from keytree.errors import DimensionMismatch, EmptyCluster, InvalidK, TooLarge

ORACLE_MAX_POINTS = 10
ORACLE_MAX_K = 4
# residual-ranked points considered as jump targets
_JUMP_POINTS = 3


@dataclass(frozen=True)
class KMeansOptions:
    seed: int = 0
    max_iterations: int = 100
    rel_tolerance: float = 1e-4
    restarts: int = 1
    # centre relocations tried per restart after local search converges
    jump_trials: int = 8

    def __post_init__(self):
        if self.max_iterations < 1 or self.restarts < 1 or self.jump_trials < 0 or not self.rel_tolerance > 0:
            raise ValueError(f"invalid k-means options: {self}")


@dataclass(eq=False)
class ClusterAssignment:
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations_run: int
    frame_indices: np.ndarray

    @property
    def k_eff(self) -> int:
        return len(self.centroids)

    def members(self, cluster: int) -> np.ndarray:
        """Row positions (into the clustered points) of one cluster."""
        return np.flatnonzero(self.labels == cluster)


@dataclass
class SubtreeSpec:
    member_frames: list[int]
    keyframe: int
    children: list["SubtreeSpec"] = field(default_factory=list)


def derive_seed(seed: int, path: str) -> int:
    """Stable 63-bit sub-seed for a node path."""
    digest = hashlib.blake2b(f"{seed}:{path}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def _as_points(vectors, frame_indices) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(vectors, np.ndarray):
        x = vectors.astype(np.float64, copy=False)
    else:
        rows = [np.ravel(np.asarray(v, dtype=np.float64)) for v in vectors]
        if rows and len({len(r) for r in rows}) > 1:
            raise DimensionMismatch(f"vectors have differing dimensions {sorted({len(r) for r in rows})}")
        x = np.array(rows, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("points must be a non-empty (n, d) collection")
    n = x.shape[0]
    idx = np.arange(n, dtype=np.int64) if frame_indices is None else np.asarray(frame_indices, dtype=np.int64)
    if idx.shape != (n,):
        raise DimensionMismatch(f"{len(idx)} frame indices for {n} points")
    if len(np.unique(idx)) != n:
        raise ValueError("frame indices must be unique")
    return x, idx


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _canonicalize(labels: np.ndarray, centroids: np.ndarray, order_key: np.ndarray):
    """Renumber clusters by earliest member (``order_key`` is each point's frame index)."""
    k = len(centroids)
    first = np.full(k, np.iinfo(np.int64).max)
    np.minimum.at(first, labels, order_key)
    perm = np.argsort(first, kind="stable")
    remap = np.empty(k, dtype=np.int64)
    remap[perm] = np.arange(k)
    return remap[labels], centroids[perm]


def _means(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)
    return sums / counts[:, None]


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        # k never exceeds the distinct-point count, so total > 0 here
        r = rng.random() * total
        i = int(np.searchsorted(np.cumsum(d2), r, side="right"))
        i = min(i, n - 1)
        while d2[i] == 0:  # guard against landing on a zero-weight point via rounding
            i = (i + 1) % n
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(1))
    return np.array(centers)


def _repair_empty(x: np.ndarray, labels: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Give each empty cluster the point farthest from its assigned centre (taken from a cluster of size >= 2)."""
    counts = np.bincount(labels, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if not empty.size:
        return labels
    labels = labels.copy()
    dist = ((x - centers[labels]) ** 2).sum(1)
    for j in empty:
        eligible = counts[labels] >= 2
        cand = np.where(eligible, dist, -1.0)
        i = int(np.argmax(cand))
        counts[labels[i]] -= 1
        labels[i] = j
        counts[j] = 1
        dist[i] = -1.0
    return labels


def _local_search(x: np.ndarray, centers: np.ndarray, k: int, opts: KMeansOptions, tol: float):
    """Lloyd from ``centers`` until the shift falls under ``tol``, then Hartigan transfers."""
    prev = np.inf
    it = 0
    for it in range(1, opts.max_iterations + 1):
        labels = np.argmin(_sq_dists(x, centers), axis=1)
        labels = _repair_empty(x, labels, centers, k)
        new_centers = _means(x, labels, k)
        inertia = float(((x - new_centers[labels]) ** 2).sum())
        assert inertia <= prev * (1 + 1e-9) + 1e-12, "k-means inertia increased"
        prev = inertia
        shift = float(np.linalg.norm(new_centers - centers))
        centers = new_centers
        if shift <= tol:
            break
    labels, centers, inertia = _hartigan(x, labels, centers, k)
    assert inertia <= prev * (1 + 1e-9) + 1e-12, "k-means inertia increased"
    return labels, centers, inertia, it


def _lloyd(x: np.ndarray, k: int, opts: KMeansOptions, rng: np.random.Generator, tol: float):
    """One restart: k-means++ seeding, local search, then centre jumps.

    A jump moves one centre onto a badly served point (largest residual first,
    nearest centre first) and reruns the local search; it is kept only if the
    inertia drops. This escapes partitions that differ from a better one by
    several points at once, which single-point transfers cannot reach.
    """
    labels, centers, inertia, iters = _local_search(x, _kmeanspp(x, k, rng), k, opts, tol)
    trials = 0
    improved = True
    while improved and trials < opts.jump_trials:
        improved = False
        resid = ((x - centers[labels]) ** 2).sum(1)
        for p in np.argsort(-resid, kind="stable")[:_JUMP_POINTS]:
            for j in np.argsort(((centers - x[p]) ** 2).sum(1), kind="stable"):
                if j == labels[p] or trials >= opts.jump_trials:
                    continue
                trials += 1
                moved = centers.copy()
                moved[j] = x[p]
                cand = _local_search(x, moved, k, opts, tol)
                if cand[2] < inertia * (1 - 1e-12):
                    labels, centers, inertia = cand[0], cand[1], cand[2]
                    iters += cand[3]
                    improved = True
                    break
            if improved or trials >= opts.jump_trials:
                break
    return labels, centers, inertia, iters


def _hartigan(x: np.ndarray, labels: np.ndarray, centers: np.ndarray, k: int, max_passes: int = 50):
    """Single-point transfers that strictly lower inertia; escapes Lloyd fixed points."""
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    centers = centers.copy()
    for _ in range(max_passes):
        moved = False
        for i in range(len(x)):
            a = labels[i]
            if counts[a] < 2:
                continue
            d = ((centers - x[i]) ** 2).sum(1)
            remove = counts[a] / (counts[a] - 1) * d[a]
            add = counts / (counts + 1) * d
            add[a] = np.inf
            b = int(np.argmin(add))
            if add[b] < remove * (1 - 1e-12) - 1e-15:
                centers[a] = (counts[a] * centers[a] - x[i]) / (counts[a] - 1)
                centers[b] = (counts[b] * centers[b] + x[i]) / (counts[b] + 1)
                counts[a] -= 1
                counts[b] += 1
                labels[i] = b
                moved = True
        centers = _means(x, labels, k)
        if not moved:
            break
    return labels, centers, float(((x - centers[labels]) ** 2).sum())


def kmeans(vectors, k: int, opts: KMeansOptions | None = None, frame_indices=None) -> ClusterAssignment:
    """Cluster points into ``min(k, #distinct points)`` groups.

    ``vectors`` is an ``(n, d)`` array or a list of equal-length vectors;
    ``frame_indices`` defaults to ``0..n-1``. Points are processed in frame
    order, so shuffling the input does not change the result.
    """
    opts = opts or KMeansOptions()
    if k < 1:
        raise InvalidK(f"k must be >= 1, got {k}")
    x, idx = _as_points(vectors, frame_indices)
    if not np.isfinite(x).all():
        raise ValueError("points must be finite")
    order = np.argsort(idx, kind="stable")
    xs, idxs = x[order], idx[order]

    n_distinct = len(np.unique(xs, axis=0))
    k_eff = min(k, n_distinct)
    scale = float(np.sqrt(xs.var(axis=0).sum()))
    tol = opts.rel_tolerance * scale

    best = None
    if k_eff == 1:
        labels = np.zeros(len(xs), dtype=np.int64)
        centers = xs.mean(axis=0, keepdims=True)
        best = (labels, centers, float(((xs - centers) ** 2).sum()), 1)
    else:
        for r in range(opts.restarts):
            rng = np.random.default_rng([opts.seed & 0xFFFFFFFFFFFFFFFF, r])
            run = _lloyd(xs, k_eff, opts, rng, tol)
            if best is None or run[2] < best[2]:
                best = run
    labels, centers, _, iters = best
    labels, centers = _canonicalize(labels, centers, idxs)
    inertia = float(((xs - centers[labels]) ** 2).sum())

    out = np.empty_like(labels)
    out[order] = labels
    return ClusterAssignment(k, out, centers, inertia, iters, idx)


def _set_partitions(n: int, k: int):
    """Restricted-growth strings: every partition of n items into at most k blocks."""
    a = [0] * n

    def rec(i: int, m: int):
        if i == n:
            yield list(a)
            return
        for v in range(min(m + 1, k)):
            a[i] = v
            yield from rec(i + 1, max(m, v + 1))

    if n:
        yield from rec(1, 1)


def brute_force_kmeans_oracle(vectors, k: int, frame_indices=None) -> ClusterAssignment:
    """Globally optimal clustering by exhaustive enumeration of set partitions.

    Limited to 10 points and k <= 4.
    """
    if k < 1:
        raise InvalidK(f"k must be >= 1, got {k}")
    x, idx = _as_points(vectors, frame_indices)
    n = len(x)
    if n > ORACLE_MAX_POINTS or k > ORACLE_MAX_K:
        raise TooLarge(f"oracle limited to n <= {ORACLE_MAX_POINTS}, k <= {ORACLE_MAX_K} (got n={n}, k={k})")
    best_cost, best_labels = np.inf, None
    for rgs in _set_partitions(n, k):
        labels = np.asarray(rgs)
        m = labels.max() + 1
        cost = float(((x - _means(x, labels, m)[labels]) ** 2).sum())
        if cost < best_cost:
            best_cost, best_labels = cost, labels
    m = best_labels.max() + 1
    centers = _means(x, best_labels, m)
    labels, centers = _canonicalize(best_labels, centers, idx)
    return ClusterAssignment(k, labels, centers, float(((x - centers[labels]) ** 2).sum()), 0, idx)


def keyframe_of(frame_indices, vectors, centroid) -> int:
    """Member frame nearest the centroid; ties go to the lowest frame index."""
    idx = np.asarray(frame_indices, dtype=np.int64)
    if idx.size == 0:
        raise EmptyCluster("cannot pick a keyframe from an empty cluster")
    x = np.asarray(vectors, dtype=np.float64).reshape(len(idx), -1)
    c = np.asarray(centroid, dtype=np.float64).ravel()
    if x.shape[1] != c.shape[0]:
        raise DimensionMismatch(f"centroid has dimension {c.shape[0]}, members {x.shape[1]}")
    d = ((x - c) ** 2).sum(1)
    best = np.flatnonzero(d == d.min())
    return int(idx[best].min())


def subcluster(
    frame_indices,
    vectors,
    w: int,
    levels: int,
    opts: KMeansOptions | None = None,
    path: str = "",
) -> list[SubtreeSpec]:
    """Split a cluster into ``w`` children (and each child into ``w`` again when ``levels == 2``).

    A member set with at most ``w`` points splits into one singleton child per
    point; a set with fewer than two distinct vectors is not split at all.
    Sub-seeds are derived from ``opts.seed`` and ``path`` so every node is
    reproducible on its own.
    """
    if w < 2:
        raise ValueError(f"branch width must be >= 2, got {w}")
    if levels not in (1, 2):
        raise ValueError(f"levels must be 1 or 2, got {levels}")
    opts = opts or KMeansOptions()
    x, idx = _as_points(vectors, frame_indices)
    order = np.argsort(idx, kind="stable")
    x, idx = x[order], idx[order]
    if len(np.unique(x, axis=0)) < 2:
        return []
    if len(idx) <= w:
        return [SubtreeSpec([int(i)], int(i)) for i in idx]

    sub_opts = replace(opts, seed=derive_seed(opts.seed, path))
    a = kmeans(x, w, sub_opts, frame_indices=idx)
    children = []
    for c in range(a.k_eff):
        rows = a.members(c)
        child = SubtreeSpec(
            [int(i) for i in idx[rows]],
            keyframe_of(idx[rows], x[rows], a.centroids[c]),
        )
        if levels == 2:
            child.children = subcluster(idx[rows], x[rows], w, 1, opts, f"{path}.{c}")
        children.append(child)
    return children
