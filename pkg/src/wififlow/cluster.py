"""Clustering primitives: min-max scaling, Lloyd's k-means, silhouette and
Ward-linkage agglomerative clustering with dendrogram utilities."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_RESTARTS = 20
MAX_ITER = 300
# single-point transfer refinement runs only below this many points
REFINE_MAX_POINTS = 5000
INIT_METHODS = ("k-means++", "random")


class InvalidInputError(ValueError):
    pass


class InfeasibleError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


def minmax_normalize(v) -> np.ndarray:
    """Scale a vector onto [0, 1]; a constant vector maps to zeros."""
    x = np.asarray(v, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise InvalidInputError("expected a non-empty 1-D vector")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("vector contains NaN or infinite values")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def _as_points(points) -> np.ndarray:
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidInputError("expected a non-empty list of equal-length vectors")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("points contain NaN or infinite values")
    return X


@dataclass
class KMeansResult:
    labels: np.ndarray  # 0-based cluster index per input point
    centroids: np.ndarray
    sse: float
    iterations: int
    seed: int
    restart: int = 0
    sse_history: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = np.einsum("ij,ij->i", X, X)[:, None] - 2.0 * (X @ C.T) + np.einsum("ij,ij->i", C, C)[None, :]
    return np.maximum(d, 0.0, out=d)


def _cluster_sums(X: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    return np.stack([np.bincount(labels, weights=X[:, j], minlength=k) for j in range(X.shape[1])], axis=1)


def _lloyd(X: np.ndarray, C: np.ndarray, max_iter: int):
    n, k = X.shape[0], C.shape[0]
    rows = np.arange(n)
    d2 = _sq_dists(X, C)
    labels = d2.argmin(axis=1)
    history = [float(d2[rows, labels].sum())]
    it = 0
    while it < max_iter:
        it += 1
        counts = np.bincount(labels, minlength=k)
        newC = _cluster_sums(X, labels, k)
        filled = counts > 0
        newC[filled] /= counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            # an emptied centroid jumps to the point farthest from its own centroid
            far = np.argsort(-d2[rows, labels], kind="stable")
            for j, idx in zip(empty, far):
                newC[j] = X[idx]
        C = newC
        d2 = _sq_dists(X, C)
        new = d2.argmin(axis=1)
        sse = float(d2[rows, new].sum())
        prev = history[-1]
        assert sse <= prev + 1e-9 * max(1.0, abs(prev)), "k-means objective increased"
        history.append(sse)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, C, history, it


def _transfer_refine(X: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Move one point at a time to the cluster that lowers the exact SSE the
    most, until no single move helps. Escapes Lloyd fixed points that a
    better partition is one move away from."""
    labels = labels.copy()
    rows = np.arange(X.shape[0])
    while True:
        n = np.bincount(labels, minlength=k).astype(float)
        C = _cluster_sums(X, labels, k) / np.maximum(n, 1.0)[:, None]
        d2 = _sq_dists(X, C)
        own = n[labels]
        # leaving a singleton is never allowed
        cost_out = np.where(own > 1, own / np.maximum(own - 1, 1.0) * d2[rows, labels], -np.inf)
        cost_in = n / (n + 1.0) * d2
        cost_in[rows, labels] = np.inf
        gain = cost_out - cost_in.min(axis=1)
        i = int(np.argmax(gain))
        if gain[i] <= 1e-12 * max(1.0, float(d2[rows, labels].sum())):
            return labels
        labels[i] = int(cost_in[i].argmin())


def _lloyd_refined(X: np.ndarray, C: np.ndarray, max_iter: int):
    """Lloyd's iterations alternated with transfer refinement until neither
    changes the partition."""
    labels, C, history, iters = _lloyd(X, C, max_iter)
    k = C.shape[0]
    while True:
        moved = _transfer_refine(X, labels, k)
        if np.array_equal(moved, labels):
            return labels, C, history, iters
        C = _cluster_sums(X, moved, k) / np.bincount(moved, minlength=k)[:, None]
        labels, C, more, it = _lloyd(X, C, max_iter)
        history += more[1:]
        iters += it


def _plusplus_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding: each step draws a few candidates with
    probability proportional to squared distance from the nearest chosen
    centre and keeps the one that lowers the total the most."""
    trials = 2 + int(np.log(k))
    C = np.empty((k, X.shape[1]))
    C[0] = X[rng.integers(X.shape[0])]
    d = _sq_dists(X, C[:1])[:, 0]
    for j in range(1, k):
        total = d.sum()
        if total <= 0:
            cand = rng.integers(X.shape[0], size=trials)
        else:
            cand = rng.choice(X.shape[0], size=trials, p=d / total)
        nd = np.minimum(d[:, None], _sq_dists(X, X[cand]))
        best = int(nd.sum(axis=0).argmin())
        C[j] = X[cand[best]]
        d = nd[:, best]
    return C


def kmeans(
    points,
    k: int,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
    max_iter: int = MAX_ITER,
    threads: int = 1,
    init: str = "k-means++",
) -> KMeansResult:
    """Best-of-``restarts`` Lloyd's k-means with Euclidean distance.

    Each restart has its own child seed of ``seed``. With ``init="random"``
    it starts from ``k`` distinct points drawn uniformly without
    replacement; ``"k-means++"`` uses distance-weighted seeding, which finds
    the planted optimum far more often when clusters differ in size. Points
    are put into lexicographic order first, so the result does not depend
    on input order. Inputs of at most ``REFINE_MAX_POINTS`` points also get
    single-point transfer refinement after Lloyd's iterations converge,
    which makes small problems far less sensitive to the seed.
    """
    X = _as_points(points)
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if init not in INIT_METHODS:
        raise InvalidInputError(f"init must be one of {INIT_METHODS}")
    order = np.lexsort(X.T[::-1])
    Xs = X[order]
    distinct = np.unique(Xs, axis=0)
    if k > len(distinct):
        raise InfeasibleError(f"k={k} exceeds the {len(distinct)} distinct points")
    children = np.random.SeedSequence(seed).spawn(restarts)

    def run(r: int):
        rng = np.random.default_rng(children[r])
        if init == "random":
            C = distinct[np.sort(rng.choice(len(distinct), size=k, replace=False))]
        else:
            C = _plusplus_init(Xs, k, rng)
        if len(Xs) <= REFINE_MAX_POINTS:
            return _lloyd_refined(Xs, C.copy(), max_iter)
        return _lloyd(Xs, C.copy(), max_iter)

    if threads > 1 and restarts > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            runs = list(ex.map(run, range(restarts)))
    else:
        runs = [run(r) for r in range(restarts)]
    best = min(range(restarts), key=lambda r: (runs[r][2][-1], r))
    labels_s, C, history, iters = runs[best]
    labels = np.empty_like(labels_s)
    labels[order] = labels_s
    return KMeansResult(labels, C, history[-1], iters, seed, best, history)


def sse_curve(points, ks: Iterable[int], seed: int = 0, restarts: int = DEFAULT_RESTARTS,
              threads: int = 1, init: str = "k-means++") -> list[tuple[int, float]]:
    return [(k, kmeans(points, k, seed, restarts, threads=threads, init=init).sse) for k in ks]


def sse_violations(curve: Sequence[tuple[int, float]], rtol: float = 1e-9) -> list[int]:
    """k values whose SSE rose above the previous k's (restart noise)."""
    return [k for (_, a), (k, b) in zip(curve, curve[1:]) if b > a * (1 + rtol) + rtol]


def silhouette(points, labels, chunk: int = 2048) -> float:
    """Mean silhouette coefficient; members of singleton clusters score 0."""
    X = _as_points(points)
    lab = np.asarray(labels)
    _, lab = np.unique(lab, return_inverse=True)
    k = lab.max() + 1 if lab.size else 0
    if k < 2:
        raise UndefinedMetricError("silhouette needs at least two clusters")
    n = X.shape[0]
    onehot = np.zeros((n, k))
    onehot[np.arange(n), lab] = 1.0
    sizes = onehot.sum(axis=0)
    sq = np.einsum("ij,ij->i", X, X)
    scores = np.empty(n)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        d2 = sq[lo:hi, None] + sq[None, :] - 2.0 * X[lo:hi] @ X.T
        dist = np.sqrt(np.maximum(d2, 0.0))
        dist[np.arange(hi - lo), np.arange(lo, hi)] = 0.0
        sums = dist @ onehot
        own = lab[lo:hi]
        rows = np.arange(hi - lo)
        own_size = sizes[own]
        a = np.where(own_size > 1, sums[rows, own] / np.maximum(own_size - 1, 1), 0.0)
        means = sums / sizes
        means[rows, own] = np.inf
        b = means.min(axis=1)
        denom = np.maximum(a, b)
        s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
        s[own_size == 1] = 0.0
        scores[lo:hi] = s
    return float(scores.mean())


@dataclass(frozen=True)
class Merge:
    a: int
    b: int
    height: float
    size: int


@dataclass
class Dendrogram:
    """Merge list in scipy's id convention: leaves are 0..n-1 and the
    cluster created by merge i gets id n + i."""

    merges: list
    leaf_count: int

    def to_dict(self) -> dict:
        return {
            "leaf_count": self.leaf_count,
            "merges": [{"a": m.a, "b": m.b, "height": m.height, "size": m.size} for m in self.merges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Dendrogram":
        return cls([Merge(m["a"], m["b"], m["height"], m["size"]) for m in d["merges"]], d["leaf_count"])

    @property
    def heights(self) -> list[float]:
        return [m.height for m in self.merges]


def _check_dissimilarity(d) -> np.ndarray:
    D = np.asarray(d, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise InvalidInputError("dissimilarity matrix must be square")
    if not np.all(np.isfinite(D)):
        raise InvalidInputError("dissimilarity matrix has non-finite entries")
    if np.any(D < 0):
        raise InvalidInputError("dissimilarity matrix has negative entries")
    if not np.allclose(D, D.T, rtol=0, atol=1e-12):
        raise InvalidInputError("dissimilarity matrix is not symmetric")
    if np.any(np.diag(D) != 0):
        raise InvalidInputError("dissimilarity matrix needs a zero diagonal")
    return D


def hac_ward(d) -> Dendrogram:
    """Ward-linkage agglomeration over a precomputed dissimilarity matrix.

    Uses the Lance-Williams update for Ward's criterion. With squared
    Euclidean input a merge height is twice the increase in within-cluster
    sum of squares. Ties go to the lexicographically smallest id pair.
    """
    D0 = _check_dissimilarity(d)
    n = D0.shape[0]
    if n <= 1:
        return Dendrogram([], n)
    m = 2 * n - 1
    D = np.full((m, m), np.inf)
    D[:n, :n] = (D0 + D0.T) / 2
    size = np.zeros(m, dtype=np.int64)
    size[:n] = 1
    active = list(range(n))
    merges = []
    for step in range(n - 1):
        ids = np.asarray(active)
        iu, ju = np.triu_indices(len(ids), 1)
        vals = D[ids[iu], ids[ju]]
        best = int(np.argmin(vals))
        a, b = int(ids[iu[best]]), int(ids[ju[best]])
        h = float(D[a, b])
        new = n + step
        na, nb = size[a], size[b]
        for c in active:
            if c == a or c == b:
                continue
            nc = size[c]
            v = ((na + nc) * D[a, c] + (nb + nc) * D[b, c] - nc * h) / (na + nb + nc)
            D[new, c] = D[c, new] = v
        size[new] = na + nb
        merges.append(Merge(a, b, h, int(na + nb)))
        active = [c for c in active if c != a and c != b] + [new]
    return Dendrogram(merges, n)


def cut_dendrogram(dendro: Dendrogram, threshold: float) -> np.ndarray:
    """Flat clusters from merges strictly below ``threshold``.

    Labels are 0-based and numbered in order of each cluster's lowest leaf.
    """
    if threshold < 0:
        raise InvalidInputError("threshold must be >= 0")
    n = dendro.leaf_count
    parent = list(range(2 * n - 1 if n else 0))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, mg in enumerate(dendro.merges):
        if mg.height < threshold:
            new = n + i
            parent[find(mg.a)] = new
            parent[find(mg.b)] = new
    labels = np.empty(n, dtype=np.int64)
    seen: dict[int, int] = {}
    for leaf in range(n):
        r = find(leaf)
        labels[leaf] = seen.setdefault(r, len(seen))
    return labels


def leaf_order(dendro: Dendrogram) -> list[int]:
    """In-order leaf sequence; within each merge the child holding the lower
    leaf index goes first."""
    n = dendro.leaf_count
    if n == 0:
        return []
    if n == 1:
        return [0]
    children = {n + i: (m.a, m.b) for i, m in enumerate(dendro.merges)}
    low = list(range(n)) + [0] * (n - 1)
    for i, m in enumerate(dendro.merges):
        low[n + i] = min(low[m.a], low[m.b])
    out = []
    stack = [2 * n - 2]
    while stack:
        node = stack.pop()
        if node < n:
            out.append(node)
            continue
        a, b = children[node]
        first, second = (a, b) if low[a] <= low[b] else (b, a)
        stack.append(second)
        stack.append(first)
    return out
