"""Lq distances and matched-group construction (caliper and KNN).

Accelerated paths (sorted array for one-dimensional embeddings, k-d tree
for the Euclidean case) only *propose* candidates.  Membership and order
are always decided on distances from :func:`row_distances`, which is also
what the brute-force path uses, so every path returns the same groups
bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

# relative slack when asking an accelerated structure for candidates
_SLACK = 1e-9
_KDTREE_MAX_DIM = 20


class MatchingError(RuntimeError):
    pass


class EmptyArmError(MatchingError):
    pass


def check_q(q) -> float:
    q = float(q)
    if math.isnan(q) or q < 1:
        raise ValueError(f"q must be >= 1 or inf, got {q}")
    return q


def row_distances(P, v, q) -> np.ndarray:
    """Lq distance from every row of ``P`` to ``v``.

    Columns are accumulated left to right so that a row's distance does not
    depend on which other rows are present.
    """
    P = np.asarray(P, dtype=float)
    v = np.asarray(v, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    if P.shape[1] != v.shape[-1]:
        raise ValueError(f"dimension mismatch: {P.shape[1]} vs {v.shape[-1]}")
    diff = np.abs(P - v)
    d = diff.shape[1]
    if d == 1:
        return diff[:, 0].copy()
    if math.isinf(q):
        acc = diff[:, 0].copy()
        for j in range(1, d):
            np.maximum(acc, diff[:, j], out=acc)
        return acc
    if q == 1:
        acc = diff[:, 0].copy()
        for j in range(1, d):
            acc += diff[:, j]
        return acc
    if q == 2:
        acc = diff[:, 0] * diff[:, 0]
        for j in range(1, d):
            acc += diff[:, j] * diff[:, j]
        return np.sqrt(acc)
    acc = diff[:, 0] ** q
    for j in range(1, d):
        acc += diff[:, j] ** q
    return acc ** (1.0 / q)


def lq_distance(u, v, q=2) -> float:
    """Lq distance between two vectors (``q = inf`` gives the sup norm)."""
    q = check_q(q)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ValueError("distance arguments must be finite")
    return float(row_distances(u[None, :], v, q)[0])


@dataclass
class MatchedGroup:
    """Units of arm ``t`` matched to one query point.

    ``indices`` and ``distances`` are ordered by (distance, unit index);
    ``members`` gives the same units in ascending index order.
    """

    query: np.ndarray
    t: int
    indices: np.ndarray
    distances: np.ndarray
    gamma_used: float
    mode: str
    q: float = 2.0

    @property
    def size(self) -> int:
        return int(self.indices.shape[0])

    @property
    def radius(self) -> float:
        return float(self.distances.max()) if self.size else 0.0

    @property
    def members(self) -> np.ndarray:
        return np.sort(self.indices)

    def __len__(self):
        return self.size


def _order(dist, idx):
    o = np.lexsort((idx, dist))
    return dist[o], idx[o]


@dataclass
class _Arm:
    index: np.ndarray  # global unit indices, ascending
    points: np.ndarray
    sorted_vals: Optional[np.ndarray] = None
    sorted_pos: Optional[np.ndarray] = None  # positions into ``index``
    tree: Optional[cKDTree] = None


@dataclass
class MatchIndex:
    """Per-arm search structures over fixed embeddings.

    Built once, then queried many times; treat as immutable.
    """

    embeddings: np.ndarray
    treatments: np.ndarray
    covariates: Optional[np.ndarray] = None
    arms: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def arm(self, t: int) -> _Arm:
        a = self.arms.get(int(t))
        if a is None or a.index.size == 0:
            raise EmptyArmError(f"no units with treatment {t} in the matching set")
        return a

    def arm_size(self, t: int) -> int:
        a = self.arms.get(int(t))
        return 0 if a is None else int(a.index.size)

    def _check_query(self, v):
        v = np.atleast_1d(np.asarray(v, dtype=float))
        if v.shape != (self.d,):
            raise ValueError(f"query has dimension {v.shape}, index has {self.d}")
        if not np.all(np.isfinite(v)):
            raise ValueError("query embedding must be finite")
        return v

    def _region_mask(self, region, idx):
        if region is None:
            return None
        if self.covariates is None:
            raise MatchingError("region constraints need covariates stored in the index")
        return np.asarray(region(self.covariates[idx]), dtype=bool)

    # candidate generation ------------------------------------------------

    def _within(self, a: _Arm, v, radius, q, method):
        """Global indices that may lie within ``radius`` (superset)."""
        r = radius * (1 + _SLACK) + 1e-300
        if method == "sorted" and a.sorted_vals is not None:
            lo = np.searchsorted(a.sorted_vals, v[0] - r, side="left")
            hi = np.searchsorted(a.sorted_vals, v[0] + r, side="right")
            return a.index[a.sorted_pos[lo:hi]]
        if method == "kdtree" and a.tree is not None and q == 2:
            pos = a.tree.query_ball_point(v, r, p=2.0)
            return a.index[np.asarray(pos, dtype=np.int64)]
        return a.index

    def _method(self, a: _Arm, q, method):
        if method != "auto":
            return method
        if a.sorted_vals is not None:
            return "sorted"
        if q == 2 and a.tree is not None:
            return "kdtree"
        return "brute"

    # queries -------------------------------------------------------------

    def caliper(self, v, t: int, gamma: float, q=2, region: Callable | None = None,
                method: str = "auto") -> MatchedGroup:
        q = check_q(q)
        if not gamma > 0:
            raise ValueError("caliper must be positive")
        v = self._check_query(v)
        a = self.arm(t)
        cand = self._within(a, v, gamma, q, self._method(a, q, method))
        dist = row_distances(self.embeddings[cand], v, q)
        keep = dist <= gamma
        mask = self._region_mask(region, cand)
        if mask is not None:
            keep &= mask
        dist, idx = _order(dist[keep], cand[keep])
        return MatchedGroup(v, int(t), idx, dist, float(gamma), "caliper", q)

    def knn(self, v, t: int, k: int, q=2, region: Callable | None = None,
            method: str = "auto") -> MatchedGroup:
        q = check_q(q)
        k = int(k)
        if k < 1:
            raise ValueError("k must be at least 1")
        v = self._check_query(v)
        a = self.arm(t)
        method = self._method(a, q, method)
        if region is not None:
            method = "brute"
            pool = a.index[self._region_mask(region, a.index)]
        else:
            pool = a.index
        if pool.size < k:
            raise MatchingError(f"arm {t} has {pool.size} admissible units, fewer than k={k}")
        if method == "sorted":
            pos = int(np.searchsorted(a.sorted_vals, v[0]))
            lo, hi = max(pos - k, 0), min(pos + k, a.index.size)
            cand = a.index[a.sorted_pos[lo:hi]]
        elif method == "kdtree" and q == 2:
            _, pos = a.tree.query(v, k=k, p=2.0)
            cand = a.index[np.atleast_1d(pos)]
        else:
            cand = pool
        dk = np.partition(row_distances(self.embeddings[cand], v, q), k - 1)[k - 1]
        if cand is not pool:
            cand = self._within(a, v, dk, q, method)
        dist = row_distances(self.embeddings[cand], v, q)
        dist, idx = _order(dist, cand)
        dist, idx = dist[:k], idx[:k]
        return MatchedGroup(v, int(t), idx, dist, float(dist[-1]), "knn", q)

    def knn_batch(self, V, t: int, k: int, q=2):
        """Vectorized KNN for many queries.

        Returns ``(indices, distances)``, both ``(m, k)`` and ordered like
        :meth:`knn`.  One-dimensional embeddings take a windowed fast path;
        queries it cannot settle fall back to :meth:`knn`.
        """
        q = check_q(q)
        V = np.asarray(V, dtype=float)
        if V.ndim == 1:
            V = V[:, None]
        m = V.shape[0]
        a = self.arm(t)
        n_a = a.index.size
        if n_a < k:
            raise MatchingError(f"arm {t} has {n_a} units, fewer than k={k}")
        out_idx = np.empty((m, k), dtype=np.int64)
        out_dist = np.empty((m, k))
        todo = np.arange(m)
        if a.sorted_vals is not None and m:
            v = V[:, 0]
            pos = np.searchsorted(a.sorted_vals, v)
            W = pos[:, None] + np.arange(-k, k)[None, :]
            valid = (W >= 0) & (W < n_a)
            Wc = np.clip(W, 0, n_a - 1)
            dist = np.abs(a.sorted_vals[Wc] - v[:, None])
            dist[~valid] = np.inf
            gidx = a.index[a.sorted_pos[Wc]]
            dk = np.partition(dist, k - 1, axis=1)[:, k - 1]
            ok = np.ones(m, dtype=bool)
            left = pos - k - 1
            has_l = left >= 0
            ok[has_l] &= np.abs(a.sorted_vals[left[has_l]] - v[has_l]) > dk[has_l]
            right = pos + k
            has_r = right < n_a
            ok[has_r] &= np.abs(a.sorted_vals[right[has_r]] - v[has_r]) > dk[has_r]
            order = np.lexsort((gidx, dist), axis=-1)[:, :k]
            rows = np.arange(m)[:, None]
            out_idx[ok] = gidx[rows, order][ok]
            out_dist[ok] = dist[rows, order][ok]
            todo = np.flatnonzero(~ok)
        for i in todo:
            g = self.knn(V[i], t, k, q)
            out_idx[i], out_dist[i] = g.indices, g.distances
        return out_idx, out_dist


def build_index(embeddings, treatments, covariates=None) -> MatchIndex:
    """Index embedded points by treatment arm.

    Arms with no units are recorded; querying them raises :class:`EmptyArmError`.
    """
    E = np.asarray(embeddings, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    T = np.asarray(treatments).astype(np.int64).ravel()
    if E.shape[0] != T.shape[0]:
        raise ValueError(f"row counts differ: {E.shape[0]} embeddings, {T.shape[0]} treatments")
    if not np.all(np.isfinite(E)):
        raise ValueError("embeddings must be finite")
    C = None if covariates is None else np.asarray(covariates, dtype=float)
    if C is not None and C.shape[0] != E.shape[0]:
        raise ValueError("covariate rows do not match embeddings")
    E.setflags(write=False)
    arms = {}
    levels = set(T.tolist()) | set(range(1, int(T.max(initial=0)) + 1))
    for t in sorted(levels):
        idx = np.flatnonzero(T == t)
        pts = E[idx]
        arm = _Arm(idx, pts)
        if idx.size and E.shape[1] == 1:
            o = np.argsort(pts[:, 0], kind="stable")
            arm.sorted_vals = pts[o, 0].copy()
            arm.sorted_pos = o
        elif idx.size and E.shape[1] <= _KDTREE_MAX_DIM:
            arm.tree = cKDTree(pts)
        arms[t] = arm
    return MatchIndex(E, T, C, arms)


def caliper_query(index: MatchIndex, v, t: int, gamma: float, q=2, region=None,
                  method: str = "auto") -> MatchedGroup:
    """Members of arm ``t`` within distance ``gamma`` of ``v`` (possibly none)."""
    return index.caliper(v, t, gamma, q, region, method)


def knn_query(index: MatchIndex, v, t: int, k: int, q=2, region=None,
              method: str = "auto") -> MatchedGroup:
    """The ``k`` nearest arm-``t`` units; ties go to the lower unit index."""
    return index.knn(v, t, k, q, region, method)


def brute_caliper(embeddings, treatments, v, t, gamma, q=2):
    """Linear-scan reference for :func:`caliper_query`: ``(indices, distances)``."""
    E = np.asarray(embeddings, dtype=float)
    E = E[:, None] if E.ndim == 1 else E
    idx = np.flatnonzero(np.asarray(treatments) == t)
    dist = row_distances(E[idx], np.atleast_1d(v), check_q(q))
    keep = dist <= gamma
    d, i = _order(dist[keep], idx[keep])
    return i, d


def brute_knn(embeddings, treatments, v, t, k, q=2):
    """Full-sort reference for :func:`knn_query`: ``(indices, distances)``."""
    E = np.asarray(embeddings, dtype=float)
    E = E[:, None] if E.ndim == 1 else E
    idx = np.flatnonzero(np.asarray(treatments) == t)
    dist = row_distances(E[idx], np.atleast_1d(v), check_q(q))
    d, i = _order(dist, idx)
    return i[:k], d[:k]


def box_region(x, widths) -> Callable:
    """Predicate keeping rows with ``|x_ij - x_j| <= widths_j`` for every j."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(widths, dtype=float)

    def region(rows):
        return np.all(np.abs(np.asarray(rows, dtype=float) - x) <= w, axis=1)

    return region


def weighted_objective(members, distances, gamma: float) -> float:
    """Sum over selected units of ``distance - gamma``.

    The caliper group (all units with distance <= gamma) minimizes this over
    every possible selection.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    members = np.asarray(list(members), dtype=np.int64)
    if members.size == 0:
        return 0.0
    return float(np.sum(np.asarray(distances, dtype=float)[members] - gamma))
