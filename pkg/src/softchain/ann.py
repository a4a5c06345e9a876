"""Nearest-neighbour retrieval over fact embeddings.

Two indexes share one query surface (``search(query, k) -> [(id, sqdist)]``):

* :class:`BruteForceIndex` -- exact linear scan, the oracle.
* :class:`HnswIndex` -- hierarchical navigable small world graph
  (Malkov & Yashunin).  Neighbour lists are chosen with the standard pruning
  heuristic by default; ``heuristic=False`` keeps the plain closest-M rule.

Distances are squared L2 throughout.  The HNSW hot loops are compiled with
numba; the graph lives in dense arrays so it can be inspected from Python.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numba
import numpy as np

__all__ = [
    "BruteForceIndex",
    "HnswIndex",
    "brute_force_knn",
    "hnsw_build",
    "hnsw_search",
    "recall_at_k",
]


class BruteForceIndex:
    """Exact k-NN by linear scan.

    Args:
        vectors: ``(n, dim)`` array.
        ids: external ids, defaults to ``range(n)``.
    """

    def __init__(self, vectors: np.ndarray, ids: Sequence[int] | None = None) -> None:
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a 2-d array")
        n = self.vectors.shape[0]
        self.ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if len(self.ids) != n:
            raise ValueError("ids and vectors differ in length")
        if len(np.unique(self.ids)) != n:
            raise ValueError("ids must be unique")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def distances(self, query: np.ndarray) -> np.ndarray:
        diff = self.vectors - np.asarray(query, dtype=np.float64)
        return np.einsum("ij,ij->i", diff, diff)

    def search(self, query: np.ndarray, k: int) -> list[tuple[int, float]]:
        if len(self) == 0:
            raise ValueError("empty index")
        if k < 1:
            raise ValueError("k must be >= 1")
        d = self.distances(query)
        n = len(d)
        if k < n:
            # keep every point tied with the k-th distance so the id tie-break is exact
            kth = np.partition(d, k - 1)[k - 1]
            cand = np.flatnonzero(d <= kth)
        else:
            cand = np.arange(n)
        order = np.lexsort((self.ids[cand], d[cand]))[:k]
        sel = cand[order]
        return [(int(self.ids[i]), float(d[i])) for i in sel]


def brute_force_knn(query: np.ndarray, index: BruteForceIndex, k: int) -> list[tuple[int, float]]:
    """Exact ``min(k, len(index))`` nearest ids, ascending by (distance, id)."""
    return index.search(query, k)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@numba.njit(cache=True, fastmath=True)
def _sqdist(data, i, q):
    s = 0.0
    for t in range(data.shape[1]):
        d = data[i, t] - q[t]
        s += d * d
    return s


@numba.njit(cache=True, fastmath=True)
def _sqdist_nodes(data, i, j):
    s = 0.0
    for t in range(data.shape[1]):
        d = data[i, t] - data[j, t]
        s += d * d
    return s


@numba.njit(cache=True)
def _greedy(data, q, ep, links, counts, level):
    """ef=1 descent on one layer; returns the local minimum reached from ep."""
    cur = ep
    cur_d = _sqdist(data, cur, q)
    changed = True
    while changed:
        changed = False
        for j in range(counts[level, cur]):
            nb = links[level, cur, j]
            d = _sqdist(data, nb, q)
            if d < cur_d or (d == cur_d and nb < cur):
                cur_d = d
                cur = nb
                changed = True
    return cur


@numba.njit(cache=True)
def _push(hd, hi, size, d, i):
    """Push onto an array-backed binary min-heap ordered by (d, i)."""
    pos = size
    while pos > 0:
        parent = (pos - 1) >> 1
        if hd[parent] > d or (hd[parent] == d and hi[parent] > i):
            hd[pos] = hd[parent]
            hi[pos] = hi[parent]
            pos = parent
        else:
            break
    hd[pos] = d
    hi[pos] = i
    return size + 1


@numba.njit(cache=True)
def _pop(hd, hi, size):
    """Drop the heap top; read ``hd[0], hi[0]`` before calling."""
    size -= 1
    if size == 0:
        return 0
    d = hd[size]
    i = hi[size]
    pos = 0
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        r = child + 1
        if r < size and (hd[r] < hd[child] or (hd[r] == hd[child] and hi[r] < hi[child])):
            child = r
        if hd[child] < d or (hd[child] == d and hi[child] < i):
            hd[pos] = hd[child]
            hi[pos] = hi[child]
            pos = child
        else:
            break
    hd[pos] = d
    hi[pos] = i
    return size


@numba.njit(cache=True)
def _search_layer(data, q, eps, ef, links, counts, level, visited, tag):
    """Beam search of width ``ef`` on one layer.

    Returns ``(ids, dists)`` sorted ascending by (distance, id).
    """
    cap = data.shape[0] + 1
    cd = np.empty(cap, dtype=np.float64)
    ci = np.empty(cap, dtype=np.int64)
    # results as a max-heap: min-heap over negated keys
    rd = np.empty(ef + 2, dtype=np.float64)
    ri = np.empty(ef + 2, dtype=np.int64)
    nc = 0
    nr = 0
    for e in eps:
        if visited[e] == tag:
            continue
        visited[e] = tag
        d = _sqdist(data, e, q)
        nc = _push(cd, ci, nc, d, e)
        nr = _push(rd, ri, nr, -d, -e)
        if nr > ef:
            nr = _pop(rd, ri, nr)
    while nc > 0:
        c_d = cd[0]
        c = ci[0]
        nc = _pop(cd, ci, nc)
        if c_d > -rd[0] and nr >= ef:
            break
        for j in range(counts[level, c]):
            nb = links[level, c, j]
            if visited[nb] == tag:
                continue
            visited[nb] = tag
            d = _sqdist(data, nb, q)
            worst = -rd[0]
            if nr < ef or d < worst or (d == worst and nb < -ri[0]):
                nc = _push(cd, ci, nc, d, nb)
                nr = _push(rd, ri, nr, -d, -nb)
                if nr > ef:
                    nr = _pop(rd, ri, nr)
    ids = np.empty(nr, dtype=np.int64)
    dists = np.empty(nr, dtype=np.float64)
    for j in range(nr - 1, -1, -1):
        dists[j] = -rd[0]
        ids[j] = -ri[0]
        nr = _pop(rd, ri, nr)
    return ids, dists


@numba.njit(cache=True)
def _select(data, ids, dists, limit, heuristic):
    """Pick at most ``limit`` neighbours from candidates sorted by (distance, id).

    ``heuristic`` keeps a candidate only if it is closer to the base point than
    to every neighbour already kept, then back-fills with the closest pruned
    ones; otherwise the closest ``limit`` are kept.
    """
    n = len(ids)
    if not heuristic or n <= limit:
        return ids[: min(limit, n)].copy()
    kept = np.empty(limit, dtype=np.int64)
    pruned = np.empty(n, dtype=np.int64)
    nk = 0
    npr = 0
    for j in range(n):
        if nk == limit:
            break
        e = ids[j]
        good = True
        for r in range(nk):
            if _sqdist_nodes(data, e, kept[r]) < dists[j]:
                good = False
                break
        if good:
            kept[nk] = e
            nk += 1
        else:
            pruned[npr] = e
            npr += 1
    j = 0
    while nk < limit and j < npr:
        kept[nk] = pruned[j]
        nk += 1
        j += 1
    return kept[:nk]


@numba.njit(cache=True)
def _shrink(data, node, level, links, counts, limit, heuristic):
    """Re-select the neighbour list of ``node`` on ``level`` down to ``limit``."""
    c = counts[level, node]
    nbs = links[level, node, :c].copy()
    ds = np.empty(c, dtype=np.float64)
    for j in range(c):
        ds[j] = _sqdist_nodes(data, node, nbs[j])
    by_id = np.argsort(nbs, kind="mergesort")
    order = by_id[np.argsort(ds[by_id], kind="mergesort")]
    keep = _select(data, nbs[order], ds[order], limit, heuristic)
    for j in range(len(keep)):
        links[level, node, j] = keep[j]
    for j in range(len(keep), c):
        links[level, node, j] = -1
    counts[level, node] = len(keep)


@numba.njit(cache=True)
def _insert(data, node, node_level, entry, max_level, links, counts, M, ef_construction, visited, tag, heuristic):
    """Insert ``node`` (already stored in ``data``); returns the new (entry, max_level, tag)."""
    if entry < 0:
        return node, node_level, tag
    q = data[node]
    ep = entry
    for lc in range(max_level, node_level, -1):
        ep = _greedy(data, q, ep, links, counts, lc)
    eps = np.array([ep], dtype=np.int64)
    top = min(node_level, max_level)
    for lc in range(top, -1, -1):
        tag += 1
        ids, dists = _search_layer(data, q, eps, ef_construction, links, counts, lc, visited, tag)
        limit = 2 * M if lc == 0 else M
        chosen = _select(data, ids, dists, limit, heuristic)
        m = len(chosen)
        for j in range(m):
            links[lc, node, j] = chosen[j]
        counts[lc, node] = m
        for j in range(m):
            nb = chosen[j]
            c = counts[lc, nb]
            if c < limit:
                links[lc, nb, c] = node
                counts[lc, nb] = c + 1
            else:
                # slot c == limit exists: width is 2M + 1
                links[lc, nb, c] = node
                counts[lc, nb] = c + 1
                _shrink(data, nb, lc, links, counts, limit, heuristic)
        eps = ids
    if node_level > max_level:
        return node, node_level, tag
    return entry, max_level, tag


@numba.njit(cache=True)
def _insert_many(data, start, stop, levels, entry, max_level, links, counts, M, ef_construction, visited, tag,
                 heuristic):
    for node in range(start, stop):
        entry, max_level, tag = _insert(
            data, node, levels[node], entry, max_level, links, counts, M, ef_construction, visited, tag, heuristic
        )
    return entry, max_level, tag


@numba.njit(cache=True)
def _mark_reachable(links, counts, start, seen, queue):
    """BFS on layer 0 from ``start``, setting ``seen``; returns the number newly marked."""
    if seen[start]:
        return 0
    seen[start] = True
    queue[0] = start
    head, tail = 0, 1
    while head < tail:
        u = queue[head]
        head += 1
        for j in range(counts[0, u]):
            v = links[0, u, j]
            if not seen[v]:
                seen[v] = True
                queue[tail] = v
                tail += 1
    return tail


@numba.njit(cache=True)
def _repair(data, n, entry, links, counts, M, ef, visited, tag):
    """Link every layer-0 node unreachable from ``entry`` back into the graph.

    Pruning during insertion can drop the last edge into a node.  Each orphan
    gets an edge from the nearest reachable node with a free layer-0 slot (or,
    failing that, replaces the farthest neighbour of the nearest node); rounds
    repeat until everything is reachable.
    """
    limit = 2 * M
    for _ in range(n):
        seen = np.zeros(n, dtype=np.bool_)
        queue = np.empty(n, dtype=np.int64)
        reached = _mark_reachable(links, counts, entry, seen, queue)
        if reached == n:
            break
        eps = np.array([entry], dtype=np.int64)
        for u in range(n):
            if seen[u]:
                continue
            tag += 1
            ids, dists = _search_layer(data, data[u], eps, ef, links, counts, 0, visited, tag)
            src = -1
            for j in range(len(ids)):
                if seen[ids[j]] and counts[0, ids[j]] < limit:
                    src = ids[j]
                    break
            if src >= 0:
                links[0, src, counts[0, src]] = u
                counts[0, src] += 1
            else:
                src = ids[0]
                far, far_d = 0, -1.0
                for j in range(counts[0, src]):
                    d = _sqdist_nodes(data, src, links[0, src, j])
                    if d > far_d:
                        far, far_d = j, d
                links[0, src, far] = u
            _mark_reachable(links, counts, u, seen, queue)
    return tag


@numba.njit(cache=True)
def _query(data, q, k, ef, entry, max_level, links, counts, visited, tag):
    ep = entry
    for lc in range(max_level, 0, -1):
        ep = _greedy(data, q, ep, links, counts, lc)
    eps = np.array([ep], dtype=np.int64)
    ids, dists = _search_layer(data, q, eps, max(ef, k), links, counts, 0, visited, tag)
    return ids[:k], dists[:k]


class HnswIndex:
    """Insert-only HNSW graph over squared-L2 distance.

    Args:
        dim: vector dimension.
        M: max neighbours per node on upper layers (``2*M`` on layer 0).
        ef_construction: beam width while inserting.
        seed: seeds the level sampler; the graph is deterministic given seed
            and insertion order.
    """

    def __init__(self, dim: int, M: int = 16, ef_construction: int = 200, seed: int = 0,
                 capacity: int = 16, heuristic: bool = True) -> None:
        if M < 2:
            raise ValueError("M must be >= 2")
        if ef_construction < M:
            raise ValueError("ef_construction must be >= M")
        self.dim = int(dim)
        self.M = int(M)
        self.ef_construction = int(ef_construction)
        self.seed = seed
        self.heuristic = bool(heuristic)
        self.level_multiplier = 1.0 / math.log(M)
        self._rng = np.random.default_rng(seed)
        self._n = 0
        self._data = np.zeros((max(capacity, 1), self.dim), dtype=np.float64)
        # float32 copy drives graph traversal; returned distances use _data
        self._walk = np.zeros((max(capacity, 1), self.dim), dtype=np.float32)
        self._levels = np.zeros(max(capacity, 1), dtype=np.int64)
        self._links = np.full((1, max(capacity, 1), 2 * self.M + 1), -1, dtype=np.int64)
        self._counts = np.zeros((1, max(capacity, 1)), dtype=np.int64)
        self._visited = np.zeros(max(capacity, 1), dtype=np.int64)
        self._tag = 0
        self.entry_point = -1
        self.max_level = -1
        self.ids = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return self._n

    # -- storage -------------------------------------------------------------

    def _reserve(self, n: int, top_level: int) -> None:
        cap = self._data.shape[0]
        if n > cap:
            new = max(n, 2 * cap)
            self._data = np.vstack([self._data, np.zeros((new - cap, self.dim))])
            self._walk = np.vstack([self._walk, np.zeros((new - cap, self.dim), dtype=np.float32)])
            self._levels = np.concatenate([self._levels, np.zeros(new - cap, dtype=np.int64)])
            self._links = np.concatenate(
                [self._links, np.full((self._links.shape[0], new - cap, self._links.shape[2]), -1, dtype=np.int64)],
                axis=1,
            )
            self._counts = np.concatenate(
                [self._counts, np.zeros((self._counts.shape[0], new - cap), dtype=np.int64)], axis=1
            )
            self._visited = np.zeros(new, dtype=np.int64)
            self._tag = 0
        if top_level + 1 > self._links.shape[0]:
            extra = top_level + 1 - self._links.shape[0]
            cap = self._data.shape[0]
            self._links = np.concatenate(
                [self._links, np.full((extra, cap, self._links.shape[2]), -1, dtype=np.int64)], axis=0
            )
            self._counts = np.concatenate([self._counts, np.zeros((extra, cap), dtype=np.int64)], axis=0)

    def _sample_levels(self, n: int) -> np.ndarray:
        u = self._rng.random(n)
        return np.floor(-np.log1p(-u) * self.level_multiplier).astype(np.int64)

    def add(self, vectors: np.ndarray, ids: Iterable[int] | None = None) -> None:
        """Insert a batch of vectors in order."""
        vectors = np.ascontiguousarray(np.atleast_2d(vectors), dtype=np.float64)
        if vectors.shape[1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {vectors.shape[1]}")
        m = vectors.shape[0]
        if m == 0:
            return
        new_ids = np.arange(self._n, self._n + m, dtype=np.int64) if ids is None else np.asarray(list(ids), dtype=np.int64)
        if len(new_ids) != m:
            raise ValueError("ids and vectors differ in length")
        all_ids = np.concatenate([self.ids, new_ids])
        if len(np.unique(all_ids)) != len(all_ids):
            raise ValueError("ids must be unique")
        levels = self._sample_levels(m)
        start, stop = self._n, self._n + m
        self._reserve(stop, int(levels.max()))
        self._data[start:stop] = vectors
        self._walk[start:stop] = vectors
        self._levels[start:stop] = levels
        if self._tag > 2**62:
            self._visited[:] = 0
            self._tag = 0
        self.entry_point, self.max_level, self._tag = _insert_many(
            self._walk, start, stop, self._levels, self.entry_point, self.max_level,
            self._links, self._counts, self.M, self.ef_construction, self._visited, self._tag,
            self.heuristic,
        )
        self._tag = _repair(self._walk, stop, self.entry_point, self._links, self._counts, self.M,
                            self.ef_construction, self._visited, self._tag)
        self._n = stop
        self.ids = all_ids

    def insert(self, vector: np.ndarray, id: int | None = None) -> None:
        self.add(np.asarray(vector)[None, :], None if id is None else [id])

    # -- queries -------------------------------------------------------------

    def search(self, query: np.ndarray, k: int, ef: int = 64) -> list[tuple[int, float]]:
        if self._n == 0:
            raise ValueError("empty index")
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.ascontiguousarray(query, dtype=np.float64)
        self._tag += 1
        found, _ = _query(
            self._walk, q.astype(np.float32), min(k, self._n), max(ef, k), self.entry_point, self.max_level,
            self._links, self._counts, self._visited, self._tag,
        )
        diff = self._data[found] - q
        dists = np.einsum("ij,ij->i", diff, diff)
        ext = self.ids[found]
        order = np.lexsort((ext, dists))
        return [(int(ext[i]), float(dists[i])) for i in order]

    # -- inspection ----------------------------------------------------------

    @property
    def levels(self) -> np.ndarray:
        return self._levels[: self._n].copy()

    @property
    def layers(self) -> list[dict[int, list[int]]]:
        """Adjacency per layer in internal node numbering (insertion order)."""
        out = []
        for lc in range(self.max_level + 1):
            adj = {}
            for node in np.flatnonzero(self._levels[: self._n] >= lc):
                c = self._counts[lc, node]
                adj[int(node)] = [int(x) for x in self._links[lc, node, :c]]
            out.append(adj)
        return out

    def dump(self) -> str:
        """Text dump, one ``level node: n1 n2 ...`` line per node and layer."""
        lines = []
        for lc, adj in enumerate(self.layers):
            for node, nbs in adj.items():
                lines.append(f"{lc} {node}: " + " ".join(map(str, nbs)))
        return "\n".join(lines) + ("\n" if lines else "")


def hnsw_build(vectors: np.ndarray, M: int = 16, ef_construction: int = 200, seed: int = 0,
               ids: Sequence[int] | None = None, heuristic: bool = True) -> HnswIndex:
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    index = HnswIndex(vectors.shape[1], M=M, ef_construction=ef_construction, seed=seed,
                      capacity=len(vectors), heuristic=heuristic)
    index.add(vectors, ids)
    return index


def hnsw_search(index: HnswIndex, query: np.ndarray, k: int, ef_search: int = 64) -> list[tuple[int, float]]:
    if ef_search < k:
        raise ValueError("ef_search must be >= k")
    return index.search(query, k, ef_search)


def recall_at_k(approx: Sequence[Sequence[int]], exact: Sequence[Sequence[int]]) -> float:
    """Mean fraction of the exact k-NN ids recovered per query."""
    hits = total = 0
    for a, e in zip(approx, exact):
        hits += len(set(a) & set(e))
        total += len(e)
    return hits / total if total else 1.0
