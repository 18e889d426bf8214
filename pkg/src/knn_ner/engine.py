"""Nearest-neighbor retrieval under L2 distance.

Three paths share one contract (smallest distances first, ties broken by
ascending datastore entry index):

* search_exact — vectorized full scan, the default;
* brute_force_oracle — a naive per-row scan kept deliberately separate from
  the optimized path, used as ground truth in tests;
* search_approx — an opt-in navigable-small-world graph whose build step is
  gated on measured recall against the exact path.

All structures are immutable after construction; queries are pure reads and
may run concurrently. Results never depend on thread count.
"""

from __future__ import annotations

import heapq
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import BinaryIO, Sequence

import numpy as np

from .datastore import Datastore
from .errors import (
    BadMagicError,
    DimensionMismatchError,
    InvalidInputError,
    InvariantViolationError,
    RecallFailureError,
    VersionMismatchError,
)

INDEX_MAGIC = b"KNNI"
INDEX_VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")

# Seed for the recall gate's held-out query sample; fixed so index builds
# are reproducible.
_GATE_SEED = 0x5EED
_GATE_QUERIES = 128
_GATE_K = 32


def resolve_threads(threads: int | None = None) -> int:
    """Thread count: explicit argument > KNN_NER_THREADS > cpu count."""
    if threads is not None:
        if threads < 1:
            raise InvalidInputError(f"thread count must be >= 1, got {threads}")
        return threads
    env = os.environ.get("KNN_NER_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise InvalidInputError(f"KNN_NER_THREADS={env!r} is not an integer") from None
        if value < 1:
            raise InvalidInputError(f"KNN_NER_THREADS must be >= 1, got {value}")
        return value
    return os.cpu_count() or 1


@dataclass(frozen=True, eq=False)
class NeighborSet:
    """Retrieved entries sorted by (distance, entry index), length min(k, n)."""

    distances: np.ndarray  # (j,) float64, non-decreasing
    indices: np.ndarray  # (j,) int64, datastore entry ids
    values: np.ndarray  # (j,) int64, label ids

    def __post_init__(self):
        d = np.ascontiguousarray(np.asarray(self.distances, dtype=np.float64))
        i = np.ascontiguousarray(np.asarray(self.indices, dtype=np.int64))
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.int64))
        if not (d.ndim == i.ndim == v.ndim == 1) or not (d.size == i.size == v.size):
            raise InvalidInputError("neighbor arrays must be 1-D and parallel")
        if d.size and d.min() < 0:
            raise InvalidInputError("distances must be non-negative")
        if d.size > 1 and np.any(np.diff(d) < 0):
            raise InvalidInputError("distances must be non-decreasing")
        for arr in (d, i, v):
            arr.setflags(write=False)
        object.__setattr__(self, "distances", d)
        object.__setattr__(self, "indices", i)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.distances.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, NeighborSet):
            return NotImplemented
        return (
            np.array_equal(self.distances, other.distances)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


def l2_distance(a, b) -> float:
    """Euclidean distance sqrt(sum((a_j - b_j)^2)) in float64."""
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape or av.ndim != 1:
        raise DimensionMismatchError(
            f"vectors must be 1-D of equal length, got {av.shape} vs {bv.shape}"
        )
    diff = av - bv
    return float(np.sqrt(np.einsum("i,i->", diff, diff)))


def _check_query(store: Datastore, query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != store.m:
        raise DimensionMismatchError(
            f"query has shape {q.shape}, datastore keys have dim {store.m}"
        )
    if not np.all(np.isfinite(q)):
        raise InvalidInputError("query must be finite")
    return q


def _check_k(k: int) -> int:
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise InvalidInputError(f"k must be a positive integer, got {k!r}")
    return int(k)


def _sq_dists(keys64: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = keys64 - q
    return np.einsum("ij,ij->i", diff, diff)


def search_exact(store: Datastore, query, k: int) -> NeighborSet:
    """Exact top-k by full scan; ranks by squared distance, reports true L2."""
    q = _check_query(store, query)
    k = _check_k(k)
    d2 = _sq_dists(store.keys64, q)
    # Stable sort keeps ascending entry index among equal distances.
    order = np.argsort(d2, kind="stable")[: min(k, store.n)]
    return NeighborSet(
        distances=np.sqrt(d2[order]),
        indices=order.astype(np.int64),
        values=store.values[order].astype(np.int64),
    )


def search_exact_batch(
    store: Datastore, queries, k: int, *, threads: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k for each query row; returns (distances, indices) (Q, j).

    Equivalent to stacking search_exact over rows; query rows are processed
    in parallel but results are ordered by query index regardless.
    """
    qs = np.asarray(queries, dtype=np.float64)
    if qs.ndim != 2 or qs.shape[1] != store.m:
        raise DimensionMismatchError(
            f"queries have shape {qs.shape}, datastore keys have dim {store.m}"
        )
    k = _check_k(k)
    j = min(k, store.n)
    count = qs.shape[0]
    dists = np.empty((count, j), dtype=np.float64)
    indices = np.empty((count, j), dtype=np.int64)
    keys64 = store.keys64

    def fill(lo: int, hi: int) -> None:
        for qi in range(lo, hi):
            d2 = _sq_dists(keys64, qs[qi])
            order = np.argsort(d2, kind="stable")[:j]
            dists[qi] = np.sqrt(d2[order])
            indices[qi] = order

    workers = min(resolve_threads(threads), max(count, 1))
    if workers <= 1 or count < 2:
        fill(0, count)
    else:
        step = -(-count // workers)
        bounds = [(lo, min(lo + step, count)) for lo in range(0, count, step)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda b: fill(*b), bounds))
    return dists, indices


def brute_force_oracle(store: Datastore, query, k: int) -> NeighborSet:
    """Unoptimized per-row scan with the same contract as search_exact.

    Kept deliberately independent of the vectorized path: distances come
    from math.dist over plain Python tuples, selection from a list sort.
    """
    q = _check_query(store, query)
    k = _check_k(k)
    q_row = tuple(float(x) for x in q)
    scored = []
    for idx, row in enumerate(store.key_rows):
        scored.append((math.dist(q_row, row), idx))
    scored.sort()
    top = scored[: min(k, store.n)]
    idx = np.array([i for _, i in top], dtype=np.int64)
    return NeighborSet(
        distances=np.array([d for d, _ in top], dtype=np.float64),
        indices=idx,
        values=store.values[idx].astype(np.int64),
    )


@dataclass(frozen=True)
class ApproxIndexParams:
    """Navigable-small-world graph parameters.

    The effective beam at query time is max(search_beam, k), so the
    search beam never falls below k.
    """

    degree: int = 16
    construction_beam: int = 96
    search_beam: int = 96
    target_recall: float = 0.95

    def __post_init__(self):
        for name in ("degree", "construction_beam", "search_beam"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {value!r}")
        if not 0.0 < self.target_recall <= 1.0:
            raise InvalidInputError(
                f"target_recall must lie in (0, 1], got {self.target_recall!r}"
            )


@dataclass(frozen=True, eq=False)
class ApproxIndex:
    """A built graph index over one datastore; immutable once constructed."""

    store: Datastore
    params: ApproxIndexParams
    adjacency: tuple[np.ndarray, ...]  # adjacency[i] = int32 neighbor ids
    measured_recall: float | None = None

    @property
    def n(self) -> int:
        return self.store.n


def _graph_search(
    keys64: np.ndarray,
    adjacency: Sequence[np.ndarray] | Sequence[list[int]],
    active: int,
    query: np.ndarray,
    beam: int,
) -> list[tuple[float, int]]:
    """Best-first beam search from node 0 over the first `active` nodes.

    Returns up to `beam` (distance, node) pairs sorted ascending; distances
    are exact float64 L2 computed with the same formula as search_exact.
    """
    visited = np.zeros(active, dtype=bool)
    visited[0] = True
    diff = keys64[0] - query
    d0 = float(np.sqrt(np.einsum("i,i->", diff, diff)))
    candidates = [(d0, 0)]  # min-heap on (distance, node)
    result = [(-d0, 0)]  # max-heap on distance via negation
    while candidates:
        dist_c, node = heapq.heappop(candidates)
        if len(result) >= beam and dist_c > -result[0][0]:
            break
        nbrs = np.asarray(adjacency[node], dtype=np.int64)
        if nbrs.size == 0:
            continue
        nbrs = nbrs[~visited[nbrs]]
        if nbrs.size == 0:
            continue
        visited[nbrs] = True
        d = np.sqrt(_sq_dists(keys64[nbrs], query))
        worst = -result[0][0]
        for dist_n, nb in zip(d.tolist(), nbrs.tolist()):
            if len(result) < beam:
                heapq.heappush(result, (-dist_n, nb))
                heapq.heappush(candidates, (dist_n, nb))
                worst = -result[0][0]
            elif dist_n < worst:
                heapq.heapreplace(result, (-dist_n, nb))
                heapq.heappush(candidates, (dist_n, nb))
                worst = -result[0][0]
    found = sorted((-neg, node) for neg, node in result)
    return found


def _select_diverse(
    keys64: np.ndarray, candidates: list[tuple[float, int]], limit: int
) -> list[int]:
    """Pick up to `limit` candidates, skipping ones dominated by a kept node.

    A candidate is dominated when it lies closer to an already-kept neighbor
    than to the base point; skipped candidates backfill remaining slots.
    Candidates arrive sorted by (distance-to-base, id).
    """
    kept: list[int] = []
    skipped: list[int] = []
    for dist_c, idx in candidates:
        if len(kept) >= limit:
            break
        if kept:
            vec = keys64[idx]
            kept_d = np.sqrt(_sq_dists(keys64[kept], vec))
            if kept_d.min() < dist_c:
                skipped.append(idx)
                continue
        kept.append(idx)
    for idx in skipped:
        if len(kept) >= limit:
            break
        kept.append(idx)
    return kept


def _build_graph(
    keys64: np.ndarray, degree: int, construction_beam: int
) -> list[list[int]]:
    """Insert nodes in entry order, linking each to a diverse neighbor set.

    Every node keeps a guardian in-edge from its nearest predecessor that
    pruning may never drop; by induction over insertion order this keeps the
    whole graph reachable from node 0, so a beam as wide as the store is an
    exhaustive (exact) search.
    """
    n = keys64.shape[0]
    max_links = 2 * degree
    adjacency: list[list[int]] = [[] for _ in range(n)]
    guardian = np.full(n, -1, dtype=np.int64)
    for i in range(1, n):
        found = _graph_search(
            keys64, adjacency, i, keys64[i], max(construction_beam, degree)
        )
        links = _select_diverse(keys64, found, degree)
        adjacency[i] = links
        guardian[i] = links[0]
        for j in links:
            adjacency[j].append(i)
            if len(adjacency[j]) > max_links:
                ids = np.asarray(adjacency[j], dtype=np.int64)
                d = np.sqrt(_sq_dists(keys64[ids], keys64[j]))
                order = np.lexsort((ids, d))
                ranked = [(float(d[o]), int(ids[o])) for o in order]
                kept = _select_diverse(keys64, ranked, max_links)
                kept_set = set(kept)
                kept.extend(
                    int(x) for x in ids if guardian[x] == j and int(x) not in kept_set
                )
                adjacency[j] = kept
    return adjacency


def build_approx_index(store: Datastore, params: ApproxIndexParams) -> ApproxIndex:
    """Build the graph, then verify recall on a held-out query sample.

    If measured recall misses params.target_recall the search beam is doubled
    (up to n); if the target is still unreachable a RecallFailureError carries
    the last measurement.
    """
    adjacency_lists = _build_graph(store.keys64, params.degree, params.construction_beam)
    adjacency = tuple(np.asarray(links, dtype=np.int32) for links in adjacency_lists)

    # Held-out gate sample: perturbed keys plus midpoints of random key pairs.
    # Midpoints land between clusters and are deliberately harder than the
    # keys themselves, so the gate does not flatter the index.
    rng = np.random.default_rng(_GATE_SEED)
    q_count = min(_GATE_QUERIES, store.n)
    spread = store.keys64.std(axis=0, ddof=0)
    sel = rng.integers(0, store.n, size=q_count)
    near = store.keys64[sel] + rng.normal(0.0, 1.0, (q_count, store.m)) * spread * 0.25
    pairs = rng.integers(0, store.n, size=(q_count, 2))
    mid = 0.5 * (store.keys64[pairs[:, 0]] + store.keys64[pairs[:, 1]])
    queries = np.concatenate([near, mid], axis=0)

    beam = params.search_beam
    measured = 0.0
    while True:
        index = ApproxIndex(
            store=store,
            params=replace(params, search_beam=beam),
            adjacency=adjacency,
            measured_recall=None,
        )
        measured = measure_recall(index, store, queries, min(_GATE_K, store.n))
        if measured >= params.target_recall:
            return replace(index, measured_recall=measured)
        if beam >= store.n:
            raise RecallFailureError(params.target_recall, measured)
        beam = min(store.n, beam * 2)


def search_approx(index: ApproxIndex, query, k: int) -> NeighborSet:
    """Graph beam search; reported distances are exact L2 for returned entries."""
    store = index.store
    q = _check_query(store, query)
    k = _check_k(k)
    beam = max(index.params.search_beam, k)
    found = _graph_search(store.keys64, index.adjacency, store.n, q, beam)
    top = found[: min(k, store.n)]
    idx = np.array([node for _, node in top], dtype=np.int64)
    return NeighborSet(
        distances=np.array([d for d, _ in top], dtype=np.float64),
        indices=idx,
        values=store.values[idx].astype(np.int64),
    )


def retrieve(store_or_index, query, k: int) -> NeighborSet:
    """Dispatch to the exact scan or the approximate graph."""
    if isinstance(store_or_index, Datastore):
        return search_exact(store_or_index, query, k)
    if isinstance(store_or_index, ApproxIndex):
        return search_approx(store_or_index, query, k)
    raise InvalidInputError(f"expected Datastore or ApproxIndex, got {type(store_or_index)!r}")


def backing_store(store_or_index) -> Datastore:
    if isinstance(store_or_index, Datastore):
        return store_or_index
    if isinstance(store_or_index, ApproxIndex):
        return store_or_index.store
    raise InvalidInputError(f"expected Datastore or ApproxIndex, got {type(store_or_index)!r}")


def batch_retrieve(
    store_or_index, queries, k: int, *, threads: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """(distances, indices) rows per query, ordered by query index."""
    if isinstance(store_or_index, Datastore):
        return search_exact_batch(store_or_index, queries, k, threads=threads)
    store = backing_store(store_or_index)
    qs = np.asarray(queries, dtype=np.float64)
    if qs.ndim != 2 or qs.shape[1] != store.m:
        raise DimensionMismatchError(
            f"queries have shape {qs.shape}, datastore keys have dim {store.m}"
        )
    j = min(_check_k(k), store.n)
    dists = np.empty((qs.shape[0], j), dtype=np.float64)
    indices = np.empty((qs.shape[0], j), dtype=np.int64)
    for qi in range(qs.shape[0]):
        ns = search_approx(store_or_index, qs[qi], k)
        dists[qi] = ns.distances
        indices[qi] = ns.indices
    return dists, indices


def measure_recall(index_or_store, store: Datastore, queries, k: int) -> float:
    """Mean over queries of |approx ∩ exact| / min(k, n), by entry index."""
    qs = np.asarray(queries, dtype=np.float64)
    if qs.ndim != 2 or qs.shape[0] < 1:
        raise InvalidInputError("need at least one query row")
    k = _check_k(k)
    denom = min(k, store.n)
    total = 0.0
    for row in qs:
        exact = set(search_exact(store, row, k).indices.tolist())
        approx = set(retrieve(index_or_store, row, k).indices.tolist())
        total += len(exact & approx) / denom
    return total / qs.shape[0]


def save_approx_index(index: ApproxIndex, destination: BinaryIO) -> int:
    """Serialize graph + params into the KNNI container; returns byte count."""
    from .dump_io import _CountingWriter

    w = _CountingWriter(destination)
    w.write(INDEX_MAGIC)
    w.write(_U32.pack(INDEX_VERSION))
    w.write(_U64.pack(index.store.n))
    w.write(_U32.pack(index.store.m))
    p = index.params
    w.write(_U32.pack(p.degree))
    w.write(_U32.pack(p.construction_beam))
    w.write(_U32.pack(p.search_beam))
    w.write(_F64.pack(p.target_recall))
    w.write(_F64.pack(-1.0 if index.measured_recall is None else index.measured_recall))
    w.write(index.store.meta.source_hash)
    for links in index.adjacency:
        w.write(_U32.pack(links.size))
        w.write(links.astype("<i4").tobytes())
    return w.offset


def load_approx_index(source: BinaryIO, store: Datastore) -> ApproxIndex:
    """Load a KNNI container and bind it to its datastore (validated)."""
    from .dump_io import _CountingReader

    r = _CountingReader(source)
    magic = r.read_exact(4, "magic")
    if magic != INDEX_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {INDEX_MAGIC!r}", offset=0)
    version = _U32.unpack(r.read_exact(4, "version"))[0]
    if version != INDEX_VERSION:
        raise VersionMismatchError(
            f"unsupported index version {version}, expected {INDEX_VERSION}", offset=4
        )
    n = _U64.unpack(r.read_exact(8, "entry count"))[0]
    m = _U32.unpack(r.read_exact(4, "key dim"))[0]
    degree = _U32.unpack(r.read_exact(4, "degree"))[0]
    construction_beam = _U32.unpack(r.read_exact(4, "construction beam"))[0]
    search_beam = _U32.unpack(r.read_exact(4, "search beam"))[0]
    target_recall = _F64.unpack(r.read_exact(8, "target recall"))[0]
    measured = _F64.unpack(r.read_exact(8, "measured recall"))[0]
    source_hash = r.read_exact(32, "source hash")
    if (n, m) != (store.n, store.m):
        raise InvariantViolationError(
            f"index built over {n}x{m} keys, datastore is {store.n}x{store.m}", offset=8
        )
    if source_hash != store.meta.source_hash:
        raise InvariantViolationError(
            "index was built from a different source dump than this datastore",
            offset=36,
        )
    adjacency = []
    for i in range(n):
        count = _U32.unpack(r.read_exact(4, f"adjacency count of node {i}"))[0]
        links = np.frombuffer(
            r.read_exact(4 * count, f"adjacency of node {i}"), dtype="<i4"
        ).copy()
        if count and (links.min() < 0 or links.max() >= n):
            raise InvariantViolationError(
                f"adjacency of node {i} references nodes outside 0..{n - 1}",
                offset=r.offset - 4 * count,
            )
        adjacency.append(links)
    if not r.at_eof():
        raise InvariantViolationError("trailing data after adjacency", offset=r.offset)
    params = ApproxIndexParams(
        degree=degree,
        construction_beam=construction_beam,
        search_beam=search_beam,
        target_recall=target_recall,
    )
    return ApproxIndex(
        store=store,
        params=params,
        adjacency=tuple(adjacency),
        measured_recall=None if measured < 0 else measured,
    )
