"""Small deterministic HNSW graph for approximate inner-product top-k.

Drop-in alternative to the exact brute-force scan used elsewhere; exact mode
remains the default everywhere correctness matters.  Scores are raw inner
products (callers pass unit vectors when they want cosine).  All randomness
comes from the seed given at build time, and every heap holds (score, id)
pairs so ties resolve toward lower ids.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np


@dataclass
class HnswIndex:
    vectors: np.ndarray
    max_degree: int
    ef_construction: int
    entry_point: int
    max_level: int
    # neighbors[level][node] -> list of node ids
    neighbors: list[dict[int, list[int]]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.vectors.shape[0]


def _search_layer(index: HnswIndex, query: np.ndarray, entry: int,
                  ef: int, level: int) -> list[tuple[float, int]]:
    """Beam search one layer; returns up to ef (score, id) pairs, best first."""
    vecs = index.vectors
    start_score = float(vecs[entry] @ query)
    visited = {entry}
    # candidates: max-heap via negated score; results: min-heap of kept best.
    candidates = [(-start_score, entry)]
    results = [(start_score, entry)]
    while candidates:
        neg_score, node = heapq.heappop(candidates)
        if -neg_score < results[0][0] and len(results) >= ef:
            break
        for nb in index.neighbors[level].get(node, ()):
            if nb in visited:
                continue
            visited.add(nb)
            score = float(vecs[nb] @ query)
            if len(results) < ef or score > results[0][0]:
                heapq.heappush(candidates, (-score, nb))
                heapq.heappush(results, (score, nb))
                if len(results) > ef:
                    heapq.heappop(results)
    return sorted(results, key=lambda t: (-t[0], t[1]))


def build_hnsw(vectors: np.ndarray, max_degree: int = 16,
               ef_construction: int = 100, seed: int = 0) -> HnswIndex:
    n = vectors.shape[0]
    if n == 0:
        return HnswIndex(vectors, max_degree, ef_construction, -1, -1, [])
    rng = np.random.default_rng([seed, 7])
    level_mult = 1.0 / np.log(max_degree)
    levels = np.floor(-np.log(rng.uniform(1e-12, 1.0, size=n)) * level_mult)
    levels = levels.astype(np.int64)
    max_level = int(levels.max())
    index = HnswIndex(vectors, max_degree, ef_construction,
                      entry_point=0, max_level=-1,
                      neighbors=[{} for _ in range(max_level + 1)])

    def connect(level, a, b):
        cap = max_degree if level > 0 else 2 * max_degree
        for u, v in ((a, b), (b, a)):
            lst = index.neighbors[level].setdefault(u, [])
            lst.append(v)
            if len(lst) > cap:
                # keep the strongest links, ties toward lower id
                scored = sorted(((float(vectors[u] @ vectors[w]), w) for w in lst),
                                key=lambda t: (-t[0], t[1]))
                index.neighbors[level][u] = [w for _, w in scored[:cap]]

    for node in range(n):
        node_level = int(levels[node])
        if index.max_level < 0:
            index.entry_point = node
            index.max_level = node_level
            for lv in range(node_level + 1):
                index.neighbors[lv][node] = []
            continue
        entry = index.entry_point
        query = vectors[node]
        for lv in range(index.max_level, node_level, -1):
            entry = _search_layer(index, query, entry, 1, lv)[0][1]
        for lv in range(min(node_level, index.max_level), -1, -1):
            found = _search_layer(index, query, entry, ef_construction, lv)
            for _, nb in found[:max_degree]:
                connect(lv, node, nb)
            entry = found[0][1]
        if node_level > index.max_level:
            index.max_level = node_level
            index.entry_point = node
    return index


def search_hnsw(index: HnswIndex, query: np.ndarray, k: int,
                ef: int | None = None) -> np.ndarray:
    """Approximate top-k ids by inner product, best first."""
    if len(index) == 0 or k <= 0:
        return np.zeros(0, dtype=np.int64)
    ef = max(ef if ef is not None else index.ef_construction, k)
    entry = index.entry_point
    for lv in range(index.max_level, 0, -1):
        entry = _search_layer(index, query, entry, 1, lv)[0][1]
    found = _search_layer(index, query, entry, ef, 0)
    return np.asarray([node for _, node in found[:k]], dtype=np.int64)
