"""Per-query hard-negative cache over label retrieval embeddings.

The cache holds, for each query, the highest-scoring labels that are not
ground-truth positives, ranked by inner product of unit retrieval embeddings.
It is rebuilt on a schedule (every few epochs) and sampled from on every
batch.  Exact mining is the default; an HNSW index can stand in when scans
get expensive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, featurize_all
from .errors import ConfigError
from .hnsw import build_hnsw, search_hnsw
from .model import ModelParams, forward

CACHE_MAGIC = b"XMCHNC01"


@dataclass
class HardNegativeCache:
    negatives: list[np.ndarray]   # per query, ranked best-first
    epoch: int = 0

    def __len__(self) -> int:
        return len(self.negatives)


def mine_hard_negatives(query_vecs: np.ndarray, label_vecs: np.ndarray,
                        positive_sets: list, cache_size: int,
                        method: str = "exact", epoch: int = 0,
                        hnsw_seed: int = 0) -> HardNegativeCache:
    """Top ``cache_size`` non-positive labels per query by inner product.

    Exact mode ranks a full score row with a stable sort, so equal scores
    resolve toward the lower label id.  Queries whose positives cover almost
    the whole label set simply get shorter lists.
    """
    if method not in ("exact", "approximate"):
        raise ConfigError(f"unknown mining method {method!r}")
    n, l = query_vecs.shape[0], label_vecs.shape[0]
    if len(positive_sets) != n:
        raise ValueError("one positive set per query required")
    if cache_size <= 0:
        return HardNegativeCache([np.zeros(0, dtype=np.int64)] * n, epoch)

    out = []
    if method == "exact":
        scores = query_vecs @ label_vecs.T
        for i in range(n):
            row = scores[i].copy()
            row[np.asarray(positive_sets[i], dtype=np.int64)] = -np.inf
            order = np.argsort(-row, kind="stable")[:cache_size]
            out.append(order[np.isfinite(row[order])].astype(np.int64))
    else:
        index = build_hnsw(label_vecs, seed=hnsw_seed)
        for i in range(n):
            pos = set(int(x) for x in positive_sets[i])
            want = min(l, cache_size + len(pos))
            found = search_hnsw(index, query_vecs[i], want,
                                ef=max(2 * want, 64))
            keep = [c for c in found if int(c) not in pos][:cache_size]
            out.append(np.asarray(keep, dtype=np.int64))
    return HardNegativeCache(out, epoch)


def refresh_cache(params: ModelParams, dataset: Dataset, cache_size: int,
                  method: str = "exact", epoch: int = 0) -> HardNegativeCache:
    """Re-embed queries and labels (eval mode) and mine a fresh cache."""
    q_feats = featurize_all(dataset.instance_texts, dataset.vocab)
    l_feats = featurize_all(dataset.label_texts, dataset.vocab)
    q_vecs = forward(params, q_feats, mode="eval", heads=("de",)).de_out
    l_vecs = forward(params, l_feats, mode="eval", heads=("de",)).de_out
    return mine_hard_negatives(q_vecs, l_vecs, dataset.positive_sets(),
                               cache_size, method=method, epoch=epoch,
                               hnsw_seed=epoch)


def sample_hard_negatives(cache: HardNegativeCache, query_id: int,
                          count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample without replacement of min(count, |H_i|) cached ids."""
    pool = cache.negatives[query_id]
    if count <= 0 or pool.size == 0:
        return np.zeros(0, dtype=np.int64)
    if pool.size <= count:
        return np.sort(pool)
    return np.sort(rng.choice(pool, size=count, replace=False))


def _write_varint(buf: bytearray, value: int) -> None:
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            buf.append(byte | 0x80)
        else:
            buf.append(byte)
            return


def _read_varint(blob: bytes, offset: int) -> tuple[int, int]:
    shift = value = 0
    while True:
        byte = blob[offset]
        offset += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, offset
        shift += 7


def save_cache(cache: HardNegativeCache, path: str) -> None:
    buf = bytearray(CACHE_MAGIC)
    _write_varint(buf, cache.epoch)
    _write_varint(buf, len(cache.negatives))
    for ids in cache.negatives:
        _write_varint(buf, len(ids))
        for x in ids:
            _write_varint(buf, int(x))
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_cache(path: str) -> HardNegativeCache:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CACHE_MAGIC:
        raise ConfigError(f"{path}: not a hard-negative cache (bad magic)")
    epoch, off = _read_varint(blob, 8)
    count, off = _read_varint(blob, off)
    negatives = []
    for _ in range(count):
        size, off = _read_varint(blob, off)
        ids = np.zeros(size, dtype=np.int64)
        for j in range(size):
            ids[j], off = _read_varint(blob, off)
        negatives.append(ids)
    return HardNegativeCache(negatives, epoch)
