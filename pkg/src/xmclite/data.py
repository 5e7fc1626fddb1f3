"""Multi-label dataset loading, validation, featurization, and synthesis.

Two on-disk formats are supported for the instance side:

* ``xmc-sparse``: header line ``"N L"`` followed by N rows whose first
  whitespace-separated field is a comma-separated list of positive label ids,
  optionally followed by ``feature:value`` pairs which are ignored.  The format
  carries no raw text, so instance texts load empty; such datasets serve
  evaluation and batch simulation, not encoder training.
* ``jsonl``: one ``{"text": ..., "labels": [...]}`` object per line.

Label texts always come from a separate file, one label per line; an empty
label line is a hard error because every label must be embeddable.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DatasetFormatError

_SPLIT = re.compile(r"[^0-9a-z]+")


def _stable_hash(token: str) -> int:
    # blake2b rather than hash(): identical across processes and platforms.
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class Vocabulary:
    """Feature-hashing vocabulary: no build pass, fixed dimension.

    Tokens are lowercased runs of ASCII alphanumerics; each token maps to
    ``stable_64bit_hash(token) mod hash_dim``.
    """

    hash_dim: int = 1 << 15

    def __post_init__(self):
        if self.hash_dim <= 0:
            raise ValueError(f"hash_dim must be positive, got {self.hash_dim}")

    def token_id(self, token: str) -> int:
        return _stable_hash(token) % self.hash_dim

    def tokenize(self, text: str) -> np.ndarray:
        """Text -> array of token ids (may be empty)."""
        ids = [self.token_id(t) for t in _SPLIT.split(text.lower()) if t]
        return np.asarray(ids, dtype=np.int64)


def featurize(token_ids: np.ndarray, vocab: Vocabulary) -> sp.csr_matrix:
    """Token-id sequence -> 1 x hash_dim sparse count vector."""
    return featurize_all([token_ids], vocab)


def featurize_all(texts: list[np.ndarray], vocab: Vocabulary,
                  dtype=np.float64) -> sp.csr_matrix:
    """Stack count vectors for many texts into an (n, hash_dim) CSR matrix."""
    rows = np.concatenate(
        [np.full(len(t), i, dtype=np.int64) for i, t in enumerate(texts)]
    ) if texts else np.zeros(0, dtype=np.int64)
    cols = (np.concatenate([np.asarray(t, dtype=np.int64) for t in texts])
            if texts else np.zeros(0, dtype=np.int64))
    data = np.ones(len(cols), dtype=dtype)
    mat = sp.coo_matrix((data, (rows, cols)),
                        shape=(len(texts), vocab.hash_dim)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


@dataclass
class Dataset:
    """Immutable container for instances, labels, and their relevance matrix."""

    num_instances: int
    num_labels: int
    instance_texts: list[np.ndarray]
    label_texts: list[np.ndarray]
    relevance: sp.csr_matrix          # (N, L) binary, rows sorted
    label_frequencies: np.ndarray     # (L,) positive count per label
    vocab: Vocabulary = field(default_factory=Vocabulary)
    empty_row_count: int = 0          # instances loaded with no positives

    def positives(self, i: int) -> np.ndarray:
        """Sorted positive label ids of instance i (a view, do not mutate)."""
        sl = slice(self.relevance.indptr[i], self.relevance.indptr[i + 1])
        return self.relevance.indices[sl]

    def positive_sets(self) -> list[np.ndarray]:
        return [self.positives(i) for i in range(self.num_instances)]

    def validate(self) -> None:
        n, l = self.num_instances, self.num_labels
        if self.relevance.shape != (n, l):
            raise ValueError(f"relevance shape {self.relevance.shape} != ({n}, {l})")
        if len(self.instance_texts) != n or len(self.label_texts) != l:
            raise ValueError("text list lengths disagree with matrix shape")
        idx = self.relevance.indices
        if idx.size and (idx.min() < 0 or idx.max() >= l):
            raise ValueError("relevance references a label id outside [0, L)")
        for i in range(n):
            p = self.positives(i)
            if np.any(np.diff(p) <= 0):
                raise ValueError(f"positives of instance {i} not strictly sorted")
        freq = np.bincount(idx, minlength=l).astype(np.int64)
        if not np.array_equal(freq, self.label_frequencies):
            raise ValueError("stored label_frequencies disagree with matrix")


def make_dataset(instance_texts: list[np.ndarray], label_texts: list[np.ndarray],
                 positive_sets: list, num_labels: int,
                 vocab: Vocabulary, empty_row_count: int | None = None) -> Dataset:
    """Assemble and validate a Dataset from per-instance positive-id lists."""
    n = len(instance_texts)
    cleaned = [np.unique(np.asarray(p, dtype=np.int64)) for p in positive_sets]
    indptr = np.zeros(n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(p) for p in cleaned])
    indices = (np.concatenate(cleaned) if n else np.zeros(0, dtype=np.int64))
    data = np.ones(len(indices), dtype=np.int8)
    rel = sp.csr_matrix((data, indices, indptr), shape=(n, num_labels))
    freq = np.bincount(indices, minlength=num_labels).astype(np.int64)
    if empty_row_count is None:
        empty_row_count = sum(1 for p in cleaned if len(p) == 0)
    ds = Dataset(n, num_labels, instance_texts, label_texts, rel, freq,
                 vocab, empty_row_count)
    ds.validate()
    return ds


def _read_lines(path: str) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read().splitlines()


def load_label_texts(path: str, vocab: Vocabulary) -> list[np.ndarray]:
    """One label text per line; empty lines are a hard error."""
    texts = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            raise DatasetFormatError("empty label text", path, lineno)
        texts.append(vocab.tokenize(line))
    return texts


def _parse_label_field(raw: str, num_labels: int, path: str, lineno: int) -> list[int]:
    ids = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            lid = int(part)
        except ValueError as exc:
            raise DatasetFormatError(
                f"malformed label list {raw!r}", path, lineno) from exc
        if lid < 0 or lid >= num_labels:
            raise DatasetFormatError("label id out of range", path, lineno)
        ids.append(lid)
    return ids


def load_dataset(queries_path: str, labels_path: str, format: str = "jsonl",
                 vocab: Vocabulary | None = None) -> Dataset:
    """Load instance rows plus the label-text file and cross-validate counts."""
    vocab = vocab if vocab is not None else Vocabulary()
    label_texts = load_label_texts(labels_path, vocab)
    if format == "xmc-sparse":
        return _load_sparse(queries_path, label_texts, vocab)
    if format == "jsonl":
        return _load_jsonl(queries_path, label_texts, vocab)
    raise DatasetFormatError(f"unknown dataset format {format!r}", queries_path)


def _load_sparse(path: str, label_texts: list[np.ndarray],
                 vocab: Vocabulary) -> Dataset:
    lines = _read_lines(path)
    if not lines:
        raise DatasetFormatError("empty file, expected 'N L' header", path, 1)
    head = lines[0].split()
    if len(head) != 2:
        raise DatasetFormatError(f"malformed header {lines[0]!r}", path, 1)
    try:
        n, l = int(head[0]), int(head[1])
    except ValueError as exc:
        raise DatasetFormatError(f"malformed header {lines[0]!r}", path, 1) from exc
    if n < 0 or l < 0:
        raise DatasetFormatError(f"negative counts in header {lines[0]!r}", path, 1)
    if len(label_texts) != l:
        raise DatasetFormatError(
            f"label file has {len(label_texts)} lines but header declares L={l}",
            path, 1)
    body = lines[1:]
    # Trailing all-blank lines are tolerated; blanks inside the body are rows
    # with no positives.
    while len(body) > n and not body[-1].strip():
        body.pop()
    if len(body) != n:
        raise DatasetFormatError(
            f"header declares N={n} rows but body has {len(body)}",
            path, len(lines))
    positive_sets, empties = [], 0
    for off, line in enumerate(body):
        lineno = off + 2
        fields = line.split()
        if not fields or ":" in fields[0]:
            positive_sets.append([])
            empties += 1
            continue
        ids = _parse_label_field(fields[0], l, path, lineno)
        if not ids:
            empties += 1
        positive_sets.append(ids)
    instance_texts = [np.zeros(0, dtype=np.int64)] * n
    return make_dataset(instance_texts, label_texts, positive_sets, l,
                        vocab, empty_row_count=empties)


def _load_jsonl(path: str, label_texts: list[np.ndarray],
                vocab: Vocabulary) -> Dataset:
    l = len(label_texts)
    instance_texts, positive_sets, empties = [], [], 0
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"invalid JSON: {exc.msg}", path, lineno) from exc
        if not isinstance(obj, dict) or "text" not in obj or "labels" not in obj:
            raise DatasetFormatError(
                "expected an object with 'text' and 'labels'", path, lineno)
        if not isinstance(obj["text"], str):
            raise DatasetFormatError("'text' must be a string", path, lineno)
        if not isinstance(obj["labels"], list):
            raise DatasetFormatError("'labels' must be a list", path, lineno)
        ids = []
        for lid in obj["labels"]:
            if not isinstance(lid, int) or isinstance(lid, bool):
                raise DatasetFormatError(
                    f"label id {lid!r} is not an integer", path, lineno)
            if lid < 0 or lid >= l:
                raise DatasetFormatError("label id out of range", path, lineno)
            ids.append(lid)
        if not ids:
            empties += 1
        instance_texts.append(vocab.tokenize(obj["text"]))
        positive_sets.append(ids)
    return make_dataset(instance_texts, label_texts, positive_sets, l,
                        vocab, empty_row_count=empties)


def save_sparse(dataset: Dataset, path: str) -> None:
    """Write the relevance matrix in the xmc-sparse format (labels only)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{dataset.num_instances} {dataset.num_labels}\n")
        for i in range(dataset.num_instances):
            fh.write(",".join(str(x) for x in dataset.positives(i)) + "\n")


def synth_dataset(num_instances: int, num_labels: int, seed: int = 0,
                  positives_per_instance: tuple[int, int] = (1, 3),
                  vocab: Vocabulary | None = None,
                  noise_tokens: int = 16) -> Dataset:
    """Deterministic, linearly separable fixture.

    Label ``l`` has signature token ``sig<l>`` as its entire text; each
    instance's text is the signature tokens of its positives plus one noise
    token, so a bag-of-tokens model can recover the relevance exactly.
    """
    if num_instances < 1 or num_labels < 1:
        raise ValueError("num_instances and num_labels must be >= 1")
    lo, hi = positives_per_instance
    if lo < 1 or hi < lo:
        raise ValueError(f"bad positives_per_instance range {positives_per_instance}")
    vocab = vocab if vocab is not None else Vocabulary()
    rng = np.random.default_rng(seed)
    label_texts = [vocab.tokenize(f"sig{l}") for l in range(num_labels)]
    instance_texts, positive_sets = [], []
    for _ in range(num_instances):
        k = min(int(rng.integers(lo, hi, endpoint=True)), num_labels)
        pos = np.sort(rng.choice(num_labels, size=k, replace=False))
        words = [f"sig{p}" for p in pos] + [f"w{rng.integers(noise_tokens)}"]
        instance_texts.append(vocab.tokenize(" ".join(words)))
        positive_sets.append(pos)
    return make_dataset(instance_texts, label_texts, positive_sets,
                        num_labels, vocab)
