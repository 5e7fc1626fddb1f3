"""Bag-of-tokens encoder with two heads and a per-label classifier table.

The shared encoder is a token-embedding mean: for count features ``c`` the
encoding is ``(c / c.sum()) @ embed``.  Two heads project encodings into the
retrieval space: the retrieval head applies ``tanh(enc @ de_w + de_b)``,
dropout (train mode), then L2 normalization; the classifier head applies
``enc @ clf_w + clf_b`` and dropout with no normalization.  A separate
``classifiers`` table holds one trainable vector per label.

Everything is float64 by default so analytic gradients can be validated with
central finite differences.  ``forward`` caches all intermediates needed by
``backward``; in train mode, dropout masks are recorded so a pass can be
replayed bit-identically (required for finite-difference checks).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DegenerateEmbeddingError

CHECKPOINT_MAGIC = b"XMCLITE1"


@dataclass
class ModelParams:
    embed: np.ndarray        # (hash_dim, encoder_dim)
    de_w: np.ndarray         # (encoder_dim, search_dim)
    de_b: np.ndarray         # (search_dim,)
    clf_w: np.ndarray        # (encoder_dim, search_dim)
    clf_b: np.ndarray        # (search_dim,)
    classifiers: np.ndarray  # (num_labels, search_dim)
    dropout: float = 0.1

    @property
    def hash_dim(self) -> int:
        return self.embed.shape[0]

    @property
    def encoder_dim(self) -> int:
        return self.embed.shape[1]

    @property
    def search_dim(self) -> int:
        return self.de_w.shape[1]

    @property
    def num_labels(self) -> int:
        return self.classifiers.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"embed": self.embed, "de_w": self.de_w, "de_b": self.de_b,
                "clf_w": self.clf_w, "clf_b": self.clf_b,
                "classifiers": self.classifiers}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.arrays().items()},
                           dropout=self.dropout)

    def assert_finite(self) -> None:
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite values in {name}")


def init_params(hash_dim: int, encoder_dim: int, search_dim: int,
                num_labels: int, seed: int = 0, dropout: float = 0.1,
                dtype=np.float64) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init; biases start at zero."""
    if min(hash_dim, encoder_dim, search_dim, num_labels) < 1:
        raise ConfigError("all model dimensions must be >= 1")
    if not 0.0 <= dropout <= 1.0:
        raise ConfigError(f"dropout must be in [0, 1], got {dropout}")
    rng = np.random.default_rng([seed, 0])

    def uniform(shape, fan_in):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape).astype(dtype)

    return ModelParams(
        embed=uniform((hash_dim, encoder_dim), encoder_dim),
        de_w=uniform((encoder_dim, search_dim), encoder_dim),
        de_b=np.zeros(search_dim, dtype=dtype),
        clf_w=uniform((encoder_dim, search_dim), encoder_dim),
        clf_b=np.zeros(search_dim, dtype=dtype),
        classifiers=uniform((num_labels, search_dim), search_dim),
        dropout=float(dropout),
    )


def mean_normalize(feats: sp.csr_matrix) -> sp.csr_matrix:
    """Scale each count row to sum 1 (all-zero rows stay zero)."""
    sums = np.asarray(feats.sum(axis=1)).ravel()
    scale = np.divide(1.0, sums, out=np.zeros_like(sums, dtype=np.float64),
                      where=sums > 0)
    return sp.diags(scale).dot(feats).tocsr()


def encode(params: ModelParams, feats: sp.csr_matrix) -> np.ndarray:
    """Count-weighted mean of embedding rows; zero rows encode to zero."""
    return np.asarray(mean_normalize(feats) @ params.embed)


@dataclass
class ForwardTrace:
    """Cached activations from one forward pass (inputs to ``backward``)."""

    feats: sp.csr_matrix              # row-normalized features
    enc: np.ndarray
    mode: str
    de_act: np.ndarray | None = None  # tanh output, pre-dropout
    de_mask: np.ndarray | None = None
    de_kept: np.ndarray | None = None  # post-dropout, pre-normalization
    de_norm: np.ndarray | None = None  # (n, 1) row norms
    de_out: np.ndarray | None = None   # unit rows
    clf_mask: np.ndarray | None = None
    clf_out: np.ndarray | None = None


def _dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate >= 1.0:
        return np.zeros(shape)
    # Inverted dropout: keep with prob 1-rate, scale kept units by 1/(1-rate).
    return (rng.random(shape) >= rate) / (1.0 - rate)


def forward(params: ModelParams, feats: sp.csr_matrix, mode: str = "eval",
            rng: np.random.Generator | None = None,
            heads: tuple = ("de", "clf"),
            de_mask: np.ndarray | None = None,
            clf_mask: np.ndarray | None = None) -> ForwardTrace:
    """Run encoder + requested heads over an (n, hash_dim) feature block.

    In train mode, dropout masks are drawn from ``rng`` (retrieval head first,
    then classifier head) unless explicit masks are given.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    norm_feats = mean_normalize(feats)
    enc = np.asarray(norm_feats @ params.embed)
    trace = ForwardTrace(feats=norm_feats, enc=enc, mode=mode)
    train = mode == "train" and params.dropout > 0.0

    if "de" in heads:
        act = np.tanh(enc @ params.de_w + params.de_b)
        trace.de_act = act
        if train:
            if de_mask is None:
                if rng is None:
                    raise ValueError("train-mode forward needs an rng or masks")
                de_mask = _dropout_mask(act.shape, params.dropout, rng)
            trace.de_mask = de_mask
            kept = act * de_mask
        else:
            kept = act
        norms = np.linalg.norm(kept, axis=-1, keepdims=True)
        bad = np.flatnonzero(norms.ravel() == 0.0)
        if bad.size:
            raise DegenerateEmbeddingError(
                f"zero-norm vector before normalization at rows {bad.tolist()}")
        trace.de_kept = kept
        trace.de_norm = norms
        trace.de_out = kept / norms

    if "clf" in heads:
        pre = enc @ params.clf_w + params.clf_b
        if train:
            if clf_mask is None:
                if rng is None:
                    raise ValueError("train-mode forward needs an rng or masks")
            clf_mask = (clf_mask if clf_mask is not None
                        else _dropout_mask(pre.shape, params.dropout, rng))
            trace.clf_mask = clf_mask
            trace.clf_out = pre * clf_mask
        else:
            trace.clf_out = pre

    return trace


def de_head(params: ModelParams, enc: np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Unit-norm retrieval embedding of pre-computed encodings."""
    enc2 = np.atleast_2d(np.asarray(enc, dtype=np.float64))
    act = np.tanh(enc2 @ params.de_w + params.de_b)
    if mode == "train" and params.dropout > 0.0:
        act = act * _dropout_mask(act.shape, params.dropout,
                                  rng if rng is not None else np.random.default_rng())
    norms = np.linalg.norm(act, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError("zero-norm vector before normalization")
    out = act / norms
    return out[0] if np.ndim(enc) == 1 else out


def clf_head(params: ModelParams, enc: np.ndarray, mode: str = "eval",
             rng: np.random.Generator | None = None) -> np.ndarray:
    """Unnormalized classifier-side embedding of pre-computed encodings."""
    enc2 = np.atleast_2d(np.asarray(enc, dtype=np.float64))
    out = enc2 @ params.clf_w + params.clf_b
    if mode == "train" and params.dropout > 0.0:
        out = out * _dropout_mask(out.shape, params.dropout,
                                  rng if rng is not None else np.random.default_rng())
    return out[0] if np.ndim(enc) == 1 else out


@dataclass
class Grads:
    embed: np.ndarray
    de_w: np.ndarray
    de_b: np.ndarray
    clf_w: np.ndarray
    clf_b: np.ndarray
    classifiers: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {"embed": self.embed, "de_w": self.de_w, "de_b": self.de_b,
                "clf_w": self.clf_w, "clf_b": self.clf_b,
                "classifiers": self.classifiers}

    def add_(self, other: "Grads") -> "Grads":
        for k, v in self.arrays().items():
            v += other.arrays()[k]
        return self

    def scale_(self, factor: float) -> "Grads":
        for v in self.arrays().values():
            v *= factor
        return self

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v))
                                 for v in self.arrays().values())))


def zero_grads(params: ModelParams) -> Grads:
    return Grads(**{k: np.zeros_like(v) for k, v in params.arrays().items()})


def backward(params: ModelParams, trace: ForwardTrace,
             d_de: np.ndarray | None = None,
             d_clf: np.ndarray | None = None,
             d_classifier_rows: np.ndarray | None = None,
             classifier_ids: np.ndarray | None = None,
             out: Grads | None = None) -> Grads:
    """Accumulate exact parameter gradients for one forward trace.

    ``d_de`` / ``d_clf`` are loss gradients w.r.t. the head outputs;
    ``d_classifier_rows`` are gradients w.r.t. the classifier-table rows named
    by ``classifier_ids``.  Rows/params not touched keep zero gradient.
    """
    g = out if out is not None else zero_grads(params)
    d_enc = np.zeros_like(trace.enc)
    touched = False

    if d_de is not None:
        if trace.de_out is None:
            raise ValueError("trace has no retrieval-head activations")
        if d_de.shape != trace.de_out.shape:
            raise ValueError(f"d_de shape {d_de.shape} != {trace.de_out.shape}")
        u, r = trace.de_out, trace.de_norm
        # y = t/||t||  =>  dt = (dy - y (dy.y)) / ||t||
        d_kept = (d_de - u * np.sum(d_de * u, axis=-1, keepdims=True)) / r
        d_act = d_kept * trace.de_mask if trace.de_mask is not None else d_kept
        d_pre = d_act * (1.0 - trace.de_act ** 2)
        g.de_w += trace.enc.T @ d_pre
        g.de_b += d_pre.sum(axis=0)
        d_enc += d_pre @ params.de_w.T
        touched = True

    if d_clf is not None:
        if trace.clf_out is None:
            raise ValueError("trace has no classifier-head activations")
        if d_clf.shape != trace.clf_out.shape:
            raise ValueError(f"d_clf shape {d_clf.shape} != {trace.clf_out.shape}")
        d_pre = d_clf * trace.clf_mask if trace.clf_mask is not None else d_clf
        g.clf_w += trace.enc.T @ d_pre
        g.clf_b += d_pre.sum(axis=0)
        d_enc += d_pre @ params.clf_w.T
        touched = True

    if touched:
        g.embed += np.asarray(trace.feats.T @ d_enc)

    if d_classifier_rows is not None:
        if classifier_ids is None:
            raise ValueError("classifier gradients need classifier_ids")
        ids = np.asarray(classifier_ids)
        if d_classifier_rows.shape != (len(ids), params.search_dim):
            raise ValueError("classifier gradient shape mismatch")
        np.add.at(g.classifiers, ids, d_classifier_rows)

    return g


def save_checkpoint(path: str, params: ModelParams,
                    extra: dict | None = None) -> None:
    """Binary checkpoint (magic + dims + float64 matrices) and JSON sidecar."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.array([params.hash_dim, params.encoder_dim,
                           params.search_dim, params.num_labels],
                          dtype="<u8").tobytes())
        fh.write(struct.pack("<d", params.dropout))
        for name in ("embed", "de_w", "de_b", "clf_w", "clf_b", "classifiers"):
            fh.write(np.ascontiguousarray(
                params.arrays()[name], dtype="<f8").tobytes())
    sidecar = {"dims": {"hash_dim": params.hash_dim,
                        "encoder_dim": params.encoder_dim,
                        "search_dim": params.search_dim,
                        "num_labels": params.num_labels},
               "dropout": params.dropout}
    if extra:
        sidecar.update(extra)
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str) -> tuple[ModelParams, dict]:
    """Validate magic/dims and rebuild params; returns (params, sidecar)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a model checkpoint (bad magic)")
    dims = np.frombuffer(blob, dtype="<u8", count=4, offset=8)
    hash_dim, enc_dim, search_dim, num_labels = (int(x) for x in dims)
    (dropout,) = struct.unpack_from("<d", blob, 40)
    shapes = [("embed", (hash_dim, enc_dim)), ("de_w", (enc_dim, search_dim)),
              ("de_b", (search_dim,)), ("clf_w", (enc_dim, search_dim)),
              ("clf_b", (search_dim,)), ("classifiers", (num_labels, search_dim))]
    expected = 48 + 8 * sum(int(np.prod(s)) for _, s in shapes)
    if len(blob) != expected:
        raise ConfigError(
            f"{path}: size {len(blob)} does not match header dims "
            f"(expected {expected})")
    offset, fields = 48, {}
    for name, shape in shapes:
        count = int(np.prod(shape))
        fields[name] = np.frombuffer(
            blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    params = ModelParams(**fields, dropout=float(dropout))
    sidecar_path = path + ".json"
    try:
        with open(sidecar_path, "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
    except FileNotFoundError:
        sidecar = {}
    return params, sidecar
