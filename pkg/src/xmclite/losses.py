"""Training objectives over a batch label pool, with exact gradients.

The core objective is a temperature-scaled softmax cross-entropy where each
anchor may have several positive targets inside the pool.  It is applied in
two directions (queries scoring the label pool, and pool labels scoring the
queries) and on two representation pairs (retrieval-head embeddings against
label retrieval embeddings; classifier-head embeddings against classifier
rows).  Baseline objectives (pairwise triplet hinge, one-vs-all BCE) live here
too.

All losses return their gradients w.r.t. every input vector; no autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError

_REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class LossConfig:
    """Mixing weights and options for the combined objective.

    ``de_weight`` mixes the retrieval-head loss against the classifier loss;
    the ``*_q2l_weight`` values mix the query-anchored direction against the
    label-anchored direction inside each of those.  ``positive_reduction``
    selects whether an anchor's log-probabilities are averaged over its
    positives ("mean") or summed ("sum").
    """

    temperature: float = 0.05
    de_weight: float = 0.5
    de_q2l_weight: float = 0.5
    clf_q2l_weight: float = 0.5
    positive_reduction: str = "mean"
    batch_reduction: str = "mean"
    triplet_margin: float = 0.3
    extra_clf_positives: int = 0

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        for name in ("de_weight", "de_q2l_weight", "clf_q2l_weight"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        for name in ("positive_reduction", "batch_reduction"):
            if getattr(self, name) not in _REDUCTIONS:
                raise ConfigError(
                    f"{name} must be one of {_REDUCTIONS}, got {getattr(self, name)!r}")
        if self.triplet_margin < 0:
            raise ConfigError("triplet_margin must be >= 0")
        if self.extra_clf_positives < 0:
            raise ConfigError("extra_clf_positives must be >= 0")


@dataclass
class PoolLossResult:
    value: float
    per_anchor: np.ndarray            # pre-batch-reduction values, zeros if skipped
    d_anchors: np.ndarray | None
    d_targets: np.ndarray | None


def pooled_softmax_loss(anchors: np.ndarray, targets: np.ndarray,
                        positive_sets: list, temperature: float,
                        positive_reduction: str = "mean",
                        batch_reduction: str = "mean",
                        with_grads: bool = True) -> PoolLossResult:
    """Multi-positive softmax cross-entropy of anchors against a target pool.

    ``positive_sets[i]`` holds indices into ``targets`` that are positive for
    anchor i; anchors with no positives contribute nothing (and do not count
    toward the batch mean).  Log-sum-exp uses max subtraction.

    Reference cases (any temperature):

    * an anchor whose single pool label is its positive: loss 0;
    * one anchor scoring two pool labels identically, one positive:
      loss = ln 2 = 0.6931471805599453;
    * one anchor scoring three pool labels identically, two positives:
      ln 3 = 1.0986122886681098 under "mean" positive reduction, and
      2 ln 3 under "sum" (for any scores, an anchor's "sum" value is
      |positives| times its "mean" value).
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if positive_reduction not in _REDUCTIONS or batch_reduction not in _REDUCTIONS:
        raise ConfigError("reductions must be 'mean' or 'sum'")
    n, m = anchors.shape[0], targets.shape[0]
    if len(positive_sets) != n:
        raise ValueError(f"{len(positive_sets)} positive sets for {n} anchors")
    if n == 0 or m == 0:
        d_a = np.zeros_like(anchors) if with_grads else None
        d_t = np.zeros_like(targets) if with_grads else None
        return PoolLossResult(0.0, np.zeros(n), d_a, d_t)

    logits = (anchors @ targets.T) / temperature
    row_max = logits.max(axis=1, keepdims=True)
    lse = row_max + np.log(np.exp(logits - row_max).sum(axis=1, keepdims=True))
    logp = logits - lse

    # pos_w[i, p] = per-positive weight; doubles as the label-side indicator.
    pos_w = np.zeros((n, m))
    coef = np.zeros(n)                # multiplier on the softmax term
    active = np.zeros(n, dtype=bool)
    for i, pos in enumerate(positive_sets):
        pos = np.asarray(pos, dtype=np.int64)
        if pos.size == 0:
            continue
        active[i] = True
        if positive_reduction == "mean":
            pos_w[i, pos] = 1.0 / pos.size
            coef[i] = 1.0
        else:
            pos_w[i, pos] = 1.0
            coef[i] = float(pos.size)

    per_anchor = -(pos_w * logp).sum(axis=1)
    n_active = int(active.sum())
    if n_active == 0:
        d_a = np.zeros_like(anchors) if with_grads else None
        d_t = np.zeros_like(targets) if with_grads else None
        return PoolLossResult(0.0, per_anchor, d_a, d_t)
    weight = 1.0 / n_active if batch_reduction == "mean" else 1.0
    value = float(per_anchor[active].sum() * weight)

    if not with_grads:
        return PoolLossResult(value, per_anchor, None, None)
    d_logits = weight * (coef[:, None] * np.exp(logp) - pos_w)
    d_logits[~active] = 0.0
    d_anchors = (d_logits @ targets) / temperature
    d_targets = (d_logits.T @ anchors) / temperature
    return PoolLossResult(value, per_anchor, d_anchors, d_targets)


def query_to_label_loss(query_vecs, label_vecs, positives_by_query,
                        temperature, **kw) -> PoolLossResult:
    """Queries anchor; softmax runs over the label pool."""
    return pooled_softmax_loss(query_vecs, label_vecs, positives_by_query,
                               temperature, **kw)


def label_to_query_loss(label_vecs, query_vecs, positives_by_label,
                        temperature, **kw) -> PoolLossResult:
    """Pool labels anchor; softmax runs over the batch queries."""
    return pooled_softmax_loss(label_vecs, query_vecs, positives_by_label,
                               temperature, **kw)


@dataclass
class SymmetricLossResult:
    value: float
    q2l_value: float
    l2q_value: float
    d_queries: np.ndarray | None
    d_targets: np.ndarray | None


def symmetric_pool_loss(query_vecs: np.ndarray, target_vecs: np.ndarray,
                        positives_by_query: list, positives_by_target: list,
                        temperature: float, q2l_weight: float,
                        positive_reduction: str = "mean",
                        batch_reduction: str = "mean",
                        with_grads: bool = True) -> SymmetricLossResult:
    """Convex mix of the two anchoring directions over one pool."""
    kw = dict(positive_reduction=positive_reduction,
              batch_reduction=batch_reduction, with_grads=with_grads)
    fwd = pooled_softmax_loss(query_vecs, target_vecs, positives_by_query,
                              temperature, **kw)
    rev = pooled_softmax_loss(target_vecs, query_vecs, positives_by_target,
                              temperature, **kw)
    w = q2l_weight
    value = w * fwd.value + (1.0 - w) * rev.value
    if not with_grads:
        return SymmetricLossResult(value, fwd.value, rev.value, None, None)
    d_queries = w * fwd.d_anchors + (1.0 - w) * rev.d_targets
    d_targets = w * fwd.d_targets + (1.0 - w) * rev.d_anchors
    return SymmetricLossResult(value, fwd.value, rev.value, d_queries, d_targets)


def retrieval_loss(query_de_vecs, label_de_vecs, positives_by_query,
                   positives_by_label, cfg: LossConfig,
                   with_grads: bool = True) -> SymmetricLossResult:
    """Symmetric pool loss on the (unit-norm) retrieval-head embeddings."""
    return symmetric_pool_loss(
        query_de_vecs, label_de_vecs, positives_by_query, positives_by_label,
        cfg.temperature, cfg.de_q2l_weight, cfg.positive_reduction,
        cfg.batch_reduction, with_grads)


def classifier_loss(query_clf_vecs, classifier_rows, positives_by_query,
                    positives_by_label, cfg: LossConfig,
                    with_grads: bool = True) -> SymmetricLossResult:
    """Symmetric pool loss on classifier-head outputs vs classifier rows.

    Inputs are deliberately not normalized; the pool may be larger than the
    retrieval pool when extra classifier-side positives are configured.
    """
    return symmetric_pool_loss(
        query_clf_vecs, classifier_rows, positives_by_query, positives_by_label,
        cfg.temperature, cfg.clf_q2l_weight, cfg.positive_reduction,
        cfg.batch_reduction, with_grads)


def combined_loss(retrieval_value: float, classifier_value: float,
                  de_weight: float) -> float:
    if not 0.0 <= de_weight <= 1.0:
        raise ConfigError(f"de_weight must be in [0, 1], got {de_weight}")
    return de_weight * retrieval_value + (1.0 - de_weight) * classifier_value


def triplet_loss(anchor: np.ndarray, positives: np.ndarray,
                 negatives: np.ndarray, margin: float,
                 with_grads: bool = True):
    """Pairwise hinge on inner-product scores, summed over all (p, n) pairs."""
    if margin < 0:
        raise ConfigError(f"margin must be >= 0, got {margin}")
    pos_scores = positives @ anchor
    neg_scores = negatives @ anchor
    # violation[p, n] = margin + <a, z_n> - <a, z_p>, clamped at zero
    viol = margin + neg_scores[None, :] - pos_scores[:, None]
    hinge = np.maximum(viol, 0.0)
    value = float(hinge.sum())
    if not with_grads:
        return value, None, None, None
    act = (viol > 0).astype(np.float64)
    d_pos = -act.sum(axis=1)[:, None] * anchor
    d_neg = act.sum(axis=0)[:, None] * anchor
    d_anchor = act.sum(axis=0) @ negatives - act.sum(axis=1) @ positives
    return value, d_anchor, d_pos, d_neg


def one_vs_all_bce(scores: np.ndarray, targets: np.ndarray,
                   with_grads: bool = True):
    """Sum of per-label sigmoid cross-entropies, overflow-safe."""
    targets = np.asarray(targets, dtype=np.float64)
    if scores.shape != targets.shape:
        raise ValueError(f"shape mismatch {scores.shape} vs {targets.shape}")
    if np.any((targets != 0) & (targets != 1)):
        raise ValueError("targets must be binary")
    value = float(np.sum(np.logaddexp(0.0, scores) - targets * scores))
    if not with_grads:
        return value, None
    return value, expit(scores) - targets
