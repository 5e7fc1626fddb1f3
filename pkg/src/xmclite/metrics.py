"""Ranking metrics: precision@k and its propensity-scored variant.

Propensities follow the standard empirical model for observation bias:
``p_l = 1 / (1 + C * (N_l + B) ** -A)`` with ``C = (ln N - 1) * (B + 1) ** A``,
fed by train-set label frequencies.  Queries with empty ground truth count as
zero toward precision but are excluded from the propensity-scored mean, whose
per-query normalizer would be undefined.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

DEFAULT_A = 0.55
DEFAULT_B = 1.5

# Shape of the JSON metrics report: {"P@1": x, "PSP@1": y, ...}
METRICS_SCHEMA = {
    "type": "object",
    "patternProperties": {
        r"^(P|PSP)@[1-9][0-9]*$": {
            "type": "number", "minimum": 0.0, "maximum": 1.0,
        },
    },
    "additionalProperties": False,
}


def _check_k(k: int) -> None:
    if k <= 0:
        raise ConfigError(f"k must be >= 1, got {k}")


def precision_at_k(predictions: list, truth_sets: list, k: int) -> float:
    """Mean over all queries of |top-k hits| / k (short lists pad as misses)."""
    _check_k(k)
    if len(predictions) != len(truth_sets):
        raise ValueError("one prediction list per query required")
    if not predictions:
        return 0.0
    total = 0.0
    for pred, truth in zip(predictions, truth_sets):
        top = np.asarray(pred, dtype=np.int64)[:k]
        total += np.isin(top, np.asarray(truth, dtype=np.int64)).sum() / k
    return float(total / len(predictions))


def propensity(label_count, num_instances: int,
               a: float = DEFAULT_A, b: float = DEFAULT_B):
    """Per-label observation propensity; accepts scalars or arrays."""
    if np.log(num_instances) <= 1.0:
        raise ConfigError(
            f"propensity model undefined for N={num_instances} (ln N <= 1)")
    c = (np.log(num_instances) - 1.0) * (b + 1.0) ** a
    return 1.0 / (1.0 + c * np.power(np.asarray(label_count, dtype=np.float64) + b, -a))


def psp_at_k(predictions: list, truth_sets: list, propensities: np.ndarray,
             k: int) -> float:
    """Propensity-scored precision: inverse-propensity-weighted hits over the
    best achievable weight, averaged over queries with nonempty truth."""
    _check_k(k)
    if len(predictions) != len(truth_sets):
        raise ValueError("one prediction list per query required")
    inv = 1.0 / np.asarray(propensities, dtype=np.float64)
    total, counted = 0.0, 0
    for pred, truth in zip(predictions, truth_sets):
        truth = np.asarray(truth, dtype=np.int64)
        if truth.size == 0:
            continue
        counted += 1
        top = np.asarray(pred, dtype=np.int64)[:k]
        hits = top[np.isin(top, truth)]
        gained = inv[hits].sum()
        ideal = np.sort(inv[truth])[::-1][:k].sum()
        total += gained / ideal
    return float(total / counted) if counted else 0.0


def metrics_report(predictions: list, truth_sets: list,
                   propensities: np.ndarray, k_list=(1, 3, 5)) -> dict:
    """P@k and PSP@k for each k, as a flat JSON-ready dict."""
    report = {}
    for k in k_list:
        report[f"P@{k}"] = precision_at_k(predictions, truth_sets, k)
        report[f"PSP@{k}"] = psp_at_k(predictions, truth_sets, propensities, k)
    return report
