"""Joint training loop: scheduled re-clustering + cache refresh, per-batch
collation, dual-head forward, combined loss, exact backward, Adam step.

Every ``refresh_interval`` epochs (including epoch 0, which bootstraps from
the untrained model) the loop re-embeds all queries and labels in eval mode,
rebuilds the balanced batch plan from the query embeddings, and re-mines the
hard-negative cache.  Within an epoch, each batch encodes its queries through
both heads and its pool label texts through the retrieval head, gathers
classifier rows for the pool, and steps on
``de_weight * retrieval_loss + (1 - de_weight) * classifier_loss``.

Single-threaded and fully deterministic for a fixed config and seed: the
JSONL training log carries no timestamps, so reruns are byte-identical.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .batching import (STREAM_DROPOUT, cluster_queries, collate_batch)
from .data import Dataset, featurize_all
from .errors import ConfigError, TrainingAbort
from .infer import MODES, build_index, predict_vectors, query_vectors
from .losses import LossConfig, classifier_loss, combined_loss, retrieval_loss
from .metrics import metrics_report, propensity
from .model import (ModelParams, backward, forward, init_params,
                    save_checkpoint, zero_grads)
from .negatives import mine_hard_negatives
from .optim import Adam


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 64
    refresh_interval: int = 5
    positives_per_query: int = 3        # per-query positive sample cap
    hard_negatives_per_query: int = 6   # per-query hard-negative sample count
    cache_size: int = 0                 # 0 -> hard_negatives_per_query * refresh_interval
    mining: str = "exact"
    hash_dim: int = 1 << 15
    encoder_dim: int = 64
    search_dim: int = 32
    dropout: float = 0.1
    warm_start_classifiers: bool = True
    lr_encoder: float = 1e-4
    lr_heads: float = 2e-4
    lr_classifiers: float = 1e-3
    grad_clip: float = 0.0
    seed: int = 0
    eval_every: int = 0                 # 0 -> no in-training evaluation
    eval_k: tuple = (1, 3, 5)
    eval_modes: tuple = MODES
    loss: LossConfig = field(default_factory=LossConfig)

    def resolved_cache_size(self) -> int:
        if self.cache_size > 0:
            return self.cache_size
        return self.hard_negatives_per_query * self.refresh_interval

    def validate(self) -> None:
        checks = [
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.refresh_interval >= 1, "refresh_interval must be >= 1"),
            (self.positives_per_query >= 1, "positives_per_query must be >= 1"),
            (self.hard_negatives_per_query >= 0,
             "hard_negatives_per_query must be >= 0"),
            (self.cache_size >= 0, "cache_size must be >= 0"),
            (self.mining in ("exact", "approximate"),
             f"mining must be 'exact' or 'approximate', got {self.mining!r}"),
            (min(self.hash_dim, self.encoder_dim, self.search_dim) >= 1,
             "model dimensions must be >= 1"),
            (0.0 <= self.dropout < 1.0, "dropout must be in [0, 1)"),
            (min(self.lr_encoder, self.lr_heads, self.lr_classifiers) > 0,
             "learning rates must be > 0"),
            (self.grad_clip >= 0.0, "grad_clip must be >= 0"),
            (self.eval_every >= 0, "eval_every must be >= 0"),
            (all(k >= 1 for k in self.eval_k), "eval_k entries must be >= 1"),
            (all(m in MODES for m in self.eval_modes),
             f"eval_modes entries must be in {MODES}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        self.loss.validate()


@dataclass
class TrainReport:
    records: list = field(default_factory=list)   # one dict per epoch
    wall_seconds: float = 0.0                     # not persisted in the log
    final_metrics: dict | None = None


def evaluate_model(params: ModelParams, dataset: Dataset,
                   k_list=(1, 3, 5), modes=MODES,
                   propensity_dataset: Dataset | None = None,
                   propensity_a: float = 0.55,
                   propensity_b: float = 1.5) -> dict:
    """P@k / PSP@k per inference mode, using exact search.

    Propensities come from ``propensity_dataset`` frequencies (a train split)
    when given, otherwise from the evaluated dataset itself.
    """
    src = propensity_dataset if propensity_dataset is not None else dataset
    props = propensity(src.label_frequencies, src.num_instances,
                       propensity_a, propensity_b)
    truth = dataset.positive_sets()
    k_max = max(k_list)
    out = {}
    for mode in modes:
        index = build_index(params, dataset, mode, exact=True)
        q_vecs = query_vectors(params, dataset.instance_texts,
                               dataset.vocab, mode)
        ranked = [ids for ids, _ in predict_vectors(index, q_vecs, k_max)]
        out[mode] = metrics_report(ranked, truth, props, k_list)
    return out


def train(dataset: Dataset, cfg: TrainConfig, log_path: str | None = None,
          checkpoint_path: str | None = None,
          eval_dataset: Dataset | None = None) -> tuple[ModelParams, TrainReport]:
    cfg.validate()
    if dataset.num_instances == 0 or dataset.num_labels == 0:
        raise ConfigError("dataset has no instances or no labels")
    if dataset.vocab.hash_dim != cfg.hash_dim:
        raise ConfigError(
            f"dataset was featurized with hash_dim={dataset.vocab.hash_dim} "
            f"but config says {cfg.hash_dim}")

    start = time.perf_counter()
    seed = cfg.seed
    pos_cap, neg_cap = cfg.positives_per_query, cfg.hard_negatives_per_query
    de_w8 = cfg.loss.de_weight
    q_feats = featurize_all(dataset.instance_texts, dataset.vocab)
    l_feats = featurize_all(dataset.label_texts, dataset.vocab)
    positive_sets = dataset.positive_sets()

    params = init_params(cfg.hash_dim, cfg.encoder_dim, cfg.search_dim,
                         dataset.num_labels, seed, cfg.dropout)
    if cfg.warm_start_classifiers:
        params.classifiers = forward(params, l_feats, mode="eval",
                                     heads=("de",)).de_out.copy()
    opt = Adam(cfg.lr_encoder, cfg.lr_heads, cfg.lr_classifiers)
    num_batches = math.ceil(dataset.num_instances / cfg.batch_size)
    cache_size = cfg.resolved_cache_size()
    plan, cache = None, None
    report = TrainReport()
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    try:
        for epoch in range(cfg.epochs):
            refreshed = False
            if epoch % cfg.refresh_interval == 0:
                q_emb = forward(params, q_feats, mode="eval",
                                heads=("de",)).de_out
                plan = cluster_queries(q_emb, num_batches, seed, epoch=epoch)
                if neg_cap > 0:
                    l_emb = forward(params, l_feats, mode="eval",
                                    heads=("de",)).de_out
                    cache = mine_hard_negatives(
                        q_emb, l_emb, positive_sets, cache_size,
                        method=cfg.mining, epoch=epoch, hnsw_seed=seed)
                refreshed = True

            sums = {"de_q2l": 0.0, "de_l2q": 0.0, "clf_q2l": 0.0,
                    "clf_l2q": 0.0}
            for b, ids in enumerate(plan):
                batch = collate_batch(ids, dataset, cache, pos_cap, neg_cap, seed,
                                      epoch, b, cfg.loss.extra_clf_positives)
                rng_drop = np.random.default_rng(
                    [seed, STREAM_DROPOUT, epoch, b])
                q_trace = forward(params, q_feats[ids], mode="train",
                                  rng=rng_drop)
                l_trace = forward(params, l_feats[batch.label_pool],
                                  mode="train", rng=rng_drop, heads=("de",))
                de_res = retrieval_loss(q_trace.de_out, l_trace.de_out,
                                        batch.pb_idx, batch.pl_idx, cfg.loss,
                                        with_grads=de_w8 > 0)
                clf_rows = params.classifiers[batch.clf_pool]
                clf_res = classifier_loss(q_trace.clf_out, clf_rows,
                                          batch.clf_pb_idx, batch.clf_pl_idx,
                                          cfg.loss, with_grads=de_w8 < 1)
                total = combined_loss(de_res.value, clf_res.value, de_w8)
                if not np.isfinite(total):
                    raise TrainingAbort(
                        f"non-finite loss at epoch {epoch} batch {b}: "
                        f"de={de_res.value} clf={clf_res.value}")

                grads = zero_grads(params)
                backward(params, q_trace,
                         d_de=de_w8 * de_res.d_queries if de_w8 > 0 else None,
                         d_clf=((1 - de_w8) * clf_res.d_queries
                                if de_w8 < 1 else None),
                         out=grads)
                backward(params, l_trace,
                         d_de=de_w8 * de_res.d_targets if de_w8 > 0 else None,
                         d_classifier_rows=((1 - de_w8) * clf_res.d_targets
                                            if de_w8 < 1 else None),
                         classifier_ids=batch.clf_pool if de_w8 < 1 else None,
                         out=grads)
                opt.step(params, grads, cfg.grad_clip)

                sums["de_q2l"] += de_res.q2l_value
                sums["de_l2q"] += de_res.l2q_value
                sums["clf_q2l"] += clf_res.q2l_value
                sums["clf_l2q"] += clf_res.l2q_value

            means = {k: v / num_batches for k, v in sums.items()}
            w_d, w_c = cfg.loss.de_q2l_weight, cfg.loss.clf_q2l_weight
            de_mean = w_d * means["de_q2l"] + (1 - w_d) * means["de_l2q"]
            clf_mean = w_c * means["clf_q2l"] + (1 - w_c) * means["clf_l2q"]
            record = {"epoch": epoch, **means, "de": de_mean, "clf": clf_mean,
                      "total": combined_loss(de_mean, clf_mean, de_w8),
                      "refreshed": refreshed}
            if cfg.eval_every > 0 and ((epoch + 1) % cfg.eval_every == 0
                                       or epoch == cfg.epochs - 1):
                target = eval_dataset if eval_dataset is not None else dataset
                record["metrics"] = evaluate_model(
                    params, target, cfg.eval_k, cfg.eval_modes,
                    propensity_dataset=dataset)
            report.records.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if checkpoint_path and ((epoch + 1) % cfg.refresh_interval == 0
                                    or epoch == cfg.epochs - 1):
                save_checkpoint(checkpoint_path, params,
                                extra={"epoch": epoch + 1,
                                       "config": asdict(cfg)})
    finally:
        if log_fh is not None:
            log_fh.close()

    report.wall_seconds = time.perf_counter() - start
    if report.records and "metrics" in report.records[-1]:
        report.final_metrics = report.records[-1]["metrics"]
    return params, report
