"""Ranking metrics: HR@K and NDCG@K for utility, exposure ratio ER@K for
attack success, under sampled-negative evaluation with pessimistic ties.

Negative streams are derived per (seed, purpose, user) so each user's
candidate set is stable across rounds and independently reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data_ingest import ClientDataset
from .recmodel import ModelParams, SamplingError, forward_scores, negative_pool
from .rng import stream


class MetricError(RuntimeError):
    """A metric is undefined for the given population (e.g. no eligible users)."""


@dataclass
class EvalConfig:
    n_negatives: int = 1000
    er_ks: tuple[int, ...] = (5, 10, 20, 30)
    hr_ks: tuple[int, ...] = (10,)


@dataclass
class MetricsReport:
    hr: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)
    er: dict[int, float] = field(default_factory=dict)
    eligible_users_er: int = 0
    evaluated_users: int = 0

    def validate(self) -> None:
        for name, table in (("hr", self.hr), ("ndcg", self.ndcg), ("er", self.er)):
            for k, v in table.items():
                if not 0.0 <= v <= 1.0:
                    raise MetricError(f"{name}@{k} = {v} outside [0, 1]")
        for k in self.hr:
            if k in self.ndcg and self.ndcg[k] > self.hr[k] + 1e-12:
                raise MetricError(f"ndcg@{k} > hr@{k}")
        ks = sorted(self.er)
        for lo, hi in zip(ks, ks[1:]):
            if self.er[lo] > self.er[hi] + 1e-12:
                raise MetricError(f"er not monotone: er@{lo} > er@{hi}")

    def to_json_dict(self) -> dict:
        return {
            "hr": {str(k): v for k, v in self.hr.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "er": {str(k): v for k, v in self.er.items()},
            "eligible_users_er": self.eligible_users_er,
            "evaluated_users": self.evaluated_users,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            hr={int(k): v for k, v in d["hr"].items()},
            ndcg={int(k): v for k, v in d["ndcg"].items()},
            er={int(k): v for k, v in d["er"].items()},
            eligible_users_er=d["eligible_users_er"],
            evaluated_users=d["evaluated_users"],
        )


def rank_item(
    params: ModelParams,
    seq: Sequence[int],
    item: int,
    negatives: np.ndarray,
) -> int:
    """1-based rank of `item` against the negatives; ties count against it."""
    negatives = np.asarray(negatives, dtype=np.int64)
    if (negatives == item).any():
        raise ValueError("evaluated item must not appear among the negatives")
    scores = forward_scores(params, seq).detach().numpy()
    return 1 + int((scores[negatives] >= scores[item]).sum())


def sample_negatives(
    n_items: int,
    exclude: set[int],
    count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Uniform draw without replacement from the items outside `exclude`,
    capped at the pool size (small catalogs rank against the whole pool)."""
    pool = negative_pool(n_items, exclude)
    if pool.size <= count:
        return pool
    return rng.choice(pool, size=count, replace=False)


def hit_ndcg(rank: int, k: int) -> tuple[int, float]:
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if rank > k:
        return 0, 0.0
    return 1, 1.0 / math.log2(rank + 1)


def exposure_ratio(
    params: ModelParams,
    clients: Sequence[ClientDataset],
    target: int,
    ks: Sequence[int],
    seed: int,
    cfg: EvalConfig,
) -> tuple[dict[int, float], int]:
    """ER@K over users whose history does not contain the target."""
    if not ks:
        raise ValueError("ks must be non-empty")
    eligible = [c for c in clients if target not in c.train_seq]
    if not eligible:
        raise MetricError(f"no users eligible for target {target} (all interacted)")
    hits = {k: 0 for k in ks}
    for c in eligible:
        rng = stream(seed, "er", target, c.user)
        negs = sample_negatives(
            params.n_items, set(c.train_seq) | {target}, cfg.n_negatives, rng
        )
        rank = rank_item(params, c.train_seq, target, negs)
        for k in ks:
            if rank <= k:
                hits[k] += 1
    return {k: hits[k] / len(eligible) for k in ks}, len(eligible)


def evaluate(
    params: ModelParams,
    clients: Sequence[ClientDataset],
    targets: Sequence[int],
    cfg: EvalConfig,
    seed: int,
) -> MetricsReport:
    """HR/NDCG of held-out test items over all users plus target-averaged ER."""
    hr_acc = {k: 0.0 for k in cfg.hr_ks}
    ndcg_acc = {k: 0.0 for k in cfg.hr_ks}
    for c in clients:
        rng = stream(seed, "hr", c.user)
        negs = sample_negatives(
            params.n_items, set(c.train_seq) | {c.test_item}, cfg.n_negatives, rng
        )
        rank = rank_item(params, c.train_seq, c.test_item, negs)
        for k in cfg.hr_ks:
            h, n = hit_ndcg(rank, k)
            hr_acc[k] += h
            ndcg_acc[k] += n

    n_users = len(clients)
    report = MetricsReport(
        hr={k: hr_acc[k] / n_users for k in cfg.hr_ks},
        ndcg={k: ndcg_acc[k] / n_users for k in cfg.hr_ks},
        evaluated_users=n_users,
    )

    if targets:
        er_acc = {k: 0.0 for k in cfg.er_ks}
        eligible_total = 0
        for t in targets:
            er_t, eligible = exposure_ratio(params, clients, t, cfg.er_ks, seed, cfg)
            eligible_total += eligible
            for k in cfg.er_ks:
                er_acc[k] += er_t[k]
        report.er = {k: er_acc[k] / len(targets) for k in cfg.er_ks}
        report.eligible_users_er = eligible_total

    report.validate()
    return report
