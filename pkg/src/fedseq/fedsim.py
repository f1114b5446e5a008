"""Federated training loop: seeded client selection, per-client gradient
computation (benign or malicious), pluggable aggregation, server SGD update.

Determinism contract: given (configs, seed), every checkpoint, report and
metric is identical, regardless of worker parallelism. Per-client streams are
derived from (seed, round, client), and gradients are aggregated in ascending
client order.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .attacks import AttackConfig, MaliciousAssignment, assign_malicious, malicious_gradient
from .data_ingest import ClientDataset
from .defense import AggregationError, DefenseConfig, fedavg_aggregate, mixed_rfa
from .metrics import EvalConfig, MetricsReport, evaluate
from .recmodel import (
    PADDING_ITEM,
    GradientUpdate,
    ModelConfig,
    ModelParams,
    NumericError,
    bce_local_loss,
    grad_params,
    init_params,
)
from .rng import stream


@dataclass
class FederationConfig:
    rounds: int = 30
    clients_per_round: int = 0  # 0 -> min(256, N)
    server_lr: float = 0.01
    weight_decay: float = 1e-5
    seed: int = 0
    local_negatives_k: int = 1

    def validate(self) -> None:
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.server_lr <= 0:
            raise ValueError("server_lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def resolved_clients_per_round(self, n_users: int) -> int:
        n = self.clients_per_round if self.clients_per_round > 0 else min(256, n_users)
        return min(n, n_users)


@dataclass
class RoundReport:
    round: int
    selected_clients: list[int]
    num_malicious_selected: int
    train_loss_mean: float | None
    metrics: MetricsReport | None = None

    def to_json_dict(self) -> dict:
        return {
            "round": self.round,
            "selected_clients": self.selected_clients,
            "num_malicious_selected": self.num_malicious_selected,
            "train_loss_mean": self.train_loss_mean,
            "metrics": self.metrics.to_json_dict() if self.metrics is not None else None,
        }


def worker_count() -> int:
    """Worker cap from FEDSEQ_THREADS (default 1: sequential)."""
    try:
        return max(1, int(os.environ.get("FEDSEQ_THREADS", "1")))
    except ValueError:
        return 1


def select_clients(
    round_idx: int, config: FederationConfig, population: Sequence[int]
) -> list[int]:
    """Uniform sample without replacement, seeded by (seed, round), returned
    in ascending order (aggregation order is canonical)."""
    if not population:
        raise ValueError("population is empty")
    n = config.resolved_clients_per_round(len(population))
    if n >= len(population):
        return sorted(population)
    rng = stream(config.seed, "select", round_idx)
    picked = rng.choice(np.asarray(sorted(population)), size=n, replace=False)
    return sorted(int(u) for u in picked)


def client_step(
    client: ClientDataset,
    params: ModelParams,
    config: FederationConfig,
    rng: np.random.Generator,
) -> GradientUpdate:
    """Benign local step: gradient of the sampled BCE on the client's own
    sequence. Only the gradient (plus its loss value) leaves the client."""
    exclude = set(client.train_seq) | {client.test_item}
    return grad_params(
        params,
        lambda p: bce_local_loss(
            p,
            client.train_seq,
            rng,
            negatives_k=config.local_negatives_k,
            exclude=exclude,
            train=True,
        ),
    )


def aggregate(
    grads: Sequence[GradientUpdate],
    weights: Sequence[float],
    defense: DefenseConfig,
) -> GradientUpdate:
    if len(grads) != len(weights) or len(grads) == 0:
        raise AggregationError("need equally many gradients and weights, at least one")
    defense.validate()
    if defense.rule == "mixed_rfa":
        return mixed_rfa(grads, weights, defense)
    return fedavg_aggregate(grads, weights)


def apply_update(
    params: ModelParams, agg: GradientUpdate, config: FederationConfig
) -> ModelParams:
    """params <- (1 - lr*wd) * params - lr * agg, padding row re-zeroed."""
    decay = 1.0 - config.server_lr * config.weight_decay
    new = {}
    for name, t in params.tensors().items():
        if name not in agg.tensors:
            raise AggregationError(f"aggregated update is missing tensor {name}")
        if agg.tensors[name].shape != t.shape:
            raise AggregationError(f"shape mismatch in tensor {name}")
        new[name] = decay * t - config.server_lr * agg.tensors[name]
    new["item_emb"][PADDING_ITEM] = 0.0
    out = params.with_tensors(new)
    for name, t in out.tensors().items():
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite parameter {name} after update")
    return out


def run_training(
    clients: Sequence[ClientDataset],
    model_cfg: ModelConfig,
    fed_cfg: FederationConfig,
    attack_cfg: AttackConfig | None = None,
    defense_cfg: DefenseConfig | None = None,
    eval_cfg: EvalConfig | None = None,
    eval_every: int = 10,
    eval_targets: Sequence[int] = (),
    n_workers: int | None = None,
) -> tuple[ModelParams, list[RoundReport]]:
    """Run the full federation. Malicious clients (when an attack is active)
    upload attack gradients; everyone else runs a benign step. Evaluation
    happens every `eval_every` rounds and on the final round."""
    fed_cfg.validate()
    defense_cfg = defense_cfg or DefenseConfig()
    eval_cfg = eval_cfg or EvalConfig()
    n_workers = worker_count() if n_workers is None else max(1, n_workers)

    by_user = {c.user: c for c in clients}
    population = sorted(by_user)

    attack_active = attack_cfg is not None and attack_cfg.method != "none"
    assignment = MaliciousAssignment()
    targets = list(eval_targets)
    if attack_active:
        attack_cfg.validate()
        assignment = assign_malicious(
            len(population), attack_cfg.malicious_fraction, attack_cfg.seed
        )
        if not targets:
            targets = list(attack_cfg.target_items)

    params = init_params(model_cfg, stream(fed_cfg.seed, "init"))
    reports: list[RoundReport] = []

    def compute(round_idx: int, user: int) -> GradientUpdate:
        client = by_user[user]
        if attack_active and user in assignment.malicious_users:
            return malicious_gradient(
                params,
                client,
                assignment.target_for(user, list(attack_cfg.target_items)),
                attack_cfg,
                stream(attack_cfg.seed, "attack", round_idx, user),
                negatives_k=fed_cfg.local_negatives_k,
            )
        return client_step(client, params, fed_cfg, stream(fed_cfg.seed, "client", round_idx, user))

    for round_idx in range(1, fed_cfg.rounds + 1):
        selected = select_clients(round_idx, fed_cfg, population)
        if n_workers > 1:
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                grads = list(pool.map(lambda u: compute(round_idx, u), selected))
        else:
            grads = [compute(round_idx, u) for u in selected]

        agg = aggregate(grads, [1.0] * len(grads), defense_cfg)
        params = apply_update(params, agg, fed_cfg)

        benign_losses = [
            g.loss
            for g, u in zip(grads, selected)
            if g.loss is not None and u not in assignment.malicious_users
        ]
        metrics = None
        if round_idx % eval_every == 0 or round_idx == fed_cfg.rounds:
            metrics = evaluate(params, clients, targets, eval_cfg, fed_cfg.seed)
        reports.append(
            RoundReport(
                round=round_idx,
                selected_clients=list(selected),
                num_malicious_selected=sum(
                    1 for u in selected if u in assignment.malicious_users
                ),
                train_loss_mean=float(np.mean(benign_losses)) if benign_losses else None,
                metrics=metrics,
            )
        )
    return params, reports
