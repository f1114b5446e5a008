"""Malicious-client gradient generators.

Implements the dual-view targeted attack (gradient-guided single-item
substitution plus a cosine contrastive pull of the target embedding toward
interacted-item embeddings), its two ablations, and the random / explicit
boosting / sequence-conditioned boosting baselines.

Attack losses run the model in eval mode (no dropout): the attacker controls
its own training loop and wants exact gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .data_ingest import ClientDataset
from .recmodel import (
    BIDIRECTIONAL,
    GradientUpdate,
    ModelParams,
    embed,
    forward_scores,
    grad_params,
    grad_wrt_input_embeddings,
    negative_pool,
)
from .rng import stream

ATTACK_METHODS = ("none", "ra", "eb", "ara", "darts", "c_fsr", "s_fsr")

_COS_EPS = 1e-8


class AttackSetupError(ValueError):
    """The attack configuration cannot be realized (e.g. zero malicious users)."""


@dataclass
class AttackConfig:
    method: str = "none"
    target_items: tuple[int, ...] = ()
    malicious_fraction: float = 0.0
    search_time: int = 9  # candidates tried during substitution
    similarity_threshold: float = 0.5  # minimum cosine to the replaced item
    contrastive_negatives: int = 100
    attack_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.method not in ATTACK_METHODS:
            raise AttackSetupError(f"unknown attack method {self.method!r}")
        if self.method != "none":
            if not self.target_items:
                raise AttackSetupError("target_items must be non-empty for an active attack")
            if not 0.0 < self.malicious_fraction < 1.0:
                raise AttackSetupError(
                    f"malicious_fraction must be in (0, 1), got {self.malicious_fraction}"
                )
            if self.search_time < 1 or self.contrastive_negatives < 1:
                raise AttackSetupError("search_time and contrastive_negatives must be >= 1")
            if self.attack_scale <= 0:
                raise AttackSetupError("attack_scale must be positive")


@dataclass
class MaliciousAssignment:
    malicious_users: frozenset[int] = field(default_factory=frozenset)

    def target_for(self, user: int, targets: Sequence[int]) -> int:
        """Round-robin target assignment over the sorted malicious users."""
        order = sorted(self.malicious_users)
        return targets[order.index(user) % len(targets)]


def assign_malicious(n_users: int, fraction: float, seed: int) -> MaliciousAssignment:
    if not 0.0 < fraction < 1.0:
        raise AttackSetupError(f"malicious fraction must be in (0, 1), got {fraction}")
    count = int(np.floor(fraction * n_users + 0.5))
    if count == 0:
        raise AttackSetupError(
            f"fraction {fraction} of {n_users} users rounds to zero malicious clients"
        )
    rng = stream(seed, "malicious-assignment")
    users = rng.choice(np.arange(1, n_users + 1), size=count, replace=False)
    return MaliciousAssignment(malicious_users=frozenset(int(u) for u in users))


def _safe_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.clamp(torch.linalg.norm(x, dim=dim), min=_COS_EPS)


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine of a (d,) vector against a (d,) vector or (n, d) matrix."""
    if b.dim() == 1:
        return (a @ b) / (_safe_norm(a) * _safe_norm(b))
    return (b @ a) / (_safe_norm(a) * _safe_norm(b, dim=1))


def contrastive_loss(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negatives: torch.Tensor | Sequence[torch.Tensor],
) -> torch.Tensor:
    """Softmax cross-entropy over cosine similarities with the positive at
    index 0. Zero-norm vectors are handled by an epsilon-clamped norm."""
    if not isinstance(negatives, torch.Tensor):
        negatives = torch.stack(list(negatives))
    s_pos = _cosine(anchor, positive)
    s_neg = _cosine(anchor, negatives)
    logits = torch.cat([s_pos.reshape(1), s_neg])
    return torch.logsumexp(logits, dim=0) - s_pos


def substitution(
    params: ModelParams,
    seq: Sequence[int],
    target: int,
    search_time: int,
    sim_threshold: float,
) -> list[int]:
    """Replace the single most vulnerable history item with the similar item
    that maximizes the target's predicted score.

    The vulnerable position maximizes the row norm of the input-embedding
    gradient of cross-entropy toward the target (ties: lowest index). Its
    embedding, perturbed one signed step against that gradient, is matched
    against all catalog items by cosine; candidates below sim_threshold
    similarity to the original item are dropped (all of them dropped: the
    constraint is ignored), and the top search_time survivors are scored.
    Ties in the final score keep the higher-similarity candidate. Exactly one
    position of the output differs from the input.
    """
    seq = list(seq)
    if len(seq) < 2:
        raise ValueError("substitution needs a sequence of >= 2 items")
    if not 1 <= target <= params.n_items:
        raise ValueError(f"target {target} out of range")

    padding_mask = np.asarray([s != 0 for s in seq], dtype=bool)
    E = embed(params, seq)
    g = grad_wrt_input_embeddings(params, E, target, padding_mask=padding_mask)

    row_norms = torch.linalg.norm(g, dim=1).numpy()
    row_norms[~padding_mask] = -np.inf
    pos = int(np.argmax(row_norms))  # ties resolve to the lowest index

    perturbed = (E[pos] - torch.sign(g[pos])).detach()
    item_emb = params.item_emb.detach()

    candidates = np.arange(1, params.n_items + 1)
    candidates = candidates[(candidates != target) & (candidates != seq[pos])]
    cand_emb = item_emb[torch.from_numpy(candidates)]
    sims = _cosine(perturbed, cand_emb).numpy()
    orig_sims = _cosine(E[pos].detach(), cand_emb).numpy()

    kept = orig_sims >= sim_threshold
    if not kept.any():
        kept = np.ones_like(kept)  # fallback: unconstrained top-T
    kept_idx = np.nonzero(kept)[0]
    order = kept_idx[np.argsort(-sims[kept_idx], kind="stable")]
    top = order[:search_time]

    best_item = None
    best_score = -np.inf
    trial = list(seq)
    for idx in top:  # descending similarity, so strict > keeps the more similar
        c = int(candidates[idx])
        trial[pos] = c
        score = float(forward_scores(params, trial)[target])
        if score > best_score:
            best_score = score
            best_item = c
    out = list(seq)
    out[pos] = best_item
    return out


def _attack_bce(params: ModelParams, seq: Sequence[int], target: int) -> torch.Tensor:
    """Score-boosting BCE with the target as the sole positive next item."""
    scores = forward_scores(params, seq)
    return -torch.nn.functional.logsigmoid(scores[target])


def _prepare_seq(params: ModelParams, seq: Sequence[int]) -> list[int]:
    # bidirectional scoring appends a mask token, so keep one position free
    limit = params.max_len - 1 if params.variant == BIDIRECTIONAL else params.max_len
    return list(seq)[-limit:]


def darts_gradient(
    params: ModelParams,
    client: ClientDataset,
    target: int,
    cfg: AttackConfig,
    rng: np.random.Generator,
) -> GradientUpdate:
    """Dual-view malicious gradient (also covers the c_fsr / s_fsr ablations).

    c_fsr skips the substitution step, s_fsr skips the contrastive term; the
    full method applies both and returns attack_scale times the gradient of
    their summed loss.
    """
    seq = _prepare_seq(params, client.train_seq)
    if cfg.method != "c_fsr":
        adv_seq = substitution(params, seq, target, cfg.search_time, cfg.similarity_threshold)
    else:
        adv_seq = list(seq)

    with_con = cfg.method != "s_fsr"
    neg_ids = None
    if with_con:
        pool = negative_pool(params.n_items, set(seq) | set(adv_seq) | {target})
        neg_ids = rng.choice(pool, size=cfg.contrastive_negatives, replace=True)
    real_items = torch.from_numpy(np.asarray([s for s in adv_seq if s != 0], dtype=np.int64))

    def loss_fn(p: ModelParams) -> torch.Tensor:
        loss = _attack_bce(p, adv_seq, target)
        if with_con:
            anchor = p.item_emb[target]
            positive = p.item_emb[real_items].mean(dim=0)
            negatives = p.item_emb[torch.from_numpy(neg_ids)]
            loss = loss + contrastive_loss(anchor, positive, negatives)
        return loss

    return _scaled(grad_params(params, loss_fn), cfg.attack_scale)


def eb_gradient(
    params: ModelParams,
    client: ClientDataset,
    target: int,
    cfg: AttackConfig,
) -> GradientUpdate:
    """Explicit boosting: the attack BCE alone on the unmodified sequence."""
    seq = _prepare_seq(params, client.train_seq)
    return _scaled(
        grad_params(params, lambda p: _attack_bce(p, seq, target)), cfg.attack_scale
    )


def ara_gradient(
    params: ModelParams,
    client: ClientDataset,
    target: int,
    cfg: AttackConfig,
    rng: np.random.Generator,
    n_negatives: int = 1,
) -> GradientUpdate:
    """Boosting conditioned on the real sequence, with sampled negatives
    joining the target positive in the BCE (n_negatives=0 reduces to eb)."""
    seq = _prepare_seq(params, client.train_seq)
    neg_ids = None
    if n_negatives > 0:
        pool = negative_pool(params.n_items, set(seq) | {target})
        neg_ids = rng.choice(pool, size=n_negatives, replace=True)

    def loss_fn(p: ModelParams) -> torch.Tensor:
        scores = forward_scores(p, seq)
        loss = -torch.nn.functional.logsigmoid(scores[target])
        if neg_ids is not None:
            loss = loss - torch.nn.functional.logsigmoid(
                -scores[torch.from_numpy(neg_ids)]
            ).sum()
        return loss / (1 + n_negatives)

    return _scaled(grad_params(params, loss_fn), cfg.attack_scale)


def ra_gradient(
    params: ModelParams,
    fake_seq_len: int,
    target: int,
    cfg: AttackConfig,
    rng: np.random.Generator,
    negatives_k: int = 1,
) -> GradientUpdate:
    """Random data poisoning: benign-style training gradient on a fake
    sequence of random items with the target inserted at a random position."""
    if fake_seq_len < 2:
        raise ValueError("fake sequence needs >= 2 items")
    from .recmodel import bce_local_loss  # local import to avoid cycle noise

    items = rng.choice(np.arange(1, params.n_items + 1), size=fake_seq_len, replace=True)
    items[int(rng.integers(0, fake_seq_len))] = target
    fake_seq = [int(x) for x in items]
    return grad_params(
        params,
        lambda p: bce_local_loss(p, fake_seq, rng, negatives_k=negatives_k, train=True),
    )


def malicious_gradient(
    params: ModelParams,
    client: ClientDataset,
    target: int,
    cfg: AttackConfig,
    rng: np.random.Generator,
    negatives_k: int = 1,
) -> GradientUpdate:
    """Dispatch a malicious client's upload for the configured method."""
    if cfg.method in ("darts", "c_fsr", "s_fsr"):
        return darts_gradient(params, client, target, cfg, rng)
    if cfg.method == "eb":
        return eb_gradient(params, client, target, cfg)
    if cfg.method == "ara":
        return ara_gradient(params, client, target, cfg, rng)
    if cfg.method == "ra":
        return ra_gradient(
            params, len(client.train_seq), target, cfg, rng, negatives_k=negatives_k
        )
    raise AttackSetupError(f"no malicious gradient for method {cfg.method!r}")


def _scaled(update: GradientUpdate, scale: float) -> GradientUpdate:
    if scale == 1.0:
        return update
    return GradientUpdate(
        tensors={k: v * scale for k, v in update.tensors.items()}, loss=update.loss
    )
