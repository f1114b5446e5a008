"""Robust aggregation: smoothed-Weiszfeld geometric median and the blended
mean/median rule that trades robustness against plain averaging.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .recmodel import GradientUpdate

AGGREGATION_RULES = ("fedavg", "mixed_rfa")
GM_GRANULARITIES = ("per_tensor", "full")

_MONOTONE_SLACK = 1e-12


class AggregationError(RuntimeError):
    """Gradient shapes or defense configuration are inconsistent."""


@dataclass
class DefenseConfig:
    rule: str = "fedavg"
    blend_lambda: float = 0.3  # 1.0 -> pure weighted mean, 0.0 -> pure GM
    gm_tolerance: float = 1e-6
    gm_max_iters: int = 100
    gm_smoothing: float = 1e-8
    gm_granularity: str = "per_tensor"

    def validate(self) -> None:
        if self.rule not in AGGREGATION_RULES:
            raise AggregationError(f"unknown aggregation rule {self.rule!r}")
        if not 0.0 <= self.blend_lambda <= 1.0:
            raise AggregationError(f"lambda must be in [0, 1], got {self.blend_lambda}")
        if self.gm_granularity not in GM_GRANULARITIES:
            raise AggregationError(f"unknown gm_granularity {self.gm_granularity!r}")


def _as_matrix(points: Sequence) -> torch.Tensor:
    rows = [torch.as_tensor(p, dtype=torch.float64).reshape(-1) for p in points]
    dims = {r.shape[0] for r in rows}
    if len(dims) != 1:
        raise AggregationError(f"points have mismatched dimensions: {sorted(dims)}")
    return torch.stack(rows)


def _normalized_weights(weights, n: int) -> torch.Tensor:
    if isinstance(weights, torch.Tensor):
        w = weights.to(dtype=torch.float64)
    else:
        w = torch.as_tensor(list(weights), dtype=torch.float64)
    if w.shape[0] != n:
        raise AggregationError(f"{n} points but {w.shape[0]} weights")
    if (w <= 0).any():
        raise AggregationError("weights must be positive")
    return w / w.sum()


def weighted_mean(points: Sequence, weights: Sequence[float]) -> torch.Tensor:
    W = _as_matrix(points)
    w = _normalized_weights(weights, W.shape[0])
    return w @ W


def gm_objective(v: torch.Tensor, W: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return (w * torch.linalg.norm(W - v, dim=1)).sum()


def _weighted_median_1d(values: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    order = torch.argsort(values)
    cum = torch.cumsum(w[order], dim=0)
    idx = int(torch.searchsorted(cum, torch.tensor(0.5, dtype=torch.float64)))
    idx = min(idx, values.shape[0] - 1)
    return values[order[idx]].reshape(1)


def geometric_median(
    points: Sequence,
    weights: Sequence[float],
    cfg: DefenseConfig,
    return_objectives: bool = False,
):
    """Approximate argmin_v sum_i w_i ||v - p_i|| by smoothed Weiszfeld
    iteration from the weighted mean. Iterations that would increase the
    objective (beyond 1e-12) are rejected, so the accepted objective sequence
    is monotone non-increasing. 1-D inputs use the exact weighted median.
    """
    if len(points) == 0:
        raise AggregationError("geometric median of an empty point set")
    W = _as_matrix(points)
    if isinstance(weights, torch.Tensor):
        w_raw = weights.to(dtype=torch.float64)
    else:
        w_raw = torch.as_tensor(list(weights), dtype=torch.float64)
    if w_raw.shape[0] != W.shape[0]:
        raise AggregationError(f"{W.shape[0]} points but {w_raw.shape[0]} weights")
    if (w_raw <= 0).any():
        raise AggregationError("weights must be positive")

    # canonical summation order before normalizing: jointly shuffling
    # (points, weights) must leave the result bitwise unchanged
    keys = [w_raw.numpy()] + [W[:, j].numpy() for j in range(W.shape[1] - 1, -1, -1)]
    order = torch.from_numpy(np.lexsort(keys).copy())
    W = W[order]
    w = w_raw[order]
    w = w / w.sum()

    if W.shape[1] == 1:
        v = _weighted_median_1d(W[:, 0], w)
        return (v, [float(gm_objective(v, W, w))]) if return_objectives else v

    v = w @ W
    objectives = [float(gm_objective(v, W, w))]
    for _ in range(cfg.gm_max_iters):
        dist = torch.linalg.norm(W - v, dim=1)
        beta = w / torch.clamp(dist, min=cfg.gm_smoothing)
        v_new = (beta @ W) / beta.sum()
        obj_new = float(gm_objective(v_new, W, w))
        if obj_new > objectives[-1] + _MONOTONE_SLACK:
            break
        step = float(torch.linalg.norm(v_new - v))
        scale = float(1.0 + torch.linalg.norm(v))
        v = v_new
        objectives.append(obj_new)
        if step <= cfg.gm_tolerance * scale:
            break
    return (v, objectives) if return_objectives else v


def _stack_updates(grads: Sequence[GradientUpdate]) -> dict[str, torch.Tensor]:
    names = list(grads[0].tensors.keys())
    for g in grads[1:]:
        if list(g.tensors.keys()) != names:
            raise AggregationError("gradient updates carry different tensor sets")
    stacks = {}
    for name in names:
        shape = grads[0].tensors[name].shape
        for g in grads[1:]:
            if g.tensors[name].shape != shape:
                raise AggregationError(f"shape mismatch in tensor {name}")
        stacks[name] = torch.stack([g.tensors[name].reshape(-1) for g in grads])
    return stacks


def fedavg_aggregate(grads: Sequence[GradientUpdate], weights: Sequence[float]) -> GradientUpdate:
    if len(grads) == 0:
        raise AggregationError("cannot aggregate an empty gradient list")
    w = _normalized_weights(weights, len(grads))
    stacks = _stack_updates(grads)
    out = {
        name: (w @ stack).reshape(grads[0].tensors[name].shape)
        for name, stack in stacks.items()
    }
    return GradientUpdate(tensors=out)


def mixed_rfa(
    grads: Sequence[GradientUpdate],
    weights: Sequence[float],
    cfg: DefenseConfig,
) -> GradientUpdate:
    """lambda * weighted mean + (1 - lambda) * geometric median, computed per
    tensor (default) or on the fully flattened update."""
    if len(grads) == 0:
        raise AggregationError("cannot aggregate an empty gradient list")
    cfg.validate()
    w = _normalized_weights(weights, len(grads))
    lam = cfg.blend_lambda
    stacks = _stack_updates(grads)

    if cfg.gm_granularity == "full":
        names = list(stacks.keys())
        flat = torch.cat([stacks[n] for n in names], dim=1)
        blended_flat = _blend(flat, w, weights, lam, cfg)
        out = {}
        offset = 0
        for name in names:
            size = stacks[name].shape[1]
            out[name] = blended_flat[offset:offset + size].reshape(
                grads[0].tensors[name].shape
            )
            offset += size
        return GradientUpdate(tensors=out)

    out = {
        name: _blend(stack, w, weights, lam, cfg).reshape(grads[0].tensors[name].shape)
        for name, stack in stacks.items()
    }
    return GradientUpdate(tensors=out)


def _blend(stack, w, raw_weights, lam: float, cfg: DefenseConfig) -> torch.Tensor:
    # exact endpoints: lambda=1 is bitwise the mean, lambda=0 bitwise the GM;
    # the GM normalizes the raw weights itself (single normalization keeps
    # the endpoints bit-identical to direct calls)
    if lam == 1.0:
        return w @ stack
    gm = geometric_median(stack, raw_weights, cfg)
    if lam == 0.0:
        return gm
    return lam * (w @ stack) + (1.0 - lam) * gm
