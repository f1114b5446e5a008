"""Sequential recommender: one-block single-head transformer over item+position
embeddings, in a causal (next-token) and a bidirectional (cloze, trailing mask
token) variant, with a BCE training loss and autograd-backed gradient oracles.

All tensors are torch float64; sampling comes from caller-provided numpy
generators so every result is reproducible. Checkpoints round-trip through a
self-describing float32 binary format.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

PADDING_ITEM = 0
CAUSAL = "causal"
BIDIRECTIONAL = "bidirectional"
VARIANTS = (CAUSAL, BIDIRECTIONAL)

_LN_EPS = 1e-8
_MASKED_LOGIT = -1e9
_CKPT_MAGIC = "FEDSEQ-CKPT 1"

# canonical tensor order for serialization, aggregation, and reporting
TENSOR_FIELDS = (
    "item_emb",
    "pos_emb",
    "w_q",
    "w_k",
    "w_v",
    "w_o",
    "w1",
    "b1",
    "w2",
    "b2",
    "ln1_scale",
    "ln1_shift",
    "ln2_scale",
    "ln2_shift",
    "mask_emb",
)


class NumericError(RuntimeError):
    """A non-finite value appeared where the contract forbids it."""


class SamplingError(RuntimeError):
    """No valid negative items are left to sample from."""


@dataclass
class ModelConfig:
    n_items: int
    dim: int = 64
    ffn_dim: int = 0  # 0 -> 4 * dim
    max_len: int = 200
    variant: str = CAUSAL
    dropout: float = 0.1
    mask_prob: float = 0.15  # cloze masking rate, bidirectional training only
    init_std: float = 0.02

    def resolved_ffn_dim(self) -> int:
        return self.ffn_dim if self.ffn_dim > 0 else 4 * self.dim


@dataclass
class ModelParams:
    """Global federated model state. item_emb row 0 is the frozen padding row."""

    variant: str
    max_len: int
    dropout: float
    mask_prob: float
    item_emb: torch.Tensor
    pos_emb: torch.Tensor
    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor
    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor
    ln1_scale: torch.Tensor
    ln1_shift: torch.Tensor
    ln2_scale: torch.Tensor
    ln2_shift: torch.Tensor
    mask_emb: torch.Tensor | None = None

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.item_emb.shape[1]

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name in TENSOR_FIELDS:
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        return out

    def with_tensors(self, new: dict[str, torch.Tensor]) -> "ModelParams":
        return replace(self, **new)

    def clone(self) -> "ModelParams":
        return self.with_tensors({k: v.detach().clone() for k, v in self.tensors().items()})

    def autograd_copy(self) -> "ModelParams":
        return self.with_tensors(
            {k: v.detach().clone().requires_grad_(True) for k, v in self.tensors().items()}
        )

    def validate(self) -> None:
        for name, t in self.tensors().items():
            if not torch.isfinite(t).all():
                raise NumericError(f"non-finite values in parameter {name}")
        if not bool((self.item_emb[PADDING_ITEM] == 0).all()):
            raise NumericError("padding embedding row is not zero")


@dataclass
class GradientUpdate:
    """A parameter-shaped delta uploaded by one client."""

    tensors: dict[str, torch.Tensor]
    loss: float | None = None


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    if cfg.variant not in VARIANTS:
        raise ValueError(f"unknown variant {cfg.variant!r}; expected one of {VARIANTS}")
    d, f = cfg.dim, cfg.resolved_ffn_dim()

    def normal(*shape):
        return torch.from_numpy(rng.normal(0.0, cfg.init_std, shape))

    def xavier(fan_in, fan_out):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return torch.from_numpy(rng.uniform(-a, a, (fan_in, fan_out)))

    item_emb = normal(cfg.n_items + 1, d)
    item_emb[PADDING_ITEM] = 0.0
    return ModelParams(
        variant=cfg.variant,
        max_len=cfg.max_len,
        dropout=cfg.dropout,
        mask_prob=cfg.mask_prob,
        item_emb=item_emb,
        pos_emb=normal(cfg.max_len, d),
        w_q=xavier(d, d),
        w_k=xavier(d, d),
        w_v=xavier(d, d),
        w_o=xavier(d, d),
        w1=xavier(d, f),
        b1=torch.zeros(f, dtype=torch.float64),
        w2=xavier(f, d),
        b2=torch.zeros(d, dtype=torch.float64),
        ln1_scale=torch.ones(d, dtype=torch.float64),
        ln1_shift=torch.zeros(d, dtype=torch.float64),
        ln2_scale=torch.ones(d, dtype=torch.float64),
        ln2_shift=torch.zeros(d, dtype=torch.float64),
        mask_emb=normal(d) if cfg.variant == BIDIRECTIONAL else None,
    )


def embed(params: ModelParams, seq: Sequence[int]) -> torch.Tensor:
    """Item + position embedding rows for a (possibly padded) sequence."""
    L = len(seq)
    if L == 0:
        raise ValueError("cannot embed an empty sequence")
    if L > params.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {params.max_len}")
    ids = np.asarray(seq, dtype=np.int64)
    if ids.min() < 0 or ids.max() > params.n_items:
        raise IndexError(f"item id out of range [0, {params.n_items}]")
    return params.item_emb[torch.from_numpy(ids)] + params.pos_emb[:L]


def _layer_norm(x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + _LN_EPS) * scale + shift


def _dropout(x: torch.Tensor, p: float, rng: np.random.Generator) -> torch.Tensor:
    if p <= 0.0:
        return x
    keep = torch.from_numpy((rng.random(tuple(x.shape)) >= p).astype(np.float64))
    return x * keep / (1.0 - p)


def _block(
    params: ModelParams,
    E: torch.Tensor,
    key_mask: torch.Tensor,
    causal: bool,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """One transformer block: attention -> add&norm -> FFN -> add&norm."""
    L, d = E.shape
    q = E @ params.w_q
    k = E @ params.w_k
    v = E @ params.w_v
    logits = (q @ k.T) / math.sqrt(d)
    allowed = key_mask.unsqueeze(0).expand(L, L)
    if causal:
        allowed = allowed & torch.ones(L, L, dtype=torch.bool).tril()
    logits = logits.masked_fill(~allowed, _MASKED_LOGIT)
    attn = torch.softmax(logits, dim=-1)
    # queries with no attendable key produce a zero context row
    attn = attn * allowed.any(dim=-1, keepdim=True)
    ctx = (attn @ v) @ params.w_o
    if train and params.dropout > 0.0:
        ctx = _dropout(ctx, params.dropout, rng)
    h = _layer_norm(E + ctx, params.ln1_scale, params.ln1_shift)
    ffn = torch.relu(h @ params.w1 + params.b1) @ params.w2 + params.b2
    if train and params.dropout > 0.0:
        ffn = _dropout(ffn, params.dropout, rng)
    return _layer_norm(h + ffn, params.ln2_scale, params.ln2_shift)


def _key_mask(seq: Sequence[int]) -> torch.Tensor:
    return torch.from_numpy(np.asarray(seq, dtype=np.int64) != PADDING_ITEM)


def _causal_states(
    params: ModelParams,
    seq: Sequence[int],
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    return _block(params, embed(params, seq), _key_mask(seq), causal=True, train=train, rng=rng)


def _prediction_hidden(
    params: ModelParams,
    seq: Sequence[int],
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    if len(seq) == 0:
        raise ValueError("cannot score an empty sequence")
    if params.variant == CAUSAL:
        real = [i for i, s in enumerate(seq) if s != PADDING_ITEM]
        if not real:
            raise ValueError("sequence contains only padding")
        H = _causal_states(params, seq, train=train, rng=rng)
        return H[real[-1]]
    seq = list(seq)
    if len(seq) >= params.max_len:
        seq = seq[-(params.max_len - 1):]
    E = embed(params, seq)
    mask_row = (params.mask_emb + params.pos_emb[len(seq)]).unsqueeze(0)
    E = torch.cat([E, mask_row], dim=0)
    key_mask = torch.cat([_key_mask(seq), torch.ones(1, dtype=torch.bool)])
    H = _block(params, E, key_mask, causal=False, train=train, rng=rng)
    return H[-1]


def _scores_from_hidden(params: ModelParams, h: torch.Tensor) -> torch.Tensor:
    raw = params.item_emb @ h  # tied output weights
    return torch.cat([raw.new_full((1,), float("-inf")), raw[1:]])


def forward_scores(
    params: ModelParams,
    seq: Sequence[int],
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Scores over the catalog (length n_items+1); score[0] is -inf."""
    return _scores_from_hidden(params, _prediction_hidden(params, seq, train=train, rng=rng))


def negative_pool(n_items: int, exclude: Iterable[int]) -> np.ndarray:
    pool = np.setdiff1d(np.arange(1, n_items + 1), np.fromiter(exclude, dtype=np.int64))
    if pool.size == 0:
        raise SamplingError("no non-interacted items left to sample")
    return pool


def bce_local_loss(
    params: ModelParams,
    seq: Sequence[int],
    rng: np.random.Generator,
    negatives_k: int = 1,
    exclude: set[int] | None = None,
    train: bool = True,
) -> torch.Tensor:
    """Sampled binary cross-entropy over next-item (causal) or cloze-masked
    (bidirectional) positions: one positive plus negatives_k sampled
    non-interacted negatives per position, averaged over all terms.

    Stream order is fixed for determinism: cloze mask (bidirectional only),
    then negatives, then dropout.
    """
    L = len(seq)
    if L < 2:
        raise ValueError(f"training sequence needs >= 2 items, got {L}")
    ids = np.asarray(seq, dtype=np.int64)
    if ids.min() < 1 or ids.max() > params.n_items:
        raise IndexError(f"item id out of range [1, {params.n_items}]")
    pool = negative_pool(params.n_items, exclude if exclude is not None else set(seq))
    k = negatives_k

    if params.variant == CAUSAL:
        negs = rng.choice(pool, size=(L - 1, k), replace=True) if k > 0 else None
        H = _causal_states(params, seq, train=train, rng=rng)
        positions = range(L - 1)
        targets = ids[1:]
    else:
        flags = rng.random(L) < params.mask_prob
        if not flags.any():
            flags[int(rng.integers(0, L))] = True
        masked = np.nonzero(flags)[0]
        negs = rng.choice(pool, size=(len(masked), k), replace=True) if k > 0 else None
        E = embed(params, seq)
        mask_rows = params.mask_emb.unsqueeze(0) + params.pos_emb[:L]
        sel = torch.from_numpy(flags).unsqueeze(1)
        E = torch.where(sel, mask_rows, E)
        H = _block(params, E, _key_mask(seq), causal=False, train=train, rng=rng)
        positions = masked
        targets = ids[masked]

    total = torch.zeros((), dtype=torch.float64)
    n_terms = 0
    for row, (pos_idx, target) in enumerate(zip(positions, targets)):
        h = H[pos_idx]
        pos_score = params.item_emb[int(target)] @ h
        total = total - torch.nn.functional.logsigmoid(pos_score)
        n_terms += 1
        if k > 0:
            neg_scores = params.item_emb[torch.from_numpy(negs[row])] @ h
            total = total - torch.nn.functional.logsigmoid(-neg_scores).sum()
            n_terms += k
    return total / n_terms


def grad_params(params: ModelParams, loss_fn: Callable[[ModelParams], torch.Tensor]) -> GradientUpdate:
    """Exact gradient of loss_fn(params) w.r.t. every parameter tensor.

    The padding embedding row is forced to zero so it stays frozen.
    """
    gp = params.autograd_copy()
    loss = loss_fn(gp)
    if loss.dim() != 0:
        raise ValueError("loss_fn must return a scalar")
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss value")
    named = gp.tensors()
    grads = torch.autograd.grad(loss, list(named.values()), allow_unused=True)
    out = {}
    for (name, tensor), g in zip(named.items(), grads):
        g = torch.zeros_like(tensor) if g is None else g.detach().clone()
        if name == "item_emb":
            g[PADDING_ITEM] = 0.0
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
        out[name] = g
    return GradientUpdate(tensors=out, loss=float(loss.detach()))


def grad_wrt_input_embeddings(
    params: ModelParams,
    embedded_seq: torch.Tensor,
    target: int,
    padding_mask: np.ndarray | None = None,
) -> torch.Tensor:
    """Gradient of softmax cross-entropy toward `target` w.r.t. the input
    embedding matrix (item + position rows), holding parameters fixed."""
    if not 1 <= target <= params.n_items:
        raise ValueError(f"target {target} out of range [1, {params.n_items}]")
    L = embedded_seq.shape[0]
    if padding_mask is None:
        padding_mask = np.ones(L, dtype=bool)
    key_mask = torch.from_numpy(np.asarray(padding_mask, dtype=bool))
    leaf = embedded_seq.detach().clone().requires_grad_(True)

    if params.variant == CAUSAL:
        real = np.nonzero(padding_mask)[0]
        if real.size == 0:
            raise ValueError("sequence contains only padding")
        H = _block(params, leaf, key_mask, causal=True)
        h = H[int(real[-1])]
    else:
        if L >= params.max_len:
            raise ValueError("bidirectional input gradients need len(seq) < max_len")
        mask_row = (params.mask_emb + params.pos_emb[L]).unsqueeze(0)
        E = torch.cat([leaf, mask_row], dim=0)
        km = torch.cat([key_mask, torch.ones(1, dtype=torch.bool)])
        H = _block(params, E, km, causal=False)
        h = H[-1]

    raw = params.item_emb @ h
    ce = torch.logsumexp(raw[1:], dim=0) - raw[target]
    g = torch.autograd.grad(ce, leaf)[0].detach().clone()
    g[torch.from_numpy(~np.asarray(padding_mask, dtype=bool))] = 0.0
    if not torch.isfinite(g).all():
        raise NumericError("non-finite input-embedding gradient")
    return g


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Flat float32 binary with a plain-text header (names, shapes, offsets)."""
    lines = [
        _CKPT_MAGIC,
        f"variant {params.variant}",
        f"max_len {params.max_len}",
        f"dropout {params.dropout!r}",
        f"mask_prob {params.mask_prob!r}",
    ]
    payload = bytearray()
    for name, t in params.tensors().items():
        arr = np.ascontiguousarray(t.detach().numpy().astype("<f4"))
        dims = " ".join(str(x) for x in arr.shape)
        lines.append(f"tensor {name} {dims} {len(payload)}")
        payload += arr.tobytes()
    header = ("\n".join(lines) + "\nEND\n").encode("utf-8")
    Path(path).write_bytes(header + bytes(payload))


def load_checkpoint(path: str | Path) -> ModelParams:
    data = Path(path).read_bytes()
    end = data.index(b"\nEND\n")
    header = data[:end].decode("utf-8").split("\n")
    payload = data[end + len(b"\nEND\n"):]
    if header[0] != _CKPT_MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {header[0]!r}")
    meta: dict[str, str] = {}
    tensors: dict[str, torch.Tensor] = {}
    for line in header[1:]:
        parts = line.split(" ")
        if parts[0] == "tensor":
            name = parts[1]
            shape = tuple(int(x) for x in parts[2:-1])
            offset = int(parts[-1])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
            tensors[name] = torch.from_numpy(arr.reshape(shape).astype(np.float64))
        else:
            meta[parts[0]] = parts[1]
    return ModelParams(
        variant=meta["variant"],
        max_len=int(meta["max_len"]),
        dropout=float(meta["dropout"]),
        mask_prob=float(meta["mask_prob"]),
        mask_emb=tensors.get("mask_emb"),
        **{k: tensors[k] for k in TENSOR_FIELDS if k != "mask_emb" and k in tensors},
    )
