import numpy as np
import pytest
import torch

from fedseq.recmodel import ModelConfig, init_params
from fedseq.rng import stream


def tiny_params(n_items=10, dim=8, max_len=5, variant="causal", seed=3, init_std=0.1,
                dropout=0.1, ffn_dim=0):
    cfg = ModelConfig(
        n_items=n_items, dim=dim, ffn_dim=ffn_dim, max_len=max_len,
        variant=variant, dropout=dropout, init_std=init_std,
    )
    return init_params(cfg, stream(seed, "init"))


def finite_difference_grads(params, loss_fn, h=1e-4):
    """Central finite differences of loss_fn over every parameter tensor.

    Independent oracle: evaluates the loss at perturbed parameters only; it
    never touches autograd. loss_fn must be a deterministic function of the
    parameters (re-seed any sampling inside it per call).
    """
    out = {}
    for name, t in params.tensors().items():
        fd = torch.zeros_like(t)
        flat, fd_flat = t.reshape(-1), fd.reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            lp = float(loss_fn(params))
            flat[i] = orig - h
            lm = float(loss_fn(params))
            flat[i] = orig
            fd_flat[i] = (lp - lm) / (2.0 * h)
        if name == "item_emb":
            fd[0] = 0.0  # padding row is frozen by contract
        out[name] = fd
    return out


def relative_block_errors(analytic, fd):
    errs = {}
    for name, fd_t in fd.items():
        a = analytic.tensors[name]
        denom = float(torch.linalg.norm(fd_t))
        diff = float(torch.linalg.norm(a - fd_t))
        errs[name] = diff / denom if denom > 1e-9 else diff
    return errs


@pytest.fixture(scope="session")
def torch_threads():
    torch.set_num_threads(max(1, torch.get_num_threads()))
    return torch.get_num_threads()
