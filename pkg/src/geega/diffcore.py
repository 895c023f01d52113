"""Gradients over parameter subsets, optimizer, schedules and checkpoints.

Reverse-mode differentiation is delegated to :mod:`torch.autograd`; this module
adds the subset bookkeeping the alignment step needs (stable flattening order,
zero fill for parameters a loss does not reach).
"""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np
import torch
from torch import nn

from .container import Container

COMPONENTS = ("T_topo", "T_spectro", "GCN", "head_topo", "head_spectro", "head_GCN", "centers")


class ContractError(ValueError):
    pass


def parameter_groups(model: nn.Module) -> "OrderedDict[str, list[tuple[str, nn.Parameter]]]":
    """Trainable parameters keyed by component tag, in registration order."""
    groups = OrderedDict()
    for name, p in model.named_parameters():
        tag = model.component_of(name)
        if tag not in COMPONENTS:
            raise ContractError(f"parameter {name} has unknown component {tag!r}")
        groups.setdefault(tag, []).append((name, p))
    return groups


def subset(model: nn.Module, *tags) -> list[nn.Parameter]:
    groups = parameter_groups(model)
    return [p for tag in tags for _, p in groups.get(tag, [])]


def flatten(tensors) -> torch.Tensor:
    tensors = list(tensors)
    if not tensors:
        return torch.zeros(0)
    return torch.cat([t.reshape(-1) for t in tensors])


def unflatten(vec: torch.Tensor, like) -> list[torch.Tensor]:
    like = list(like)
    total = sum(p.numel() for p in like)
    if vec.numel() != total:
        raise ContractError(f"vector of length {vec.numel()} for a subset of {total} values")
    out, off = [], 0
    for p in like:
        out.append(vec[off:off + p.numel()].view_as(p).to(p.dtype))
        off += p.numel()
    return out


def backward(loss: torch.Tensor, params, retain_graph: bool = True) -> torch.Tensor:
    """Flat gradient of a scalar ``loss`` w.r.t. ``params`` (zeros where unreachable)."""
    params = list(params)
    if loss.dim() != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not params:
        return torch.zeros(0, dtype=loss.dtype)
    if not loss.requires_grad:
        return torch.zeros(sum(p.numel() for p in params), dtype=params[0].dtype)
    grads = torch.autograd.grad(loss, params, retain_graph=retain_graph, allow_unused=True)
    return flatten(torch.zeros_like(p) if g is None else g for g, p in zip(grads, params))


def make_optimizer(model: nn.Module, lr: float = 1e-4, weight_decay: float = 1e-5,
                   betas=(0.9, 0.999), eps=1e-8) -> torch.optim.Optimizer:
    """AdamW (decoupled decay); biases are excluded from decay."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if name.endswith("bias") else decay).append(p)
    groups = [{"params": decay, "weight_decay": weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW([g for g in groups if g["params"]], lr=lr, betas=betas, eps=eps)


def adam_step(params, grads, optimizer: torch.optim.Optimizer) -> None:
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ContractError(f"{len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        p.grad = g.detach().to(p.dtype).clone()
    optimizer.step()


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def lr_schedule(epoch: int, plateau_history=(), warmup_epochs: int = 5,
                factor: float = 0.1, patience: int = 5) -> float:
    """Learning-rate multiplier for ``epoch``.

    ``plateau_history`` holds the monitored value (lower is better) of every
    completed epoch before ``epoch``. Warmup is linear, ``(epoch+1)/warmup``.
    Afterwards the multiplier starts at 1 and is cut by ``factor`` each time the
    monitored value has failed to improve for ``patience`` consecutive epochs.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < warmup_epochs:
        return (epoch + 1) / warmup_epochs
    mult, best, bad = 1.0, math.inf, 0
    for e, value in enumerate(list(plateau_history)[:epoch]):
        if value < best:
            best, bad = value, 0
        elif e >= warmup_epochs:
            bad += 1
        if bad >= patience:
            mult *= factor
            bad = 0
    return mult


def save_checkpoint(model: nn.Module, path, meta=None, extra=None) -> None:
    """Write every parameter and buffer as float32 with its component tag."""
    box = Container(meta=dict(meta or {}))
    for name, t in model.state_dict().items():
        box.add(name, t.detach().cpu().numpy().astype(np.float32), model.component_of(name))
    for name, (arr, tag) in (extra or {}).items():
        box.add(name, arr, tag)
    box.save(path)


def load_checkpoint(model: nn.Module, path) -> Container:
    box = Container.load(path)
    state = model.state_dict()
    missing = [k for k in state if k not in box]
    if missing:
        raise ContractError(f"{path}: checkpoint lacks {missing[:3]}")
    model.load_state_dict({k: torch.as_tensor(box[k], dtype=state[k].dtype) for k in state})
    return box
