"""Reverse-mode plumbing: leaf registry, gradient reports, NaN guards, and
the finite-difference oracle.

The reverse sweep itself is torch autograd; forward runners checkpoint at
frame boundaries (see mpm.simulate) so substeps are recomputed during the
sweep. This module owns the verification surface: every optimization stage
pulls its gradients through backward(), and fd_check() provides the
independent central-difference route.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from . import precision
from .errors import PhysrecError, UsageError


@dataclass
class Tape:
    """Registry of differentiable leaves plus the recorded loss."""

    leaves: dict
    loss: torch.Tensor = None
    checkpoints: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for name, t in self.leaves.items():
            if not torch.is_tensor(t):
                raise UsageError(f"leaf {name!r} is not a tensor")
            if not t.requires_grad:
                raise UsageError(f"leaf {name!r} does not require grad")
            if id(t) in seen:
                raise UsageError(f"leaf {name!r} aliases another leaf")
            seen.add(id(t))


@dataclass
class GradReport:
    grads: dict          # name -> torch tensor (or None when unused)
    norms: dict          # name -> float
    nan_flags: dict      # name -> bool

    def any_nan(self) -> bool:
        return any(self.nan_flags.values())

    def to_json(self) -> str:
        return json.dumps({
            name: {
                "norm": self.norms[name],
                "nan": self.nan_flags[name],
                "grad": None if self.grads[name] is None
                else np.asarray(self.grads[name]).reshape(-1).tolist(),
            } for name in self.grads
        }, indent=2)


def nan_guard(tensor: torch.Tensor, label: str) -> torch.Tensor:
    """Attach a backward hook that names the operation/frame when a NaN or
    Inf adjoint passes through."""
    if tensor.requires_grad:
        def hook(grad, _label=label):
            if not bool(torch.isfinite(grad).all()):
                raise PhysrecError(f"non-finite adjoint at {_label}", stage="backward")
            return grad
        tensor.register_hook(hook)
    return tensor


def record(objective, leaves: dict) -> Tape:
    """Run objective(leaves) -> scalar loss and return the populated tape."""
    tape = Tape(leaves=dict(leaves))
    loss = objective(tape.leaves)
    if not torch.is_tensor(loss) or loss.numel() != 1:
        raise UsageError("objective must return a scalar tensor")
    tape.loss = loss
    return tape


def backward(tape: Tape, retain_graph: bool = False) -> GradReport:
    """Adjoints of the recorded loss for every leaf."""
    if tape.loss is None:
        raise UsageError("tape has no recorded loss")
    names = list(tape.leaves.keys())
    try:
        grads = torch.autograd.grad(
            tape.loss, [tape.leaves[n] for n in names],
            retain_graph=retain_graph, allow_unused=True)
    except PhysrecError:
        raise
    except RuntimeError as e:
        raise PhysrecError(f"backward failed: {e}", stage="backward")
    out, norms, nans = {}, {}, {}
    for n, g in zip(names, grads):
        if g is None:
            g = torch.zeros_like(tape.leaves[n])
        out[n] = g
        norms[n] = float(torch.linalg.vector_norm(g.reshape(-1)))
        nans[n] = not bool(torch.isfinite(g).all())
    return GradReport(grads=out, norms=norms, nan_flags=nans)


def grad_of(objective, leaves: dict) -> GradReport:
    return backward(record(objective, leaves))


def fd_check(objective, leaves: dict, h, samples: int = 6, seed: int = 0,
             select: dict = None) -> dict:
    """Central-difference check of the adjoint route.

    h: float or dict leaf->float step. Picks `samples` random coordinates per
    leaf (or the explicit `select` lists) and returns per-leaf and overall
    max relative error |g_adj - g_fd| / max(1, |g_fd|).
    """
    report = grad_of(objective, leaves)
    rng = precision.rng(seed, "fd_check")
    per_leaf = {}
    worst = 0.0
    for name, leaf in leaves.items():
        step = h[name] if isinstance(h, dict) else float(h)
        flat = leaf.detach().reshape(-1)
        n = flat.numel()
        if select and name in select:
            coords = list(select[name])
        else:
            k = min(samples, n)
            coords = sorted(rng.choice(n, size=k, replace=False).tolist())
        errs = []
        for c in coords:
            orig = float(flat[c])
            with torch.no_grad():
                flat[c] = orig + step
                lp = float(objective(leaves))
                flat[c] = orig - step
                lm = float(objective(leaves))
                flat[c] = orig
            g_fd = (lp - lm) / (2.0 * step)
            g_ad = float(report.grads[name].reshape(-1)[c])
            errs.append(abs(g_ad - g_fd) / max(1.0, abs(g_fd)))
        per_leaf[name] = max(errs) if errs else 0.0
        worst = max(worst, per_leaf[name])
    per_leaf["max"] = worst
    return per_leaf
