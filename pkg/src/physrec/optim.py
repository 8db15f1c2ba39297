"""Adam, written out (bias-corrected moments), one state block per leaf."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import UsageError


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """params: dict name -> tensor (updated in place under no_grad);
    lr: float or dict name -> float."""

    def __init__(self, params: dict, lr, betas=(0.9, 0.999), eps: float = 1e-8):
        b1, b2 = float(betas[0]), float(betas[1])
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise UsageError("betas must be in [0, 1)")
        self.params = dict(params)
        self.state = {}
        for name, p in self.params.items():
            rate = lr[name] if isinstance(lr, dict) else float(lr)
            self.state[name] = AdamState(
                m=torch.zeros_like(p, requires_grad=False),
                v=torch.zeros_like(p, requires_grad=False),
                t=0, lr=float(rate), beta1=b1, beta2=b2, eps=float(eps))

    def step(self, grads: dict) -> None:
        with torch.no_grad():
            for name, p in self.params.items():
                g = grads[name]
                if g is None:
                    g = torch.zeros_like(p)
                s = self.state[name]
                s.t += 1
                s.m.mul_(s.beta1).add_(g, alpha=1.0 - s.beta1)
                s.v.mul_(s.beta2).addcmul_(g, g, value=1.0 - s.beta2)
                m_hat = s.m / (1.0 - s.beta1 ** s.t)
                v_hat = s.v / (1.0 - s.beta2 ** s.t)
                p.add_(-s.lr * m_hat / (v_hat.sqrt() + s.eps))
