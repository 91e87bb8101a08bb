"""Gradient-descent-with-moments and the step-milestone learning rate rule.

The update follows the decoupled-weight-decay convention: the decay shrinks
parameters directly and the adaptive step uses bias-corrected first/second
moments. State is keyed by parameter name so it can ride along in
checkpoints.
"""

from __future__ import annotations

import torch

from .config import OptimConfig, parse_milestones
from .errors import CheckpointError


class MomentOptimizer:
    def __init__(self, named_params, cfg: OptimConfig):
        self.params = [(name, p) for name, p in named_params]
        self.cfg = cfg
        self.t = 0
        self.m = {name: torch.zeros_like(p) for name, p in self.params}
        self.v = {name: torch.zeros_like(p) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if self.cfg.weight_decay:
                p.mul_(1.0 - lr * self.cfg.weight_decay)
            denom = (v / bias2).sqrt_().add_(self.cfg.eps)
            p.addcdiv_(m / bias1, denom, value=-lr)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {"opt.t": torch.tensor(self.t, dtype=torch.int64)}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict[str, torch.Tensor]) -> None:
        if "opt.t" not in tensors:
            raise CheckpointError("optimizer state missing step counter")
        self.t = int(tensors["opt.t"])
        for name in self.m:
            mk, vk = f"opt.m.{name}", f"opt.v.{name}"
            if mk not in tensors or vk not in tensors:
                raise CheckpointError(f"optimizer state missing moments for {name!r}")
            self.m[name].copy_(tensors[mk])
            self.v[name].copy_(tensors[vk])


class LearningRateSchedule:
    """Base rate scaled by decay_factor at each milestone fraction of the run."""

    def __init__(self, cfg: OptimConfig, total_steps: int):
        self.base = cfg.lr
        self.factor = cfg.decay_factor
        self.boundaries = sorted(int(round(f * total_steps))
                                 for f in parse_milestones(cfg.milestones))

    def at(self, step: int) -> float:
        passed = sum(1 for b in self.boundaries if step >= b)
        return self.base * self.factor ** passed
