#!/usr/bin/env python3
"""
Feature distillation: perturb a source batch within an L-infinity ball so
that its features at one gated block of a path mimic an unrelated target
batch. The perturbed batch exposes the non-robust features that path relies
on when classifying the source labels.
"""

import logging
from typing import Optional
from dataclasses import dataclass

import torch

from eio.rgn import Path, eval_mode


logger = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    eps_d: float = 0.07
    steps: int = 10
    step_size: Optional[float] = None
    layer: Optional[int] = None
    random_start: bool = False
    record_trace: bool = False

    @property
    def step(self):
        """Per-step magnitude; ``eps_d / 10`` unless set."""
        if self.step_size is None:
            return self.eps_d / 10
        return self.step_size

    def validate(self, L=None):
        if self.eps_d < 0:
            raise ValueError(f"eps_d must be >= 0: {self.eps_d}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0: {self.steps}")
        if self.steps > 0 and self.eps_d > 0 and not self.step > 0:
            raise ValueError(f"step_size must be > 0: {self.step}")
        if self.layer is not None and L is not None and not 1 <= self.layer <= L:
            raise ValueError(f"layer out of range [1, {L}]: {self.layer}")
        return self


@dataclass
class DistilledBatch:
    x_prime: torch.Tensor
    y_s: torch.Tensor
    path: Path
    layer: int
    objective_trace: tuple = ()

    @property
    def path_id(self):
        return self.path.label


def distill_objective(rgn, path, l, z, x_t):
    """
    Squared Euclidean distance between the layer-``l`` features of ``z`` and
    ``x_t`` under ``path``. The features of ``x_t`` are constants.
    """
    if z.shape != x_t.shape:
        raise ValueError(f"Shape mismatch: {tuple(z.shape)} vs {tuple(x_t.shape)}")
    with torch.no_grad():
        _, f_t = rgn(x_t, path, tap_layer=l)
    _, f_z = rgn(z, path, tap_layer=l)
    return (f_z - f_t).pow(2).sum()


def distill_features(rgn, path, l, x_t, x_s, cfg, rng, y_s=None):
    """
    Projected sign-gradient descent on ``distill_objective`` starting from
    ``x_s``; every iterate is projected onto the ``eps_d`` ball around
    ``x_s`` and clipped to ``[0, 1]``. Runs in eval mode and leaves the
    parameters' gradients untouched.
    """
    cfg.validate()
    if x_t.shape != x_s.shape:
        raise ValueError(f"Shape mismatch: {tuple(x_t.shape)} vs {tuple(x_s.shape)}")
    path = Path(tuple(path))
    x_s = x_s.detach()
    lower = x_s - cfg.eps_d
    upper = x_s + cfg.eps_d
    z = x_s.clone()
    if cfg.random_start and cfg.eps_d > 0:
        noise = rng.uniform(-cfg.eps_d, cfg.eps_d, size=tuple(x_s.shape))
        z = z + torch.as_tensor(noise, dtype=x_s.dtype, device=x_s.device)
        z = torch.min(torch.max(z, lower), upper).clamp(0, 1)
    trace = []
    with eval_mode(rgn):
        for _ in range(cfg.steps):
            z.requires_grad_(True)
            objective = distill_objective(rgn, path, l, z, x_t)
            grad, = torch.autograd.grad(objective, z)
            trace.append(objective.item())
            with torch.no_grad():
                z = z - cfg.step * grad.sign()
                z = torch.min(torch.max(z, lower), upper).clamp(0, 1)
            z = z.detach()
        if cfg.record_trace:
            with torch.no_grad():
                trace.append(distill_objective(rgn, path, l, z, x_t).item())
    return DistilledBatch(z.detach(), y_s, path, l, tuple(trace))
