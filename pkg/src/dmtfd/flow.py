"""Conditional affine-coupling normalizing flow.

Each block applies an affine map to one half of the features, with scale
and shift predicted from the other (kept) half and the condition.  When a
condition is given, the kept half also gets an elementwise affine map
predicted from the condition alone, so no coordinate is modelled
unconditionally.  Log-scales are squashed through ``clamp * tanh(s / clamp)``,
so every block is a bijection with bounded Jacobian.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .diffnet import init_fan_in_

LOG_2PI = math.log(2 * math.pi)


@dataclass
class FlowResult:
    z_hat: torch.Tensor  # (..., D)
    log_det: torch.Tensor  # (...)


def half_mask(dim: int, block: int) -> torch.Tensor:
    """1 marks a pass-through coordinate; alternates between the two halves."""
    first = torch.arange(dim) < dim // 2
    keep = first if block % 2 == 0 else ~first
    return keep.to(torch.get_default_dtype())


class AffineCoupling(nn.Module):
    def __init__(self, dim: int, cond_dim: int, hidden: int, mask: torch.Tensor, clamp: float = 2.0):
        super().__init__()
        self.dim = dim
        self.clamp = clamp
        self.register_buffer("mask", mask.clone())
        self.fc1 = nn.Linear(dim + cond_dim, hidden)
        self.fc2 = nn.Linear(hidden, 2 * dim)
        self.cond_fc1 = nn.Linear(cond_dim, hidden) if cond_dim else None
        self.cond_fc2 = nn.Linear(hidden, 2 * dim) if cond_dim else None
        for m in (self.fc1, self.cond_fc1):
            if m is not None:
                init_fan_in_(m)
        # identity map at initialisation
        for m in (self.fc2, self.cond_fc2):
            if m is not None:
                nn.init.zeros_(m.weight)
                nn.init.zeros_(m.bias)

    def _squash(self, raw_s):
        return self.clamp * torch.tanh(raw_s / self.clamp)

    def _scale_shift(self, kept, cond):
        """Scale and shift for the free half, from the kept half and the condition."""
        inp = kept if cond is None else torch.cat([kept, cond], dim=-1)
        raw_s, t = self.fc2(torch.tanh(self.fc1(inp))).chunk(2, dim=-1)
        free = 1.0 - self.mask
        return self._squash(raw_s) * free, t * free

    def _kept_scale_shift(self, cond):
        """Scale and shift for the kept half, from the condition only."""
        if cond is None or self.cond_fc1 is None:
            return 0.0, 0.0
        raw_s, t = self.cond_fc2(torch.tanh(self.cond_fc1(cond))).chunk(2, dim=-1)
        return self._squash(raw_s) * self.mask, t * self.mask

    def forward(self, x, cond=None):
        s_free, t_free = self._scale_shift(x * self.mask, cond)
        s_kept, t_kept = self._kept_scale_shift(cond)
        s = s_free + s_kept
        return x * torch.exp(s) + t_free + t_kept, s.sum(dim=-1)

    def inverse(self, y, cond=None):
        s_kept, t_kept = self._kept_scale_shift(cond)
        # recover the kept half first; it alone determines the free half's map
        kept = (y - t_kept) * torch.exp(-s_kept) * self.mask
        s_free, t_free = self._scale_shift(kept, cond)
        return (y - t_free - t_kept) * torch.exp(-(s_free + s_kept))


class FlowBlockStack(nn.Module):
    """Stack of conditional affine couplings with a learnable base mean."""

    def __init__(self, dim: int, cond_dim: int = 0, n_blocks: int = 1, hidden: int = 32, clamp: float = 2.0):
        super().__init__()
        if n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        self.dim = dim
        self.cond_dim = cond_dim
        self.blocks = nn.ModuleList(
            AffineCoupling(dim, cond_dim, hidden, half_mask(dim, i), clamp) for i in range(n_blocks)
        )
        self.mu = nn.Parameter(torch.zeros(dim))

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def forward(self, x, cond=None) -> FlowResult:
        log_det = torch.zeros(x.shape[:-1], dtype=x.dtype, device=x.device)
        for block in self.blocks:
            x, ld = block(x, cond)
            log_det = log_det + ld
        return FlowResult(x, log_det)

    def inverse(self, z_hat, cond=None):
        for block in reversed(self.blocks):
            z_hat = block.inverse(z_hat, cond)
        return z_hat


def flow_forward(x, cond, stack: FlowBlockStack) -> FlowResult:
    return stack(x, cond)


def flow_inverse(z_hat, cond, stack: FlowBlockStack):
    return stack.inverse(z_hat, cond)


def item_log_prob(result: FlowResult, mu) -> torch.Tensor:
    """log p(x) per item under a unit-covariance Gaussian base centred at mu."""
    d = result.z_hat.shape[-1]
    sq = ((result.z_hat - mu) ** 2).sum(dim=-1)
    return -0.5 * sq - 0.5 * d * LOG_2PI + result.log_det


def mle_objective(result: FlowResult, mu) -> torch.Tensor:
    """Average negative log-likelihood over all items, 2*pi constant omitted."""
    sq = ((result.z_hat - mu) ** 2).sum(dim=-1)
    return -(-0.5 * sq + result.log_det).mean()


def log_density(x, cond, stack: FlowBlockStack) -> torch.Tensor:
    """Entity-averaged log density: (B, K, D) -> (B,)."""
    lp = item_log_prob(stack(x, cond), stack.mu)
    return lp.mean(dim=-1) if lp.dim() > 1 else lp
