"""Similarity kernels and the contrastive loss family.

All functions take and return torch tensors so they can sit inside the
training graph; scalar helpers accept anything ``torch.as_tensor`` does.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

Q_FLOOR = 1e-7


@dataclass(frozen=True)
class KernelConfig:
    sigma: float | None = None  # None: median pairwise distance of the batch
    beta: float = 2.0

    def __post_init__(self):
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")


@dataclass(frozen=True)
class MMLConfig:
    prior_alpha: float = 0.5
    weight_po: float = 1.0
    weight_ne: float = 5.0
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def __post_init__(self):
        if self.prior_alpha < 0:
            raise ValueError("prior_alpha must be >= 0")
        if self.weight_po < 0 or self.weight_ne < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def active(self) -> bool:
        return self.weight_po > 0 or self.weight_ne > 0


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def kernel(a, b, cfg: KernelConfig) -> torch.Tensor:
    """Generalized Gaussian similarity exp(-(||a - b|| / sigma)^beta)."""
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if cfg.sigma is None:
        raise ValueError("a fixed sigma is required for a single pair")
    d = torch.linalg.vector_norm(a - b, dim=-1)
    return torch.exp(-((d / cfg.sigma) ** cfg.beta))


def pairwise_sq_dist(x: torch.Tensor) -> torch.Tensor:
    sq = (x * x).sum(dim=-1)
    d2 = (sq[:, None] + sq[None, :] - 2 * x @ x.T).clamp_min(0.0)
    # the expanded form leaves rounding residue on the diagonal
    return d2 * (1 - torch.eye(len(x), dtype=x.dtype, device=x.device))


def median_distance(sq_dist: torch.Tensor) -> torch.Tensor:
    n = sq_dist.shape[0]
    off = sq_dist[~torch.eye(n, dtype=torch.bool, device=sq_dist.device)]
    return off.detach().clamp_min(1e-24).sqrt().median()


def kernel_matrix(x: torch.Tensor, cfg: KernelConfig) -> torch.Tensor:
    """Pairwise kernel over the rows of ``x``.

    Works on squared distances so the gradient is finite at coincident rows.
    """
    sq = pairwise_sq_dist(x)
    sigma = median_distance(sq) if cfg.sigma is None else torch.as_tensor(cfg.sigma, dtype=x.dtype)
    scaled = sq / sigma**2
    if cfg.beta == 2.0:
        return torch.exp(-scaled)
    # d^beta has an infinite slope at d = 0 for beta < 2; route zeros around pow
    zero = scaled <= 0
    powed = torch.where(zero, torch.ones_like(scaled), scaled) ** (cfg.beta / 2)
    return torch.exp(-torch.where(zero, torch.zeros_like(scaled), powed))


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return (a * b).sum(dim=-1) / (na * nb)


def cl_loss(anchor_z, positive_z, negatives_z, include_positive: bool = False) -> torch.Tensor:
    """InfoNCE with cosine similarity.

    By default the denominator runs over the negatives only; set
    ``include_positive`` for the textbook variant.
    """
    anchor_z, positive_z, negatives_z = _t(anchor_z), _t(positive_z), _t(negatives_z)
    if negatives_z.dim() == 1:
        negatives_z = negatives_z[None]
    if negatives_z.shape[0] == 0:
        raise ValueError("at least one negative is required")
    pos = cosine(anchor_z, positive_z)
    neg = cosine(anchor_z[None, :], negatives_z)
    terms = torch.cat([pos[None], neg]) if include_positive else neg
    return torch.logsumexp(terms, dim=0) - pos


def ccl_loss(q, homology, q_dot: str = "one_minus") -> torch.Tensor:
    """-sum[H log Q + (1 - H) log Qdot].

    ``q_dot`` is ``"one_minus"`` (Qdot = 1 - Q, floored) or ``"exp_neg"``
    (Qdot = exp(-S) = 1 / Q for Q = exp(S)).
    """
    q, h = _t(q), _t(homology).to(dtype=_t(q).dtype)
    if (q <= 0).any() or (q > 1).any():
        raise ValueError("Q entries must lie in (0, 1]")
    if q_dot == "one_minus":
        log_qd = torch.log((1 - q).clamp_min(Q_FLOOR))
    elif q_dot == "exp_neg":
        log_qd = -torch.log(q)
    else:
        raise ValueError(f"unknown q_dot {q_dot!r}")
    return -(h * torch.log(q) + (1 - h) * log_qd).sum()


def soft_labels(input_sims, homology, prior_alpha: float) -> torch.Tensor:
    """P: input-space similarity, boosted by e^alpha on homologous pairs and capped at 1."""
    input_sims = _t(input_sims)
    h = _t(homology).to(torch.bool)
    boosted = torch.clamp(math.exp(prior_alpha) * input_sims, max=1.0)
    return torch.where(h, boosted, input_sims)


def mml_loss(input_sims, latent_sims, homology, cfg: MMLConfig, pair_mask=None) -> torch.Tensor:
    """Weighted soft-label cross-entropy between P and Q, averaged over pairs."""
    input_sims, latent_sims = _t(input_sims), _t(latent_sims)
    if input_sims.shape != latent_sims.shape:
        raise ValueError("similarity matrices differ in shape")
    if not (torch.isfinite(input_sims).all() and torch.isfinite(latent_sims).all()):
        raise ValueError("non-finite similarities")
    p = soft_labels(input_sims, homology, cfg.prior_alpha)
    q = latent_sims.clamp(Q_FLOOR, 1 - Q_FLOOR)
    per_pair = -(cfg.weight_po * p * torch.log(q) + cfg.weight_ne * (1 - p) * torch.log1p(-q))
    if pair_mask is None:
        return per_pair.mean()
    return per_pair[_t(pair_mask).to(torch.bool)].mean()


def paired_homology(b: int, device=None) -> torch.Tensor:
    """Homology over the stacked [anchors; views] batch of size 2b."""
    eye = torch.eye(b, dtype=torch.bool, device=device)
    zero = torch.zeros_like(eye)
    return torch.cat([torch.cat([zero, eye], 1), torch.cat([eye, zero], 1)], 0)


def batch_mml(input_repr: torch.Tensor, latent_repr: torch.Tensor, cfg: MMLConfig) -> torch.Tensor:
    """MML over all ordered off-diagonal pairs of a stacked [anchors; views] batch.

    Rows are flattened per window.  Soft labels come from ``input_repr`` and
    act as fixed targets (no gradient through P).
    """
    n = input_repr.shape[0]
    if n % 2:
        raise ValueError("expected an even-sized [anchors; views] batch")
    x = input_repr.reshape(n, -1)
    z = latent_repr.reshape(n, -1)
    with torch.no_grad():
        p_sims = kernel_matrix(x, cfg.kernel)
    q_sims = kernel_matrix(z, cfg.kernel)
    off_diag = ~torch.eye(n, dtype=torch.bool, device=z.device)
    return mml_loss(p_sims, q_sims, paired_homology(n // 2, z.device), cfg, pair_mask=off_diag)


def joint_objective(mle, mml) -> torch.Tensor:
    return _t(mle) + _t(mml)
