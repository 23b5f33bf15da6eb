"""Forward noising, the P2-weighted latent loss and the DDIM reverse process."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import torch

from ._exceptions import ContractError
from .schedules import P2Config, Schedule

__all__ = [
    "forward_diffuse",
    "p2_latent_loss",
    "ddim_step",
    "timestep_sequence",
    "sample",
]


def _gather(table: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Look up 1-based ``t`` in a float64 schedule table, broadcast over ``like``."""
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(like.shape[0])
    if t.shape != (like.shape[0],):
        raise ContractError(f"t must have shape ({like.shape[0]},), got {tuple(t.shape)}")
    if (t < 1).any() or (t > table.shape[0]).any():
        raise IndexError(f"timesteps must lie in [1, {table.shape[0]}]")
    vals = torch.from_numpy(np.asarray(table)[t.numpy() - 1]).to(like.dtype)
    return vals.view(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, s: Schedule) -> torch.Tensor:
    """Noise ``z0`` to step ``t``: ``sqrt(ab) z0 + sqrt(1 - ab) eps`` per batch item."""
    if eps.shape != z0.shape:
        raise ContractError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    ab = _gather(s.alpha_bar, t, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def p2_latent_loss(eps: torch.Tensor, eps_hat: torch.Tensor, t, s: Schedule,
                   cfg: P2Config = P2Config()) -> torch.Tensor:
    """Batch mean of ``||eps - eps_hat||^2 / (k + SNR(t))^gamma``.

    The squared norm sums over every non-batch dimension.
    """
    if eps.shape != eps_hat.shape:
        raise ContractError(
            f"eps shape {tuple(eps.shape)} != eps_hat shape {tuple(eps_hat.shape)}")
    weights = 1.0 / (cfg.k + s.snr_table()) ** cfg.gamma
    w = _gather(weights, t, eps).view(-1)
    sq = (eps - eps_hat).pow(2).reshape(eps.shape[0], -1).sum(dim=1)
    return (w * sq).mean()


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, eta: float,
              s: Schedule, rng: Optional[torch.Generator] = None) -> torch.Tensor:
    """Move ``z_t`` to ``t_prev`` using the predicted noise.

    ``eta = 0`` is the deterministic sampler and draws nothing from ``rng``;
    ``eta = 1`` matches the ancestral DDPM variance.
    """
    t, t_prev = int(t), int(t_prev)
    if not t > t_prev >= 0:
        raise ContractError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ContractError(f"eta must lie in [0, 1], got {eta}")
    if eps_hat.shape != z_t.shape:
        raise ContractError("eps_hat must have the shape of z_t")
    ab_t = s.alpha_bar_at(t)
    ab_prev = s.alpha_bar_at(t_prev)
    z0_hat = (z_t - (1.0 - ab_t) ** 0.5 * eps_hat) / ab_t ** 0.5
    sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)) ** 0.5 * (1.0 - ab_t / ab_prev) ** 0.5
    direction = max(1.0 - ab_prev - sigma ** 2, 0.0) ** 0.5 * eps_hat
    z_prev = ab_prev ** 0.5 * z0_hat + direction
    if sigma > 0:
        noise = torch.randn(z_t.shape, generator=rng, dtype=z_t.dtype)
        z_prev = z_prev + sigma * noise
    return z_prev


def timestep_sequence(T: int, steps: int) -> list[int]:
    """Descending, uniformly strided timesteps from ``T`` down to 1."""
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    if steps > T:
        raise ContractError(f"steps ({steps}) exceeds the schedule length T={T}")
    if steps == 1:
        return [T]
    seq = np.round(np.linspace(T, 1, steps)).astype(int)
    return [int(v) for v in seq]


def sample(model: Callable, cond, steps: int, eta: float, seed, s: Schedule,
           shape: tuple, dtype=torch.float32, return_trajectory: bool = False):
    """Run the DDIM sampler from pure noise.

    ``model(z_t, t, cond)`` must return the predicted noise for a batch
    where ``t`` is a long tensor of 1-based steps.
    """
    seq = timestep_sequence(s.T, steps)
    rng = torch.Generator().manual_seed(int(seed))
    z = torch.randn(shape, generator=rng, dtype=dtype)
    trajectory = [z]
    nxt = seq[1:] + [0]
    with torch.no_grad():
        for t, t_prev in zip(seq, nxt):
            tt = torch.full((shape[0],), t, dtype=torch.long)
            eps_hat = model(z, tt, cond)
            z = ddim_step(z, eps_hat, t, t_prev, eta, s, rng)
            if return_trajectory:
                trajectory.append(z)
    if return_trajectory:
        return z, trajectory
    return z
