"""Cosine noise schedule subsampled to a coarse deterministic DDIM grid."""
from __future__ import annotations

import math

import numpy as np
import torch

from masque.errors import ScheduleError


def cosine_alphas_bar(base_steps: int, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    """ᾱ for base steps 0..base_steps, with ᾱ[0] = 1."""
    n = np.arange(base_steps + 1, dtype=np.float64)
    f = np.cos((n / base_steps + s) / (1 + s) * math.pi / 2) ** 2
    betas = np.clip(1 - f[1:] / f[:-1], 0.0, max_beta)
    return np.concatenate([[1.0], np.cumprod(1 - betas)])


class DDIMSchedule:
    """Coarse grid of T noisy levels plus the clean level 0.

    Grid index ``tau`` runs 0..T. Level 0 is the clean latent (ᾱ = 1); levels
    1..T map to base steps 1, 1 + N/T, ..., 1 + (T-1)N/T.
    """

    def __init__(self, T: int = 50, base_steps: int = 1000):
        if T < 1 or base_steps % T:
            raise ScheduleError(f"T={T} must be >= 1 and divide base_steps={base_steps}")
        self.T = T
        self.base_steps = base_steps
        base = cosine_alphas_bar(base_steps)
        self.timesteps = np.array([0] + [(k - 1) * (base_steps // T) + 1 for k in range(1, T + 1)])
        self.alphas_bar = base[self.timesteps]
        self.alphas_bar[0] = 1.0

    def __repr__(self):
        return f"DDIMSchedule(T={self.T}, base_steps={self.base_steps})"

    @property
    def grid(self) -> np.ndarray:
        """The T noisy base timesteps, endpoints included."""
        return self.timesteps[1:]

    def check(self, *taus):
        for tau in taus:
            if int(tau) != tau or not 0 <= tau <= self.T:
                raise ScheduleError(f"timestep {tau} is not on the 0..{self.T} grid")

    def _transfer(self, z, eps, a, b):
        # z_b = sqrt(ab_b) * (z_a - sqrt(1 - ab_a) eps) / sqrt(ab_a) + sqrt(1 - ab_b) eps
        ab_a, ab_b = float(self.alphas_bar[a]), float(self.alphas_bar[b])
        z0 = (z - math.sqrt(1 - ab_a) * eps) / math.sqrt(ab_a)
        return math.sqrt(ab_b) * z0 + math.sqrt(1 - ab_b) * eps

    def ddim_step(self, z_t: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int) -> torch.Tensor:
        self.check(t, t_prev)
        if t_prev > t:
            raise ScheduleError(f"ddim_step needs t_prev <= t, got t={t}, t_prev={t_prev}")
        if t_prev == t:
            return z_t.clone()
        return self._transfer(z_t, eps, t, t_prev)

    def ddim_inverse_step(self, z_t: torch.Tensor, eps: torch.Tensor, t: int, t_next: int) -> torch.Tensor:
        self.check(t, t_next)
        if t_next < t:
            raise ScheduleError(f"ddim_inverse_step needs t_next >= t, got t={t}, t_next={t_next}")
        if t_next == t:
            return z_t.clone()
        return self._transfer(z_t, eps, t, t_next)

    def predict_z0(self, z_t: torch.Tensor, eps: torch.Tensor, t: int) -> torch.Tensor:
        ab = float(self.alphas_bar[t])
        return (z_t - math.sqrt(1 - ab) * eps) / math.sqrt(ab)

    def add_noise(self, z0: torch.Tensor, noise: torch.Tensor, t) -> torch.Tensor:
        ab = torch.as_tensor(self.alphas_bar, dtype=z0.dtype)[torch.as_tensor(t)]
        ab = ab.reshape(-1, *([1] * (z0.dim() - 1)))
        return ab.sqrt() * z0 + (1 - ab).sqrt() * noise
