"""Noise schedule, forward noising, the noise-prediction loss and a DDIM sampler."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions ``alphabar[t-1]`` for ``t = 1..num_steps``."""

    alphabar: tuple[float, ...]

    def __post_init__(self):
        a = np.asarray(self.alphabar, dtype=np.float64)
        if a.ndim != 1 or len(a) == 0:
            raise ValueError("alphabar must be a non-empty 1-D sequence")
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("alphabar values must lie in (0, 1]")
        if np.any(np.diff(a) > 0):
            raise ValueError("alphabar must be non-increasing")

    @property
    def num_steps(self) -> int:
        return len(self.alphabar)

    def at(self, t: int) -> float:
        """``alphabar_t`` with the convention ``alphabar_0 = 1``."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"timestep {t} outside [1, {self.num_steps}]")
        return self.alphabar[t - 1]

    @classmethod
    def linear(cls, num_steps: int = 50, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        # betas are rescaled by 1000/num_steps so short schedules still reach ~pure noise
        scale = 1000.0 / num_steps
        betas = np.linspace(scale * beta_start, scale * beta_end, num_steps, dtype=np.float64)
        betas = np.clip(betas, 0.0, 0.999)
        return cls(tuple(float(v) for v in np.cumprod(1.0 - betas)))

    @classmethod
    def scaled_linear(cls, num_steps: int = 50, beta_start: float = 0.00085,
                      beta_end: float = 0.012) -> "NoiseSchedule":
        """Betas linear in sqrt-space; keeps the mid chain informative at few steps."""
        scale = 1000.0 / num_steps
        betas = scale * np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), num_steps,
                                    dtype=np.float64) ** 2
        betas = np.clip(betas, 0.0, 0.999)
        return cls(tuple(float(v) for v in np.cumprod(1.0 - betas)))


SCHEDULES = ("linear", "scaled_linear")


def named_schedule(name: str, num_steps: int) -> NoiseSchedule:
    if name not in SCHEDULES:
        raise ValueError(f"unknown schedule {name!r}; expected one of {SCHEDULES}")
    return getattr(NoiseSchedule, name)(num_steps)


def forward_diffuse(z0: torch.Tensor, t: int, noise: torch.Tensor,
                    schedule: NoiseSchedule) -> torch.Tensor:
    if noise.shape != z0.shape:
        raise ValueError("noise must match z0 in shape")
    ab = schedule.at(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise


def forward_diffuse_batch(z0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor,
                          schedule: NoiseSchedule) -> torch.Tensor:
    """Per-sample timesteps; ``t`` has shape (B,) and z0 is (B, ...)."""
    ab = torch.tensor([schedule.at(int(v)) for v in t], dtype=z0.dtype)
    ab = ab.reshape(-1, *([1] * (z0.ndim - 1)))
    return ab.sqrt() * z0 + (1 - ab).sqrt() * noise


def ldm_loss(eps_pred: torch.Tensor, eps: torch.Tensor,
             weights: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared noise error; optional per-sample ``weights`` of shape (B,)."""
    if eps_pred.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(eps_pred.shape)} vs {tuple(eps.shape)}")
    d = eps_pred - eps
    if weights is None:
        return (d * d).mean()
    per = (d * d).reshape(d.shape[0], -1).mean(dim=1)
    return (weights.to(per.dtype) * per).mean()


def min_snr_weights(t: torch.Tensor, schedule: NoiseSchedule, gamma: float) -> torch.Tensor:
    """min(SNR, gamma) / SNR per timestep; caps the weight of nearly clean samples."""
    ab = torch.tensor([schedule.at(int(v)) for v in t], dtype=torch.float64)
    snr = ab / (1 - ab)
    return torch.clamp(snr, max=gamma) / snr


def timestep_embedding(t: torch.Tensor | int, dim: int, max_period: float = 10000.0,
                       dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal embedding; returns (B, dim) for a (B,) tensor or (dim,) for an int."""
    scalar = not torch.is_tensor(t)
    tt = torch.as_tensor([t] if scalar else t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = tt[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(len(tt), 1, dtype=torch.float64)], dim=-1)
    emb = emb.to(dtype)
    return emb[0] if scalar else emb


def sampling_timesteps(schedule: NoiseSchedule, steps: int | None = None) -> list[int]:
    """Descending timesteps used by the sampler, always starting at ``num_steps``."""
    n = schedule.num_steps
    if steps is None or steps >= n:
        return list(range(n, 0, -1))
    if steps < 1:
        raise ValueError("need at least one sampling step")
    ts = np.round(np.linspace(n, 1, steps)).astype(int)
    return sorted(set(int(v) for v in ts), reverse=True)


Denoiser = Callable[[torch.Tensor, int, object], torch.Tensor]


def ddim_step(z_t: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int,
              schedule: NoiseSchedule, clip: float | None = None) -> torch.Tensor:
    """One eta = 0 step; ``clip`` bounds the clean estimate and re-derives the noise."""
    ab, ab_prev = schedule.at(t), schedule.at(t_prev)
    x0 = (z_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    if clip is not None:
        x0 = x0.clamp(-clip, clip)
        eps = (z_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps


def initial_noise(shape: Sequence[int], seed: int, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=gen, dtype=torch.float64).to(dtype)


@torch.no_grad()
def sample_loop(denoiser: Denoiser, conditioning, schedule: NoiseSchedule, seed: int,
                shape: Sequence[int], steps: int | None = None,
                dtype: torch.dtype = torch.float32,
                z_init: torch.Tensor | None = None, clip: float | None = None) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) from seeded Gaussian noise.

    ``denoiser(z_t, t, conditioning)`` must return the predicted noise.
    """
    z = initial_noise(shape, seed, dtype) if z_init is None else z_init.clone()
    ts = sampling_timesteps(schedule, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = denoiser(z, t, conditioning)
        z = ddim_step(z, eps, t, t_prev, schedule, clip)
        if not torch.isfinite(z).all():
            raise FloatingPointError(f"non-finite latent at sampling step {i} (t={t})")
    return z
