"""Noise schedule, closed-form forward process and seeded noise streams.

Timesteps are 1-indexed: ``t`` runs over ``1..T`` and ``alpha_bar(0)`` is
defined as 1 so the final reverse step lands on the clean sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    total_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    deterministic: bool = True

    def check_t(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not (lo <= int(t) <= self.total_steps):
            raise ValueError(f"timestep {t} outside [{lo}, {self.total_steps}]")

    def alpha_bar(self, t: int) -> float:
        self.check_t(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def alpha(self, t: int) -> float:
        self.check_t(t)
        return float(self.alphas[t - 1])

    def beta(self, t: int) -> float:
        self.check_t(t)
        return float(self.betas[t - 1])

    def sigma(self, t: int) -> float:
        self.check_t(t)
        return float(self.sigmas[t - 1])


def build_schedule(total_steps: int = 50, beta_min: float = 1e-4, beta_max: float = 0.02,
                   deterministic: bool = True) -> NoiseSchedule:
    """Linear beta schedule from ``beta_min`` to ``beta_max`` inclusive."""
    if int(total_steps) != total_steps or total_steps < 1:
        raise ValueError(f"total_steps must be a positive integer, got {total_steps}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, int(total_steps), dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigmas = np.zeros_like(betas) if deterministic else np.sqrt(betas)
    for arr in (betas, alphas, alpha_bars, sigmas):
        arr.setflags(write=False)
    return NoiseSchedule(int(total_steps), betas, alphas, alpha_bars, sigmas, bool(deterministic))


def forward_diffuse(x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Sample ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    sched.check_t(t)
    abar = sched.alpha_bar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def make_stream(master_seed: int, *ids: int | str) -> torch.Generator:
    """Independent torch generator keyed by ``(master_seed, *ids)``.

    String ids are hashed stably (not with ``hash()``, which is salted per process).
    """
    return torch.Generator().manual_seed(derive_seed(master_seed, *ids))


def derive_seed(master_seed: int, *ids: int | str) -> int:
    keys = [int(master_seed)]
    for key in ids:
        if isinstance(key, str):
            keys.extend(key.encode("utf-8"))
            keys.append(0x1F)
        else:
            keys.append(int(key))
    state = np.random.SeedSequence(keys).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


def sample_standard_normal(shape, rng: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"invalid shape {shape}")
    return torch.randn(shape, generator=rng, dtype=dtype)
