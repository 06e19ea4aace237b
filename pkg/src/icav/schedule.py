"""Cosine noise schedule and the forward noising map."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine cumulative signal schedule, alpha_bar(t) for t in [0, 1]."""

    kind: str = "cosine"
    offset: float = 0.008
    min_alpha_bar: float = 1e-8

    def __post_init__(self):
        if self.kind != "cosine":
            raise ValueError(f"unsupported schedule {self.kind!r}")

    def alpha_bar(self, t):
        t = torch.as_tensor(t, dtype=torch.float64)
        s = self.offset
        f = torch.cos((t + s) / (1 + s) * math.pi / 2) ** 2
        f0 = math.cos(s / (1 + s) * math.pi / 2) ** 2
        return torch.clamp(f / f0, self.min_alpha_bar, 1.0)

    def coefficients(self, t) -> tuple[torch.Tensor, torch.Tensor]:
        """(sqrt(alpha_bar), sqrt(1 - alpha_bar)) in float32."""
        ab = self.alpha_bar(t)
        return ab.sqrt().float(), (1 - ab).sqrt().float()


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(ab) z0 + sqrt(1 - ab) eps. ``t`` is a scalar or a (B,) batch."""
    if z0.shape != eps.shape:
        raise ValueError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    t = torch.as_tensor(t, dtype=torch.float64)
    if ((t < 0) | (t > 1)).any():
        raise ValueError("t must lie in [0, 1]")
    a, b = schedule.coefficients(t)
    shape = (-1,) + (1,) * (z0.ndim - 1) if t.ndim else ()
    return a.reshape(shape) * z0 + b.reshape(shape) * eps
