"""Rotary position encodings: 1D for audio, factorized 3D for video.

Audio positions for an in-context sequence ``[reference; target]`` are built
by :func:`build_positions`. Under the ``negative`` scheme the reference sits
at ``-ref_len-gap .. -1-gap`` and the target at ``0 .. target_len-1``, so the
two sets never overlap and the reference keeps its internal order. The
``standard`` scheme gives the reference the same positions as the first
target tokens and exists for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

ROPE_BASE = 10000.0
SCHEMES = ("negative", "standard")


@dataclass(frozen=True)
class PositionGrid:
    audio_positions: torch.Tensor  # (ref_len + target_len,) int64, reference first
    ref_len: int
    video_positions: Optional[torch.Tensor] = None  # (N, 3) int64 (t, h, w)
    rope_base: float = ROPE_BASE

    @property
    def reference(self) -> torch.Tensor:
        return self.audio_positions[: self.ref_len]

    @property
    def target(self) -> torch.Tensor:
        return self.audio_positions[self.ref_len:]


def build_positions(ref_len: int, target_len: int, scheme: str = "negative",
                    gap: int = 0) -> PositionGrid:
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    if ref_len < 0 or gap < 0:
        raise ValueError("ref_len and gap must be >= 0")
    target = torch.arange(target_len, dtype=torch.long)
    if scheme == "negative":
        ref = torch.arange(-ref_len, 0, dtype=torch.long) - gap
    elif scheme == "standard":
        ref = torch.arange(ref_len, dtype=torch.long)
    else:
        raise ValueError(f"unknown position scheme {scheme!r}; expected one of {SCHEMES}")
    return PositionGrid(torch.cat([ref, target]), ref_len)


def video_grid(t: int, h: int, w: int, t_offset: int = 0) -> torch.Tensor:
    """All (t, h, w) coordinates of a t*h*w grid in t-major order."""
    tt, hh, ww = torch.meshgrid(torch.arange(t) + t_offset, torch.arange(h), torch.arange(w),
                                indexing="ij")
    return torch.stack([tt.reshape(-1), hh.reshape(-1), ww.reshape(-1)], dim=-1)


def rope_angles(positions: torch.Tensor, dim: int, base: float = ROPE_BASE,
                dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(L,) positions -> (L, dim/2) angles p * base^(-2i/dim)."""
    freqs = base ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    return (positions.to(torch.float64)[:, None] * freqs[None]).to(dtype)


def rope_tables(positions: torch.Tensor, dim: int, base: float = ROPE_BASE,
                dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    ang = rope_angles(positions, dim, base, torch.float64)
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def rope_1d(x: torch.Tensor, positions: torch.Tensor, base: float = ROPE_BASE) -> torch.Tensor:
    """Rotate consecutive feature pairs of ``x`` (..., L, d) by position angles."""
    d = x.shape[-1]
    if d % 2:
        raise ValueError(f"feature dimension must be even, got {d}")
    if positions.shape[-1] != x.shape[-2]:
        raise ValueError(f"{positions.shape[-1]} positions for {x.shape[-2]} tokens")
    return apply_rotation(x, *rope_tables(positions, d, base, x.dtype))


def apply_rotation(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Pairwise rotation with precomputed (L, d/2) cos/sin tables."""
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out_even = x_even * cos - x_odd * sin
    out_odd = x_even * sin + x_odd * cos
    return torch.stack([out_even, out_odd], dim=-1).flatten(-2)


def rope_3d(x: torch.Tensor, grid: torch.Tensor, base: float = ROPE_BASE) -> torch.Tensor:
    """Factorized rotary encoding: channels split into three equal contiguous
    groups rotated by the t, h and w coordinate respectively."""
    d = x.shape[-1]
    if d % 6:
        raise ValueError(f"feature dimension must be divisible by 6, got {d}")
    if grid.shape[0] != x.shape[-2]:
        raise ValueError(f"grid has {grid.shape[0]} positions for {x.shape[-2]} tokens")
    return apply_rotation(x, *rope_3d_tables(grid, d, base, x.dtype))


def rope_3d_tables(grid: torch.Tensor, dim: int, base: float = ROPE_BASE,
                   dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables for :func:`rope_3d`; the three axis groups are contiguous
    blocks of dim/3 channels, i.e. dim/6 rotation pairs each."""
    g = dim // 3
    tabs = [rope_tables(grid[:, i], g, base, dtype) for i in range(3)]
    return torch.cat([c for c, _ in tabs], dim=-1), torch.cat([s for _, s in tabs], dim=-1)
