"""Tensor plumbing: finiteness checks, a registry of differentiable ops with a
central-difference gradient checker, and a functional AdamW.

Tensors are plain ``torch.Tensor`` values (float32 by default); gradients come
from torch autograd. Gradient checks run in float64 so that finite differences
are meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import torch
import torch.nn.functional as F

DTYPE = torch.float32


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a tensor that must stay finite."""


def ensure_finite(t: torch.Tensor, where: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        bad = (~torch.isfinite(t)).sum().item()
        raise NonFiniteError(f"{where}: {bad} non-finite value(s)")
    return t


# ---------------------------------------------------------------------------
# primitive ops shared by the model
# ---------------------------------------------------------------------------


def layer_norm(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], eps=eps)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Scaled dot-product attention over (..., L, d) tensors.

    ``mask`` is boolean, broadcastable to (..., Lq, Lk); False entries are
    excluded. Rows with no admissible key return zeros.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
        any_key = mask.any(dim=-1, keepdim=True)
        scores = torch.where(any_key, scores, torch.zeros_like(scores))
        weights = torch.softmax(scores, dim=-1)
        weights = torch.where(any_key, weights, torch.zeros_like(weights))
    else:
        weights = torch.softmax(scores, dim=-1)
    return weights @ v


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of scalar timesteps in [0, 1]; returns (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = (t.reshape(-1, 1) * 1000.0) * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_coords: int

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def grad_check_fn(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                  eps: float = 1e-5, name: str = "fn",
                  coords: Optional[Sequence[int]] = None) -> GradCheckReport:
    """Compare autograd against central differences for a scalar function.

    Runs in float64. The error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). ``coords``
    restricts the finite differences to those flat indices.
    """
    if not (1e-5 <= eps <= 1e-2):
        raise ValueError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    y = fn(x)
    if y.numel() != 1:
        raise ValueError(f"{name}: function must return a scalar")
    ensure_finite(y, f"{name} forward")
    (analytic,) = torch.autograd.grad(y, x)
    ensure_finite(analytic, f"{name} gradient")
    analytic = analytic.reshape(-1)

    flat = x.detach().reshape(-1)
    idx = list(range(flat.numel())) if coords is None else [int(i) for i in coords]
    analytic = analytic[idx]
    numeric = torch.empty_like(analytic)
    with torch.no_grad():
        for j, i in enumerate(idx):
            xp = flat.clone()
            xp[i] += eps
            xm = flat.clone()
            xm[i] -= eps
            fp = fn(xp.reshape(x.shape))
            fm = fn(xm.reshape(x.shape))
            ensure_finite(fp, f"{name} forward")
            ensure_finite(fm, f"{name} forward")
            numeric[j] = (fp - fm) / (2 * eps)
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.full_like(analytic, 1e-8))
    rel = ((analytic - numeric).abs() / denom).max().item()
    return GradCheckReport(name, rel, len(idx))


def _aux(shape, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def _weighted(out: torch.Tensor, seed: int) -> torch.Tensor:
    # reduce to a scalar with fixed random weights so every output coordinate matters
    return (out * _aux(out.shape, seed)).sum()


def _attention_block(x: torch.Tensor) -> torch.Tensor:
    # x: (L, d); one pre-norm self-attention block with RoPE and two heads
    from .positional import rope_1d

    L, d = x.shape
    wq, wk, wv, wo = (_aux((d, d), 10 + i) / math.sqrt(d) for i in range(4))
    h = layer_norm(x)
    heads = 2
    hd = d // heads
    q = (h @ wq.T).reshape(L, heads, hd).transpose(0, 1)
    k = (h @ wk.T).reshape(L, heads, hd).transpose(0, 1)
    v = (h @ wv.T).reshape(L, heads, hd).transpose(0, 1)
    pos = torch.arange(L) - L // 2
    q = rope_1d(q, pos)
    k = rope_1d(k, pos)
    o = attention(q, k, v).transpose(0, 1).reshape(L, d)
    return x + o @ wo.T


def _rope1d_op(x: torch.Tensor) -> torch.Tensor:
    from .positional import rope_1d

    L = x.shape[-2]
    return rope_1d(x, torch.arange(L) - L // 2 - 1)


def _rope3d_op(x: torch.Tensor) -> torch.Tensor:
    from .positional import rope_3d, video_grid

    grid = video_grid(1, 2, 2)
    return rope_3d(x, grid)


def _lora_op(x: torch.Tensor) -> torch.Tensor:
    from .model import lora_linear

    d = x.shape[-1]
    w = _aux((d, d), 20)
    down = _aux((2, d), 21)
    up = _aux((d, 2), 22)
    return lora_linear(x, w, down, up, scale=2.0)


# name -> (function of one tensor returning any-shaped tensor, default input shape)
OPS: Dict[str, tuple[Callable[[torch.Tensor], torch.Tensor], tuple[int, ...]]] = {
    "sum": (lambda x: x, (2, 3)),
    "sum_sq": (lambda x: x * x, (2, 3)),
    "matmul": (lambda x: x @ _aux((x.shape[-1], 4), 1), (3, 5)),
    "softmax": (lambda x: softmax(x, -1), (3, 6)),
    "layer_norm": (layer_norm, (4, 8)),
    "gelu": (F.gelu, (2, 3, 4)),
    "silu": (F.silu, (2, 3, 4)),
    "attention": (lambda x: attention(x, x * 0.5, x), (5, 4)),
    "attention_block": (_attention_block, (4, 8)),
    "rope_1d": (_rope1d_op, (4, 6)),
    "rope_3d": (_rope3d_op, (4, 6)),
    "lora_linear": (_lora_op, (3, 4)),
}

# plain sums are checked without the random weighting
_UNWEIGHTED = {"sum", "sum_sq"}


def registered_ops() -> list[str]:
    return list(OPS)


def op_scalar(name: str) -> Callable[[torch.Tensor], torch.Tensor]:
    if name not in OPS:
        raise KeyError(f"unknown function id {name!r}; registered: {sorted(OPS)}")
    fn, _ = OPS[name]
    if name in _UNWEIGHTED:
        return lambda x: fn(x).sum()
    return lambda x: _weighted(fn(x), 99)


def grad_check(name: str, x: Optional[torch.Tensor] = None, eps: float = 1e-5,
               seed: int = 0) -> GradCheckReport:
    """Gradient-check a registered op; a random input of the op's default shape
    is drawn when ``x`` is omitted."""
    scalar = op_scalar(name)
    if x is None:
        x = _aux(OPS[name][1], seed)
    return grad_check_fn(scalar, x, eps=eps, name=name)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)
    step: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("lr, weight_decay must be >= 0 and eps > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


def adamw_step(param: torch.Tensor, grad: torch.Tensor, state: OptimState,
               name: str = "param") -> torch.Tensor:
    """One decoupled-weight-decay Adam update; returns the new parameter value
    and advances ``state`` for ``name``."""
    if param.shape != grad.shape:
        raise ValueError(f"{name}: grad shape {tuple(grad.shape)} != param shape {tuple(param.shape)}")
    ensure_finite(grad, f"{name} gradient")
    m = state.m.get(name)
    v = state.v.get(name)
    if m is None:
        m = torch.zeros_like(param)
        v = torch.zeros_like(param)
    elif m.shape != param.shape:
        raise ValueError(f"{name}: optimizer state shape mismatch")
    step = state.step.get(name, 0) + 1

    m = state.beta1 * m + (1 - state.beta1) * grad
    v = state.beta2 * v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** step)
    v_hat = v / (1 - state.beta2 ** step)

    new = param * (1 - state.lr * state.weight_decay)
    new = new - state.lr * m_hat / (v_hat.sqrt() + state.eps)

    state.m[name], state.v[name], state.step[name] = m, v, step
    return new


class AdamW:
    """Applies :func:`adamw_step` to a named set of leaf tensors in place.

    All parameters are updated in one flat vector; per-parameter moments are
    exposed as views of that vector.
    """

    FLAT = "__flat__"

    def __init__(self, params: Mapping[str, torch.Tensor], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.names = sorted(params)
        self.params = {n: params[n] for n in self.names}
        self.state = OptimState(lr, betas[0], betas[1], eps, weight_decay)
        self._sizes = [self.params[n].numel() for n in self.names]

    @property
    def steps(self) -> int:
        return self.state.step.get(self.FLAT, 0)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        ps = [self.params[n] for n in self.names]
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in ps]
        flat_p = torch.cat([p.reshape(-1) for p in ps])
        flat_g = torch.cat([g.reshape(-1) for g in grads])
        new = adamw_step(flat_p, flat_g, self.state, self.FLAT)
        for p, chunk in zip(ps, new.split(self._sizes)):
            p.copy_(chunk.view_as(p))

    def moments(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        """(m, v) for one parameter, shaped like it."""
        i = self.names.index(name)
        off = sum(self._sizes[:i])
        shape = self.params[name].shape
        m = self.state.m.get(self.FLAT)
        v = self.state.v.get(self.FLAT)
        if m is None:
            z = torch.zeros(shape)
            return z, z.clone()
        return (m[off:off + self._sizes[i]].view(shape), v[off:off + self._sizes[i]].view(shape))

    def named_state(self) -> Iterable[tuple[str, torch.Tensor]]:
        for name in self.names:
            m, v = self.moments(name)
            yield f"m/{name}", m
            yield f"v/{name}", v

    def load_named_state(self, blobs: Mapping[str, torch.Tensor], step: int) -> None:
        self.state.m[self.FLAT] = torch.cat([blobs[f"m/{n}"].reshape(-1) for n in self.names])
        self.state.v[self.FLAT] = torch.cat([blobs[f"v/{n}"].reshape(-1) for n in self.names])
        self.state.step[self.FLAT] = int(step)
