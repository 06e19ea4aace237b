"""Guided deterministic sampling.

Each step runs the forward passes the active scales need, stacks them into a
single noise estimate per modality and takes a DDIM (eta = 0) step on a
uniform time grid from t = 1 down to t = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Optional

import torch

from .diffusion import joint_from_batch
from .model import Conditioning, ICDiT, LatentSequence, LoraAdapter
from .numerics import NonFiniteError, ensure_finite
from .synthworld import derive_seed

PIVOTS = ("text", "uncond")


class Pass(NamedTuple):
    """One forward pass: which conditioning is present and which perturbation runs."""

    text: bool
    ref: bool
    perturbed: bool = False
    cross: bool = True

    @property
    def label(self) -> str:
        s = f"({'text' if self.text else '∅'},{'ref' if self.ref else '∅'}"
        if self.perturbed:
            s += ",perturbed"
        if not self.cross:
            s += ",nocross"
        return s + ")"


UNCOND = Pass(False, False)
TEXT = Pass(True, False)
FULL = Pass(True, True)
PERTURBED = Pass(True, True, perturbed=True)
NOCROSS = Pass(True, True, cross=False)


@dataclass(frozen=True)
class GuidanceConfig:
    s_video_cfg: float = 3.0
    s_audio_cfg: float = 7.0
    s_id: float = 4.0
    s_av: float = 3.0
    s_stg: float = 1.0
    stg_block: Optional[int] = None  # None: last video block
    steps: int = 30
    seed: int = 0
    pivot: str = "text"  # identity guidance base: text-only or fully unconditional

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        for k in ("s_video_cfg", "s_audio_cfg", "s_id", "s_av", "s_stg"):
            if not math.isfinite(getattr(self, k)):
                raise ValueError(f"{k} must be finite")
        if self.pivot not in PIVOTS:
            raise ValueError(f"pivot must be one of {PIVOTS}")


def required_passes(cfg: GuidanceConfig) -> list[Pass]:
    """Distinct passes referenced by the active scales, fully conditioned always included."""
    need = {FULL}
    if cfg.s_video_cfg != 1 or cfg.s_audio_cfg != 1:
        need.add(UNCOND)
    if cfg.s_audio_cfg != 1:
        need.add(TEXT)
    if cfg.pivot == "text" and cfg.s_id != 1:
        need.add(TEXT)
    if cfg.pivot == "uncond" and cfg.s_id != 1:
        need.add(UNCOND)
    if cfg.s_stg != 0:
        need.add(PERTURBED)
    if cfg.s_av != 0:
        need.add(NOCROSS)
    order = [UNCOND, TEXT, FULL, PERTURBED, NOCROSS]
    return [p for p in order if p in need]


def _extrapolate(lo, hi, s: float):
    # lo + s (hi - lo), exact at s = 0 and s = 1
    if s == 1:
        return hi
    if s == 0:
        return lo
    return lo + s * (hi - lo)


def compose_guidance(preds: Mapping[Pass, tuple], cfg: GuidanceConfig):
    """Stack the guidance terms into (eps_video, eps_audio).

    Audio: eps_u + s_a (eps_t - eps_u) + s_id (eps_r - eps_t)
           + s_stg (eps_r - eps_pert) + s_av (eps_r - eps_nocross),
    evaluated so that s_a = 1 with no extras reduces exactly to identity
    guidance around eps_t. Video uses CFG between eps_u and eps_r plus the
    same perturbation terms; it has no identity term. ``preds`` values may be
    tensors or plain floats.
    """
    missing = [p.label for p in required_passes(cfg) if p not in preds]
    if missing:
        raise KeyError(f"missing passes for the active scales: {', '.join(missing)}")
    get = lambda p, m: preds[p][m]
    out = []
    for m in (0, 1):
        r = get(FULL, m)
        if m == 1:
            s_a = cfg.s_audio_cfg
            if cfg.pivot == "text":
                core = r if cfg.s_id == 1 else _extrapolate(get(TEXT, m), r, cfg.s_id)
                if s_a != 1:
                    core = core + (s_a - 1) * (get(TEXT, m) - get(UNCOND, m))
            else:
                core = r if cfg.s_id == 1 else _extrapolate(get(UNCOND, m), r, cfg.s_id)
                if s_a != 1:
                    core = core + (s_a - 1) * (get(TEXT, m) - get(UNCOND, m))
        else:
            core = r if cfg.s_video_cfg == 1 else _extrapolate(get(UNCOND, m), r, cfg.s_video_cfg)
        if cfg.s_stg != 0:
            core = core + cfg.s_stg * (r - get(PERTURBED, m))
        if cfg.s_av != 0:
            core = core + cfg.s_av * (r - get(NOCROSS, m))
        out.append(core)
    return out[0], out[1]


def time_grid(steps: int) -> list[float]:
    return [1.0 - k / steps for k in range(steps + 1)]


def ddim_step(z: torch.Tensor, eps: torch.Tensor, t: float, t_next: float, schedule) -> torch.Tensor:
    """Deterministic DDIM update z_t -> z_{t_next} for a scalar time."""
    a, b = schedule.coefficients(t)
    a2, b2 = schedule.coefficients(t_next)
    x0 = (z - b * eps) / a
    return a2 * x0 + b2 * eps


def _as_batch(x, name: str) -> Optional[torch.Tensor]:
    if x is None:
        return None
    if isinstance(x, LatentSequence):
        x = x.tokens
    x = torch.as_tensor(x, dtype=torch.float32)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"{name} must be (B, L, d) or (L, d)")
    return x


@torch.no_grad()
def sample(model: ICDiT, identity_ref, first_frame, env, style, cfg: GuidanceConfig = GuidanceConfig(),
           adapters: Optional[Mapping[str, LoraAdapter]] = None, return_passes: bool = False):
    """Generate (video, audio) latents of shapes (B, Nv, d) and (B, T, d).

    ``identity_ref`` and ``first_frame`` are (B, L, d) tensors (or single
    LatentSequences); ``env``/``style`` are codes with None or -1 as null.
    With ``return_passes`` the forward count per step is also returned.
    """
    mcfg = model.cfg
    ref = _as_batch(identity_ref, "identity_ref")
    ff = _as_batch(first_frame, "first_frame")
    env = torch.as_tensor([-1 if e is None else e for e in _codes(env)], dtype=torch.long)
    style = torch.as_tensor([-1 if s is None else s for s in _codes(style)], dtype=torch.long)
    B = env.shape[0]
    if style.shape[0] != B or (ref is not None and ref.shape[0] != B) or (ff is not None and ff.shape[0] != B):
        raise ValueError("batch sizes of reference, first frame and codes differ")
    passes = required_passes(cfg)
    if ref is None and any(p.ref for p in passes):
        ref = torch.zeros(B, 0, mcfg.d_model)
    stg_block = mcfg.blocks - 1 if cfg.stg_block is None else cfg.stg_block
    if stg_block not in model.block_ids():
        raise ValueError(f"stg_block {stg_block} out of range 0..{mcfg.blocks - 1}")

    g = torch.Generator().manual_seed(derive_seed(cfg.seed, "sample/noise"))
    Nv = mcfg.video_t * mcfg.video_h * mcfg.video_w
    zv = torch.randn(B, Nv, mcfg.d_model, generator=g)
    za = torch.randn(B, mcfg.audio_len, mcfg.d_model, generator=g)
    grid = time_grid(cfg.steps)
    text_cond = Conditioning(torch.zeros(B), env, style)
    forwards = 0
    for t, t_next in zip(grid[:-1], grid[1:]):
        preds = {}
        for p in passes:
            joint = joint_from_batch(zv, za, ref if p.ref else None, ff, mcfg.video_shape,
                                     mcfg.positions, mcfg.position_gap)
            c = text_cond if p.text else text_cond.drop_text()
            c = c.with_timestep(torch.full((B,), t))
            preds[p] = model(joint, c, adapters, skip_block=stg_block if p.perturbed else None,
                             cross_modal=p.cross)
            forwards += 1
        ev, ea = compose_guidance(preds, cfg)
        zv = ddim_step(zv, ev, t, t_next, model.schedule)
        za = ddim_step(za, ea, t, t_next, model.schedule)
        try:
            ensure_finite(zv, "sampled video latents")
            ensure_finite(za, "sampled audio latents")
        except NonFiniteError as e:
            raise NonFiniteError(f"{e} at t={t:.4f}") from None
    if return_passes:
        return zv, za, forwards // cfg.steps
    return zv, za


def _codes(x):
    if x is None or isinstance(x, int):
        return [x]
    if isinstance(x, torch.Tensor):
        return x.reshape(-1).tolist()
    return list(x)


# ---------------------------------------------------------------------------
# sample files: magic, version, fingerprint, item indices, float32 latents
# ---------------------------------------------------------------------------

SAMPLES_MAGIC = b"ICAVSMPL"
SAMPLES_VERSION = 1


def save_samples(path, video: torch.Tensor, audio: torch.Tensor, indices, fingerprint: str) -> None:
    import struct
    from pathlib import Path

    fp = fingerprint.encode("ascii")
    v = video.detach().numpy().astype("<f4")
    a = audio.detach().numpy().astype("<f4")
    idx = list(indices)
    if not (v.shape[0] == a.shape[0] == len(idx)):
        raise ValueError("video, audio and indices disagree on the item count")
    head = SAMPLES_MAGIC + struct.pack("<II", SAMPLES_VERSION, len(fp)) + fp
    head += struct.pack("<I", len(idx)) + struct.pack(f"<{len(idx)}I", *idx)
    head += struct.pack("<6I", *v.shape, *a.shape)
    Path(path).write_bytes(head + v.tobytes() + a.tobytes())


def load_samples(path):
    """Returns (video, audio, indices, fingerprint)."""
    import struct
    from pathlib import Path

    import numpy as np

    raw = Path(path).read_bytes()
    if raw[:8] != SAMPLES_MAGIC:
        raise ValueError(f"{path}: not a sample file")
    version, n_fp = struct.unpack_from("<II", raw, 8)
    if version != SAMPLES_VERSION:
        raise ValueError(f"{path}: sample format version {version}, expected {SAMPLES_VERSION}")
    pos = 16
    fingerprint = raw[pos:pos + n_fp].decode("ascii")
    pos += n_fp
    (n,) = struct.unpack_from("<I", raw, pos)
    idx = list(struct.unpack_from(f"<{n}I", raw, pos + 4))
    pos += 4 + 4 * n
    shp = struct.unpack_from("<6I", raw, pos)
    pos += 24
    nv, na = int(np.prod(shp[:3])), int(np.prod(shp[3:]))
    if len(raw) != pos + 4 * (nv + na):
        raise ValueError(f"{path}: truncated sample file")
    v = np.frombuffer(raw, "<f4", nv, pos).reshape(shp[:3]).astype(np.float32)
    a = np.frombuffer(raw, "<f4", na, pos + 4 * nv).reshape(shp[3:]).astype(np.float32)
    return torch.from_numpy(v), torch.from_numpy(a), idx, fingerprint
