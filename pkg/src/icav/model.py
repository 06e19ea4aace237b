"""Toy dual-stream audio-video diffusion transformer with in-context reference
audio and low-rank adapters.

The video stream runs self-attention with 3D rotary positions over
``[first_frame; target_video]``; the audio stream runs self-attention with 1D
rotary positions over ``[reference; target_audio]``. After every block pair
the streams exchange information through bidirectional cross-attention.
Conditioning (per-token timestep plus text codes) drives adaptive layer
modulation that starts out as the identity.

Latents already live in the model width, so there are no input/output
projections: the residual stream *is* the latent and the head is a modulated
layer norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Mapping, Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .numerics import attention, ensure_finite, layer_norm, timestep_embedding
from .schedule import NoiseSchedule
from .positional import (ROPE_BASE, apply_rotation, build_positions, rope_3d_tables, rope_tables,
                         video_grid)

VIDEO, AUDIO = "video", "audio"
REFERENCE, TARGET, FIRST_FRAME = "reference", "target", "first_frame"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    blocks: int = 4
    mlp_ratio: int = 4
    video_t: int = 2
    video_h: int = 4
    video_w: int = 4
    audio_len: int = 16
    ref_len: int = 8
    n_env: int = 8
    n_style: int = 4
    lora_rank: int = 4
    lora_alpha: float = 8.0
    positions: str = "negative"  # or "standard"
    position_gap: int = 0
    ref_attends_target: bool = True
    ref_dropout: str = "empty"  # or "null": a learned null token stands in for the reference
    rope_base: float = ROPE_BASE
    init_std: float = 0.02
    sigma_data: float = 0.5  # output preconditioning assumes this latent scale
    seed: int = 0

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def video_shape(self) -> tuple[int, int, int]:
        return (self.video_t, self.video_h, self.video_w)

    @property
    def video_rope_dims(self) -> int:
        # largest multiple of 6 that fits in a head; the rest of the head is unrotated
        return (self.head_dim // 6) * 6


# ---------------------------------------------------------------------------
# sequences and conditioning
# ---------------------------------------------------------------------------


@dataclass
class LatentSequence:
    modality: str
    role: str
    tokens: torch.Tensor  # (L, d)

    def __post_init__(self):
        if self.role == REFERENCE and self.modality != AUDIO:
            raise ValueError("reference sequences must be audio")
        if self.role == FIRST_FRAME and self.modality != VIDEO:
            raise ValueError("first-frame sequences must be video")
        if self.tokens.ndim != 2:
            raise ValueError("tokens must be a (count, d_model) matrix")
        if self.role != REFERENCE and self.tokens.shape[0] == 0:
            raise ValueError(f"{self.role} sequence must not be empty")

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class Conditioning:
    """Batched conditioning. ``env``/``style`` use -1 as the explicit null code."""

    timestep: torch.Tensor  # (B,) in [0, 1]
    env: torch.Tensor  # (B,) long
    style: torch.Tensor  # (B,) long

    @classmethod
    def single(cls, timestep: float, env: Optional[int], style: Optional[int]) -> "Conditioning":
        return cls(torch.tensor([float(timestep)]),
                   torch.tensor([-1 if env is None else env]),
                   torch.tensor([-1 if style is None else style]))

    def drop_text(self) -> "Conditioning":
        return Conditioning(self.timestep, torch.full_like(self.env, -1), torch.full_like(self.style, -1))

    def with_timestep(self, t: torch.Tensor) -> "Conditioning":
        return Conditioning(t, self.env, self.style)


@dataclass
class JointInput:
    """Batched joint sequence ``[z_video_target; z_audio_ref; z_audio_target]``."""

    video: torch.Tensor  # (B, Nv, d)
    audio_ref: torch.Tensor  # (B, R, d), R may be 0
    audio_target: torch.Tensor  # (B, T, d)
    audio_positions: torch.Tensor  # (R + T,)
    video_positions: torch.Tensor  # (Nv, 3)
    first_frame: Optional[torch.Tensor] = None  # (B, Nf, d)
    first_frame_positions: Optional[torch.Tensor] = None  # (Nf, 3)
    ref_mask: Optional[torch.Tensor] = None  # (B,) bool, False = reference dropped
    first_frame_mask: Optional[torch.Tensor] = None  # (B,) bool

    @property
    def batch(self) -> int:
        return self.video.shape[0]

    @property
    def ref_len(self) -> int:
        return self.audio_ref.shape[1]

    def sequence(self) -> torch.Tensor:
        """Flat concatenation in joint order (video target, audio ref, audio target)."""
        return torch.cat([self.video, self.audio_ref, self.audio_target], dim=1)

    def with_latents(self, video: torch.Tensor, audio_target: torch.Tensor) -> "JointInput":
        return replace(self, video=video, audio_target=audio_target)

    def without_reference(self) -> "JointInput":
        R = self.ref_len
        return replace(self, audio_ref=self.audio_ref[:, :0],
                       audio_positions=self.audio_positions[R:], ref_mask=None)


def assemble_input(video_target: LatentSequence, audio_ref: Optional[LatentSequence],
                   audio_target: LatentSequence, first_frame: Optional[LatentSequence] = None,
                   video_shape: tuple[int, int, int] = (2, 4, 4), scheme: str = "negative",
                   gap: int = 0) -> JointInput:
    """Build the joint input for one sample. ``audio_ref`` may be None or empty."""
    if video_target.modality != VIDEO or video_target.role != TARGET:
        raise ValueError("video_target must be a video target sequence")
    if audio_target.modality != AUDIO or audio_target.role != TARGET:
        raise ValueError("audio_target must be an audio target sequence")
    d = video_target.tokens.shape[1]
    if audio_ref is None:
        ref = audio_target.tokens.new_zeros((0, d))
    else:
        if audio_ref.modality != AUDIO or audio_ref.role != REFERENCE:
            raise ValueError("audio_ref must be an audio reference sequence")
        ref = audio_ref.tokens
    grid = video_grid(*video_shape)
    if grid.shape[0] != len(video_target):
        raise ValueError(f"video has {len(video_target)} tokens, grid {video_shape} needs {grid.shape[0]}")
    pos = build_positions(ref.shape[0], len(audio_target), scheme, gap)
    ff = ff_pos = None
    if first_frame is not None:
        if first_frame.role != FIRST_FRAME:
            raise ValueError("first_frame must have role first_frame")
        ff = first_frame.tokens[None]
        ff_pos = video_grid(1, video_shape[1], video_shape[2])
    return JointInput(video_target.tokens[None], ref[None], audio_target.tokens[None],
                      pos.audio_positions, grid, ff, ff_pos)


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------


class LoraAdapter(nn.Module):
    def __init__(self, target_weight_name: str, d_in: int, d_out: int, rank: int,
                 alpha: float, generator: Optional[torch.Generator] = None):
        super().__init__()
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.target_weight_name = target_weight_name
        self.rank = rank
        self.alpha = float(alpha)
        self.down = nn.Parameter(torch.randn(rank, d_in, generator=generator) / math.sqrt(d_in))
        self.up = nn.Parameter(torch.zeros(d_out, rank))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> torch.Tensor:
        return self.scale * (self.up @ self.down)


def lora_linear(x: torch.Tensor, weight: torch.Tensor, down: torch.Tensor, up: torch.Tensor,
                scale: float) -> torch.Tensor:
    return x @ weight.T + scale * ((x @ down.T) @ up.T)


def lora_apply(base: torch.Tensor, adapter: LoraAdapter, x: torch.Tensor) -> torch.Tensor:
    """base x + (alpha/r) up (down x), for row-vector batches ``x`` (..., d_in)."""
    if adapter.down.shape[1] != base.shape[1] or adapter.up.shape[0] != base.shape[0]:
        raise ValueError(f"adapter {adapter.target_weight_name} does not compose with weight "
                         f"{tuple(base.shape)}")
    if x.shape[-1] != base.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} != weight input {base.shape[1]}")
    return lora_linear(x, base, adapter.down, adapter.up, adapter.scale)


def merge_lora(base: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    if adapter.down.shape[1] != base.shape[1] or adapter.up.shape[0] != base.shape[0]:
        raise ValueError(f"adapter {adapter.target_weight_name} does not compose with weight "
                         f"{tuple(base.shape)}")
    return base + adapter.delta()


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return layer_norm(x) * (1 + scale) + shift


class _Modulation(nn.Module):
    """Linear map from the conditioning vector to ``n`` (shift, scale, gate)
    chunks; zero-initialised so that modulation starts as the identity."""

    def __init__(self, d: int, n: int):
        super().__init__()
        self.n = n
        self.proj = nn.Linear(d, n * d)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, c: torch.Tensor) -> list[torch.Tensor]:
        return list(self.proj(F.silu(c)).chunk(self.n, dim=-1))


class ICDiT(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), schedule: NoiseSchedule = NoiseSchedule()):
        super().__init__()
        if cfg.d_model % cfg.heads or cfg.head_dim % 2:
            raise ValueError("d_model must split into heads of even width")
        if cfg.video_rope_dims == 0:
            raise ValueError("head width too small for 3D rotary encoding")
        self.cfg = cfg
        self.schedule = schedule
        d = cfg.d_model
        g = torch.Generator().manual_seed(int(cfg.seed))

        # frozen base: attention projections and MLPs
        self.base = nn.ParameterDict()
        for i in range(cfg.blocks):
            for stream in (VIDEO, AUDIO):
                for p in "qkvo":
                    self._init_weight(f"{stream}.{i}.attn.{p}", d, d, g)
                self._init_weight(f"{stream}.{i}.mlp.fc1", cfg.mlp_ratio * d, d, g)
                self._init_weight(f"{stream}.{i}.mlp.fc2", d, cfg.mlp_ratio * d, g)
            for direction in ("a2v", "v2a"):
                for p in "qkvo":
                    self._init_weight(f"cross.{i}.{direction}.{p}", d, d, g)

        # trainable conditioning pathway
        self.t_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.env_embed = nn.Embedding(cfg.n_env + 1, d)  # last row is the null code
        self.style_embed = nn.Embedding(cfg.n_style + 1, d)
        self.ref_null = nn.Parameter(torch.zeros(1, d))
        with torch.no_grad():
            for m in (self.env_embed, self.style_embed, self.t_mlp[0], self.t_mlp[2]):
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * 0.02)
            self.t_mlp[0].bias.zero_()
            self.t_mlp[2].bias.zero_()
        self.mod = nn.ModuleDict()
        for i in range(cfg.blocks):
            self.mod[f"video_{i}"] = _Modulation(d, 6)
            self.mod[f"audio_{i}"] = _Modulation(d, 6)
            self.mod[f"cross_{i}"] = _Modulation(d, 2)  # gates for a2v / v2a
        self.mod["final_video"] = _Modulation(d, 2)
        self.mod["final_audio"] = _Modulation(d, 2)
        self.base.requires_grad_(False)

    def _init_weight(self, name: str, d_out: int, d_in: int, g: torch.Generator) -> None:
        w = torch.randn(d_out, d_in, generator=g) * self.cfg.init_std
        self.base[name.replace(".", "/")] = nn.Parameter(w, requires_grad=False)

    # parameter views -------------------------------------------------------

    def weight(self, name: str) -> torch.Tensor:
        return self.base[name.replace(".", "/")]

    def base_weight_names(self) -> list[str]:
        return [k.replace("/", ".") for k in self.base.keys()]

    def attention_weight_names(self) -> list[str]:
        return [n for n in self.base_weight_names() if ".mlp." not in n]

    def conditioning_parameters(self) -> Dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if not n.startswith("base.")}

    def block_ids(self) -> list[int]:
        return list(range(self.cfg.blocks))

    # forward ---------------------------------------------------------------

    def _lin(self, name: str, x: torch.Tensor, adapters: Optional[Mapping[str, LoraAdapter]]):
        w = self.weight(name)
        if adapters is not None and name in adapters:
            return lora_apply(w, adapters[name], x)
        return x @ w.T

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.reshape(B, L, self.cfg.heads, self.cfg.head_dim).transpose(1, 2)

    def _merge(self, x: torch.Tensor) -> torch.Tensor:
        B, H, L, hd = x.shape
        return x.transpose(1, 2).reshape(B, L, H * hd)

    @staticmethod
    def _partial_rotation(x: torch.Tensor, tables) -> torch.Tensor:
        r = tables[0].shape[-1] * 2
        if r == x.shape[-1]:
            return apply_rotation(x, *tables)
        return torch.cat([apply_rotation(x[..., :r], *tables), x[..., r:]], dim=-1)

    def _self_attn(self, prefix, h, rope, mask, adapters):
        q = rope(self._heads(self._lin(f"{prefix}.q", h, adapters)))
        k = rope(self._heads(self._lin(f"{prefix}.k", h, adapters)))
        v = self._heads(self._lin(f"{prefix}.v", h, adapters))
        o = self._merge(attention(q, k, v, mask))
        return self._lin(f"{prefix}.o", o, adapters)

    def _cross_attn(self, prefix, hq, hk, mask, adapters):
        q = self._heads(self._lin(f"{prefix}.q", hq, adapters))
        k = self._heads(self._lin(f"{prefix}.k", hk, adapters))
        v = self._heads(self._lin(f"{prefix}.v", hk, adapters))
        return self._lin(f"{prefix}.o", self._merge(attention(q, k, v, mask)), adapters)

    def _mlp(self, prefix, h, adapters):
        return self._lin(f"{prefix}.fc2", F.gelu(self._lin(f"{prefix}.fc1", h, adapters)), adapters)

    def _cond(self, t: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        dtype = self.t_mlp[0].weight.dtype
        return self.t_mlp(timestep_embedding(t, self.cfg.d_model).to(dtype)) + text

    def forward(self, joint: JointInput, cond: Conditioning,
                adapters: Optional[Mapping[str, LoraAdapter]] = None,
                skip_block: Optional[int] = None, cross_modal: bool = True):
        """Predict noise for the target video and target audio tokens.

        ``skip_block`` bypasses the self-attention of that video block
        (residual only). ``cross_modal=False`` disables audio<->video attention.
        Returns ``(eps_video, eps_audio)`` of shapes (B, Nv, d) and (B, T, d).
        """
        cfg = self.cfg
        d = cfg.d_model
        if skip_block is not None and skip_block not in self.block_ids():
            raise ValueError(f"unknown skip_block {skip_block}; video blocks are {self.block_ids()}")
        for name, x in (("video", joint.video), ("audio_target", joint.audio_target),
                        ("audio_ref", joint.audio_ref)):
            if x.shape[-1] != d:
                raise ValueError(f"{name} width {x.shape[-1]} != d_model {d}")
        B = joint.batch
        Nv, T = joint.video.shape[1], joint.audio_target.shape[1]

        audio_ref, audio_pos, ref_mask = joint.audio_ref, joint.audio_positions, joint.ref_mask
        R = audio_ref.shape[1]
        if cfg.ref_dropout == "null" and R == 0:
            audio_ref = self.ref_null.expand(B, 1, d)
            audio_pos = torch.cat([torch.tensor([-1 - cfg.position_gap]), audio_pos])
            R = 1
        elif cfg.ref_dropout == "null" and ref_mask is not None:
            # dropped samples see the null token in place of their reference
            null = self.ref_null.expand(B, R, d)
            audio_ref = torch.where(ref_mask[:, None, None], audio_ref, null)
            ref_mask = None

        # per-token conditioning: clean context tokens are conditioned on t = 0
        text = (self.env_embed(torch.where(cond.env < 0, cfg.n_env, cond.env))
                + self.style_embed(torch.where(cond.style < 0, cfg.n_style, cond.style)))
        c_noisy = self._cond(cond.timestep, text)[:, None]  # (B, 1, d)
        c_clean = self._cond(torch.zeros_like(cond.timestep), text)[:, None]

        ff = joint.first_frame
        Nf = 0 if ff is None else ff.shape[1]
        hv = joint.video if ff is None else torch.cat([ff, joint.video], dim=1)
        cv = torch.cat([c_clean.expand(B, Nf, d), c_noisy.expand(B, Nv, d)], dim=1)
        vgrid = joint.video_positions if ff is None else torch.cat(
            [joint.first_frame_positions, joint.video_positions], dim=0)
        ha = torch.cat([audio_ref, joint.audio_target], dim=1)
        ca = torch.cat([c_clean.expand(B, R, d), c_noisy.expand(B, T, d)], dim=1)

        # key validity masks
        v_keys = torch.ones(B, Nf + Nv, dtype=torch.bool)
        if ff is not None and joint.first_frame_mask is not None:
            v_keys[:, :Nf] = joint.first_frame_mask[:, None]
        a_keys = torch.ones(B, R + T, dtype=torch.bool)
        if R and ref_mask is not None:
            a_keys[:, :R] = ref_mask[:, None]
        v_mask = v_keys[:, None, None, :]
        a_mask = a_keys[:, None, None, :].expand(B, 1, R + T, R + T).clone()
        if R and not cfg.ref_attends_target:
            a_mask[:, :, :R, R:] = False
        # cross-modal attention sees target audio only, and valid video tokens
        a2v_mask = v_mask
        v2a_mask = None

        v_tab = rope_3d_tables(vgrid, cfg.video_rope_dims, cfg.rope_base)
        a_tab = rope_tables(audio_pos, cfg.head_dim, cfg.rope_base)
        rope_v = lambda x: self._partial_rotation(x, v_tab)
        rope_a = lambda x: apply_rotation(x, *a_tab)

        for i in range(cfg.blocks):
            sv1, cv1, gv1, sv2, cv2, gv2 = self.mod[f"video_{i}"](cv)
            if skip_block != i:
                hv = hv + (1 + gv1) * self._self_attn(f"video.{i}.attn", _modulate(hv, sv1, cv1),
                                                      rope_v, v_mask, adapters)
            hv = hv + (1 + gv2) * self._mlp(f"video.{i}.mlp", _modulate(hv, sv2, cv2), adapters)

            sa1, ca1, ga1, sa2, ca2, ga2 = self.mod[f"audio_{i}"](ca)
            ha = ha + (1 + ga1) * self._self_attn(f"audio.{i}.attn", _modulate(ha, sa1, ca1),
                                                  rope_a, a_mask, adapters)
            ha = ha + (1 + ga2) * self._mlp(f"audio.{i}.mlp", _modulate(ha, sa2, ca2), adapters)

            if cross_modal:
                g_a2v, _ = self.mod[f"cross_{i}"](cv)
                _, g_v2a = self.mod[f"cross_{i}"](ca[:, R:])
                nv, na = layer_norm(hv), layer_norm(ha[:, R:])
                dv = self._cross_attn(f"cross.{i}.a2v", nv, na, v2a_mask, adapters)
                da = self._cross_attn(f"cross.{i}.v2a", na, nv, a2v_mask, adapters)
                hv = hv + (1 + g_a2v) * dv
                ha = torch.cat([ha[:, :R], ha[:, R:] + (1 + g_v2a) * da], dim=1)

        fv_shift, fv_scale = self.mod["final_video"](cv[:, Nf:])
        fa_shift, fa_scale = self.mod["final_audio"](ca[:, R:])
        out_v = _modulate(hv[:, Nf:], fv_shift, fv_scale)
        out_a = _modulate(ha[:, R:], fa_shift, fa_scale)
        c_skip, c_out = self.preconditioning(cond.timestep)
        eps_v = c_skip * joint.video + c_out * out_v
        eps_a = c_skip * joint.audio_target + c_out * out_a
        return eps_v, eps_a

    def preconditioning(self, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Skip/output weights with eps = c_skip z_t + c_out F.

        c_skip is the best linear noise estimate for latents of scale
        sigma_data, and c_out scales the network so its target has unit
        variance. At t = 1 the prediction is z_t itself.
        """
        ab = self.schedule.alpha_bar(t)
        var = self.cfg.sigma_data ** 2
        denom = ab * var + (1 - ab)
        c_skip = (1 - ab).sqrt() / denom
        c_out = self.cfg.sigma_data * ab.sqrt() / denom.sqrt()
        dtype = self.t_mlp[0].weight.dtype
        return c_skip.to(dtype)[:, None, None], c_out.to(dtype)[:, None, None]


def make_adapters(model: ICDiT, rank: Optional[int] = None, alpha: Optional[float] = None,
                  seed: int = 0, names: Optional[Iterable[str]] = None) -> nn.ModuleDict:
    """Zero-initialised adapters on every attention projection of ``model``."""
    rank = model.cfg.lora_rank if rank is None else rank
    alpha = model.cfg.lora_alpha if alpha is None else alpha
    g = torch.Generator().manual_seed(int(seed))
    out = nn.ModuleDict()
    for name in (model.attention_weight_names() if names is None else names):
        w = model.weight(name)
        out[name.replace(".", "/")] = LoraAdapter(name, w.shape[1], w.shape[0], rank, alpha, g)
    return out


class AdapterSet(Mapping[str, LoraAdapter]):
    """Read-only view of a ModuleDict of adapters keyed by dotted weight name."""

    def __init__(self, modules: nn.ModuleDict):
        self.modules = modules

    def __getitem__(self, name: str) -> LoraAdapter:
        return self.modules[name.replace(".", "/")]

    def __iter__(self):
        return (k.replace("/", ".") for k in self.modules.keys())

    def __len__(self) -> int:
        return len(self.modules)

    def __contains__(self, name) -> bool:
        return name.replace(".", "/") in self.modules


def build_model(cfg: ModelConfig = ModelConfig(),
                schedule: NoiseSchedule = NoiseSchedule()) -> tuple[ICDiT, AdapterSet]:
    """Fresh model with zero-initialised adapters, both seeded from ``cfg.seed``."""
    model = ICDiT(cfg, schedule)
    return model, AdapterSet(make_adapters(model, seed=cfg.seed))


def merged_model(model: ICDiT, adapters: Mapping[str, LoraAdapter]) -> ICDiT:
    """Copy of ``model`` with every adapter folded into its base weight."""
    out = ICDiT(model.cfg, model.schedule)
    out.load_state_dict(model.state_dict())
    with torch.no_grad():
        for name in adapters:
            out.weight(name).copy_(merge_lora(model.weight(name), adapters[name]))
    return out


def to_tensor(a: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.float32))
