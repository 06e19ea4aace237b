"""Epsilon-prediction loss and the adapter training loop."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .schedule import NoiseSchedule, add_noise
from .model import AdapterSet, Conditioning, ICDiT, JointInput, LoraAdapter, to_tensor
from .numerics import AdamW, NonFiniteError, ensure_finite
from .positional import build_positions, video_grid
from .synthworld import PairSample, derive_seed

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DropoutConfig:
    p_drop_text: float = 0.1
    p_drop_reference: float = 0.1
    p_first_frame: float = 0.9

    def __post_init__(self):
        for k in ("p_drop_text", "p_drop_reference", "p_first_frame"):
            if not 0.0 <= getattr(self, k) <= 1.0:
                raise ValueError(f"{k} must lie in [0, 1]")


@dataclass
class SampleCond:
    """Conditioning of a single sample; None is the explicit null code."""

    env: Optional[int]
    style: Optional[int]
    first_frame: Optional[np.ndarray] = None


def cond_dropout(cond: SampleCond, ref: Optional[np.ndarray], cfg: DropoutConfig,
                 rng: np.random.Generator) -> tuple[SampleCond, Optional[np.ndarray]]:
    """Drop text with p_drop_text, the reference with p_drop_reference, and keep
    the first frame with p_first_frame. Three uniforms are drawn per call."""
    u_text, u_ref, u_ff = rng.random(3)
    drop_text = u_text < cfg.p_drop_text
    out = SampleCond(None if drop_text else cond.env, None if drop_text else cond.style,
                     cond.first_frame if u_ff < cfg.p_first_frame else None)
    return out, (None if u_ref < cfg.p_drop_reference else ref)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class CleanBatch:
    video: torch.Tensor  # (B, Nv, d)
    audio: torch.Tensor  # (B, T, d)
    ref: torch.Tensor  # (B, R, d)
    first_frame: torch.Tensor  # (B, Nf, d)
    env: torch.Tensor
    style: torch.Tensor
    video_shape: tuple[int, int, int]

    @property
    def size(self) -> int:
        return self.video.shape[0]


def stack_samples(samples: Sequence[PairSample], video_shape=(2, 4, 4)) -> CleanBatch:
    if not samples:
        raise ValueError("empty batch")
    st = lambda name: torch.stack([to_tensor(getattr(s, name)) for s in samples])
    return CleanBatch(st("target_video"), st("target_audio"), st("ref_audio"), st("first_frame"),
                      torch.tensor([s.env_code for s in samples]),
                      torch.tensor([s.style_code for s in samples]), tuple(video_shape))


def joint_from_batch(video: torch.Tensor, audio: torch.Tensor, ref: Optional[torch.Tensor],
                     first_frame: Optional[torch.Tensor], video_shape, scheme: str = "negative",
                     gap: int = 0, ref_mask: Optional[torch.Tensor] = None,
                     first_frame_mask: Optional[torch.Tensor] = None) -> JointInput:
    B, T, d = audio.shape
    if ref is None:
        ref = audio.new_zeros((B, 0, d))
    pos = build_positions(ref.shape[1], T, scheme, gap)
    ff_pos = None if first_frame is None else video_grid(1, video_shape[1], video_shape[2])
    return JointInput(video, ref, audio, pos.audio_positions, video_grid(*video_shape),
                      first_frame, ff_pos, ref_mask, first_frame_mask)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

Denoiser = Callable[..., tuple[torch.Tensor, torch.Tensor]]


def training_loss(batch: Sequence[PairSample] | CleanBatch, model: Denoiser,
                  schedule: Optional[NoiseSchedule] = None,
                  dropout: DropoutConfig = DropoutConfig(), seed: int = 0,
                  adapters: Optional[Mapping[str, LoraAdapter]] = None,
                  scheme: str = "negative", gap: int = 0, ref_noise: float = 0.0) -> torch.Tensor:
    """Mean squared epsilon error over target video and target audio tokens.

    References and first frames enter clean (``ref_noise`` > 0 noises the
    reference at that fixed level); per-sample conditioning dropout, timesteps
    and noise all derive from ``seed``.
    """
    if schedule is None:
        schedule = getattr(model, "schedule", NoiseSchedule())
    if not isinstance(batch, CleanBatch):
        cfg = getattr(model, "cfg", None)
        batch = stack_samples(batch, cfg.video_shape if cfg is not None else (2, 4, 4))
    B = batch.size
    if B == 0:
        raise ValueError("empty batch")
    rng = np.random.default_rng(derive_seed(seed, "dropout"))
    draws = rng.random((B, 3))
    keep_text = torch.as_tensor(draws[:, 0] >= dropout.p_drop_text)
    ref_mask = torch.as_tensor(draws[:, 1] >= dropout.p_drop_reference)
    ff_mask = torch.as_tensor(draws[:, 2] < dropout.p_first_frame)

    dtype = batch.video.dtype
    g = torch.Generator().manual_seed(derive_seed(seed, "noise"))
    t = torch.rand(B, generator=g, dtype=torch.float64)
    eps_v = torch.randn(batch.video.shape, generator=g).to(dtype)
    eps_a = torch.randn(batch.audio.shape, generator=g).to(dtype)
    zv = add_noise(batch.video, eps_v, t, schedule)
    za = add_noise(batch.audio, eps_a, t, schedule)

    ref = batch.ref
    if ref_noise > 0:
        ref = add_noise(ref, torch.randn(ref.shape, generator=g).to(dtype), ref_noise, schedule)
    if not ref_mask.any():
        ref, ref_mask_arg = None, None
    else:
        ref_mask_arg = None if ref_mask.all() else ref_mask
    joint = joint_from_batch(zv, za, ref, batch.first_frame, batch.video_shape, scheme, gap,
                             ref_mask_arg, None if ff_mask.all() else ff_mask)
    cond = Conditioning(t.float(), torch.where(keep_text, batch.env, -1),
                        torch.where(keep_text, batch.style, -1))
    pred_v, pred_a = model(joint, cond, adapters)
    sq = ((pred_v - eps_v) ** 2).sum() + ((pred_a - eps_a) ** 2).sum()
    loss = sq / (eps_v.numel() + eps_a.numel())
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite training loss {loss.item()}")
    return loss


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    ref_noise: float = 0.0
    seed: int = 0


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    optimizer: Optional[AdamW] = None

    def window_mean(self, start: int, stop: int) -> float:
        return float(np.mean(self.losses[start:stop]))


def trainable_parameters(model: ICDiT, adapters: AdapterSet | Mapping) -> dict[str, torch.Tensor]:
    params = {f"cond/{n}": p for n, p in model.conditioning_parameters().items()}
    for name in adapters:
        a = adapters[name]
        params[f"lora/{name}/down"] = a.down
        params[f"lora/{name}/up"] = a.up
    return params


def base_fingerprint(model: ICDiT) -> str:
    h = hashlib.sha256()
    for name in sorted(model.base_weight_names()):
        h.update(name.encode())
        h.update(model.weight(name).detach().numpy().tobytes())
    return h.hexdigest()


def train(samples: Sequence[PairSample], model: ICDiT, adapters: AdapterSet, cfg: TrainConfig,
          dropout: DropoutConfig = DropoutConfig(), schedule: Optional[NoiseSchedule] = None,
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Train adapters and the conditioning pathway; base weights stay frozen.

    Deterministic given ``cfg.seed``. Aborts with :class:`TrainingDiverged` on
    a non-finite loss.
    """
    if not samples:
        raise ValueError("empty dataset")
    schedule = model.schedule if schedule is None else schedule
    params = trainable_parameters(model, adapters)
    for p in params.values():
        p.requires_grad_(True)
    opt = AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                weight_decay=cfg.weight_decay)
    result = TrainResult(optimizer=opt)
    rng = np.random.default_rng(derive_seed(cfg.seed, "batches"))
    scheme = model.cfg.positions
    vshape = model.cfg.video_shape
    for step in range(cfg.steps):
        idx = rng.integers(len(samples), size=cfg.batch_size)
        batch = stack_samples([samples[i] for i in idx], vshape)
        opt.zero_grad()
        try:
            loss = training_loss(batch, model, schedule, dropout, derive_seed(cfg.seed, f"step/{step}"),
                                 adapters, scheme, model.cfg.position_gap, cfg.ref_noise)
        except NonFiniteError as e:
            recent = ", ".join(f"{x:.4g}" for x in result.losses[-5:])
            raise TrainingDiverged(f"loss diverged at step {step} (recent: {recent})") from e
        loss.backward()
        opt.step()
        value = loss.item()
        result.losses.append(value)
        if on_step is not None:
            on_step(step, value)
    for p in params.values():
        p.requires_grad_(False)
    return result


class _Joint(torch.nn.Module):
    # model + adapters as one module so torch.func can substitute their tensors
    def __init__(self, model: ICDiT, adapters: AdapterSet):
        super().__init__()
        self.model = model
        self.adapters = adapters.modules

    def forward(self, joint, cond):
        return self.model(joint, cond, AdapterSet(self.adapters))


def loss_grad_check(n_samples: int = 2, n_coords: int = 256, eps: float = 1e-3, seed: int = 0,
                    model_cfg=None):
    """Finite-difference check of the full training loss w.r.t. the trainable tensors.

    Uses a float64 copy of a fresh model on ``n_samples`` synthetic pairs with
    non-zero adapters so gradients reach both adapter factors. At least one
    coordinate of every trainable tensor is checked, plus random extras.
    """
    from torch.func import functional_call

    from .model import ModelConfig, make_adapters
    from .numerics import grad_check_fn
    from .synthworld import CROSS, SAME, World, WorldConfig, gen_identity, gen_pair

    cfg = model_cfg or ModelConfig(seed=seed)
    world = World(WorldConfig(seed=seed))
    rng = np.random.default_rng(derive_seed(seed, "gradcheck/data"))
    samples = [gen_pair(world, gen_identity(i), i % 8, i % 4, (SAME, CROSS)[i % 2], rng)
               for i in range(n_samples)]
    model = ICDiT(cfg).double()
    adapters = AdapterSet(make_adapters(model, seed=seed).double())
    gen = torch.Generator().manual_seed(derive_seed(seed, "gradcheck/init"))
    for name in adapters:
        adapters[name].up.data = torch.randn(adapters[name].up.shape, generator=gen,
                                             dtype=torch.float64) * 0.05
    both = _Joint(model, adapters)
    names = [n for n, p in both.named_parameters() if p.requires_grad]
    shapes = {n: p.shape for n, p in both.named_parameters()}
    sizes = [shapes[n].numel() for n in names]
    flat0 = torch.cat([both.get_parameter(n).detach().reshape(-1) for n in names])
    b = stack_samples(samples, cfg.video_shape)
    batch = CleanBatch(b.video.double(), b.audio.double(), b.ref.double(), b.first_frame.double(),
                       b.env, b.style, b.video_shape)
    # keep every conditioning pathway active
    dropout = DropoutConfig(0.0, 0.0, 1.0)

    def loss_at(flat: torch.Tensor) -> torch.Tensor:
        views = {n: c.view(shapes[n]) for n, c in zip(names, flat.split(sizes))}
        fwd = lambda joint, cond, _adapters: functional_call(both, views, (joint, cond))
        return training_loss(batch, fwd, model.schedule, dropout, seed, None,
                             cfg.positions, cfg.position_gap)

    offsets = np.cumsum([0] + sizes)
    pick = np.random.default_rng(derive_seed(seed, "gradcheck/coords"))
    coords = {int(pick.integers(offsets[i], offsets[i + 1])) for i in range(len(names))}
    while len(coords) < max(n_coords, len(names)):
        coords.add(int(pick.integers(offsets[-1])))
    return grad_check_fn(loss_at, flat0, eps=eps, name="training_loss", coords=sorted(coords))
