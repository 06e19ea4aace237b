"""A procedural identity world with exactly decodable latent factors.

Every latent token lives in R^64. A fixed random orthonormal basis is cut into
subspaces; each generative factor writes into its own block, so a factor can
be read back by projecting onto its block:

audio   speaker (8) | env (8) | style (4) | nuisance (16) | content (8) | free
video   appearance (8) | scene (4) | motion (8) | layout (16) | free

Reference audio is "clean": it carries the speaker, the clip nuisance and its
own speech content, but nothing in the env or style blocks.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

D_LATENT = 64
D_ID = 8
N_ENV = 8
N_STYLE = 4
N_SCENE = 4
N_NUISANCE = 16
D_CONTENT = 8
D_MOTION = 8
D_LAYOUT = 16

SAME = "same_source"
CROSS = "cross_source"
MODES = (SAME, CROSS)

DATASET_MAGIC = b"ICAVLAT\x00"
DATASET_VERSION = 1


def derive_seed(root: int, name: str) -> int:
    """Named child seed: root XOR a 63-bit hash of ``name``."""
    h = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little") & (2**63 - 1)
    return (int(root) ^ h) & (2**63 - 1)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    ref_len: int = 8
    target_len: int = 16
    video_t: int = 2
    video_h: int = 4
    video_w: int = 4
    noise: float = 0.02
    drift: float = 0.5  # per-clip timbre drift of the rendered speaker signature
    speaker_gain: float = 3.0
    env_gain: float = 2.0
    style_gain: float = 1.5
    nuisance_gain: float = 1.5
    content_gain: float = 1.0
    appearance_gain: float = 3.0
    scene_gain: float = 2.0
    motion_gain: float = 1.0
    layout_gain: float = 1.0


@dataclass(frozen=True)
class IdentitySpec:
    identity_id: int
    speaker_signature: np.ndarray
    appearance_signature: np.ndarray


@dataclass
class PairSample:
    identity: IdentitySpec
    env_code: int
    style_code: int
    mode: str
    ref_audio: np.ndarray  # (ref_len, 64)
    target_audio: np.ndarray  # (target_len, 64)
    target_video: np.ndarray  # (t*h*w, 64)
    first_frame: np.ndarray  # (h*w, 64)
    ref_nuisance: np.ndarray  # (64,)
    target_nuisance: np.ndarray  # (64,)
    ref_speaker: np.ndarray  # (8,) rendered signature of the reference clip
    target_speaker: np.ndarray  # (8,) rendered signature of the target clip

    @property
    def scene_code(self) -> int:
        return scene_for_env(self.env_code)


def scene_for_env(env_code: int) -> int:
    return env_code % N_SCENE


class World:
    """Fixed mixing maps for one world seed."""

    def __init__(self, cfg: WorldConfig = WorldConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(derive_seed(cfg.seed, "world/bases"))
        qa, _ = np.linalg.qr(rng.standard_normal((D_LATENT, D_LATENT)))
        qv, _ = np.linalg.qr(rng.standard_normal((D_LATENT, D_LATENT)))
        cuts = np.cumsum([0, D_ID, N_ENV, N_STYLE, N_NUISANCE, D_CONTENT])
        self.A, self.B, self.C, self.N, self.K = (qa[:, cuts[i]:cuts[i + 1]] for i in range(5))
        vcuts = np.cumsum([0, D_ID, N_SCENE, D_MOTION, D_LAYOUT])
        self.P, self.S, self.M, self.F = (qv[:, vcuts[i]:vcuts[i + 1]] for i in range(4))
        self.motion_map, _ = np.linalg.qr(rng.standard_normal((D_MOTION, D_CONTENT)))
        hw = cfg.video_h * cfg.video_w
        self.layout = _unit_rows(rng.standard_normal((hw, D_LAYOUT)))

    # embeddings are one-hot in their blocks, so distinct codes are orthogonal
    def env_embed(self, code: int) -> np.ndarray:
        _check_code(code, N_ENV, "env")
        return np.eye(N_ENV)[code]

    def style_embed(self, code: int) -> np.ndarray:
        _check_code(code, N_STYLE, "style")
        return np.eye(N_STYLE)[code]

    def scene_embed(self, code: int) -> np.ndarray:
        _check_code(code, N_SCENE, "scene")
        return np.eye(N_SCENE)[code]

    def nuisance_vector(self, index: int, sign: float) -> np.ndarray:
        return self.cfg.nuisance_gain * sign * self.N[:, index]

    def decode_speaker(self, latents: np.ndarray) -> np.ndarray:
        """Least-squares (pseudo-inverse) readout of the speaker block."""
        return np.linalg.pinv(self.A) @ _token_mean(latents)

    # projections used by the metrics
    def speaker_coords(self, latents: np.ndarray) -> np.ndarray:
        return self.A.T @ _token_mean(latents)

    def env_coords(self, latents: np.ndarray) -> np.ndarray:
        return self.B.T @ _token_mean(latents)

    def style_coords(self, latents: np.ndarray) -> np.ndarray:
        return self.C.T @ _token_mean(latents)

    def appearance_coords(self, latents: np.ndarray) -> np.ndarray:
        return self.P.T @ _token_mean(latents)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _token_mean(latents: np.ndarray) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.float64)
    return latents.mean(axis=0) if latents.ndim == 2 else latents


def _check_code(code: int, n: int, what: str) -> None:
    if not (0 <= int(code) < n):
        raise ValueError(f"unknown {what} code {code}; vocabulary is 0..{n - 1}")


def gen_identity(seed: int) -> IdentitySpec:
    rng = np.random.default_rng(derive_seed(seed, "identity"))
    spk = _unit(rng.standard_normal(D_ID))
    app = _unit(rng.standard_normal(D_ID))
    return IdentitySpec(int(seed), spk, app)


def _content(rng: np.random.Generator, length: int, gain: float) -> np.ndarray:
    # smooth per-token trajectory: two random sinusoids per content channel
    i = np.arange(length)[:, None]
    out = np.zeros((length, D_CONTENT))
    for _ in range(2):
        amp = rng.standard_normal(D_CONTENT) / np.sqrt(2 * D_CONTENT)
        omega = rng.uniform(0.2, 0.6)
        phase = rng.uniform(0, 2 * np.pi, D_CONTENT)
        out += amp[None] * np.cos(omega * i + phase[None])
    return gain * np.sqrt(2.0) * out


@dataclass
class _Clip:
    speaker: np.ndarray
    nuisance_index: int
    nuisance_sign: float


def _clip(world: World, identity: IdentitySpec, rng: np.random.Generator,
          avoid_index: Optional[int] = None) -> _Clip:
    delta = _unit(rng.standard_normal(D_ID))
    spk = _unit(identity.speaker_signature + world.cfg.drift * delta)
    choices = [k for k in range(N_NUISANCE) if k != avoid_index]
    idx = int(rng.choice(choices))
    sign = float(rng.choice([-1.0, 1.0]))
    return _Clip(spk, idx, sign)


def gen_pair(world: World, identity: IdentitySpec, env_code: int, style_code: int,
             mode: str, rng: np.random.Generator, noise: Optional[float] = None) -> PairSample:
    cfg = world.cfg
    sigma = cfg.noise if noise is None else noise
    if mode not in MODES:
        raise ValueError(f"unknown pair mode {mode!r}")
    env = world.env_embed(env_code)
    style = world.style_embed(style_code)
    scene = world.scene_embed(scene_for_env(env_code))

    target_clip = _clip(world, identity, rng)
    if mode == SAME:
        ref_clip = target_clip
    else:
        ref_clip = _clip(world, identity, rng, avoid_index=target_clip.nuisance_index)
    n_t = world.nuisance_vector(target_clip.nuisance_index, target_clip.nuisance_sign)
    n_r = world.nuisance_vector(ref_clip.nuisance_index, ref_clip.nuisance_sign)

    content_t = _content(rng, cfg.target_len, cfg.content_gain)
    content_r = _content(rng, cfg.ref_len, cfg.content_gain)

    target_mean = (cfg.speaker_gain * world.A @ target_clip.speaker
                   + cfg.env_gain * world.B @ env + cfg.style_gain * world.C @ style + n_t)
    target_audio = target_mean[None] + content_t @ world.K.T
    ref_audio = (cfg.speaker_gain * world.A @ ref_clip.speaker + n_r)[None] + content_r @ world.K.T

    hw = cfg.video_h * cfg.video_w
    window = cfg.target_len // cfg.video_t
    frames = []
    for t in range(cfg.video_t):
        motion = world.motion_map @ content_t[t * window:(t + 1) * window].mean(axis=0)
        frame = (cfg.appearance_gain * world.P @ identity.appearance_signature
                 + cfg.scene_gain * world.S @ scene
                 + cfg.motion_gain * world.M @ motion)[None]
        frame = frame + cfg.layout_gain * world.layout @ world.F.T
        frames.append(np.broadcast_to(frame, (hw, D_LATENT)))
    target_video = np.concatenate(frames, axis=0)

    if sigma > 0:
        target_audio = target_audio + sigma * rng.standard_normal(target_audio.shape)
        ref_audio = ref_audio + sigma * rng.standard_normal(ref_audio.shape)
        target_video = target_video + sigma * rng.standard_normal(target_video.shape)

    f32 = lambda a: np.ascontiguousarray(a, dtype=np.float32)
    return PairSample(
        identity=identity, env_code=int(env_code), style_code=int(style_code), mode=mode,
        ref_audio=f32(ref_audio), target_audio=f32(target_audio),
        target_video=f32(target_video), first_frame=f32(target_video[:hw]),
        ref_nuisance=f32(n_r), target_nuisance=f32(n_t),
        ref_speaker=f32(ref_clip.speaker), target_speaker=f32(target_clip.speaker),
    )


@dataclass
class Dataset:
    world: World
    train: list[PairSample]
    test: list[PairSample]
    train_ids: list[int] = field(default_factory=list)
    test_ids: list[int] = field(default_factory=list)

    def split(self, tag: str) -> list[PairSample]:
        """``easy`` = same-source test pairs, ``hard`` = cross-source, ``all``."""
        if tag == "all":
            return list(self.test)
        want = {"easy": SAME, "hard": CROSS}[tag]
        return [p for p in self.test if p.mode == want]


def gen_split(n_identities: int = 64, pairs_per_identity: int = 16, mix: float = 0.5,
              seed: int = 0, test_fraction: float = 0.2,
              world: Optional[World] = None) -> Dataset:
    """Generate train pairs and a held-out test set over disjoint identities.

    ``mix`` is the probability that a pair is same-source.
    """
    if n_identities < 2:
        raise ValueError("need at least 2 identities")
    world = world or World(WorldConfig(seed=seed))
    rng = np.random.default_rng(derive_seed(seed, "split"))
    ids = [derive_seed(seed, f"identity/{i}") for i in range(n_identities)]
    order = rng.permutation(n_identities)
    n_test = min(n_identities - 1, max(1, int(round(test_fraction * n_identities))))
    test_ids = sorted(ids[i] for i in order[:n_test])
    train_ids = sorted(ids[i] for i in order[n_test:])

    def pairs(id_list: Sequence[int], tag: str) -> list[PairSample]:
        out = []
        for ident_seed in id_list:
            ident = gen_identity(ident_seed)
            prng = np.random.default_rng(derive_seed(ident_seed, f"pairs/{tag}/{seed}"))
            for _ in range(pairs_per_identity):
                mode = SAME if prng.random() < mix else CROSS
                env = int(prng.integers(N_ENV))
                style = int(prng.integers(N_STYLE))
                out.append(gen_pair(world, ident, env, style, mode, prng))
        return out

    return Dataset(world, pairs(train_ids, "train"), pairs(test_ids, "test"), train_ids, test_ids)


# ---------------------------------------------------------------------------
# export: JSON-lines manifest + little-endian float32 blob
# ---------------------------------------------------------------------------

_ARRAYS = ("ref_audio", "target_audio", "target_video", "first_frame",
           "ref_nuisance", "target_nuisance", "ref_speaker", "target_speaker")


def save_dataset(ds: Dataset, directory: Path, fingerprint: str = "") -> None:
    """Write ``manifest.jsonl`` and ``latents.bin``.

    Blob layout: 8-byte magic, uint32 version, uint32 reserved, then raw
    little-endian float32 arrays at the offsets named in the manifest.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "icav-dataset", "version": DATASET_VERSION, "fingerprint": fingerprint,
        "world": world_to_dict(ds.world.cfg),
        "train_ids": ds.train_ids, "test_ids": ds.test_ids,
    }
    lines = [json.dumps(header, sort_keys=True)]
    with open(directory / "latents.bin", "wb") as blob:
        blob.write(DATASET_MAGIC + struct.pack("<II", DATASET_VERSION, 0))
        offset = blob.tell()
        for split, items in (("train", ds.train), ("test", ds.test)):
            for p in items:
                rec = {"split": split, "identity": p.identity.identity_id,
                       "env": p.env_code, "style": p.style_code, "mode": p.mode, "arrays": {}}
                for name in _ARRAYS:
                    arr = np.ascontiguousarray(getattr(p, name), dtype="<f4")
                    rec["arrays"][name] = {"offset": offset, "shape": list(arr.shape)}
                    blob.write(arr.tobytes())
                    offset += arr.nbytes
                lines.append(json.dumps(rec, sort_keys=True))
    (directory / "manifest.jsonl").write_text("\n".join(lines) + "\n")


def world_to_dict(cfg: WorldConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def load_dataset(directory: Path) -> tuple[Dataset, str]:
    """Inverse of :func:`save_dataset`; returns the dataset and its fingerprint."""
    directory = Path(directory)
    lines = (directory / "manifest.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != "icav-dataset" or header.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset manifest header: {header.get('format')} v{header.get('version')}")
    raw = (directory / "latents.bin").read_bytes()
    if raw[:8] != DATASET_MAGIC or struct.unpack("<II", raw[8:16])[0] != DATASET_VERSION:
        raise ValueError("latent blob has a bad magic header or version")
    world = World(WorldConfig(**header["world"]))
    train, test = [], []
    for line in lines[1:]:
        rec = json.loads(line)
        arrays = {}
        for name, meta in rec["arrays"].items():
            n = int(np.prod(meta["shape"])) if meta["shape"] else 1
            a = np.frombuffer(raw, dtype="<f4", count=n, offset=meta["offset"])
            arrays[name] = a.reshape(meta["shape"]).astype(np.float32)
        p = PairSample(identity=gen_identity(rec["identity"]), env_code=rec["env"],
                       style_code=rec["style"], mode=rec["mode"], **arrays)
        (train if rec["split"] == "train" else test).append(p)
    return Dataset(world, train, test, header["train_ids"], header["test_ids"]), header["fingerprint"]


def iter_batches(items: Sequence[PairSample], batch_size: int,
                 rng: np.random.Generator) -> Iterable[list[PairSample]]:
    """Endless stream of uniformly drawn minibatches."""
    while True:
        idx = rng.integers(len(items), size=batch_size)
        yield [items[i] for i in idx]
