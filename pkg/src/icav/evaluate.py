"""Ground-truth metrics on generated latents and the ablation runner."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .diffusion import DropoutConfig, TrainConfig, train
from .model import AdapterSet, ICDiT, ModelConfig, build_model
from .schedule import NoiseSchedule
from .sampler import GuidanceConfig, sample
from .synthworld import IdentitySpec, PairSample, World

METRICS = ("identity_similarity", "env_adherence", "leakage")


def _cos(a: np.ndarray, b: np.ndarray, what: str) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError(f"zero-norm {what} projection")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def identity_similarity(latents, identity: IdentitySpec | np.ndarray, world: World) -> float:
    """Cosine between the speaker-block readout of the token mean and a speaker vector.

    ``identity`` is an IdentitySpec (its signature) or an explicit speaker
    vector such as the one a target clip was rendered with.
    """
    spk = identity.speaker_signature if isinstance(identity, IdentitySpec) else identity
    return _cos(world.speaker_coords(_np(latents)), _np(spk), "speaker")


def env_adherence(latents, env_code: int, world: World) -> float:
    target = world.env_embed(env_code)
    return _cos(world.env_coords(_np(latents)), target, "environment")


def leakage_score(latents, nuisance) -> float:
    """Magnitude of the token-mean component along a reference nuisance direction."""
    n = _np(nuisance)
    norm = np.linalg.norm(n)
    if norm == 0:
        return 0.0
    mean = _np(latents)
    mean = mean.mean(axis=0) if mean.ndim == 2 else mean
    return float(abs(mean @ n) / norm)


@dataclass
class MetricReport:
    identity_similarity: float
    env_adherence: float
    leakage: float
    split: str = "all"
    fingerprint: str = ""
    n: int = 1

    def __post_init__(self):
        for k in ("identity_similarity", "env_adherence"):
            if not -1.0 <= getattr(self, k) <= 1.0:
                raise ValueError(f"{k} outside [-1, 1]")
        if self.leakage < 0:
            raise ValueError("leakage must be non-negative")


def item_metrics(audio, item: PairSample, world: World) -> dict[str, float]:
    return {
        "identity_similarity": identity_similarity(audio, item.target_speaker, world),
        "env_adherence": env_adherence(audio, item.env_code, world),
        "leakage": leakage_score(audio, item.ref_nuisance),
    }


def summarize(per_item: Sequence[dict[str, float]], split: str = "all",
              fingerprint: str = "") -> MetricReport:
    if not per_item:
        raise ValueError("no items to summarize")
    mean = {k: float(np.mean([m[k] for m in per_item])) for k in METRICS}
    return MetricReport(**mean, split=split, fingerprint=fingerprint, n=len(per_item))


# ---------------------------------------------------------------------------
# sign test
# ---------------------------------------------------------------------------


def sign_test(a: Sequence[float], b: Sequence[float]) -> tuple[int, int, float]:
    """One-sided paired sign test of a > b; ties are dropped.

    Returns (wins, n_untied, p) with p = P(Binomial(n, 1/2) >= wins).
    """
    if len(a) != len(b):
        raise ValueError("paired samples differ in length")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    wins, n = int((d > 0).sum()), int((d != 0).sum())
    if n == 0:
        return 0, 0, 1.0
    p = sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n
    return wins, n, float(p)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    name: str
    model: dict = field(default_factory=dict)  # ModelConfig overrides (a retrain)
    guidance: dict = field(default_factory=dict)  # GuidanceConfig overrides (inference only)

    def training_key(self) -> str:
        return json.dumps(self.model, sort_keys=True)


PRESETS: dict[str, list[Variant]] = {
    "table3": [
        Variant("full"),
        Variant("no-identity-guidance", guidance={"s_id": 0.0}),
        Variant("standard-positions", model={"positions": "standard"}),
    ],
    "sweep": [Variant(f"s_id={s:g}", guidance={"s_id": float(s)}) for s in (0, 1, 2, 4, 8)],
}


def preset(name: str) -> list[Variant]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return list(PRESETS[name])


@dataclass
class Record:
    variant: str
    seed: int
    split: str
    metric: str
    value: float

    def line(self) -> str:
        return f"{self.variant}\t{self.seed}\t{self.split}\t{self.metric}\t{self.value:.6f}"


@dataclass
class AblationTable:
    records: list[Record] = field(default_factory=list)
    per_item: dict = field(default_factory=dict)  # (variant, seed, split) -> list of item dicts
    fingerprint: str = ""

    def values(self, variant: str, metric: str, split: str = "all") -> list[float]:
        return [r.value for r in self.records
                if r.variant == variant and r.metric == metric and r.split == split]

    def paired(self, variant: str, metric: str, split: str = "all") -> list[float]:
        """Per-item values concatenated over seeds in seed order."""
        out = []
        for (v, s, sp), items in sorted(self.per_item.items(), key=lambda kv: kv[0][1]):
            if v == variant and sp == split:
                out.extend(m[metric] for m in items)
        return out

    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.records))

    def tsv(self) -> str:
        head = f"# fingerprint {self.fingerprint}\nvariant\tseed\tsplit\tmetric\tvalue\n"
        return head + "".join(r.line() + "\n" for r in self.records)

    def summary(self) -> str:
        splits = list(dict.fromkeys(r.split for r in self.records))
        rows = [f"{'variant':<24}{'split':<7}" + "".join(f"{m:>22}" for m in METRICS)]
        for v in self.variants():
            for sp in splits:
                cells = []
                for m in METRICS:
                    vals = self.values(v, m, sp)
                    if not vals:
                        break
                    cells.append(f"{np.mean(vals):.4f} ± {np.std(vals):.4f}")
                if len(cells) == len(METRICS):
                    rows.append(f"{v:<24}{sp:<7}" + "".join(f"{c:>22}" for c in cells))
        return "\n".join(rows) + "\n"


def fit_model(train_items: Sequence[PairSample], model_cfg: ModelConfig, train_cfg: TrainConfig,
              dropout: DropoutConfig = DropoutConfig(),
              schedule: NoiseSchedule = NoiseSchedule()) -> tuple[ICDiT, AdapterSet, list[float]]:
    model, adapters = build_model(model_cfg, schedule)
    result = train(train_items, model, adapters, train_cfg, dropout)
    return model, adapters, result.losses


def eval_items(items: Sequence[PairSample], max_items: Optional[int]) -> list[PairSample]:
    """Evenly strided subset so every held-out identity and both pair modes stay represented."""
    if max_items is None or len(items) <= max_items:
        return list(items)
    idx = np.linspace(0, len(items) - 1, max_items).round().astype(int)
    return [items[i] for i in idx]


def generate(model: ICDiT, adapters, items: Sequence[PairSample], guidance: GuidanceConfig,
             batch_size: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    vids, auds = [], []
    for s in range(0, len(items), batch_size):
        chunk = items[s:s + batch_size]
        ref = torch.stack([torch.from_numpy(it.ref_audio) for it in chunk])
        ff = torch.stack([torch.from_numpy(it.first_frame) for it in chunk])
        v, a = sample(model, ref, ff, [it.env_code for it in chunk], [it.style_code for it in chunk],
                      guidance, adapters)
        vids.append(v)
        auds.append(a)
    return torch.cat(vids), torch.cat(auds)


def run_ablation(variants: Sequence[Variant], dataset, seeds: Iterable[int],
                 model_cfg: ModelConfig = ModelConfig(), train_cfg: TrainConfig = TrainConfig(),
                 guidance: GuidanceConfig = GuidanceConfig(),
                 dropout: DropoutConfig = DropoutConfig(),
                 schedule: NoiseSchedule = NoiseSchedule(), splits: Sequence[str] = ("all",),
                 max_items: Optional[int] = None, fingerprint: str = "",
                 cache: Optional[dict] = None,
                 log: Optional[Callable[[str], None]] = None) -> AblationTable:
    """Train each distinct model variant per seed, sample held-out items per
    guidance variant, and tabulate per-seed metric means.

    ``cache`` (keyed by training key and seed) lets callers share trained
    models across calls.
    """
    table = AblationTable(fingerprint=fingerprint)
    cache = {} if cache is None else cache
    world = dataset.world
    for seed in seeds:
        for var in variants:
            key = (var.training_key(), seed, train_cfg)
            if key not in cache:
                mcfg = replace(model_cfg, seed=seed, **var.model)
                tcfg = replace(train_cfg, seed=seed)
                if log:
                    log(f"training {var.name} seed={seed} ({tcfg.steps} steps)")
                cache[key] = fit_model(dataset.train, mcfg, tcfg, dropout, schedule)
            model, adapters, _ = cache[key]
            g = replace(guidance, seed=seed, **var.guidance)
            for split in splits:
                items = eval_items(dataset.split(split), max_items)
                _, audio = generate(model, adapters, items, g)
                per = [item_metrics(audio[i], it, world) for i, it in enumerate(items)]
                table.per_item[(var.name, seed, split)] = per
                rep = summarize(per, split, fingerprint)
                for m in METRICS:
                    table.records.append(Record(var.name, seed, split, m, getattr(rep, m)))
                if log:
                    log(f"{var.name} seed={seed} {split}: " + ", ".join(
                        f"{m}={getattr(rep, m):.4f}" for m in METRICS))
    return table


def config_fingerprint(obj) -> str:
    """sha256 of the canonical JSON of a dataclass or plain mapping."""
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
