"""Command-line entry points.

Every subcommand reads one JSON config (``--config``), applies flag overrides,
writes ``<command>.config.json`` into the output directory and stamps its
artifacts with the resolved config's fingerprint.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import checkpoint as ckpt_io
from .config import ConfigError, RunConfig, load_config, save_config, with_overrides
from .diffusion import TrainingDiverged, loss_grad_check, train
from .evaluate import (METRICS, AblationTable, Record, Variant, eval_items, generate, item_metrics,
                       preset, run_ablation, summarize)
from .model import build_model
from .numerics import grad_check, registered_ops
from .sampler import load_samples, save_samples
from .synthworld import Dataset, World, gen_split, load_dataset, save_dataset

log = logging.getLogger("icav")

EXIT_USAGE, EXIT_FAILURE, EXIT_CORRUPT, EXIT_VERSION, EXIT_SHAPE = 2, 1, 3, 4, 5

# flag -> (config section, field)
GUIDANCE_FLAGS = {
    "video_cfg": "s_video_cfg", "audio_cfg": "s_audio_cfg", "id_guidance": "s_id",
    "av_cfg": "s_av", "stg_scale": "s_stg", "stg_block": "stg_block", "pivot": "pivot",
}


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config (defaults if omitted)")
    common.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
    common.add_argument("--seed", type=int, help="root seed (overrides seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    guidance = argparse.ArgumentParser(add_help=False)
    guidance.add_argument("--video-cfg", type=float)
    guidance.add_argument("--audio-cfg", type=float)
    guidance.add_argument("--id-guidance", type=float)
    guidance.add_argument("--av-cfg", type=float)
    guidance.add_argument("--stg-scale", type=float)
    guidance.add_argument("--stg-block", type=int)
    guidance.add_argument("--pivot", choices=("text", "uncond"))

    p = argparse.ArgumentParser(prog="icav", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("gen-data", parents=[common], help="generate and export the synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train adapters and conditioning")
    t.add_argument("--steps", type=int, help="training steps")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    s = sub.add_parser("sample", parents=[common, guidance], help="sample held-out test items")
    s.add_argument("--steps", type=int, help="denoising steps")
    sub.add_parser("eval", parents=[common], help="score samples against ground truth")
    for name, text in (("ablate", "run an ablation preset"), ("sweep", "identity-guidance sweep")):
        a = sub.add_parser(name, parents=[common, guidance], help=text)
        a.add_argument("--steps", type=int, help="denoising steps")
        a.add_argument("--train-steps", type=int)
        a.add_argument("--seeds", type=str, help="comma-separated seeds")
        if name == "ablate":
            a.add_argument("--preset", default="table3")
        else:
            a.add_argument("--values", type=str, default="0,1,2,4,8", help="comma-separated s_id values")
    g = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--eps", type=float, default=1e-5)
    return p


def _ints(text: str, flag: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"--{flag}: expected comma-separated integers, got {text!r}") from None


def _floats(text: str, flag: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"--{flag}: expected comma-separated numbers, got {text!r}") from None


def _override(cfg: RunConfig, section: str, flag_of: dict, **values) -> RunConfig:
    try:
        return with_overrides(cfg, section, **values)
    except ValueError as e:
        flags = ", ".join(f"--{flag_of[k]}" for k, v in values.items() if v is not None)
        raise UsageError(f"invalid value for {flags}: {e}") from None


def resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=str(args.out))
    if hasattr(args, "id_guidance"):
        vals = {field: getattr(args, flag) for flag, field in GUIDANCE_FLAGS.items()}
        cfg = _override(cfg, "guidance", {v: k.replace("_", "-") for k, v in GUIDANCE_FLAGS.items()}, **vals)
    cmd = args.command
    if cmd == "train":
        cfg = _override(cfg, "train", {"steps": "steps", "lr": "lr", "batch_size": "batch-size"},
                        steps=args.steps, lr=args.lr, batch_size=args.batch_size)
        if cfg.train.steps < 0 or cfg.train.batch_size < 1:
            raise UsageError("--steps must be >= 0 and --batch-size >= 1")
    elif cmd in ("sample", "ablate", "sweep"):
        cfg = _override(cfg, "guidance", {"steps": "steps"}, steps=args.steps)
    if cmd in ("ablate", "sweep"):
        cfg = _override(cfg, "train", {"steps": "train-steps"}, steps=args.train_steps)
        if args.seeds:
            cfg = _override(cfg, "eval", {"seeds": "seeds"}, seeds=_ints(args.seeds, "seeds"))
    return cfg


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: RunConfig, out: Path) -> Dataset:
    """The exported dataset if present, otherwise regenerate it from the config."""
    if (out / "data" / "manifest.jsonl").exists():
        ds, _ = load_dataset(out / "data")
        return ds
    return _generate(cfg)


def _generate(cfg: RunConfig) -> Dataset:
    d = cfg.data
    return gen_split(d.n_identities, d.pairs_per_identity, d.mix, seed=cfg.data_seed,
                     test_fraction=d.test_fraction, world=World(cfg.world_config()))


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    log.info("wrote %s", path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    ds = _generate(cfg)
    save_dataset(ds, out / "data", cfg.fingerprint())
    print(f"dataset: {len(ds.train)} train / {len(ds.test)} test pairs -> {out / 'data'}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    ds = _dataset(cfg, out)
    model, adapters = build_model(cfg.model_config(), cfg.schedule)
    fp = cfg.fingerprint()
    lines = [f"# fingerprint {fp}", "step\tloss"]

    def on_step(step: int, loss: float) -> None:
        lines.append(f"{step}\t{loss:.6f}")
        if args.verbose and step % 100 == 0:
            log.info("step %d loss %.4f", step, loss)

    result = train(ds.train, model, adapters, cfg.train_config(), cfg.dropout, on_step=on_step)
    ck = ckpt_io.checkpoint_from(model, adapters, fp, cfg.train.steps, result.optimizer)
    ckpt_io.save_checkpoint(ck, out / "checkpoint.bin")
    _write(out / "loss.tsv", "\n".join(lines) + "\n")
    if result.losses:
        k = min(100, len(result.losses))
        print(f"trained {len(result.losses)} steps: first-{k} mean {result.window_mean(0, k):.4f}, "
              f"last-{k} mean {result.window_mean(-k, None):.4f}")
    else:
        print("trained 0 steps")
    return 0


def _load_model(cfg: RunConfig, out: Path):
    ck = ckpt_io.load_checkpoint(out / "checkpoint.bin")
    model, adapters = build_model(cfg.model_config(), cfg.schedule)
    ckpt_io.bind_checkpoint(ck, model, adapters)
    return model, adapters


def cmd_sample(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    ds = _dataset(cfg, out)
    model, adapters = _load_model(cfg, out)
    items = eval_items(ds.test, cfg.eval.max_items)
    index = {id(it): i for i, it in enumerate(ds.test)}
    video, audio = generate(model, adapters, items, cfg.guidance_config())
    save_samples(out / "samples.bin", video, audio, [index[id(it)] for it in items], cfg.fingerprint())
    print(f"sampled {len(items)} items x {cfg.guidance.steps} steps -> {out / 'samples.bin'}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    ds = _dataset(cfg, out)
    _, audio, idx, sample_fp = load_samples(out / "samples.bin")
    by_split = {"all": [], "easy": [], "hard": []}
    for row, i in enumerate(idx):
        item = ds.test[i]
        m = item_metrics(audio[row], item, ds.world)
        by_split["all"].append(m)
        by_split["easy" if item.mode == "same_source" else "hard"].append(m)
    table = AblationTable(fingerprint=cfg.fingerprint())
    for split in cfg.eval.splits:
        if not by_split[split]:
            continue
        rep = summarize(by_split[split], split, cfg.fingerprint())
        for m in METRICS:
            table.records.append(Record("sample", cfg.seed, split, m, getattr(rep, m)))
    _write(out / "metrics.tsv", f"# samples {sample_fp}\n" + table.tsv())
    print(table.summary(), end="")
    return 0


def _ablate(cfg: RunConfig, variants: Sequence[Variant], name: str) -> AblationTable:
    out = _out(cfg)
    ds = _dataset(cfg, out)
    table = run_ablation(variants, ds, cfg.eval.seeds, cfg.model, cfg.train, cfg.guidance,
                         cfg.dropout, cfg.schedule, cfg.eval.splits, cfg.eval.max_items,
                         cfg.fingerprint(), log=log.info)
    _write(out / f"{name}.tsv", table.tsv())
    _write(out / f"{name}.txt", table.summary())
    print(table.summary(), end="")
    return table


def cmd_ablate(cfg: RunConfig, args) -> int:
    try:
        variants = preset(args.preset)
    except KeyError as e:
        raise UsageError(f"--preset: {e.args[0]}") from None
    _ablate(cfg, variants, f"ablate_{args.preset}")
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    values = _floats(args.values, "values")
    if not values:
        raise UsageError("--values: need at least one s_id value")
    _ablate(cfg, [Variant(f"s_id={v:g}", guidance={"s_id": v}) for v in values], "sweep")
    return 0


def cmd_grad_check(cfg: RunConfig, args) -> int:
    if not 1e-5 <= args.eps <= 1e-2:
        raise UsageError(f"--eps: must lie in [1e-5, 1e-2], got {args.eps}")
    out = _out(cfg)
    reports = [grad_check(name, eps=args.eps, seed=cfg.seed) for name in registered_ops()]
    reports.append(loss_grad_check(seed=cfg.seed))
    lines = [f"# fingerprint {cfg.fingerprint()}", "function\tcoords\tmax_rel_error\tpassed"]
    for r in reports:
        lines.append(f"{r.name}\t{r.n_coords}\t{r.max_rel_error:.3e}\t{r.passed()}")
    _write(out / "gradcheck.tsv", "\n".join(lines) + "\n")
    print("\n".join(lines[1:]))
    return 0 if all(r.passed() for r in reports) else EXIT_FAILURE


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
    "ablate": cmd_ablate, "sweep": cmd_sweep, "grad-check": cmd_grad_check,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        out = _out(cfg)
        save_config(cfg, out / f"{args.command}.config.json")
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as e:
        print(f"icav {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ckpt_io.VersionMismatchError as e:
        print(f"icav {args.command}: {e}", file=sys.stderr)
        return EXIT_VERSION
    except ckpt_io.CorruptCheckpointError as e:
        print(f"icav {args.command}: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except ckpt_io.ShapeMismatchError as e:
        print(f"icav {args.command}: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except (FileNotFoundError, TrainingDiverged, ValueError) as e:
        print(f"icav {args.command}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
