"""``ego`` command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import io as eio
from .analysis import SimilarityPair, edit_quality, similarity_curve
from .config import ConfigError, EngineConfig, dump_config, load_config
from .dataset import CATEGORIES, load_manifest, make_dataset
from .denoiser import Condition, Denoiser
from .editor import run_edit
from .image_energy import match_points
from .schedule import NoiseSchedule, add_noise
from .training import TrainConfig, train_denoiser

DEFAULT_CHECKPOINT = Path(__file__).parent / "data" / "toy.egod"


class UsageError(Exception):
    pass


def _category(value: str) -> int:
    if value.isdigit():
        return int(value)
    if value in CATEGORIES:
        return CATEGORIES.index(value)
    raise argparse.ArgumentTypeError(f"unknown category {value!r}; use an id or one of {CATEGORIES}")


def _resolve_config(args) -> EngineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else EngineConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key] = yaml.safe_load(raw)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    return cfg


def _print_config(cfg: EngineConfig, extra: dict | None = None) -> None:
    print("# resolved config")
    print(dump_config(cfg), end="")
    if extra:
        print(yaml.safe_dump(extra, sort_keys=False), end="")
    sys.stdout.flush()


def _load_model(path) -> Denoiser:
    return Denoiser(eio.load_checkpoint(path or DEFAULT_CHECKPOINT))


def _sched(cfg: EngineConfig) -> NoiseSchedule:
    d = cfg.diffusion
    return NoiseSchedule.linear(d.T, d.beta_start, d.beta_end)


def cmd_make_dataset(args) -> int:
    cats = tuple(args.categories.split(","))
    _print_config(EngineConfig(), {"make_dataset": {"out": str(args.out), "per_category": args.per_category,
                                                    "seed": args.seed, "categories": list(cats)}})
    manifest = make_dataset(args.out, args.per_category, args.seed, cats)
    print(f"wrote {manifest}")
    return 0


def cmd_train(args) -> int:
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                     seed=args.seed if args.seed is not None else 0)
    _print_config(EngineConfig(), {"train": vars(tc) | {"manifest": str(args.manifest), "out": str(args.out)}})
    images, labels = load_manifest(args.manifest)
    if args.max_samples:
        rng = np.random.default_rng(tc.seed)
        keep = np.sort(rng.permutation(len(images))[:args.max_samples])
        images, labels = images[keep], labels[keep]
    n_cat = args.categories or int(labels.max()) + 1

    def report(epoch, loss):
        print(f"epoch {epoch} mean_loss {loss:.6f}", flush=True)

    model, history = train_denoiser(images, labels, n_cat, tc, on_epoch=report)
    eio.save_checkpoint(args.out, model.params)
    eio.atomic_write_text(Path(str(args.out) + ".loss.csv"),
                          "epoch,mean_loss\n" + "".join(f"{i},{v:.6f}\n" for i, v in enumerate(history)))
    print(f"wrote {args.out}")
    return 0


def cmd_edit(args) -> int:
    cfg = _resolve_config(args)
    neg = args.neg_cat if args.neg_cat is not None else args.src_cat
    _print_config(cfg, {"edit": {"source": str(args.source), "reference": str(args.reference),
                                 "mask_ori": str(args.mask_ori), "mask_ref": str(args.mask_ref),
                                 "src_cat": args.src_cat, "ref_cat": args.ref_cat, "neg_cat": neg,
                                 "checkpoint": str(args.checkpoint or DEFAULT_CHECKPOINT),
                                 "out": str(args.out)}})
    model = _load_model(args.checkpoint)
    src = eio.load_tensor(args.source)
    ref = eio.load_tensor(args.reference)
    res = run_edit(model, src, ref, eio.load_mask(args.mask_ori), eio.load_mask(args.mask_ref),
                   Condition.category(args.src_cat), Condition.category(args.ref_cat),
                   Condition.category(neg), cfg, _sched(cfg))
    eio.save_tensor(args.out, res.x, name="image")
    log_path = args.log or Path(str(args.out) + ".log.csv")
    eio.atomic_write_text(log_path, res.log_csv())
    print(f"wrote {args.out}\nwrote {log_path}")
    return 0


def cmd_match(args) -> int:
    cfg = _resolve_config(args)
    tap = args.tap or cfg.image.tap
    _print_config(cfg, {"match": {"t": args.t, "tap": tap}})
    model = _load_model(args.checkpoint)
    sched = _sched(cfg)
    src = eio.load_tensor(args.source)
    ref = eio.load_tensor(args.reference)
    eps = np.random.default_rng(cfg.seed).standard_normal(src.shape).astype(model.dtype)
    cond = Condition.category(args.ref_cat)
    F = model.features(np.stack([add_noise(ref, args.t, eps, sched), add_noise(src, args.t, eps, sched)]),
                       args.t, cond, tap)
    mm = match_points(F[0], F[1], eio.load_mask(args.mask_ref), eio.load_mask(args.mask_ori),
                      cfg.image.metric)
    table = mm.to_table()
    if args.out:
        eio.atomic_write_text(args.out, table)
        print(f"wrote {args.out}")
    else:
        print(table, end="")
    return 0


def _read_pairs(path: Path) -> list[SimilarityPair]:
    pairs = []
    for line in path.read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        a, b, cat = line.split()
        pairs.append(SimilarityPair(eio.load_tensor(path.parent / a), eio.load_tensor(path.parent / b),
                                    Condition.category(_category(cat))))
    if not pairs:
        raise ValueError(f"{path}: no pairs")
    return pairs


def cmd_simcurve(args) -> int:
    cfg = _resolve_config(args)
    tap = args.tap or cfg.image.tap
    grid = [int(v) for v in args.t_grid.split(",")]
    _print_config(cfg, {"simcurve": {"pairs": str(args.pairs), "t_grid": grid, "tap": tap}})
    model = _load_model(args.checkpoint)
    table = similarity_curve(model, _sched(cfg), _read_pairs(Path(args.pairs)), grid, tap, cfg.seed)
    eio.atomic_write_text(args.out, table.to_csv())
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    _print_config(cfg, {"eval": {"before": str(args.before), "after": str(args.after)}})
    model = _load_model(args.checkpoint)
    rep = edit_quality(model, _sched(cfg), eio.load_tensor(args.before), eio.load_tensor(args.reference),
                       eio.load_tensor(args.after), eio.load_mask(args.mask_ori), eio.load_mask(args.mask_ref),
                       Condition.category(args.ref_cat), cfg.eval.tap, cfg.eval.t, cfg.eval.seed)
    print(rep.format(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ego", description="Energy-guided latent editing on a toy diffusion model.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True):
        sp.add_argument("--config", type=Path, help="engine config (YAML)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int)
        if checkpoint:
            sp.add_argument("--checkpoint", type=Path, help="EGOD checkpoint (default: bundled toy model)")

    sp = sub.add_parser("make-dataset", help="render the shapes dataset")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--per-category", type=int, default=250)
    sp.add_argument("--categories", default=",".join(CATEGORIES))
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_dataset)

    sp = sub.add_parser("train", help="train the denoiser")
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--epochs", type=int, default=120)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--lr", type=float, default=5e-4)
    sp.add_argument("--max-samples", type=int, default=0)
    sp.add_argument("--categories", type=int, default=0, help="vocabulary size (default: from labels)")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("edit", help="run one guided edit")
    sp.add_argument("--source", type=Path, required=True)
    sp.add_argument("--reference", type=Path, required=True)
    sp.add_argument("--mask-ori", type=Path, required=True)
    sp.add_argument("--mask-ref", type=Path, required=True)
    sp.add_argument("--src-cat", type=_category, required=True)
    sp.add_argument("--ref-cat", type=_category, required=True)
    sp.add_argument("--neg-cat", type=_category)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--log", type=Path)
    common(sp)
    sp.set_defaults(func=cmd_edit)

    sp = sub.add_parser("match", help="dump a feature match table")
    sp.add_argument("--source", type=Path, required=True)
    sp.add_argument("--reference", type=Path, required=True)
    sp.add_argument("--mask-ori", type=Path, required=True)
    sp.add_argument("--mask-ref", type=Path, required=True)
    sp.add_argument("--ref-cat", type=_category, required=True)
    sp.add_argument("--t", type=int, default=400)
    sp.add_argument("--tap")
    sp.add_argument("--out", type=Path)
    common(sp)
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("simcurve", help="feature-similarity curve over timesteps")
    sp.add_argument("--pairs", type=Path, required=True, help="lines: source target target_category")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--t-grid", default="0,100,200,300,400,500,600,700,800,900")
    sp.add_argument("--tap")
    common(sp)
    sp.set_defaults(func=cmd_simcurve)

    sp = sub.add_parser("eval", help="edit-quality report")
    sp.add_argument("--before", type=Path, required=True)
    sp.add_argument("--after", type=Path, required=True)
    sp.add_argument("--reference", type=Path, required=True)
    sp.add_argument("--mask-ori", type=Path, required=True)
    sp.add_argument("--mask-ref", type=Path, required=True)
    sp.add_argument("--ref-cat", type=_category, required=True)
    common(sp)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"ego {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"ego {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
