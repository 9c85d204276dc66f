"""``diffcount`` command line.

Subcommands::

    import    pair an image folder with two-column point tables -> manifest
    synth     generate a synthetic dot-scene dataset + manifest
    train     fit a denoiser on a manifest's train split
    sample    multi-realization prediction for individual images
    evaluate  MAE / MSE over a manifest split
    ablate    compare fusion orders, counting operators or realization counts

Every RunConfig field is also a flag (``--lambda-count 0``) and an env var
(``DIFFCOUNT_LAMBDA_COUNT=0``). Outputs go under ``--run-dir``:
checkpoints/, maps/, crowdmaps/, reports/, figures/.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, desk_config, env_overrides, parse_value

log = logging.getLogger("diffcount")

RUN_SUBDIRS = ("checkpoints", "maps", "crowdmaps", "reports", "figures")
AXES = ("fusion-order", "counting-op", "realizations")


def run_dirs(root) -> dict[str, Path]:
    root = Path(root)
    out = {"root": root}
    for name in RUN_SUBDIRS:
        out[name] = root / name
        out[name].mkdir(parents=True, exist_ok=True)
    return out


# -- configuration plumbing ---------------------------------------------------

# short spellings for the fusion knobs
FLAG_ALIASES = {"--beta": "fusion_beta", "--search-frac": "search_fraction", "--order": "fusion_order"}


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="JSON RunConfig to start from (e.g. a previous run's config.json)")
    g.add_argument("--desk", action="store_true", help="start from the small CPU preset")
    for f in fields(RunConfig):
        flags = ["--" + f.name.replace("_", "-")] + [a for a, name in FLAG_ALIASES.items() if name == f.name]
        g.add_argument(*flags, dest="cfg_" + f.name, default=None, metavar="V")


def resolve_config(args) -> RunConfig:
    base = RunConfig.load(args.config).to_dict() if args.config else (
        desk_config().to_dict() if args.desk else RunConfig().to_dict())
    base.update(env_overrides())
    for f in fields(RunConfig):
        raw = getattr(args, "cfg_" + f.name, None)
        if raw is not None:
            base[f.name] = parse_value(f, raw)
    return RunConfig.from_dict(base)


def _load_model(args, cfg: RunConfig):
    from .train import load_checkpoint
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise SystemExit(f"checkpoint not found: {ckpt}")
    # refuse silently-mismatched runs: the checkpoint must match the requested network
    want = None if args.any_arch else cfg.denoiser_config()
    model, schedule = load_checkpoint(ckpt, want, cfg.schedule())
    return model, schedule


# -- commands -----------------------------------------------------------------

def cmd_import(args) -> int:
    from .data import import_point_tables
    n = import_point_tables(args.images, args.points, args.out, split=args.split)
    print(f"wrote {n} records to {args.out}")
    return 0


def cmd_synth(args) -> int:
    from .data import save_image, synth_dataset, write_manifest
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    splits = [("train", args.train, args.seed), ("test", args.test, args.seed + 1)]
    for split, n, seed in splits:
        if n <= 0:
            continue
        scenes = synth_dataset(n, args.height, args.width, (args.min_count, args.max_count),
                               args.min_separation, seed=seed, prefix=f"{split}_")
        for s in scenes:
            rel = Path("images") / f"{s.name}.png"
            save_image(out / rel, s.image)
            records.append({"image": str(rel), "points": s.points.tolist(), "split": split})
    write_manifest(out / "manifest.jsonl", records)
    print(f"wrote {len(records)} scenes to {out / 'manifest.jsonl'}")
    return 0


def cmd_train(args) -> int:
    import torch
    from .data import load_manifest
    from .denoiser import Denoiser
    from .train import train

    cfg = resolve_config(args)
    dirs = run_dirs(args.run_dir)
    cfg.save(dirs["root"] / "config.json")
    samples = load_manifest(args.manifest).load_samples("train")
    torch.manual_seed(cfg.seed)
    model = Denoiser(cfg.denoiser_config())
    history = train(model, samples, cfg.schedule(), cfg.train_settings(),
                    checkpoint_dir=dirs["checkpoints"], progress=print)
    with open(dirs["reports"] / "train_loss.csv", "w") as f:
        f.write("step,total,weighted_eps_mse,vlb,count_l1\n")
        for i, row in enumerate(zip(history.total, history.eps, history.vlb, history.count), 1):
            f.write(f"{i}," + ",".join(f"{v:.6g}" for v in row) + "\n")
    run = history.running()
    print(f"running loss {run[0]:.4f} -> {run[-1]:.4f}; checkpoint {dirs['checkpoints'] / 'final.pt'}")
    return 0


def overlay_figure(path, image, density, crowd, title=""):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    axes[0].imshow(image)
    axes[0].imshow(density, cmap="jet", alpha=0.5)
    axes[0].set_title("density")
    axes[1].imshow(image)
    if len(crowd):
        axes[1].scatter(crowd.points[:, 0], crowd.points[:, 1], s=6, c="red")
    axes[1].set_title(f"{len(crowd)} heads")
    for ax in axes:
        ax.set_axis_off()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_sample(args) -> int:
    from .data import load_image
    from .groundtruth import write_dmap
    from .inference import predict_many

    cfg = resolve_config(args)
    dirs = run_dirs(args.run_dir)
    cfg.save(dirs["root"] / "sample_config.json")
    model, schedule = _load_model(args, cfg)
    images = [load_image(p) for p in args.image]
    preds = predict_many(model, images, schedule, cfg.realization_seeds(), cfg.sampling_steps,
                         cfg.patch_size, cfg.threshold, cfg.fusion_config(), cfg.sample_batch)
    summaries = []
    for path, image, pred in zip(args.image, images, preds):
        stem = Path(path).stem
        for r, (dmap, cmap) in enumerate(zip(pred.density_maps, pred.crowd_maps)):
            write_dmap(dirs["maps"] / f"{stem}_r{r}.dmap", dmap)
            (dirs["crowdmaps"] / f"{stem}_r{r}.json").write_text(json.dumps(cmap.to_record(str(path))))
        (dirs["crowdmaps"] / f"{stem}_fused.json").write_text(json.dumps(pred.fused.to_record(str(path))))
        if not args.no_figures:
            overlay_figure(dirs["figures"] / f"{stem}.png", image, pred.density_maps[0], pred.fused, stem)
        rec = pred.summary(str(path))
        summaries.append(rec)
        print(json.dumps(rec))
    with open(dirs["reports"] / "summary.jsonl", "w") as f:
        for rec in summaries:
            f.write(json.dumps(rec) + "\n")
    return 0


def _predict_split(args, cfg, seeds=None):
    from .data import load_manifest
    from .inference import sample_density_maps

    model, schedule = _load_model(args, cfg)
    refs = load_manifest(args.manifest).split(args.split)
    if args.limit:
        refs = refs[:args.limit]
    if not refs:
        raise SystemExit(f"split {args.split!r} of {args.manifest} is empty")
    samples = [r.load() for r in refs]
    seeds = cfg.realization_seeds() if seeds is None else seeds
    t0 = time.time()
    maps = sample_density_maps(model, [s.image for s in samples], schedule, seeds, cfg.sampling_steps,
                               cfg.patch_size, cfg.sample_batch)
    log.info("sampled %d images x %d realizations in %.0fs", len(samples), len(seeds), time.time() - t0)
    return samples, maps


def cmd_evaluate(args) -> int:
    from .evaluation import ablation_table, evaluate
    from .inference import combine

    cfg = resolve_config(args)
    dirs = run_dirs(args.run_dir)
    samples, maps = _predict_split(args, cfg)
    preds = [combine(m, cfg.threshold, cfg.fusion_config()) for m in maps]
    ids = [s.name for s in samples]
    fused = evaluate([(s.count, p.count) for s, p in zip(samples, preds)], ids)
    reports = {"fused": fused}
    for r in range(cfg.realizations):
        reports[f"realization_{r}"] = evaluate([(s.count, p.realization_counts[r]) for s, p in zip(samples, preds)], ids)
    fused.write_jsonl(dirs["reports"] / f"eval_{args.split}_samples.jsonl")
    table = ablation_table(reports)
    table.write_csv(dirs["reports"] / f"eval_{args.split}.csv")
    print(table.pretty())
    return 0


def cmd_ablate(args) -> int:
    from .counting import sum_count
    from .evaluation import ablation_table, evaluate
    from .fusion import ORDERS
    from .inference import combine

    cfg = resolve_config(args)
    dirs = run_dirs(args.run_dir)
    samples, maps = _predict_split(args, cfg)
    truth = [s.count for s in samples]
    ids = [s.name for s in samples]
    reports = {}
    if args.axis == "fusion-order":
        for order in ORDERS:
            preds = [combine(m, cfg.threshold, cfg.fusion_config(order)).count for m in maps]
            reports[order] = evaluate(list(zip(truth, preds)), ids)
    elif args.axis == "counting-op":
        contour = [combine(m[:1], cfg.threshold).count for m in maps]
        summed = [sum_count(m[0]) for m in maps]
        reports["contour"] = evaluate(list(zip(truth, contour)), ids)
        reports["summation"] = evaluate(list(zip(truth, summed)), ids)
    else:
        for k in range(1, cfg.realizations + 1):
            preds = [combine(m[:k], cfg.threshold, cfg.fusion_config()).count for m in maps]
            reports[f"{k}_realizations"] = evaluate(list(zip(truth, preds)), ids)
    table = ablation_table(reports)
    table.write_csv(dirs["reports"] / f"ablate_{args.axis}.csv")
    print(table.pretty())
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffcount", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("import", help="build a manifest from images + point tables")
    s.add_argument("--images", required=True)
    s.add_argument("--points", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train", choices=("train", "val", "test"))
    s.set_defaults(func=cmd_import)

    s = sub.add_parser("synth", help="generate synthetic dot scenes")
    s.add_argument("--out", required=True)
    s.add_argument("--train", type=int, default=256)
    s.add_argument("--test", type=int, default=32)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--min-count", type=int, default=10)
    s.add_argument("--max-count", type=int, default=80)
    s.add_argument("--min-separation", type=float, default=5.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a denoiser")
    s.add_argument("--manifest", required=True)
    s.add_argument("--run-dir", required=True)
    add_config_flags(s)
    s.set_defaults(func=cmd_train)

    def with_model(s):
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--run-dir", required=True)
        s.add_argument("--any-arch", action="store_true",
                       help="take the network shape from the checkpoint instead of the config")
        add_config_flags(s)

    s = sub.add_parser("sample", help="predict crowd maps for images")
    s.add_argument("image", nargs="+")
    s.add_argument("--no-figures", action="store_true")
    with_model(s)
    s.set_defaults(func=cmd_sample)

    for name, func, help_ in (("evaluate", cmd_evaluate, "MAE / MSE over a split"),
                              ("ablate", cmd_ablate, "ablation tables")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--manifest", required=True)
        s.add_argument("--split", default="test")
        s.add_argument("--limit", type=int, default=0, help="use only the first N samples")
        if name == "ablate":
            s.add_argument("--axis", required=True, choices=AXES)
        with_model(s)
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
