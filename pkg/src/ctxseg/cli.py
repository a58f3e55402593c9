"""Command-line entry points: train, eval, analyze, gen-toy, ablate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import Config, ConfigError, apply_scheme, clone_config, load_config
from .data import Sample, load_corpus, load_manifest
from .metrics import format_report, save_report
from .model import build_model, load_checkpoint
from .train import evaluate, run_experiment


def _load_train_config(args) -> Config:
    cfg = load_config(args.config, overrides=args.set or [])
    if args.seed is not None:
        cfg.experiment.seeds = (args.seed,)
    if args.scheme:
        cfg = apply_scheme(cfg, args.scheme)
    return cfg


def _load_corpora(cfg: Config) -> tuple[list[Sample], list[Sample], int, int]:
    if not cfg.data.root:
        raise ConfigError("data.root must point at a training corpus directory")
    train = load_corpus(cfg.data.root, cfg.data.manifest)
    manifest = load_manifest(cfg.data.root, cfg.data.manifest)
    classes, ignore = int(manifest["classes"]), int(manifest["ignore_index"])
    if classes != cfg.model.num_classes:
        raise ConfigError(
            f"model.num_classes={cfg.model.num_classes} but corpus declares {classes}")
    test = load_corpus(cfg.data.test_root, cfg.data.manifest) if cfg.data.test_root else []
    return train, test, classes, ignore


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    train, test, _, ignore = _load_corpora(cfg)
    summary = run_experiment(cfg, train, test, run_dir=cfg.experiment.run_dir,
                             ignore_index=ignore)
    print(json.dumps(summary, indent=1))
    return 0


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus, args.manifest)
    manifest = load_manifest(args.corpus, args.manifest)
    classes, ignore = int(manifest["classes"]), int(manifest["ignore_index"])
    import torch

    payload = torch.load(args.checkpoint, map_location="cpu", weights_only=False)
    meta = payload["model_meta"]
    model_cfg = (payload.get("config") or {}).get("model", {})
    model = build_model(num_classes=meta["num_classes"],
                        width=model_cfg.get("width", 32),
                        feature_dim=model_cfg.get("feature_dim", 64),
                        proj_dim=meta["proj_dim"], aux_heads=meta["aux_heads"])
    load_checkpoint(args.checkpoint, model)
    if meta["num_classes"] != classes:
        print(f"error: checkpoint has {meta['num_classes']} classes, corpus {classes}",
              file=sys.stderr)
        return 2
    report = evaluate(model, corpus, classes, ignore,
                      class_mean_accuracy=args.class_mean_accuracy)
    print(format_report(report))
    if args.out:
        save_report(report, args.out)
    return 0


def cmd_analyze(args) -> int:
    from .analysis import export_embeddings, feature_density_map, save_density_outputs

    corpus = load_corpus(args.corpus, args.manifest)
    import torch

    payload = torch.load(args.checkpoint, map_location="cpu", weights_only=False)
    meta = payload["model_meta"]
    model_cfg = (payload.get("config") or {}).get("model", {})
    model = build_model(num_classes=meta["num_classes"],
                        width=model_cfg.get("width", 32),
                        feature_dim=model_cfg.get("feature_dim", 64),
                        proj_dim=meta["proj_dim"], aux_heads=meta["aux_heads"])
    load_checkpoint(args.checkpoint, model)
    out_dir = Path(args.out)
    if args.what == "density":
        for sample in corpus[: args.limit]:
            dmap = feature_density_map(model, sample, patch=args.patch,
                                       neighbor_offset=args.neighbor_offset)
            save_density_outputs(dmap, out_dir, sample.source_id)
        print(f"wrote density maps for {min(args.limit, len(corpus))} samples to {out_dir}")
    else:
        rows = export_embeddings(model, corpus[: args.limit], out_dir / "embeddings.tsv",
                                 per_image=args.per_image, seed=args.seed)
        print(f"wrote {rows} embedding rows to {out_dir / 'embeddings.tsv'}")
    return 0


def cmd_gen_toy(args) -> int:
    from .toy import gen_toy_corpus

    out = Path(args.out)
    gen_toy_corpus(out / "train", n_images=args.n_images, size=args.size,
                   n_classes=args.classes, seed=args.seed, n_centers=args.centers)
    gen_toy_corpus(out / "test", n_images=args.test_images, size=args.size,
                   n_classes=args.classes, seed=args.seed + 10_000,
                   n_centers=max(2, args.centers // 2), center_prefix="t")
    print(f"toy corpus written to {out}/train and {out}/test")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_train_config(args)
    train, test, _, ignore = _load_corpora(cfg)
    base_dir = Path(cfg.experiment.run_dir)
    rows = []
    variants: list[tuple[str, Config]] = []
    if args.negatives:
        for n in args.negatives.split(","):
            v = clone_config(cfg)
            v.bank.negatives = int(n)
            variants.append((f"negatives={n}", v))
    if args.aux_heads:
        for k in args.aux_heads.split(","):
            v = clone_config(cfg)
            v.perturb.aux_heads = int(k)
            variants.append((f"aux_heads={k}", v))
    if args.schemes:
        for scheme in ("sup_only", "scheme1", "scheme2", "scheme3"):
            variants.append((scheme, apply_scheme(cfg, scheme)))
    if not variants:
        print("nothing to ablate: pass --negatives, --aux-heads and/or --schemes",
              file=sys.stderr)
        return 2
    for name, variant in variants:
        variant.experiment.run_dir = str(base_dir / name.replace("=", "_"))
        summary = run_experiment(variant, train, test,
                                 run_dir=variant.experiment.run_dir, ignore_index=ignore)
        rows.append((name, summary))
    print(f"{'variant':<20}{'mIoU':>16}{'Dice':>16}{'Accuracy':>16}")
    for name, s in rows:
        print(f"{name:<20}"
              f"{s['miou_mean']:>8.4f} ({s['miou_std']:.4f})"
              f"{s['mean_dice_mean']:>8.4f} ({s['mean_dice_std']:.4f})"
              f"{s['accuracy_mean']:>8.4f} ({s['accuracy_std']:.4f})")
    table = {name: s for name, s in rows}
    save_report(table, base_dir / "reports" / "ablation.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxseg",
        description="Semi-supervised segmentation with context and feature-perturbation "
                    "consistency")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run the multi-seed training experiment")
    train.add_argument("config", help="YAML config path")
    train.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a dotted config key")
    train.add_argument("--seed", type=int, help="train a single seed instead of the list")
    train.add_argument("--scheme", choices=("sup_only", "scheme1", "scheme2", "scheme3"),
                       help="apply an ablation scheme to the loss weights")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--manifest", default="manifest.json")
    ev.add_argument("--out", help="write the JSON report here")
    ev.add_argument("--class-mean-accuracy", action="store_true")
    ev.set_defaults(func=cmd_eval)

    an = sub.add_parser("analyze", help="density maps or embedding export")
    an.add_argument("what", choices=("density", "embed"))
    an.add_argument("--checkpoint", required=True)
    an.add_argument("--corpus", required=True)
    an.add_argument("--manifest", default="manifest.json")
    an.add_argument("--out", required=True)
    an.add_argument("--limit", type=int, default=8)
    an.add_argument("--patch", type=int, default=21)
    an.add_argument("--neighbor-offset", type=int, default=None)
    an.add_argument("--per-image", type=int, default=100)
    an.add_argument("--seed", type=int, default=0)
    an.set_defaults(func=cmd_analyze)

    toy = sub.add_parser("gen-toy", help="generate the synthetic toy corpus")
    toy.add_argument("--out", required=True)
    toy.add_argument("--n-images", type=int, default=200)
    toy.add_argument("--test-images", type=int, default=60)
    toy.add_argument("--size", type=int, default=96)
    toy.add_argument("--classes", type=int, default=4)
    toy.add_argument("--centers", type=int, default=8)
    toy.add_argument("--seed", type=int, default=0)
    toy.set_defaults(func=cmd_gen_toy)

    ab = sub.add_parser("ablate", help="sweep negatives / aux heads / schemes")
    ab.add_argument("config")
    ab.add_argument("--set", action="append", metavar="KEY=VALUE")
    ab.add_argument("--seed", type=int)
    ab.add_argument("--scheme", choices=("sup_only", "scheme1", "scheme2", "scheme3"))
    ab.add_argument("--negatives", help="comma-separated bank draw counts")
    ab.add_argument("--aux-heads", help="comma-separated K values")
    ab.add_argument("--schemes", action="store_true", help="sweep the four schemes")
    ab.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
