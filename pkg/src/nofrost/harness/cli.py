"""Command-line interface.

Exit codes: 0 success, 1 config error, 2 runtime failure, 3 acceptance
threshold failure (``repro``).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch
import torch.nn.functional as F

from ..analysis import (boundary_thickness, decision_margin,
                        default_attack_suite, evaluate, model_smoothness,
                        write_reports_csv)
from ..attacks import pgd
from ..augment import DeepAugmentLite, default_corruption_suite, tda
from ..nfcore.checkpoint import load_checkpoint
from ..nfcore.models import NormStrategy, RoutedModel
from .config import (ConfigError, config_from_dict, config_hash, config_to_dict,
                     load_config)
from .data import load_dataset
from .plots import PLOT_KINDS, plot_by_kind
from .run import run as run_experiment
from .run import eval_routing, sweep_to_csv
from . import repro as repro_mod


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _load_cfg(args):
    cfg = load_config(args.config)
    overrides = dict(getattr(args, "set", None) and
                     (kv.split("=", 1) for kv in args.set) or [])
    if overrides or getattr(args, "seed", None) is not None \
            or getattr(args, "output_dir", None) is not None:
        from .config import set_by_path
        d = config_to_dict(cfg)
        for key, value in overrides.items():
            set_by_path(d, key, value)
        if getattr(args, "seed", None) is not None:
            d["train"]["seed"] = args.seed
        if getattr(args, "output_dir", None) is not None:
            d["output_dir"] = args.output_dir
        cfg = config_from_dict(d)
    return cfg


def _cmd_train(args):
    cfg = _load_cfg(args)
    manifest = run_experiment(cfg, dry_run=args.dry_run, resume=args.resume,
                              log_fn=lambda row: print(
                                  f"epoch {row['epoch']:3d} lr={row['lr']:.4f} "
                                  f"loss={row['train_loss']:.4f} clean={row['clean_acc']:.2f}%"
                                  + (f" pgd={row['pgd_acc']:.2f}%" if row['pgd_acc'] is not None else "")))
    print(f"run {cfg.name}: {manifest.status} (config {manifest.config_hash[:12]})")
    return 0


def _checkpoint_and_data(args):
    cfg = load_config(args.config)
    model, meta = load_checkpoint(args.checkpoint)
    bundle = load_dataset(cfg.dataset, subset_fraction=cfg.subset_fraction,
                          seed=cfg.data_seed, params=cfg.dataset_params)
    return cfg, model, meta, bundle


def _cmd_evaluate(args):
    cfg, model, _, bundle = _checkpoint_and_data(args)
    suite = default_attack_suite(eps=cfg.eval.attack_eps, steps=cfg.eval.attack_steps,
                                 seed=cfg.eval.attack_seed)
    corruptions = (default_corruption_suite(cfg.eval.corruption_severities)
                   if cfg.eval.corruptions else [])
    report = evaluate(model, bundle.test, suite, corruptions, cfg.eval.metrics,
                      routing=eval_routing(cfg))
    out = Path(args.output) if args.output else Path(args.checkpoint).with_suffix(".eval.json")
    out.write_text(report.to_json())
    if args.csv:
        write_reports_csv([(cfg.name, report)], args.csv)
    print(report.to_json())
    print(f"wrote {out}")
    return 0


def _parse_gammas(text):
    try:
        return [float(v) for v in text.split(",") if v != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --gammas value {text!r}: {exc}") from exc


def _cmd_sweep(args):
    cfg, model, _, bundle = _checkpoint_and_data(args)
    if model.cfg.norm != NormStrategy.MBN:
        raise ConfigError("sweep requires a mixture-BN checkpoint")
    gammas = _parse_gammas(args.gammas)
    if args.mix_set == "all":
        mix_set = frozenset(range(len(model.norm_sites)))
    elif args.mix_set:
        mix_set = frozenset(int(v) for v in args.mix_set.split(","))
    else:
        mix_set = frozenset()
    suite = [("pgd", default_attack_suite(eps=cfg.eval.attack_eps,
                                          steps=cfg.eval.attack_steps,
                                          seed=cfg.eval.attack_seed)[0][1])]
    rows = sweep_to_csv(model, bundle.test, gammas, suite, args.out, mix_set=mix_set)
    for row in rows:
        print(f"gamma={row['gamma']:.2f} clean={row['clean_acc']:.2f}% pgd={row['pgd_acc']:.2f}%")
    print(f"wrote {args.out}")
    return 0


def _cmd_probe_stats(args):
    model, _ = load_checkpoint(args.checkpoint)
    from ..analysis import bn_stats_scatter
    scatters = bn_stats_scatter(model, args.layer, args.label)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        fh.write("label,layer,channel,mean,variance\n")
        for scatter in scatters:
            for label, layer, channel, mean, var in scatter.rows():
                fh.write(f"{label},{layer},{channel},{mean:.8f},{var:.8f}\n")
    print(f"wrote {out} ({sum(len(s.means) for s in scatters)} channels)")
    return 0


def _cmd_metrics(args):
    cfg, model, _, bundle = _checkpoint_and_data(args)
    mcfg = cfg.eval.metrics
    split = bundle.test
    keep = (split.labels < mcfg.max_classes).nonzero().flatten()[:mcfg.n_samples]
    mx, my = split.images[keep], split.labels[keep]
    view = RoutedModel(model, eval_routing(cfg)) if eval_routing(cfg) is not None else model
    model.eval()
    with torch.no_grad():
        p_clean = F.softmax(view(mx), dim=1)
    adv = pgd(view, mx, my, mcfg.smoothness_attack)
    with torch.no_grad():
        p_adv = F.softmax(view(adv.x_star), dim=1)
    margin = decision_margin(p_clean, my)
    smooth = model_smoothness(p_clean, p_adv)
    thick = boundary_thickness(view, mx[:mcfg.thickness_samples], mcfg.thickness)
    print(f"margin mean={float(margin.mean()):.4f}")
    print(f"thickness mean={float(thick.mean()):.4f}")
    print(f"smoothness mean={float(smooth.mean()):.4f}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            fh.write("model,metric,value\n")
            name = Path(args.checkpoint).stem
            for i in range(mx.shape[0]):
                fh.write(f"{name},margin,{float(margin[i]):.6f}\n")
                fh.write(f"{name},smoothness,{float(smooth[i]):.6f}\n")
            for i in range(thick.shape[0]):
                fh.write(f"{name},thickness,{float(thick[i]):.6f}\n")
        print(f"wrote {out}")
    return 0


def _cmd_augment_preview(args):
    cfg = load_config(args.config)
    bundle = load_dataset(cfg.dataset, subset_fraction=cfg.subset_fraction,
                          seed=cfg.data_seed, params=cfg.dataset_params)
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    x = bundle.train.images[:args.n]
    deepaug = DeepAugmentLite(in_channels=bundle.in_channels)
    rows = [("original", x),
            ("deepaugment_lite", torch.stack([deepaug(img, args.seed + i) for i, img in enumerate(x)])),
            ("tda", torch.stack([tda(img, args.seed + i) for i, img in enumerate(x)]))]
    fig, axes = plt.subplots(len(rows), args.n, figsize=(1.2 * args.n, 1.3 * len(rows)))
    for r, (label, batch) in enumerate(rows):
        for c in range(args.n):
            ax = axes[r][c] if args.n > 1 else axes[r]
            img = batch[c].permute(1, 2, 0).squeeze(-1).numpy()
            ax.imshow(img, cmap="gray", vmin=0, vmax=1)
            ax.set_axis_off()
            if c == 0:
                ax.set_title(label, fontsize=7, loc="left")
    fig.tight_layout()
    fig.savefig(args.out, metadata={"Date": None} if str(args.out).endswith(".svg") else None)
    print(f"wrote {args.out}")
    return 0


def _cmd_plot(args):
    plot_by_kind(args.kind, args.input, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_repro(args):
    results = repro_mod.run_all(args.workdir, log=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return 3 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nofrost",
                     description="Normalizer-free adversarial training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--dry-run", action="store_true",
                   help="validate config and write the manifest without training")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. train.epochs=5")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the config's dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", default=None, help="eval report JSON path")
    p.add_argument("--csv", default=None, help="also write a one-row CSV")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="gamma sweep of a mixture-BN checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gammas", default="0,0.25,0.5,0.75,1")
    p.add_argument("--mix-set", default="", help="'all', or comma-separated site indices")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("probe-stats", help="dump running statistics of one norm site")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--label", default="model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_probe_stats)

    p = sub.add_parser("metrics", help="decision margin / thickness / smoothness")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="per-sample metric CSV")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("augment-preview", help="grid of augmented samples")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_augment_preview)

    p = sub.add_parser("plot", help="render a figure from a CSV")
    p.add_argument("--kind", required=True, choices=PLOT_KINDS)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("repro", help="run the pinned desk-scale acceptance protocol")
    p.add_argument("--workdir", default="repro_runs")
    p.set_defaults(func=_cmd_repro)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args) or 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # runtime failures -> exit 2 with a readable message
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
