"""Command-line harness: train, attack, eval, explain, filters.

Every subcommand reads a flat dotted-key config, writes its artifacts under
--out, and drops a ``config.resolved`` copy there so the run can be replayed
from its outputs alone. All randomness flows from the single seed. Heavy
imports happen after --threads is applied, so the thread caps actually
reach the numerics libraries.
"""

import argparse
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pixeldrop",
        description="Train, attack, and evaluate convnets that classify "
                    "randomly subsampled images.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint):
        p.add_argument("--config", required=True, help="flat key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="cap numerics-library threads")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="model container written by train")

    for name, needs_ckpt, helptext in (
            ("train", False, "train a model and write checkpoint + metrics"),
            ("attack", True, "run the configured attacks, save adversarial batches"),
            ("eval", True, "sweep drop rates x attacks into a results CSV"),
            ("explain", True, "write input-gradient maps and mask splits"),
            ("filters", True, "export first-layer filters as images")):
        p = sub.add_parser(name, help=helptext)
        common(p, needs_ckpt)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 1
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)

    handler = {"train": _cmd_train, "attack": _cmd_attack, "eval": _cmd_eval,
               "explain": _cmd_explain, "filters": _cmd_filters}[args.command]
    try:
        return handler(args)
    except (ValueError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def _prepare(args):
    """(config, out dir) with the resolved config frozen into the out dir."""
    from .config import load_config

    cfg = load_config(args.config, seed_override=args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.resolved"), "w") as fh:
        fh.write(cfg.resolved_text())
    return cfg, args.out


def _load_model(args):
    from .models import load_checkpoint, model_from_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    return ckpt, model_from_checkpoint(ckpt)


def _model_id(ckpt):
    return f"resnet{6 * ckpt.spec.n + 2}"


def _test_subset(cfg, dataset):
    limit = cfg.values["eval.images"]
    records = dataset.test
    return records[:limit] if limit > 0 else records


def _cmd_train(args) -> int:
    from . import figures
    from .models import build, save_checkpoint
    from .training import train

    cfg, out = _prepare(args)
    dataset = cfg.dataset()
    model = build(cfg.model_spec(dataset.num_classes, dataset.side),
                  init_seed=cfg.seed)
    ckpt, metrics = train(model, dataset, cfg.train_config(),
                          metrics_path=os.path.join(out, "metrics.csv"))
    save_checkpoint(os.path.join(out, "model.ckpt"), ckpt)
    figures.training_curves(metrics, os.path.join(out, "training_curves.png"))
    final = metrics[-1]
    print(f"trained {_model_id(ckpt)} [{ckpt.meta['policy']}] for "
          f"{len(metrics)} epochs")
    print(f"validation accuracy: clean {final['val_acc_clean']:.4f}, "
          f"drop 0.9 {final['val_acc_drop90']:.4f}")
    print(f"artifacts in {out}: model.ckpt, metrics.csv, training_curves.png")
    return 0


def _cmd_attack(args) -> int:
    import csv

    import numpy as np

    from . import figures
    from .attacks import export_adversarial, pgd
    from .data import records_to_arrays

    cfg, out = _prepare(args)
    ckpt, model = _load_model(args)
    dataset = cfg.dataset()
    records = _test_subset(cfg, dataset)
    attacks = cfg.attack_configs(dataset.side)
    if not attacks:
        print("error: config defines no attack.<name>.* entries", file=sys.stderr)
        return 1
    x, y, ids = records_to_arrays(records)
    rows = []
    for name, attack_cfg in attacks.items():
        result = pgd(model, x, y, attack_cfg, ids=ids)
        prefix = os.path.join(out, f"adv_{name}")
        export_adversarial(prefix, result, attack_cfg, ids, x, y)
        figures.loss_trajectories(result.loss_trajectory.T, f"{prefix}_loss.png",
                                  title=f"{name} ({attack_cfg.norm})")
        rows.append({
            "attack": name, "norm": attack_cfg.norm,
            "eps": f"{attack_cfg.eps:.6g}", "loss": attack_cfg.loss,
            "goal": attack_cfg.goal, "eot": attack_cfg.eot_samples,
            "images": len(ids),
            "success_rate": f"{float(result.success.mean()):.4f}",
            "mean_norm": f"{float(np.mean(result.achieved_norm)):.6g}",
        })
        print(f"{name}: {attack_cfg.norm} eps {attack_cfg.eps:.4g} -> "
              f"success {float(result.success.mean()):.1%} on {len(ids)} images")
    with open(os.path.join(out, "attacks.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"artifacts in {out}: adv_<name>.bin/.csv, attacks.csv")
    return 0


def _cmd_eval(args) -> int:
    from . import figures
    from .defense import append_report, calibrate_threshold, robust_accuracy

    cfg, out = _prepare(args)
    ckpt, model = _load_model(args)
    dataset = cfg.dataset()
    records = _test_subset(cfg, dataset)
    attacks = cfg.attack_configs(dataset.side)
    fpr = cfg.values["defense.fpr"]
    results_path = os.path.join(out, "results.csv")
    if os.path.exists(results_path):
        os.remove(results_path)

    rates = cfg.values["eval.drop_rates"]
    series = {"clean": []}
    for rate in rates:
        defense = cfg.defense_config(rate)
        if fpr > 0:
            tau = calibrate_threshold(model, dataset.validation, defense, fpr=fpr)
            defense = cfg.defense_config(rate, tau=tau)
        report = robust_accuracy(model, records, None, defense,
                                 dataset=cfg.values["dataset.kind"],
                                 model_id=_model_id(ckpt),
                                 train_policy=ckpt.meta.get("policy", ""))
        append_report(results_path, report)
        series["clean"].append(report.clean_acc)
        print(f"drop {rate:g}: clean {report.clean_acc:.4f} "
              f"(reject {report.clean_reject:.4f})")
        for name, attack_cfg in attacks.items():
            report = robust_accuracy(model, records, attack_cfg, defense,
                                     dataset=cfg.values["dataset.kind"],
                                     model_id=_model_id(ckpt),
                                     train_policy=ckpt.meta.get("policy", ""))
            append_report(results_path, report)
            series.setdefault(name, []).append(report.adv_acc)
            print(f"drop {rate:g} + {name}: adversarial {report.adv_acc:.4f} "
                  f"(reject {report.adv_reject:.4f})")
    figures.accuracy_vs_drop(rates, series,
                             os.path.join(out, "accuracy_vs_drop.png"))
    print(f"artifacts in {out}: results.csv, accuracy_vs_drop.png")
    return 0


def _cmd_explain(args) -> int:
    import csv

    from . import figures
    from .data import write_pgm, write_ppm
    from .introspect import dropped_mass_fraction, explanation_map, mask_split
    from .masking import apply_mask, sample_mask
    from .rng import rng_for

    cfg, out = _prepare(args)
    _, model = _load_model(args)
    dataset = cfg.dataset()
    count = max(1, cfg.values["explain.images"])
    rate = cfg.values["explain.rate"]
    records = dataset.test[:count]
    image_dir = os.path.join(out, "explanations")
    os.makedirs(image_dir, exist_ok=True)
    rows = []
    panels = []
    for rec in records:
        mask = sample_mask(rec.pixels.shape, rate,
                           rng_for(cfg.seed, "explain", rec.id))
        emap = explanation_map(model, apply_mask(rec.pixels, mask))
        kept, dropped = mask_split(emap, mask)
        base = os.path.join(image_dir, str(rec.id))
        write_ppm(f"{base}_input.ppm", rec.pixels)
        write_pgm(f"{base}_map.pgm", emap.values)
        write_pgm(f"{base}_kept.pgm", kept)
        write_pgm(f"{base}_dropped.pgm", dropped)
        rows.append({"id": rec.id, "label": rec.label, "source": emap.source,
                     "drop_rate": f"{rate:g}",
                     "dropped_mass": f"{dropped_mass_fraction(emap, mask):.4f}"})
        if len(panels) < 8:
            panels.append((rec.pixels, emap.values, kept, dropped))
    with open(os.path.join(out, "explanations.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    figures.explanation_montage(panels, os.path.join(out, "explanations.png"))
    print(f"explained {len(rows)} images at drop rate {rate:g}")
    print(f"artifacts in {out}: explanations.csv, explanations.png, "
          f"explanations/<id>_*.p[pg]m")
    return 0


def _cmd_filters(args) -> int:
    import numpy as np

    from . import figures
    from .introspect import export_filters

    _, out = _prepare(args)
    ckpt, _ = _load_model(args)
    exported = export_filters(ckpt, os.path.join(out, "filters"))
    figures.filter_montage([image for _, image, _ in exported],
                           os.path.join(out, "filters.png"))
    mean_score = float(np.mean([score for _, _, score in exported]))
    print(f"exported {len(exported)} stem filters, "
          f"mean center concentration {mean_score:.4f}")
    print(f"artifacts in {out}: filters/filter_*.ppm, filters/filters_summary.csv, "
          f"filters.png")
    return 0


if __name__ == "__main__":
    sys.exit(main())
