"""``vfgrade`` command line: synth, train, eval, infer, gradcam.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .dataset import ManifestError, VolumeError, read_manifest
from .metrics import MetricError
from .objective import NumericalError
from .preprocess import PreprocessError
from .sampler import SamplerError
from .train import CheckpointError, DataError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("vfgrade")


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(rows: list[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def write_eval_outputs(report: dict, rows: list[dict], out_dir, plot: bool = True) -> None:
    """``report.json`` plus delimited tables and the ROC figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(report, out / "report.json")
    _write_csv(rows, out / "predictions.csv")
    roc = report["roc"]
    _write_csv([{"fpr": f, "tpr": t, "threshold": "inf" if th is None else th}
                for f, t, th in zip(roc["fpr"], roc["tpr"], roc["thresholds"])], out / "roc_points.csv")
    cm = report["confusion_matrix"]
    _write_csv([{"true": f"G{i}", **{f"pred_G{j}": c for j, c in enumerate(row)}}
                for i, row in enumerate(cm)], out / "confusion_matrix.csv")
    if plot:
        from .plotting import roc_figure
        roc_figure(roc["fpr"], roc["tpr"], out / "roc.png", report["auc_roc"],
                   (report["specificity"], report["sensitivity"]))


def _resolve_config(args) -> tuple[RunConfig, Path]:
    if args.config in (None, "desk"):
        cfg = RunConfig.desk() if args.config == "desk" else RunConfig()
        base = Path.cwd()
    else:
        cfg = load_config(args.config)
        base = Path(args.config).resolve().parent
    if args.seed is not None:
        cfg.training.seed = args.seed
    manifest = Path(args.manifest) if args.manifest else base / cfg.data.manifest
    return cfg, manifest


def cmd_synth(args) -> int:
    from .synthdata import SynthConfig, generate_dataset

    cfg = SynthConfig(cases=args.cases, vertebrae_per_case=args.vertebrae, volume_side=args.side,
                      spacing=args.spacing, seed=args.seed if args.seed is not None else 0)
    m = generate_dataset(cfg, args.out)
    counts = m.grade_counts()
    print(f"wrote {len(m.cases)} cases to {args.out}; grade counts {counts}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import training_curves
    from .train import evaluate_checkpoint, load_checkpoint, train

    cfg, manifest_path = _resolve_config(args)
    manifest = read_manifest(manifest_path)
    out = Path(args.out)
    result = train(cfg, manifest, out, resume=args.resume)
    training_curves(result.history, out / "training.png")
    if result.report is not None:
        report, rows = evaluate_checkpoint(load_checkpoint(result.checkpoint), manifest, "test")
        report["within_class_similarity"] = result.report["within_class_similarity"]
        write_eval_outputs(report, rows, out / "test_eval", plot=cfg.metrics.plot_roc)
        print(f"test AUCROC {result.report['auc_roc']:.4f}  macro-F1 {result.report['macro_f1']:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate_checkpoint, load_checkpoint

    if args.split == "train" and not args.allow_train:
        log.error("refusing to evaluate the training split without --allow-train")
        return EXIT_CONFIG
    state = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest)
    report, rows = evaluate_checkpoint(state, manifest, args.split)
    cfg = RunConfig.from_dict(state["config"])
    write_eval_outputs(report, rows, args.out, plot=cfg.metrics.plot_roc)
    keys = ("auc_roc", "specificity", "sensitivity", "macro_f1", "macro_precision", "macro_recall")
    print("\t".join(keys))
    print("\t".join(f"{report[k]:.4f}" for k in keys))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .train import infer_case, load_checkpoint

    state = load_checkpoint(args.checkpoint)
    rows = infer_case(state, args.volume, args.mask)
    writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]) if rows else ["label"],
                            delimiter="\t", lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_csv(rows, Path(args.out) / "grades.csv")
    return EXIT_OK


def cmd_gradcam(args) -> int:
    from .augment import center_pad
    from .dataset import load_volume
    from .explain import export_overlay, grad_cam
    from .preprocess import preprocess_vertebra
    from .train import load_checkpoint, model_from_checkpoint

    state = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(state["config"])
    model = model_from_checkpoint(state)
    volume = load_volume(args.volume, "HU")
    mask = load_volume(args.mask, "labels")
    patch = preprocess_vertebra(volume, mask, args.label, cfg.preprocess)
    view = center_pad(patch, cfg.augment)
    att = grad_cam(model, view, args.target_class)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    slices = args.slices or None
    paths = export_overlay(view, att, out, args.axis, slices, channel=args.channel,
                           prefix=f"label{args.label:02d}_G{att.target_class}")
    np.save(out / f"label{args.label:02d}_attention.npy", att.values)
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vfgrade", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic graded dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--cases", type=int, default=40)
    s.add_argument("--vertebrae", type=int, default=5)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--spacing", type=float, default=1.0)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the grading network")
    t.add_argument("--config", help="YAML run config, or 'desk' for the CPU preset")
    t.add_argument("--manifest", help="overrides data.manifest from the config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("test", "train"), default="test")
    e.add_argument("--allow-train", action="store_true")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="grade every labelled vertebra of one case")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--volume", required=True)
    i.add_argument("--mask", required=True)
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcam", help="Grad-CAM attention overlays for one vertebra")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--volume", required=True)
    g.add_argument("--mask", required=True)
    g.add_argument("--label", type=int, required=True)
    g.add_argument("--target-class", type=int, choices=range(4))
    g.add_argument("--axis", type=int, default=0, choices=range(3))
    g.add_argument("--slices", type=int, nargs="*")
    g.add_argument("--channel", type=int, default=1, choices=range(3))
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gradcam)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except (ManifestError, VolumeError, PreprocessError, SamplerError, DataError, MetricError,
            FileNotFoundError) as e:
        log.error("%s", e)
        return EXIT_DATA
    except NumericalError as e:
        log.error("%s", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
