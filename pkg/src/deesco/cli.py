"""Command-line entry point: ``deesco {gen,train,eval,sweep,introspect,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .branches import ConfigError
from .checkpoint import CheckpointError
from .config import ExperimentConfig
from .data import DataError, SynthParams, default_data_dir, denormalize_targets, synth_generate
from .ensemble import branch_configs_from_preset
from .tensor import no_grad

log = logging.getLogger("deesco")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _floats(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}")
    return vals


def _crop(text):
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"bad crop size {text!r}; use e.g. 32 or 32x32")
    return (dims[0], dims[0]) if len(dims) == 1 else (dims[0], dims[1])


def write_pgm(path, image):
    """Write a 2-D array as 8-bit binary PGM after per-image min-max scaling."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = np.round((img - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.full(img.shape, 128.0)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(scaled.astype(np.uint8).tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def build_config(args):
    """Resolve config: command-line flag > config file > default."""
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg = ExperimentConfig.load(path)
    else:
        arch = getattr(args, "arch_preset", None) or "Rh+Ou+Fc"
        cfg = ExperimentConfig(branches=branch_configs_from_preset(arch))
    if getattr(args, "arch_preset", None) and getattr(args, "config", None):
        ref = cfg.branches[0]
        cfg.branches = branch_configs_from_preset(
            args.arch_preset, crop_size=ref.crop_size, heatmap_size=ref.heatmap_size,
            conv_channels=ref.conv_channels, fc_widths=ref.fc_widths)
    if getattr(args, "crop", None):
        for b in cfg.branches:
            b.crop_size = _crop(args.crop)
    if getattr(args, "heatmap_size", None):
        for b in cfg.branches:
            b.heatmap_size = args.heatmap_size
    if getattr(args, "channels", None):
        for b in cfg.branches:
            b.conv_channels = [int(c) for c in args.channels.split(",")]
    if getattr(args, "fc_widths", None):
        for b in cfg.branches:
            b.fc_widths = [int(c) for c in args.fc_widths.split(",")]
    overrides = {
        "dataset": getattr(args, "dataset", None),
        "output_dir": getattr(args, "out", None),
        "seed": getattr(args, "seed", None),
        "nu": getattr(args, "nu", None),
        "fold_scheme": getattr(args, "fold_scheme", None),
        "kfold_k": getattr(args, "k", None),
        "max_folds": getattr(args, "max_folds", None),
        "grad_clip": getattr(args, "grad_clip", None),
    }
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    if getattr(args, "no_comb", False):
        cfg.nu = 0.0
    sched = {"base_lr": getattr(args, "lr", None), "total_steps": getattr(args, "steps", None),
             "batch_size": getattr(args, "batch_size", None), "epochs": getattr(args, "epochs", None),
             "power": getattr(args, "power", None)}
    for k, v in sched.items():
        if v is not None:
            setattr(cfg.schedule, k, v)
    if cfg.dataset is None:
        cfg.dataset = str(default_data_dir())
    if not Path(cfg.dataset, "manifest.json").is_file():
        raise UsageError(f"dataset not found: {cfg.dataset} (no manifest.json)")
    return cfg.validate()


def _add_config_flags(p, out_default="runs/deesco", sweep=False):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--dataset", help="dataset directory (default: $DEESCO_DATA_DIR)")
    p.add_argument("--out", help=f"output directory (default from config, else {out_default})")
    p.add_argument("--seed", type=int)
    if not sweep:
        p.add_argument("--nu", type=float, help="weight of the combinatory loss")
        p.add_argument("--arch", dest="arch_preset", help="branch preset, e.g. Rh+Ou+Fc")
    p.add_argument("--steps", type=int, help="total optimizer steps (overrides epochs)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--power", type=float, help="polynomial decay power")
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--crop", help="per-eye crop size, e.g. 32 or 32x32")
    p.add_argument("--heatmap-size", type=int)
    p.add_argument("--channels", help="trunk channels, e.g. 8,16")
    p.add_argument("--fc-widths", help="hidden dense widths, e.g. 128")
    p.add_argument("--fold-scheme", choices=["loso", "kfold"])
    p.add_argument("--k", type=int, help="number of folds for kfold")
    p.add_argument("--max-folds", type=int, help="only run the first N folds")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    out = Path(args.out) if args.out else default_data_dir()
    params = SynthParams(crop_size=_crop(args.crop), target_kind="gaze3d" if args.target == "3d" else "gaze2d",
                         noise_std=args.noise)
    try:
        manifest = synth_generate(out, args.seed, args.subjects, args.per_subject, params)
    except DataError as exc:
        raise UsageError(str(exc))
    print(f"wrote {manifest['count']} samples ({len(manifest['subjects'])} subjects, "
          f"{manifest['target_kind']}, crop {manifest['crop'][0]}x{manifest['crop'][1]}) to {out}")
    return 0


def cmd_train(args):
    from .runner import train_run

    cfg = build_config(args)
    run_dir = Path(cfg.output_dir)
    results = train_run(cfg, run_dir, jobs=args.jobs)
    for fid, steps in sorted(results.items()):
        print(f"fold {fid}: {steps} steps")
    print(f"run written to {run_dir}")
    return 0


def cmd_eval(args):
    from .runner import eval_run

    run = Path(args.run)
    if not (run / "config.json").is_file():
        raise UsageError(f"{run} is not a run directory (no config.json)")
    try:
        report = eval_run(run, args.metric)
    except ValueError as exc:
        if "metric" in str(exc):
            raise UsageError(str(exc))
        raise
    for row in report.per_fold:
        print(f"fold {row['fold']}: n={row['n']} err={row['mean']:.4f} {report.unit}")
    print(f"overall: {report.overall_mean:.4f} ± {report.overall_std:.4f} {report.unit} "
          f"(pooled {report.pooled_mean:.4f})")
    return 0


def cmd_sweep(args):
    from .runner import format_table, sweep

    nus = _floats(args.nu_list) if args.nu_list else []
    archs = [a for a in (args.arch_list or "").split(",") if a.strip()]
    if args.loss_ablation:
        nus = [0.0, args.ablation_nu]
    if not nus and not archs:
        raise UsageError("sweep needs --nu, --arch or --loss-ablation")
    args.nu = None
    cfg = build_config(args)
    if args.out is None and args.config is None:
        cfg.output_dir = "runs/sweep"
    rows = sweep(cfg, nus=nus, archs=archs, seeds=args.seeds, out_dir=cfg.output_dir)
    if args.loss_ablation:
        rows[0]["label"], rows[1]["label"] = "without L_comb", "with L_comb"
        Path(cfg.output_dir, "sweep.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
        Path(cfg.output_dir, "sweep.csv").write_text(format_table(rows, csv=True))
    print(format_table(rows))
    return 0


def cmd_introspect(args):
    from .runner import load_run_models

    run = Path(args.run)
    if not (run / "config.json").is_file():
        raise UsageError(f"{run} is not a run directory (no config.json)")
    config, dataset, folds, models = load_run_models(run)
    by_id = {f.fold_id: (f, m) for f, m in zip(folds, models)}
    if args.fold not in by_id:
        raise UsageError(f"fold {args.fold} not in run (folds: {sorted(by_id)})")
    _, model = by_id[args.fold]
    ids = [int(s) for s in args.samples.split(",")]
    bad = [i for i in ids if not 0 <= i < len(dataset)]
    if bad:
        raise UsageError(f"sample id(s) {bad} out of range; valid ids are 0..{len(dataset) - 1}")
    out = Path(args.out) if args.out else run / "introspect"
    out.mkdir(parents=True, exist_ok=True)
    with no_grad():
        batch = dataset.batch(ids)
        res = model.forward(batch, mode="eval")
    kind = dataset.target_kind
    for k, sid in enumerate(ids):
        stem = out / f"sample{sid}"
        raw = {}
        for i, h in enumerate(res.heatmaps):
            write_pgm(f"{stem}_branch{i}.pgm", h.data[k])
            raw[f"branch{i}"] = h.data[k]
        subsets = {}
        for key, merged in res.merged.items():
            with no_grad():
                prob = decode_prob(merged)
            write_pgm(f"{stem}_subset{key.replace(',', '-')}.pgm", prob[k])
            raw[f"subset{key}"] = merged.data[k]
            pred = res.subsets[key].data[k]
            subsets[key] = {"normalized": pred.tolist(),
                            "target_units": denormalize_targets(pred, kind, dataset.gaze_range).tolist()}
        with no_grad():
            full_prob = decode_prob(res.full_merged)
        write_pgm(f"{stem}_full.pgm", full_prob[k])
        raw["full_prob"] = full_prob[k]
        if args.raw:
            np.savez(f"{stem}_raw.npz", **raw)
        full = res.full.data[k]
        sidecar = {
            "sample": sid, "fold": args.fold, "target_kind": kind,
            "prediction": {"normalized": full.tolist(),
                           "target_units": denormalize_targets(full, kind, dataset.gaze_range).tolist()},
            "ground_truth": {"normalized": batch.targets[k].tolist(), "target_units": batch.raw_targets[k].tolist()},
            "subsets": subsets,
        }
        Path(f"{stem}.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    print(f"wrote heatmaps for {len(ids)} sample(s) to {out}")
    return 0


def decode_prob(heatmap):
    from .tensor import spatial_softmax

    return spatial_softmax(heatmap).data


def cmd_gradcheck(args):
    from .gradsuite import CASES, run_suite

    ops = None if args.op in (None, "all") else args.op.split(",")
    try:
        results = run_suite(ops, seeds=args.seeds, eps=args.eps, tol=args.tol, inject_fault=args.inject_fault)
    except KeyError as exc:
        raise UsageError(f"{exc.args[0]}")
    ok = True
    for op, reports in results.items():
        worst = max(r.max_error for _, r in reports)
        failed = [s for s, r in reports if not r.passed]
        ok &= not failed
        status = "PASS" if not failed else f"FAIL (seeds {failed})"
        label = f"{op} (fault injected)" if args.inject_fault else op
        print(f"{label:<20} seeds={len(reports):<4} max_rel_err={worst:.3e}  {status}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------

def make_parser():
    parser = argparse.ArgumentParser(prog="deesco", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"deesco {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic gaze dataset")
    p.add_argument("--out", help="dataset directory (default: $DEESCO_DATA_DIR or ./data)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=6)
    p.add_argument("--per-subject", type=int, default=200)
    p.add_argument("--target", choices=["3d", "2d"], default="3d")
    p.add_argument("--crop", default="32", help="per-eye crop size, e.g. 32 or 32x32")
    p.add_argument("--noise", type=float, default=0.02)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model per fold")
    _add_config_flags(p)
    p.add_argument("--no-comb", action="store_true", help="disable the combinatory loss (nu = 0)")
    p.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--metric", choices=["3d", "2d"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="compare nu values or architecture presets")
    _add_config_flags(p, out_default="runs/sweep", sweep=True)
    p.set_defaults(nu=None)
    p.add_argument("--nu", dest="nu_list", help="comma-separated nu values, e.g. 0,0.1,1,5,10")
    p.add_argument("--arch", dest="arch_list", help="comma-separated presets, e.g. Rh+Rh,Rh+Ou+Fc")
    p.add_argument("--loss-ablation", action="store_true", help="with vs without the combinatory loss")
    p.add_argument("--ablation-nu", type=float, default=1.0)
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(func=cmd_sweep, arch_preset=None)

    p = sub.add_parser("introspect", help="export heatmaps for given samples")
    p.add_argument("--run", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--samples", required=True, help="comma-separated dataset sample ids")
    p.add_argument("--out")
    p.add_argument("--raw", action="store_true", help="also dump raw float64 maps (.npz)")
    p.set_defaults(func=cmd_introspect)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every primitive")
    p.add_argument("--op", default="all")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, CheckpointError) as exc:
        print(f"deesco {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("unhandled", exc_info=True)
        print(f"deesco {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
