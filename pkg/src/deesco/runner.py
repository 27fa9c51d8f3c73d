"""Run directories: per-fold training, evaluation and configuration sweeps."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .data import load_dataset, make_folds
from .ensemble import branch_configs_from_preset
from .metrics import evaluate
from .trainer import build_model, fit, load_checkpoint

log = logging.getLogger(__name__)


def resolve_metric(config, dataset):
    kind = "3d" if dataset.target_kind == "gaze3d" else "2d"
    if config.metric is not None and config.metric != kind:
        raise ValueError(f"metric {config.metric!r} does not match a {dataset.target_kind} dataset")
    return kind


def folds_for(config, dataset):
    folds = make_folds(dataset.subjects, config.fold_scheme, config.kfold_k)
    if config.max_folds is not None:
        folds = folds[: config.max_folds]
    return folds


def write_run_header(config, run_dir):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / "config.json")
    (run_dir / "run.json").write_text(json.dumps({"tool": "deesco", "version": __version__}, indent=1) + "\n")


def train_fold(config_dict, fold_id, run_dir):
    """Train one fold; top-level so it can run in a worker process."""
    config = ExperimentConfig.from_dict(config_dict)
    dataset = load_dataset(config.dataset)
    fold = {f.fold_id: f for f in folds_for(config, dataset)}[fold_id]
    model = build_model(config, fold_id)
    fold_dir = Path(run_dir) / f"fold{fold_id}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    log_path = fold_dir / "steps.jsonl"
    log_path.write_text("")
    result = fit(model, dataset, dataset.indices_for_subjects(fold.train_subjects), config,
                 fold_id=fold_id, log_path=log_path, checkpoint_dir=fold_dir)
    return fold_id, result.steps


def train_run(config, run_dir, jobs=1):
    """Train one model per fold and write all artifacts under ``run_dir``."""
    config.validate()
    dataset = load_dataset(config.dataset)
    resolve_metric(config, dataset)
    folds = folds_for(config, dataset)
    write_run_header(config, run_dir)
    cfg = config.to_dict()
    results = {}
    if jobs > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {f.fold_id: pool.submit(train_fold, cfg, f.fold_id, str(run_dir)) for f in folds}
            for fid in sorted(futures):
                try:
                    results[fid] = futures[fid].result()[1]
                except Exception as exc:
                    raise RuntimeError(f"fold {fid} failed: {exc}") from exc
    else:
        for f in folds:
            try:
                results[f.fold_id] = train_fold(cfg, f.fold_id, run_dir)[1]
            except Exception as exc:
                raise RuntimeError(f"fold {f.fold_id} failed: {exc}") from exc
    return results


def load_run_models(run_dir):
    run_dir = Path(run_dir)
    config = ExperimentConfig.load(run_dir / "config.json")
    dataset = load_dataset(config.dataset)
    folds = folds_for(config, dataset)
    models = []
    for f in folds:
        model = build_model(config, f.fold_id)
        load_checkpoint(run_dir / f"fold{f.fold_id}" / f"fold{f.fold_id}.ckpt", model)
        models.append(model)
    return config, dataset, folds, models


def eval_run(run_dir, metric=None):
    config, dataset, folds, models = load_run_models(run_dir)
    kind = resolve_metric(config, dataset)
    if metric is not None and metric != kind:
        raise ValueError(f"metric {metric!r} requested on a {dataset.target_kind} dataset")
    report = evaluate(models, folds, dataset, kind, config.paper_literal_gaze_vector)
    Path(run_dir, "report.json").write_text(report.to_json())
    Path(run_dir, "report.csv").write_text(report.to_csv())
    return report


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def _run_cell(config, run_dir):
    dataset = load_dataset(config.dataset)
    kind = resolve_metric(config, dataset)
    folds = folds_for(config, dataset)
    models, lambda_change = [], 0.0
    for f in folds:
        model = build_model(config, f.fold_id)
        before = {n: model.parameters()[n].data.copy() for n in model.subset_lambda_names()}
        fit(model, dataset, dataset.indices_for_subjects(f.train_subjects), config, fold_id=f.fold_id,
            log_path=None if run_dir is None else _fold_log(run_dir, f.fold_id))
        after = model.parameters()
        for n, v in before.items():
            lambda_change = max(lambda_change, float(np.abs(after[n].data - v).max()))
        models.append(model)
    report = evaluate(models, folds, dataset, kind, config.paper_literal_gaze_vector)
    return report, models[0].num_parameters(), lambda_change


def _fold_log(run_dir, fold_id):
    p = Path(run_dir) / f"fold{fold_id}"
    p.mkdir(parents=True, exist_ok=True)
    (p / "steps.jsonl").write_text("")
    return p / "steps.jsonl"


def sweep(base, nus=None, archs=None, seeds=1, out_dir=None, label_fn=None):
    """Train/evaluate each configuration for ``seeds`` seeds sharing the base seed sequence.

    Returns a list of rows: label, nu, arch, mean, std, per-seed errors,
    parameter count and the largest change of any subset mixing weight.
    """
    if not nus and not archs:
        raise ValueError("sweep needs at least one nu value or architecture preset")
    cells = []
    for nu in nus or []:
        cells.append((f"nu={nu:g}", nu, None))
    for arch in archs or []:
        cells.append((arch, base.nu, arch))
    rows = []
    for label, nu, arch in cells:
        errs, n_params, max_change = [], None, 0.0
        for s in range(seeds):
            cfg = ExperimentConfig.from_dict(base.to_dict())
            cfg.nu, cfg.seed = nu, base.seed + s
            if arch is not None:
                ref = base.branches[0]
                cfg.branches = branch_configs_from_preset(
                    arch, crop_size=ref.crop_size, heatmap_size=ref.heatmap_size,
                    conv_channels=ref.conv_channels, fc_widths=ref.fc_widths, eyes=ref.eyes,
                    gaussian_sigma=ref.gaussian_sigma, gaussian_scale=ref.gaussian_scale)
            cfg.validate()
            cell_dir = None
            if out_dir is not None:
                cell_dir = Path(out_dir) / _slug(label) / f"seed{cfg.seed}"
                write_run_header(cfg, cell_dir)
            report, n_params, change = _run_cell(cfg, cell_dir)
            if cell_dir is not None:
                (cell_dir / "report.json").write_text(report.to_json())
            errs.append(report.overall_mean)
            max_change = max(max_change, change)
            log.info("sweep %s seed %d: %.4f", label, cfg.seed, report.overall_mean)
        rows.append({
            "label": label, "nu": nu, "arch": arch or "+".join(b.kind for b in base.branches),
            "mean": float(np.mean(errs)), "std": float(np.std(errs)), "errors": errs,
            "params": int(n_params), "subset_lambda_max_change": max_change,
        })
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        Path(out_dir, "sweep.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
        Path(out_dir, "sweep.csv").write_text(format_table(rows, csv=True))
    return rows


def _slug(label):
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in label)


def format_table(rows, csv=False):
    if csv:
        lines = ["config,nu,arch,err_mean,err_std,n_seeds,params,subset_lambda_max_change"]
        for r in rows:
            lines.append(f"{r['label']},{r['nu']:g},{r['arch']},{r['mean']:.6f},{r['std']:.6f},"
                         f"{len(r['errors'])},{r['params']},{r['subset_lambda_max_change']:.6g}")
        return "\n".join(lines) + "\n"
    head = f"{'config':<24}{'err (mean±std)':>22}{'#params':>12}{'max dλ^I':>12}"
    lines = [head, "-" * len(head)]
    for r in rows:
        cell = f"{r['mean']:.3f} ± {r['std']:.3f}"
        lines.append(f"{r['label']:<24}{cell:>22}{r['params']:>12}{r['subset_lambda_max_change']:>12.3g}")
    return "\n".join(lines)
