"""Checkpoint evaluation: per-sample metrics, SSM suite, outlier degrees.

Predictions are made for the training split (needed to fit the shape model
and the outlier reference distributions), the selected evaluation split,
and both outlier splits. Every CSV value is derived from seed streams, so
evaluating the same checkpoint twice yields identical files.
"""

from __future__ import annotations

import csv
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .core import (
    SPLITS,
    PointSet,
    read_mesh,
    read_point_set,
    read_volume,
    write_point_set,
)
from .errors import DataError, IOFormatError, MissingFileError
from .losses import chamfer_bidirectional
from .network import load_checkpoint
from .rng import np_rng
from .ssm import (
    compactness,
    farthest_point_indices,
    fit_shape_model,
    generalization,
    gt_correspondence_error,
    mapping_error,
    point_to_surface,
    specificity,
    write_ssm_metrics_csv,
)
from .synth import load_manifest
from .uncertainty import (
    calibration_report,
    fit_outlier_model,
    image_features,
    write_pointwise_csv,
    write_uncertainty_csv,
)

_G = "%.10g"


@dataclass
class EvalResult:
    out_dir: str
    per_sample_csv: str
    uncertainty_csv: str
    pointwise_csv: str
    ssm_csv: str
    outliers_csv: str
    meta_path: str
    predictions_dir: str
    r_test: float
    mean_cd: dict
    mean_p2s: dict
    compactness_auc: float
    mapping_error: float
    gt_error: float | None
    warnings: list = field(default_factory=list)


def _require_run_metadata(extra: dict) -> dict:
    run = extra.get("run_config")
    if not isinstance(run, dict) or "train.supervision" not in run:
        raise DataError("checkpoint is missing its training run metadata")
    return run


def evaluate(checkpoint_path: str, manifest_path: str, out_dir: str,
             split: str = "test", seed: int | None = None, max_modes: int = 8,
             specificity_samples: int = 100, specificity_clouds: int = 50,
             cloud_subsample: int = 256, mapping_k: int = 10,
             mapping_pairs: int = 100) -> EvalResult:
    """Evaluate a trained checkpoint against a cohort manifest."""
    if split not in SPLITS:
        raise DataError(f"split must be one of {SPLITS}, got {split!r}")
    model, payload = load_checkpoint(checkpoint_path)
    run = _require_run_metadata(payload["extra"])
    mode = run["train.mode"]
    supervision = run["train.supervision"]
    s_lat = int(run["train.infer_latent_samples"])
    d_mask = int(run["train.infer_mask_samples"])
    if seed is None:
        seed = int(run["train.seed"])
    m_out = model.config.m_out

    samples = load_manifest(manifest_path)
    wanted = {"train", split, "outlier-shape", "outlier-image"}
    chosen = [s for s in samples if s.split in wanted]
    if not any(s.split == split for s in chosen):
        raise DataError(f"split {split!r} is empty in {manifest_path}")
    if not any(s.split == "train" for s in chosen):
        raise DataError("manifest has no training samples to calibrate against")

    os.makedirs(out_dir, exist_ok=True)
    pred_dir = os.path.join(out_dir, "predictions")
    os.makedirs(pred_dir, exist_ok=True)

    ids, splits, preds, cds, p2s_list, clouds, img_feats = [], [], [], [], [], [], []
    for i, sample in enumerate(chosen):
        volume = read_volume(sample.volume_path)
        pred = model.predict(volume, n_latent_samples=s_lat, n_mask_samples=d_mask,
                             rng=np_rng(seed, "eval-predict", i))
        cloud = read_point_set(sample.cloud_path)
        mesh = read_mesh(sample.mesh_path)
        ids.append(sample.id)
        splits.append(sample.split)
        preds.append(pred)
        clouds.append(cloud.points)
        cds.append(float(chamfer_bidirectional(pred.mean, cloud)))
        p2s_list.append(point_to_surface(pred.mean, mesh))
        img_feats.append(image_features(volume))
        write_point_set(PointSet(pred.mean, ordered=True),
                        os.path.join(pred_dir, f"{sample.id}.txt"))

    warnings: list = []
    train_idx = [i for i, sp in enumerate(splits) if sp == "train"]
    eval_idx = [i for i, sp in enumerate(splits) if sp == split]

    per_sample_csv = os.path.join(out_dir, "per_sample.csv")
    with open(per_sample_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "split", "cd", "mean_p2s"])
        for i, sid in enumerate(ids):
            writer.writerow([sid, splits[i], _G % cds[i], _G % p2s_list[i].mean()])

    report = calibration_report(ids, splits, preds, p2s_list)
    uncertainty_csv = os.path.join(out_dir, "uncertainty.csv")
    pointwise_csv = os.path.join(out_dir, "pointwise.csv")
    write_uncertainty_csv(report, uncertainty_csv)
    write_pointwise_csv(report, pointwise_csv)

    # shape statistics from predicted training correspondences
    train_preds = [preds[i].mean for i in train_idx]
    eval_preds = [preds[i].mean for i in eval_idx]
    shape_model = fit_shape_model(train_preds)
    compact = compactness(shape_model)
    m_values = tuple(range(1, min(max_modes, shape_model.n_modes) + 1))
    gen = generalization(shape_model, eval_preds, [clouds[i] for i in eval_idx],
                         m_values=m_values)
    spec_clouds = []
    for j, i in enumerate(train_idx[:specificity_clouds]):
        pts = clouds[i]
        if pts.shape[0] > cloud_subsample:
            keep = np_rng(seed, "eval-spec-cloud", j).choice(
                pts.shape[0], size=cloud_subsample, replace=False)
            pts = pts[np.sort(keep)]
        spec_clouds.append(pts)
    spec = specificity(shape_model, spec_clouds, n_samples=specificity_samples,
                       rng=np_rng(seed, "eval-specificity"), m_values=m_values)
    map_err = mapping_error(eval_preds, k=min(mapping_k, m_out - 1),
                            n_pairs=mapping_pairs, rng=np_rng(seed, "eval-mapping"))

    gt_err = _gt_metrics(chosen, splits, eval_idx, train_idx, eval_preds,
                         payload["extra"], m_out, warnings)

    ssm_csv = os.path.join(out_dir, "ssm_metrics.csv")
    write_ssm_metrics_csv({"compactness": compact, "generalization": gen,
                           "specificity": spec}, ssm_csv)
    with open(ssm_csv, "a", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mapping_error", 0, _G % map_err])
        if gt_err is not None:
            writer.writerow(["gt_correspondence_error", 0, _G % gt_err])

    # outlier degrees relative to the training split
    image_model = fit_outlier_model(np.stack([img_feats[i] for i in train_idx]))
    pdm_model = fit_outlier_model(
        np.stack([p.reshape(-1) for p in train_preds]))
    outliers_csv = os.path.join(out_dir, "outliers.csv")
    with open(outliers_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "split", "image_degree", "shape_degree"])
        for i, sid in enumerate(ids):
            writer.writerow([sid, splits[i],
                             _G % image_model.score(img_feats[i]),
                             _G % pdm_model.score(preds[i].mean.reshape(-1))])

    mean_cd = {sp: float(np.mean([cds[i] for i, s in enumerate(splits) if s == sp]))
               for sp in sorted(set(splits))}
    mean_p2s = {sp: float(np.mean([p2s_list[i].mean()
                                   for i, s in enumerate(splits) if s == sp]))
                for sp in sorted(set(splits))}

    meta_path = os.path.join(out_dir, "eval_meta.txt")
    with open(meta_path, "w") as f:
        f.write(f"checkpoint={checkpoint_path}\n")
        f.write(f"manifest={manifest_path}\n")
        f.write(f"split={split}\n")
        f.write(f"mode={mode}\n")
        f.write(f"supervision={supervision}\n")
        f.write(f"seed={seed}\n")
        f.write(f"latent_samples={s_lat}\n")
        f.write(f"mask_samples={d_mask}\n")
        f.write(f"m_out={m_out}\n")
        f.write(f"n_predicted={len(ids)}\n")
        f.write(f"pearson_r_test={_G % report.r_test}\n")
        f.write("gt_metrics=" + ("ok" if gt_err is not None
                                 else "skipped: " + "; ".join(warnings)) + "\n")
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)

    return EvalResult(out_dir=out_dir, per_sample_csv=per_sample_csv,
                      uncertainty_csv=uncertainty_csv, pointwise_csv=pointwise_csv,
                      ssm_csv=ssm_csv, outliers_csv=outliers_csv, meta_path=meta_path,
                      predictions_dir=pred_dir, r_test=report.r_test,
                      mean_cd=mean_cd, mean_p2s=mean_p2s,
                      compactness_auc=compact.auc, mapping_error=map_err,
                      gt_error=gt_err, warnings=warnings)


def _gt_metrics(chosen, splits, eval_idx, train_idx, eval_preds, extra,
                m_out, warnings) -> float | None:
    """Correspondence error vs synthetic ground truth, or None with a warning."""
    eval_samples = [chosen[i] for i in eval_idx]
    if any(s.gt_path is None for s in eval_samples):
        warnings.append("ground-truth correspondence files not listed; gt metrics skipped")
        return None
    try:
        subset = extra.get("gt_subset")
        if subset is not None:
            subset = np.asarray(subset, dtype=np.int64)
        else:
            train_samples = [chosen[i] for i in train_idx]
            if any(s.gt_path is None for s in train_samples):
                warnings.append("training ground truth missing; gt metrics skipped")
                return None
            gts = [read_point_set(s.gt_path).points for s in train_samples]
            mean_gt = np.mean(np.stack(gts), axis=0)
            if mean_gt.shape[0] < m_out:
                warnings.append(
                    f"ground truth has {mean_gt.shape[0]} points, model outputs "
                    f"{m_out}; gt metrics skipped")
                return None
            subset = farthest_point_indices(mean_gt, m_out)
        gt_eval = []
        for s in eval_samples:
            pts = read_point_set(s.gt_path).points
            if pts.shape[0] <= subset.max():
                warnings.append(f"{s.id}: ground truth too small; gt metrics skipped")
                return None
            gt_eval.append(pts[subset])
        return gt_correspondence_error(eval_preds, gt_eval)
    except (DataError, IOFormatError, MissingFileError) as exc:
        warnings.append(f"gt metrics skipped: {exc}")
        return None
