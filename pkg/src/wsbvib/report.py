"""Report generation: static figures, mode-shape exports, summary tables.

Consumes the CSV files one or more evaluation runs produced and writes
PNG figures plus a machine-readable summary. Everything is recomputed
from the files on disk so the report can run long after the evaluation.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .core import PointSet, ShapeModel, read_point_set, write_point_set
from .errors import DataError, MissingFileError
from .ssm import fit_shape_model, read_ssm_metrics_csv
from .uncertainty import read_pearson_r

_G = "%.10g"

SUMMARY_COLUMNS = ("run", "n_test", "mean_test_cd", "mean_test_p2s",
                   "pearson_r_test", "compactness_auc", "mapping_error",
                   "gt_correspondence_error")


@dataclass
class RunData:
    label: str
    path: str
    per_sample: list
    uncertainty: list
    r_test: float
    pointwise: list
    ssm: dict
    outliers: list


@dataclass
class ReportResult:
    out_dir: str
    figures: list
    mode_dirs: dict
    summary_csv: str
    summary_txt: str
    summary_rows: list


def _read_csv(path: str, required: tuple) -> list:
    try:
        with open(path, newline="") as f:
            lines = [ln for ln in f if not ln.startswith("#")]
    except FileNotFoundError:
        raise MissingFileError(f"required metric file not found: {path}")
    reader = csv.DictReader(lines)
    missing = [c for c in required if c not in (reader.fieldnames or [])]
    if missing:
        raise DataError(f"{path}: missing required columns {missing}")
    return list(reader)


def load_run(run_dir: str) -> RunData:
    per_sample = _read_csv(os.path.join(run_dir, "per_sample.csv"),
                           ("sample_id", "split", "cd", "mean_p2s"))
    uncertainty = _read_csv(os.path.join(run_dir, "uncertainty.csv"),
                            ("sample_id", "split", "mean_p2s", "mean_aleatoric_sd",
                             "mean_epistemic_sd", "mean_total_sd"))
    pointwise = _read_csv(os.path.join(run_dir, "pointwise.csv"),
                          ("sample_id", "point_index", "p2s", "sd"))
    ssm = read_ssm_metrics_csv(os.path.join(run_dir, "ssm_metrics.csv"))
    outliers = _read_csv(os.path.join(run_dir, "outliers.csv"),
                         ("sample_id", "split", "image_degree", "shape_degree"))
    return RunData(label=os.path.basename(os.path.normpath(run_dir)), path=run_dir,
                   per_sample=per_sample, uncertainty=uncertainty,
                   r_test=read_pearson_r(os.path.join(run_dir, "uncertainty.csv")),
                   pointwise=pointwise, ssm=ssm, outliers=outliers)


def _column(rows: list, name: str, split: str | None = None) -> np.ndarray:
    vals = [float(r[name]) for r in rows if split is None or r["split"] == split]
    return np.array(vals)


def export_mode_shapes(model: ShapeModel, out_dir: str, modes=(1, 2),
                       sds=(-1.5, 0.0, 1.5)) -> list:
    """Write mean +/- sd * sqrt(lambda) point files along the leading modes."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for m in modes:
        if m < 1 or m > model.n_modes:
            raise DataError(f"mode {m} out of range [1, {model.n_modes}]")
        direction = model.eigenvectors[:, m - 1] * np.sqrt(model.eigenvalues[m - 1])
        for sd in sds:
            shape = (model.mean_shape + sd * direction).reshape(-1, 3)
            path = os.path.join(out_dir, f"mode{m}_sd{sd:+.2f}.txt")
            write_point_set(PointSet(shape, ordered=True), path)
            paths.append(path)
    return paths


def _fit_prediction_model(run: RunData) -> ShapeModel:
    train_ids = [r["sample_id"] for r in run.per_sample if r["split"] == "train"]
    if len(train_ids) < 2:
        raise DataError(f"{run.path}: need at least 2 training predictions for modes")
    shapes = []
    for sid in train_ids:
        path = os.path.join(run.path, "predictions", f"{sid}.txt")
        shapes.append(read_point_set(path).points)
    return fit_shape_model(shapes)


def _split_order(rows: list) -> list:
    preferred = ["train", "val", "test", "outlier-shape", "outlier-image"]
    present = {r["split"] for r in rows}
    return [s for s in preferred if s in present] + sorted(present - set(preferred))


def _fig_error_boxes(runs: list, path: str) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, col, title in zip(axes, ("cd", "mean_p2s"),
                              ("bidirectional Chamfer", "point-to-surface")):
        data = [_column(r.per_sample, col, "test") for r in runs]
        ax.boxplot(data, tick_labels=[r.label for r in runs])
        ax.set_title(f"test {title}")
        ax.tick_params(axis="x", rotation=20)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_ssm_curves(runs: list, path: str) -> None:
    names = ("compactness", "generalization", "specificity")
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    for ax, name in zip(axes, names):
        for run in runs:
            rows = run.ssm.get(name, [])
            if rows:
                ms, vals = zip(*sorted(rows))
                ax.plot(ms, vals, marker="o", markersize=3, label=run.label)
        ax.set_title(name)
        ax.set_xlabel("modes")
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_modes(model: ShapeModel, path: str) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.2))
    mean = model.mean_shape.reshape(-1, 3)
    for ax, m in zip(axes, (1, 2)):
        direction = (model.eigenvectors[:, m - 1]
                     * np.sqrt(model.eigenvalues[m - 1])).reshape(-1, 3)
        ax.scatter(mean[:, 0], mean[:, 2], s=6, c="0.6", label="mean")
        ax.scatter(*(mean + 1.5 * direction)[:, [0, 2]].T, s=6, c="tab:red",
                   label="+1.5 sd")
        ax.scatter(*(mean - 1.5 * direction)[:, [0, 2]].T, s=6, c="tab:blue",
                   label="-1.5 sd")
        ax.set_title(f"mode {m}")
        ax.set_aspect("equal")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_calibration(runs: list, path: str) -> None:
    fig, axes = plt.subplots(1, len(runs), figsize=(4.5 * len(runs), 4),
                             squeeze=False)
    rng = np.random.default_rng(0)
    for ax, run in zip(axes[0], runs):
        test_ids = {r["sample_id"] for r in run.per_sample if r["split"] == "test"}
        pts = [(float(r["sd"]), float(r["p2s"])) for r in run.pointwise
               if r["sample_id"] in test_ids]
        if len(pts) > 4000:
            pts = [pts[i] for i in rng.choice(len(pts), 4000, replace=False)]
        arr = np.array(pts) if pts else np.zeros((0, 2))
        ax.scatter(arr[:, 0], arr[:, 1], s=3, alpha=0.3)
        ax.set_xlabel("predicted sd")
        ax.set_ylabel("point-to-surface error")
        ax.set_title(run.label)
        ax.annotate(f"r = {run.r_test:.3f}", xy=(0.05, 0.92),
                    xycoords="axes fraction")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_split_boxes(runs: list, path: str) -> None:
    fig, axes = plt.subplots(len(runs), 2, figsize=(10, 3.6 * len(runs)),
                             squeeze=False)
    for row, run in zip(axes, runs):
        order = [s for s in _split_order(run.per_sample) if s != "train"]
        cd = [_column(run.per_sample, "cd", s) for s in order]
        sd = [_column(run.uncertainty, "mean_total_sd", s) for s in order]
        row[0].boxplot(cd, tick_labels=order)
        row[0].set_title(f"{run.label}: CD by split")
        row[1].boxplot(sd, tick_labels=order)
        row[1].set_title(f"{run.label}: total uncertainty by split")
        for ax in row:
            ax.tick_params(axis="x", rotation=15)
            ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_outlier_scatter(runs: list, path: str) -> None:
    fig, axes = plt.subplots(1, len(runs), figsize=(4.8 * len(runs), 4.2),
                             squeeze=False)
    colors = {"test": "0.5", "val": "0.7", "train": "0.8",
              "outlier-shape": "tab:red", "outlier-image": "tab:orange"}
    for ax, run in zip(axes[0], runs):
        cd_by_id = {r["sample_id"]: float(r["cd"]) for r in run.per_sample}
        for row in run.uncertainty:
            if row["split"] == "train":
                continue
            sp = row["split"]
            outlier = sp.startswith("outlier")
            ax.scatter(float(row["mean_total_sd"]), cd_by_id[row["sample_id"]],
                       s=28 if outlier else 12, c=colors.get(sp, "0.5"),
                       marker="^" if outlier else "o",
                       edgecolors="black" if outlier else "none", linewidths=0.5)
        ax.set_xlabel("mean total uncertainty")
        ax.set_ylabel("bidirectional CD")
        ax.set_title(run.label)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _scalar(run: RunData, name: str):
    rows = run.ssm.get(name)
    return rows[0][1] if rows else None


def report(run_dirs: list, out_dir: str) -> ReportResult:
    """Build all figures and the summary table for one or more runs."""
    if not run_dirs:
        raise DataError("report needs at least one run directory")
    runs = [load_run(d) for d in run_dirs]
    os.makedirs(out_dir, exist_ok=True)

    figures = []
    for name, fn in (("fig_error_boxes.png", _fig_error_boxes),
                     ("fig_ssm_curves.png", _fig_ssm_curves),
                     ("fig_calibration_scatter.png", _fig_calibration),
                     ("fig_split_boxes.png", _fig_split_boxes),
                     ("fig_outlier_scatter.png", _fig_outlier_scatter)):
        path = os.path.join(out_dir, name)
        fn(runs, path)
        figures.append(path)

    mode_dirs = {}
    for run in runs:
        model = _fit_prediction_model(run)
        mdir = os.path.join(out_dir, f"modes_{run.label}")
        export_mode_shapes(model, mdir,
                           modes=(1, 2) if model.n_modes >= 2 else (1,))
        mode_dirs[run.label] = mdir
        fig_path = os.path.join(out_dir, f"fig_modes_{run.label}.png")
        _fig_modes(model, fig_path)
        figures.append(fig_path)

    summary_rows = []
    for run in runs:
        auc_rows = run.ssm.get("compactness_auc")
        gt = _scalar(run, "gt_correspondence_error")
        summary_rows.append({
            "run": run.label,
            "n_test": int(_column(run.per_sample, "cd", "test").shape[0]),
            "mean_test_cd": float(_column(run.per_sample, "cd", "test").mean()),
            "mean_test_p2s": float(_column(run.per_sample, "mean_p2s", "test").mean()),
            "pearson_r_test": run.r_test,
            "compactness_auc": auc_rows[0][1] if auc_rows else float("nan"),
            "mapping_error": _scalar(run, "mapping_error"),
            "gt_correspondence_error": gt if gt is not None else float("nan"),
        })

    summary_csv = os.path.join(out_dir, "summary.csv")
    with open(summary_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SUMMARY_COLUMNS)
        for row in summary_rows:
            writer.writerow([row["run"], row["n_test"]]
                            + [_G % row[c] for c in SUMMARY_COLUMNS[2:]])

    summary_txt = os.path.join(out_dir, "summary.txt")
    with open(summary_txt, "w") as f:
        width = max(len(r["run"]) for r in summary_rows) + 2
        f.write("run".ljust(width)
                + "  ".join(c.rjust(22) for c in SUMMARY_COLUMNS[1:]) + "\n")
        for row in summary_rows:
            cells = [f"{row['n_test']:22d}"]
            cells += [f"{row[c]:22.6g}" for c in SUMMARY_COLUMNS[2:]]
            f.write(row["run"].ljust(width) + "  ".join(cells) + "\n")

    return ReportResult(out_dir=out_dir, figures=figures, mode_dirs=mode_dirs,
                        summary_csv=summary_csv, summary_txt=summary_txt,
                        summary_rows=summary_rows)
