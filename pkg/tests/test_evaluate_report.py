"""End-to-end evaluation and report generation on a tiny trained model."""

import csv
import filecmp
import os
import shutil

import numpy as np
import pytest
import torch

from oracles import chamfer_bidirectional_brute
from wsbvib.config import RunConfig
from wsbvib.core import ShapeModel, read_point_set
from wsbvib.errors import DataError, MissingFileError
from wsbvib.evaluation import evaluate
from wsbvib.losses import LossConfig
from wsbvib.network import NetworkConfig, build_model, save_checkpoint
from wsbvib.report import export_mode_shapes, load_run, report
from wsbvib.synth import CohortConfig, generate_cohort, load_manifest
from wsbvib.training import train
from wsbvib.uncertainty import pearson_r, read_pearson_r

RES = (12, 12, 12)
EVAL_KW = dict(max_modes=4, specificity_samples=10, specificity_clouds=4,
               cloud_subsample=32)


def tiny_run_config(manifest, out_dir, **overrides):
    model = NetworkConfig(latent_dim=6, m_out=16, input_resolution=RES,
                          conv_channels=(4, 8), dense_widths=(24, 12),
                          decoder_widths=(24, 48))
    loss = LossConfig(burnin_epochs=1, ramp_epochs=1, n_latent_samples_train=2)
    base = dict(manifest=manifest, out_dir=str(out_dir), model=model, loss=loss,
                learning_rate=1e-3, batch_size=4, max_epochs=3, seed=21,
                mode="bvib", supervision="cloud",
                infer_latent_samples=3, infer_mask_samples=2)
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Cohort, one BVIB-cloud and one VIB-pdm training, both evaluated."""
    root = tmp_path_factory.mktemp("pipeline")
    cohort_dir = root / "cohort"
    generate_cohort(CohortConfig(
        n_train=6, n_val=2, n_test=3, n_shape_outliers=1, n_image_outliers=1,
        resolution=RES, subdivisions=1, m_cloud=48, seed=33,
        out_dir=str(cohort_dir)))
    manifest = str(cohort_dir / "manifest.txt")

    bvib = train(tiny_run_config(manifest, root / "train_bvib"))
    vib = train(tiny_run_config(manifest, root / "train_vib", mode="vib",
                                supervision="pdm"))
    eval_bvib = evaluate(bvib.best_checkpoint, manifest, str(root / "eval_bvib"),
                         **EVAL_KW)
    eval_vib = evaluate(vib.best_checkpoint, manifest, str(root / "eval_vib"),
                        **EVAL_KW)
    return {"root": root, "manifest": manifest, "bvib": bvib, "vib": vib,
            "eval_bvib": eval_bvib, "eval_vib": eval_vib}


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(ln for ln in f if not ln.startswith("#")))


class TestEvaluate:
    def test_outputs_exist(self, pipeline):
        res = pipeline["eval_bvib"]
        for path in (res.per_sample_csv, res.uncertainty_csv, res.pointwise_csv,
                     res.ssm_csv, res.outliers_csv, res.meta_path):
            assert os.path.isfile(path)
        expected = {s.id for s in load_manifest(pipeline["manifest"])
                    if s.split != "val"}
        predicted = {f[:-4] for f in os.listdir(res.predictions_dir)}
        assert predicted == expected

    def test_same_seed_identical_csvs(self, pipeline):
        res = pipeline["eval_bvib"]
        repeat = evaluate(pipeline["bvib"].best_checkpoint, pipeline["manifest"],
                          str(pipeline["root"] / "eval_bvib_repeat"), **EVAL_KW)
        for a, b in ((res.per_sample_csv, repeat.per_sample_csv),
                     (res.uncertainty_csv, repeat.uncertainty_csv),
                     (res.pointwise_csv, repeat.pointwise_csv),
                     (res.ssm_csv, repeat.ssm_csv),
                     (res.outliers_csv, repeat.outliers_csv)):
            assert filecmp.cmp(a, b, shallow=False), f"{a} differs from {b}"

    def test_vib_epistemic_identically_zero(self, pipeline):
        rows = read_rows(pipeline["eval_vib"].uncertainty_csv)
        assert rows
        assert all(float(r["mean_epistemic_sd"]) == 0.0 for r in rows)

    def test_bvib_epistemic_positive(self, pipeline):
        rows = read_rows(pipeline["eval_bvib"].uncertainty_csv)
        assert all(float(r["mean_epistemic_sd"]) > 0.0 for r in rows)

    def test_cd_matches_brute_force_on_emitted_predictions(self, pipeline):
        res = pipeline["eval_bvib"]
        samples = {s.id: s for s in load_manifest(pipeline["manifest"])}
        for row in read_rows(res.per_sample_csv):
            pred = read_point_set(
                os.path.join(res.predictions_dir, row["sample_id"] + ".txt"))
            cloud = read_point_set(samples[row["sample_id"]].cloud_path)
            brute = chamfer_bidirectional_brute(pred.points, cloud.points)
            assert float(row["cd"]) == pytest.approx(brute, abs=1e-6)

    def test_uncertainty_columns_consistent(self, pipeline):
        # the total column averages per-point sqrt(ale + epi), which is
        # bracketed by the averaged component columns
        for row in read_rows(pipeline["eval_bvib"].uncertainty_csv):
            ale = float(row["mean_aleatoric_sd"])
            epi = float(row["mean_epistemic_sd"])
            tot = float(row["mean_total_sd"])
            assert max(ale, epi) <= tot * (1 + 1e-9)
            assert tot <= (ale + epi) * (1 + 1e-9)

    def test_pearson_comment_matches_pointwise_recompute(self, pipeline):
        res = pipeline["eval_bvib"]
        test_ids = {r["sample_id"] for r in read_rows(res.per_sample_csv)
                    if r["split"] == "test"}
        pts = [(float(r["sd"]), float(r["p2s"]))
               for r in read_rows(res.pointwise_csv) if r["sample_id"] in test_ids]
        arr = np.array(pts)
        assert read_pearson_r(res.uncertainty_csv) == pytest.approx(
            pearson_r(arr[:, 0], arr[:, 1]), abs=1e-9)

    def test_outlier_scores_cover_all_samples(self, pipeline):
        res = pipeline["eval_bvib"]
        rows = read_rows(res.outliers_csv)
        n_expected = len([s for s in load_manifest(pipeline["manifest"])
                          if s.split != "val"])
        assert len(rows) == n_expected
        for row in rows:
            assert float(row["image_degree"]) >= 0.0
            assert float(row["shape_degree"]) >= 0.0

    def test_ssm_curves_present(self, pipeline):
        res = pipeline["eval_bvib"]
        names = {r["metric"] for r in read_rows(res.ssm_csv)}
        for required in ("compactness", "generalization", "specificity",
                         "compactness_auc", "mapping_error",
                         "gt_correspondence_error"):
            assert required in names

    def test_val_split_selector(self, pipeline):
        res = evaluate(pipeline["bvib"].best_checkpoint, pipeline["manifest"],
                       str(pipeline["root"] / "eval_val"), split="val", **EVAL_KW)
        splits = {r["split"] for r in read_rows(res.per_sample_csv)}
        assert "val" in splits and "test" not in splits

    def test_unknown_split_rejected(self, pipeline):
        with pytest.raises(DataError, match="split"):
            evaluate(pipeline["bvib"].best_checkpoint, pipeline["manifest"],
                     str(pipeline["root"] / "eval_bad"), split="holdout")

    def test_missing_gt_files_skip_gt_metrics_with_warning(self, pipeline,
                                                           tmp_path):
        text = open(pipeline["manifest"]).read().replace("gt=gt/", "gt=gt/absent_")
        doctored = tmp_path / "manifest.txt"
        doctored.write_text(text)
        cohort_dir = os.path.dirname(pipeline["manifest"])
        for sub in ("volumes", "clouds", "meshes", "gt"):
            os.symlink(os.path.join(cohort_dir, sub), tmp_path / sub)
        res = evaluate(pipeline["bvib"].best_checkpoint, str(doctored),
                       str(tmp_path / "eval"), **EVAL_KW)
        assert res.gt_error is None
        assert res.warnings
        names = {r["metric"] for r in read_rows(res.ssm_csv)}
        assert "gt_correspondence_error" not in names
        meta = open(res.meta_path).read()
        assert "gt_metrics=skipped" in meta

    def test_checkpoint_without_run_metadata_rejected(self, pipeline, tmp_path):
        model = build_model(NetworkConfig(
            latent_dim=6, m_out=16, input_resolution=RES, conv_channels=(4, 8),
            dense_widths=(24, 12), decoder_widths=(24, 48)), seed=0)
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
        path = str(tmp_path / "bare.pt")
        save_checkpoint(path, model, optimizer, extra={})
        with pytest.raises(DataError, match="metadata"):
            evaluate(path, pipeline["manifest"], str(tmp_path / "eval"))

    def test_missing_checkpoint(self, pipeline, tmp_path):
        with pytest.raises(MissingFileError):
            evaluate(str(tmp_path / "none.pt"), pipeline["manifest"],
                     str(tmp_path / "eval"))


@pytest.fixture(scope="module")
def built(pipeline):
    out = pipeline["root"] / "report"
    return report([pipeline["eval_bvib"].out_dir,
                   pipeline["eval_vib"].out_dir], str(out))


class TestReport:
    def test_all_figures_written(self, built):
        assert len(built.figures) >= 6
        for path in built.figures:
            assert os.path.getsize(path) > 5_000, path

    def test_single_run_report(self, pipeline, tmp_path):
        result = report([pipeline["eval_bvib"].out_dir], str(tmp_path / "rep"))
        assert len(result.summary_rows) == 1
        for path in result.figures:
            assert os.path.isfile(path)

    def test_summary_table(self, built, pipeline):
        assert len(built.summary_rows) == 2
        rows = read_rows(built.summary_csv)
        assert [r["run"] for r in rows] == ["eval_bvib", "eval_vib"]
        for row in rows:
            assert int(row["n_test"]) == 3
            assert float(row["mean_test_cd"]) > 0.0
        text = open(built.summary_txt).read().splitlines()
        assert len(text) == 3

    def test_annotated_r_matches_uncertainty_csv(self, built, pipeline):
        by_run = {r["run"]: r for r in built.summary_rows}
        for key in ("eval_bvib", "eval_vib"):
            csv_value = read_pearson_r(
                os.path.join(pipeline[key].out_dir, "uncertainty.csv"))
            assert by_run[key]["pearson_r_test"] == pytest.approx(csv_value,
                                                                  abs=1e-9)
            assert load_run(pipeline[key].out_dir).r_test == pytest.approx(
                csv_value, abs=1e-9)

    def test_zero_sd_mode_export_equals_mean(self, built, tmp_path):
        mean = np.arange(12, dtype=np.float64)
        eigenvectors = np.eye(12)[:, :3]
        model = ShapeModel(mean_shape=mean, eigenvectors=eigenvectors,
                           eigenvalues=np.array([4.0, 2.0, 1.0]))
        paths = export_mode_shapes(model, str(tmp_path / "modes"), modes=(1, 2))
        zero = [p for p in paths if "sd+0.00" in p]
        assert len(zero) == 2
        for path in zero:
            assert np.array_equal(read_point_set(path).points.ravel(), mean)
        plus = read_point_set(str(tmp_path / "modes/mode1_sd+1.50.txt")).points
        expected = mean + 1.5 * np.sqrt(4.0) * np.eye(12)[:, 0]
        assert np.allclose(plus.ravel(), expected)

    def test_report_mode_files_on_disk(self, built):
        for mdir in built.mode_dirs.values():
            files = os.listdir(mdir)
            assert any(f.startswith("mode1_") for f in files)
            zero = [f for f in files if "sd+0.00" in f]
            assert zero

    def test_missing_column_rejected(self, pipeline, tmp_path):
        broken = tmp_path / "broken_run"
        shutil.copytree(pipeline["eval_bvib"].out_dir, broken)
        path = broken / "per_sample.csv"
        text = path.read_text().replace("cd", "chamfer", 1)
        path.write_text(text)
        with pytest.raises(DataError, match="missing required columns"):
            report([str(broken)], str(tmp_path / "rep"))

    def test_missing_run_dir_rejected(self, tmp_path):
        with pytest.raises(MissingFileError):
            report([str(tmp_path / "absent")], str(tmp_path / "rep"))

    def test_empty_run_list_rejected(self, tmp_path):
        with pytest.raises(DataError):
            report([], str(tmp_path / "rep"))
