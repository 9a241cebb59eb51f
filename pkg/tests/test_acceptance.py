"""Acceptance gate: one test per criterion, shared full-scale run for 5-9.

The heavy fixture trains both supervision modes once on the default cohort;
criteria 5 through 9 read its evaluation outputs. Everything else is
self-contained and fast.
"""

import csv
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest
import torch
from scipy import stats

from oracles import central_difference, chamfer_bidirectional_brute, chamfer_one_way_brute
from wsbvib.config import RunConfig, write_config
from wsbvib.core import LatentGaussian, PointSet, read_point_set
from wsbvib.evaluation import evaluate
from wsbvib.losses import (
    LossConfig,
    chamfer_bidirectional,
    chamfer_one_way,
    gaussian_kl,
    nll_pc,
    spread_regularizer,
    vib_objective,
    bvib_objective,
)
from wsbvib.network import NetworkConfig, build_model
from wsbvib.ssm import compactness, farthest_point_indices, fit_shape_model, gt_correspondence_error
from wsbvib.synth import CohortConfig, generate_cohort, load_manifest
from wsbvib.training import train
from wsbvib.uncertainty import decompose, pearson_r

FULL_EPOCHS = 300


@pytest.fixture(scope="session")
def full_runs(tmp_path_factory):
    """Default cohort + BVIB training in both supervision modes + evaluations."""
    root = tmp_path_factory.mktemp("acceptance")
    generate_cohort(CohortConfig(seed=1, out_dir=str(root / "cohort")))
    manifest = str(root / "cohort" / "manifest.txt")
    out = {"manifest": manifest, "samples": load_manifest(manifest)}
    for supervision in ("cloud", "pdm"):
        cfg = RunConfig(manifest=manifest, out_dir=str(root / f"train_{supervision}"),
                        seed=1, mode="bvib", supervision=supervision,
                        max_epochs=FULL_EPOCHS, patience=50)
        result = train(cfg)
        out[supervision] = evaluate(result.best_checkpoint, manifest,
                                    str(root / f"eval_{supervision}"))
    return out


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(ln for ln in f if not ln.startswith("#")))


def load_predictions(eval_result, ids):
    return [read_point_set(os.path.join(eval_result.predictions_dir, f"{i}.txt")).points
            for i in ids]


def test_c01_chamfer_matches_brute_force_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(55)
    for _ in range(200):
        a = rng.standard_normal((int(rng.integers(1, 65)), 3))
        b = rng.standard_normal((int(rng.integers(1, 65)), 3))
        ours = float(chamfer_one_way(a, b))
        brute = chamfer_one_way_brute(a, b)
        assert abs(ours - brute) <= 1e-6 * max(1.0, abs(brute))
        ours_bi = float(chamfer_bidirectional(a, b))
        brute_bi = chamfer_bidirectional_brute(a, b)
        assert abs(ours_bi - brute_bi) <= 1e-6 * max(1.0, abs(brute_bi))
    assert time.perf_counter() - start < 10.0


def fd_check(fn, tensor, coords, step=1e-5, tol=1e-4):
    """Compare autograd against central differences at selected coordinates."""
    leaf = tensor.detach().clone().requires_grad_(True)
    value = fn(leaf)
    value.backward()
    grad = leaf.grad
    for idx in coords:
        def scalar(v):
            probe = leaf.detach().clone()
            probe[idx] = float(np.asarray(v).ravel()[0])
            return float(fn(probe))

        numeric = float(central_difference(
            scalar, [float(leaf.detach()[idx])], step=step)[0])
        analytic = float(grad[idx])
        scale = max(abs(numeric), abs(analytic), 1e-6)
        assert abs(numeric - analytic) / scale < tol, (fn, idx)


def test_c02_analytic_gradients_match_finite_differences():
    start = time.perf_counter()
    torch.set_default_dtype(torch.float64)
    try:
        rng = np.random.default_rng(56)
        cfg = LossConfig(burnin_epochs=0, ramp_epochs=1, n_latent_samples_train=2)
        for trial in range(20):
            m = int(rng.integers(4, 17))
            latent = int(rng.integers(2, 5))
            n = int(rng.integers(4, 17))
            y_cloud = PointSet(rng.standard_normal((n, 3)), ordered=False)
            coords = [(int(rng.integers(m)), int(rng.integers(3))) for _ in range(3)]

            mu = torch.tensor(rng.standard_normal((m, 3)))
            var = torch.tensor(np.exp(rng.uniform(-1, 1, size=m)))
            fd_check(lambda t: nll_pc(t, var, y_cloud), mu, coords)
            fd_check(lambda t: nll_pc(mu, t, y_cloud), var,
                     [int(rng.integers(m)) for _ in range(3)])
            fd_check(lambda t: spread_regularizer(y_cloud, t), mu, coords)

            samples = torch.tensor(rng.standard_normal((3, m, 3)))
            q = LatentGaussian(torch.tensor(rng.standard_normal(latent)),
                               torch.tensor(rng.uniform(-1, 1, size=latent)))
            sample_coords = [(int(rng.integers(3)), int(rng.integers(m)),
                              int(rng.integers(3))) for _ in range(3)]
            fd_check(lambda t: vib_objective(t, q, y_cloud, cfg, 5, "cloud").total,
                     samples, sample_coords)
            fd_check(lambda t: vib_objective(
                samples, LatentGaussian(t, q.log_var), y_cloud, cfg, 5,
                "cloud").total, q.mu, [int(rng.integers(latent))])

            grid = torch.tensor(rng.standard_normal((2, 3, m, 3)))
            grid_coords = [(int(rng.integers(2)), int(rng.integers(3)),
                            int(rng.integers(m)), int(rng.integers(3)))
                           for _ in range(3)]
            wk = torch.tensor(0.37)
            fd_check(lambda t: bvib_objective(t, q, wk, y_cloud, cfg, 5,
                                              "cloud").total, grid, grid_coords)

        model = build_model(NetworkConfig(
            latent_dim=4, m_out=8, input_resolution=(8, 8, 8),
            conv_channels=(4,), dense_widths=(16,), decoder_widths=(16,)),
            seed=3).double()
        model.set_dataset_size(10)
        for p_idx in range(2):
            logits = model.dropout_logits[p_idx]
            value = model.weight_kl()
            model.zero_grad()
            value.backward()
            analytic = float(logits.grad)

            def scalar(v):
                old = float(logits.detach())
                with torch.no_grad():
                    logits.fill_(float(np.asarray(v).ravel()[0]))
                out = float(model.weight_kl())
                with torch.no_grad():
                    logits.fill_(old)
                return out

            numeric = float(central_difference(
                scalar, [float(logits.detach())], step=1e-5)[0])
            scale = max(abs(numeric), abs(analytic), 1e-6)
            assert abs(numeric - analytic) / scale < 1e-4
    finally:
        torch.set_default_dtype(torch.float32)
    assert time.perf_counter() - start < 60.0


def test_c03_spread_term_prevents_collapse():
    start = time.perf_counter()
    torch.manual_seed(57)
    rng = np.random.default_rng(57)
    sphere = rng.standard_normal((256, 3))
    sphere /= np.linalg.norm(sphere, axis=1, keepdims=True)
    y = torch.tensor(sphere, dtype=torch.float64)

    # alpha = 0: the fully collapsed configuration survives optimization
    collapsed = y[0].repeat(128, 1).clone().requires_grad_(True)
    opt = torch.optim.Adam([collapsed], lr=0.02)
    for _ in range(200):
        opt.zero_grad()
        chamfer_one_way(collapsed, y).backward()
        opt.step()
    fwd = float(chamfer_one_way(collapsed.detach(), y))
    bwd = float(chamfer_one_way(y, collapsed.detach()))
    assert fwd < 1e-3
    assert bwd > 0.5

    # alpha = 1: the spread term pulls the optimum back over the whole cloud
    mu = torch.tensor(rng.normal(scale=0.05, size=(128, 3))).requires_grad_(True)
    opt = torch.optim.Adam([mu], lr=0.05)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, 2000, eta_min=0.002)
    for _ in range(2000):
        opt.zero_grad()
        loss = chamfer_one_way(mu, y) + 1.0 * chamfer_one_way(y, mu)
        loss.backward()
        opt.step()
        sched.step()
    assert float(chamfer_one_way(y, mu.detach())) < 0.05
    assert time.perf_counter() - start < 120.0


def test_c04_variance_decomposition_identity():
    start = time.perf_counter()
    rng = np.random.default_rng(58)
    for _ in range(100):
        d = int(rng.integers(2, 9))
        s = int(rng.integers(2, 9))
        m = int(rng.integers(1, 12))
        grid = rng.standard_normal((d, s, m, 3))
        _, ale, epi = decompose(grid)
        grand = grid.reshape(d * s, m, 3).var(axis=0).mean(axis=-1)
        assert np.all(np.abs(ale + epi - grand) < 1e-10)
    for _ in range(20):
        grid = rng.standard_normal((1, int(rng.integers(2, 9)), 5, 3))
        _, _, epi = decompose(grid)
        assert np.all(epi == 0.0)
    assert time.perf_counter() - start < 5.0


def test_c05_weak_supervision_matches_full_supervision(full_runs):
    cd_cloud = full_runs["cloud"].mean_cd["test"]
    cd_pdm = full_runs["pdm"].mean_cd["test"]
    p2s_cloud = full_runs["cloud"].mean_p2s["test"]
    p2s_pdm = full_runs["pdm"].mean_p2s["test"]
    assert abs(cd_cloud - cd_pdm) <= 0.25 * cd_pdm, (cd_cloud, cd_pdm)
    assert abs(p2s_cloud - p2s_pdm) <= 0.30 * p2s_pdm, (p2s_cloud, p2s_pdm)


def test_c06_correspondence_emerges_without_labels(full_runs):
    by_id = {s.id: s for s in full_runs["samples"]}
    train_ids = [s.id for s in full_runs["samples"] if s.split == "train"]
    test_ids = [s.id for s in full_runs["samples"] if s.split == "test"]
    ev = full_runs["cloud"]
    train_preds = load_predictions(ev, train_ids)
    test_preds = load_predictions(ev, test_ids)

    gt_train = [read_point_set(by_id[i].gt_path).points for i in train_ids]
    subset = farthest_point_indices(np.mean(np.stack(gt_train), axis=0), 256)
    gt_test = [read_point_set(by_id[i].gt_path).points[subset] for i in test_ids]

    err = gt_correspondence_error(test_preds, gt_test)
    rng = np.random.default_rng(59)
    permuted = [p[rng.permutation(p.shape[0])] for p in test_preds]
    err_permuted = gt_correspondence_error(permuted, gt_test)
    assert err_permuted >= 5.0 * err, (err, err_permuted)

    auc = compactness(fit_shape_model(train_preds)).auc
    train_permuted = [p[rng.permutation(p.shape[0])] for p in train_preds]
    auc_permuted = compactness(fit_shape_model(train_permuted)).auc
    assert auc > auc_permuted, (auc, auc_permuted)


def test_c07_leading_modes_recover_generative_parameters(full_runs):
    by_id = {s.id: s for s in full_runs["samples"]}
    train_ids = [s.id for s in full_runs["samples"] if s.split == "train"]
    test_ids = [s.id for s in full_runs["samples"] if s.split == "test"]
    ev = full_runs["cloud"]
    model = fit_shape_model(load_predictions(ev, train_ids))
    flat = np.stack([p.ravel() for p in load_predictions(ev, test_ids)])
    coef = (flat - model.mean_shape) @ model.eigenvectors[:, :2]
    params = np.array([[by_id[i].shape_params["global_scale"],
                        by_id[i].shape_params["appendage_length"]]
                       for i in test_ids])
    r = np.array([[abs(pearson_r(coef[:, mi], params[:, pi]))
                   for pi in range(2)] for mi in range(2)])
    straight = min(r[0, 0], r[1, 1])
    swapped = min(r[0, 1], r[1, 0])
    assert max(straight, swapped) > 0.8, r


def test_c08_pointwise_uncertainty_correlates_with_error(full_runs):
    for supervision in ("cloud", "pdm"):
        r = full_runs[supervision].r_test
        assert r > 0.2, (supervision, r)


def test_c09_outliers_are_identifiable(full_runs):
    ev = full_runs["cloud"]
    uncertainty = read_rows(ev.uncertainty_csv)
    total = {split: [float(r["mean_total_sd"]) for r in uncertainty
                     if r["split"] == split]
             for split in ("test", "outlier-shape", "outlier-image")}
    for split in ("outlier-shape", "outlier-image"):
        res = stats.mannwhitneyu(total[split], total["test"],
                                 alternative="greater")
        assert res.pvalue < 0.05, (split, res.pvalue)

    degrees = read_rows(ev.outliers_csv)
    for column, split in (("image_degree", "outlier-image"),
                          ("shape_degree", "outlier-shape")):
        inlier = [float(r[column]) for r in degrees if r["split"] == "test"]
        outlier = [float(r[column]) for r in degrees if r["split"] == split]
        cutoff = np.percentile(inlier, 90)
        assert outlier
        assert min(outlier) > cutoff, (column, min(outlier), cutoff)


def test_c10_closed_form_unit_values():
    start = time.perf_counter()
    # latent KL against hand-computed values
    zero = LatentGaussian(np.zeros(3), np.zeros(3))
    assert float(gaussian_kl(zero)) == pytest.approx(0.0, abs=1e-6)
    assert float(gaussian_kl(LatentGaussian(np.array([1.0]), np.array([0.0])))
                 ) == pytest.approx(0.5, abs=1e-6)
    assert float(gaussian_kl(LatentGaussian(np.array([0.0]),
                                            np.array([math.log(4.0)])))
                 ) == pytest.approx(0.5 * (4 - math.log(4) - 1), abs=1e-6)

    # cloud NLL: exact hits, shared unit variance, per-point optimum
    rng = np.random.default_rng(60)
    y = rng.standard_normal((12, 3))
    cloud = PointSet(y, ordered=False)
    assert float(nll_pc(y[:6], 1.0, cloud)) == pytest.approx(0.0, abs=1e-6)
    mu = rng.standard_normal((8, 3)) + 4.0
    cd = float(chamfer_one_way(mu, y))
    assert float(nll_pc(mu, 1.0, cloud)) == pytest.approx(cd / 2.0, abs=1e-6)
    resid = np.array([np.min(((p - y) ** 2).sum(axis=1)) for p in mu])
    optimum = float(nll_pc(mu, resid, cloud))
    assert optimum == pytest.approx(0.5 + 0.5 * np.log(resid).mean(), abs=1e-6)
    for bump in (0.5, 2.0):
        assert float(nll_pc(mu, resid * bump, cloud)) > optimum

    # concrete relaxation fixed points and Monte Carlo mean
    from wsbvib.network import concrete_mask
    for t in (0.05, 0.1, 1.0):
        mask = concrete_mask(torch.tensor(0.5), t, torch.tensor(0.5))
        assert float(mask) == pytest.approx(0.5, abs=1e-6)
    tiny = concrete_mask(torch.tensor(1e-6), 0.05, torch.tensor(0.3))
    assert float(tiny) == pytest.approx(1.0, abs=1e-3)
    u = torch.rand(100_000, generator=torch.Generator().manual_seed(0))
    for p in (0.1, 0.3, 0.5):
        mean = float(concrete_mask(torch.tensor(p), 0.1, u).mean())
        assert abs(mean - (1 - p)) < 0.01

    # weight KL with zeroed weights reduces to the entropy term
    model = build_model(NetworkConfig(
        latent_dim=4, m_out=8, input_resolution=(8, 8, 8), conv_channels=(4,),
        dense_widths=(16,), decoder_widths=(16,)), seed=0)
    model.set_dataset_size(10)
    with torch.no_grad():
        for param in model.parameters():
            param.zero_()
    k_total = sum(k for _, k in model._drop_specs)
    expected = -k_total * math.log(2.0) / 10.0
    assert float(model.weight_kl()) == pytest.approx(expected, rel=1e-6)
    magnitudes = []
    grid = (0.1, 0.3, 0.5, 0.7, 0.9)
    for p in grid:
        with torch.no_grad():
            for logits in model.dropout_logits:
                logits.fill_(math.log(p) - math.log1p(-p))
        magnitudes.append(abs(float(model.weight_kl())))
    assert magnitudes.index(max(magnitudes)) == grid.index(0.5)

    # compactness closed forms
    def toy_model(eigenvalues):
        k = len(eigenvalues)
        from wsbvib.core import ShapeModel
        return ShapeModel(mean_shape=np.zeros(3 * k),
                          eigenvectors=np.eye(3 * k)[:, :k],
                          eigenvalues=np.asarray(eigenvalues, dtype=np.float64))

    single = compactness(toy_model([3.0, 0.0, 0.0]))
    assert np.allclose(single.values, 1.0, atol=1e-6)
    assert single.auc == pytest.approx(1.0, abs=1e-6)
    equal = compactness(toy_model([2.0, 2.0, 2.0, 2.0]))
    assert np.allclose(equal.values, [0.25, 0.5, 0.75, 1.0], atol=1e-6)
    ramp = compactness(toy_model([5.0, 1.0, 0.5]))
    assert np.all(np.diff(ramp.values) >= -1e-12)
    assert ramp.values[-1] == pytest.approx(1.0, abs=1e-6)

    # variance decomposition toy grid and degeneracies
    toy = np.zeros((2, 2, 1, 3))
    toy[0, 0], toy[0, 1], toy[1, 0], toy[1, 1] = 0.0, 2.0, 4.0, 6.0
    _, ale, epi = decompose(toy)
    assert ale[0] == pytest.approx(1.0, abs=1e-6)
    assert epi[0] == pytest.approx(4.0, abs=1e-6)
    assert (ale + epi)[0] == pytest.approx(5.0, abs=1e-6)
    constant = np.full((3, 4, 2, 3), 1.25)
    _, ale, epi = decompose(constant)
    assert np.all(ale == 0.0) and np.all(epi == 0.0)
    assert time.perf_counter() - start < 10.0


def test_c11_pipeline_is_deterministic_end_to_end(tmp_path):
    start = time.perf_counter()

    def run_once(root):
        root.mkdir()
        cohort_cfg = root / "cohort.txt"
        write_config(str(cohort_cfg), {"cohort": {
            "n_train": 6, "n_val": 2, "n_test": 3, "n_shape_outliers": 1,
            "n_image_outliers": 1, "resolution": (12, 12, 12),
            "subdivisions": 1, "m_cloud": 48, "seed": 5,
            "out_dir": str(root / "cohort")}})
        run_cfg = root / "run.txt"
        write_config(str(run_cfg), {
            "train": {"manifest": str(root / "cohort" / "manifest.txt"),
                      "out_dir": str(root / "train"), "seed": 5,
                      "mode": "bvib", "supervision": "cloud",
                      "batch_size": 4, "learning_rate": 1e-3,
                      "infer_latent_samples": 3, "infer_mask_samples": 2},
            "model": {"latent_dim": 6, "m_out": 16,
                      "input_resolution": (12, 12, 12),
                      "conv_channels": (4, 8), "dense_widths": (24, 12),
                      "decoder_widths": (24, 48)},
            "loss": {"burnin_epochs": 1, "ramp_epochs": 1,
                     "n_latent_samples_train": 2}})
        for args in (["generate", "--config", str(cohort_cfg)],
                     ["train", "--config", str(run_cfg), "--desk-scale"],
                     ["evaluate", "--checkpoint",
                      str(root / "train" / "checkpoint_best.pt"),
                      "--manifest", str(root / "cohort" / "manifest.txt"),
                      "--out-dir", str(root / "eval"), "--max-modes", "4",
                      "--specificity-samples", "10",
                      "--specificity-clouds", "4", "--cloud-subsample", "32"]):
            proc = subprocess.run([sys.executable, "-m", "wsbvib.cli", *args],
                                  capture_output=True, text=True)
            assert proc.returncode == 0, (args, proc.stderr)
        return root / "eval"

    eval_a = run_once(tmp_path / "a")
    eval_b = run_once(tmp_path / "b")
    for name in ("per_sample.csv", "uncertainty.csv", "pointwise.csv",
                 "ssm_metrics.csv", "outliers.csv"):
        rows_a = read_rows(eval_a / name)
        rows_b = read_rows(eval_b / name)
        assert len(rows_a) == len(rows_b), name
        for ra, rb in zip(rows_a, rows_b):
            assert ra.keys() == rb.keys()
            for key in ra:
                try:
                    va, vb = float(ra[key]), float(rb[key])
                except ValueError:
                    assert ra[key] == rb[key], (name, key)
                    continue
                assert abs(va - vb) <= 1e-6, (name, key, va, vb)
    train_a = read_rows(tmp_path / "a" / "train" / "train_log.csv")
    assert len(train_a) == 20
    assert time.perf_counter() - start < 20 * 60
