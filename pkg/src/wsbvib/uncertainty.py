"""Uncertainty decomposition, calibration statistics, and outlier degrees.

The prediction grid produced by the model has dropout realizations on the
outer axis and latent samples inside. With population variance estimators,
the within-realization spread (aleatoric) and the across-realization spread
of the means (epistemic) sum exactly to the grand variance of the grid, so
the decomposition loses nothing.

Outlier degrees follow the classic two-term density surrogate: distance in
feature space (subspace Mahalanobis) plus distance from feature space
(reconstruction residual), each standardized by its training-set mean.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import zoom as ndi_zoom

from .core import PointSet, PredictiveDistribution, Volume
from .errors import DataError, UndefinedStatisticError


def decompose(grid: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a (D, S, M, 3) prediction grid into mean and variance parts.

    Returns (mean (M, 3), var_aleatoric (M,), var_epistemic (M,)), variances
    averaged over the 3 coordinates. aleatoric = mean over realizations of the
    within-realization population variance; epistemic = population variance of
    the realization means.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 4 or grid.shape[3] != 3:
        raise DataError(f"grid must be (D, S, M, 3), got {grid.shape}")
    d, s = grid.shape[0], grid.shape[1]
    if d < 1 or s < 2:
        raise DataError(f"need D >= 1 and S >= 2, got D={d}, S={s}")
    mean = grid.mean(axis=(0, 1))
    within = grid.var(axis=1)                 # (D, M, 3) population variance over s
    aleatoric = within.mean(axis=0).mean(axis=-1)
    mask_means = grid.mean(axis=1)            # (D, M, 3)
    epistemic = mask_means.var(axis=0).mean(axis=-1)
    return mean, aleatoric, epistemic


def point_uncertainty_scalar(var: np.ndarray) -> np.ndarray:
    """Per-point standard deviation from a variance vector."""
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise DataError("negative variance passed to point_uncertainty_scalar")
    return np.sqrt(var)


def pearson_r(u, e) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    e = np.asarray(e, dtype=np.float64).ravel()
    if u.shape[0] != e.shape[0]:
        raise DataError("pearson_r needs equal-length vectors")
    if u.shape[0] < 3:
        raise DataError("pearson_r needs at least 3 points")
    du = u - u.mean()
    de = e - e.mean()
    su = np.sqrt((du ** 2).sum())
    se = np.sqrt((de ** 2).sum())
    if su == 0.0 or se == 0.0:
        raise UndefinedStatisticError("correlation undefined for a constant input")
    return float(np.clip((du * de).sum() / (su * se), -1.0, 1.0))


# ---------------------------------------------------------------------------
# outlier degrees


@dataclass(frozen=True)
class SubspaceOutlierModel:
    """PCA density surrogate fitted on training feature vectors.

    Scores combine standardized subspace Mahalanobis distance with the
    standardized off-subspace reconstruction residual.
    """

    mean: np.ndarray
    components: np.ndarray          # (F, k), orthonormal columns
    variances: np.ndarray           # (k,), descending
    mahal_scale: float
    resid_scale: float

    def score_terms(self, feature: np.ndarray) -> tuple[float, float]:
        x = np.asarray(feature, dtype=np.float64).ravel() - self.mean
        coef = self.components.T @ x
        mahal = float(np.sqrt(((coef ** 2) / self.variances).sum()))
        resid = float(np.linalg.norm(x - self.components @ coef))
        return mahal / self.mahal_scale, resid / self.resid_scale

    def score(self, feature: np.ndarray) -> float:
        m, r = self.score_terms(feature)
        return m + r


def fit_outlier_model(features: np.ndarray, variance_fraction: float = 0.95,
                      n_components: int | None = None) -> SubspaceOutlierModel:
    """Fit the PCA surrogate on (N, F) training features.

    The subspace keeps the smallest number of leading components reaching
    variance_fraction of the total (n_components overrides), never more than
    N - 1.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError(f"outlier model needs (N >= 2, F) features, got {x.shape}")
    n = x.shape[0]
    mean = x.mean(axis=0)
    centered = x - mean
    # thin SVD; eigenvalues of the sample covariance are s^2 / (N - 1)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    variances = s ** 2 / (n - 1)
    nonzero = variances > 1e-12 * max(variances[0], 1e-300)
    variances = variances[nonzero]
    vt = vt[nonzero]
    if variances.size == 0:
        raise DataError("training features have zero variance")
    if n_components is not None:
        k = min(n_components, variances.size)
    else:
        frac = np.cumsum(variances) / variances.sum()
        k = int(np.searchsorted(frac, variance_fraction) + 1)
    k = min(k, variances.size)
    components = vt[:k].T
    kept = variances[:k]

    coef = centered @ components
    mahal = np.sqrt(((coef ** 2) / kept).sum(axis=1))
    resid = np.linalg.norm(centered - coef @ components.T, axis=1)
    mahal_scale = float(mahal.mean()) if mahal.mean() > 1e-12 else 1.0
    resid_scale = float(resid.mean()) if resid.mean() > 1e-12 else 1.0
    return SubspaceOutlierModel(mean=mean, components=components, variances=kept,
                                mahal_scale=mahal_scale, resid_scale=resid_scale)


def image_features(volume: Volume, side: int = 12) -> np.ndarray:
    """Intensity-normalized block-mean downsample of a volume, flattened."""
    x = volume.data.astype(np.float64)
    std = x.std()
    xn = (x - x.mean()) / (std if std > 0 else 1.0)
    h, w, d = xn.shape
    if h % side == 0 and w % side == 0 and d % side == 0:
        small = xn.reshape(side, h // side, side, w // side, side, d // side).mean(axis=(1, 3, 5))
    else:
        small = ndi_zoom(xn, (side / h, side / w, side / d), order=1)
        small = small[:side, :side, :side]
    return small.ravel()


def shape_features(point_set: PointSet | np.ndarray) -> np.ndarray:
    pts = point_set.points if isinstance(point_set, PointSet) else np.asarray(point_set)
    return np.asarray(pts, dtype=np.float64).ravel()


def fit_image_outlier_model(volumes: list[Volume], **kw) -> SubspaceOutlierModel:
    return fit_outlier_model(np.stack([image_features(v) for v in volumes]), **kw)


def fit_shape_outlier_model(cohort: list, **kw) -> SubspaceOutlierModel:
    feats = np.stack([shape_features(p) for p in cohort])
    if len({f.shape[0] for f in feats}) > 1:
        raise DataError("shape outlier model needs equal point counts")
    return fit_outlier_model(feats, **kw)


def image_outlier_degree(volumes: list[Volume], query: Volume, **kw) -> float:
    """Outlier degree of query relative to a training cohort of volumes."""
    return fit_image_outlier_model(volumes, **kw).score(image_features(query))


def shape_outlier_degree(cohort: list, query, **kw) -> float:
    """Outlier degree of an ordered query shape relative to a training cohort."""
    model = fit_shape_outlier_model(cohort, **kw)
    feat = shape_features(query)
    if feat.shape[0] != model.mean.shape[0]:
        raise DataError("query point count does not match the cohort")
    return model.score(feat)


# ---------------------------------------------------------------------------
# calibration report


@dataclass
class UncertaintyReport:
    """Per-sample uncertainty vectors plus cohort-level calibration numbers.

    total SD per point is sqrt(aleatoric + epistemic); r_test is the
    point-level Pearson correlation between total SD and P2S error pooled
    over the inlier test split.
    """

    sample_ids: list[str]
    splits: list[str]
    aleatoric_var: list[np.ndarray]
    epistemic_var: list[np.ndarray]
    p2s: list[np.ndarray]
    mean_p2s: np.ndarray = field(init=False)
    mean_aleatoric_sd: np.ndarray = field(init=False)
    mean_epistemic_sd: np.ndarray = field(init=False)
    mean_total_sd: np.ndarray = field(init=False)
    r_test: float = field(init=False)
    split_summary: dict = field(init=False)

    def __post_init__(self):
        n = len(self.sample_ids)
        if not (n == len(self.splits) == len(self.aleatoric_var)
                == len(self.epistemic_var) == len(self.p2s)):
            raise DataError("calibration report inputs are not aligned")
        if n == 0:
            raise DataError("calibration report needs at least one sample")
        self.mean_p2s = np.array([np.mean(e) for e in self.p2s])
        self.mean_aleatoric_sd = np.array(
            [np.mean(point_uncertainty_scalar(v)) for v in self.aleatoric_var])
        self.mean_epistemic_sd = np.array(
            [np.mean(point_uncertainty_scalar(v)) for v in self.epistemic_var])
        self.mean_total_sd = np.array([
            np.mean(point_uncertainty_scalar(a + e))
            for a, e in zip(self.aleatoric_var, self.epistemic_var)])
        test_idx = [i for i, s in enumerate(self.splits) if s == "test"]
        if test_idx:
            u = np.concatenate([point_uncertainty_scalar(
                self.aleatoric_var[i] + self.epistemic_var[i]) for i in test_idx])
            e = np.concatenate([np.asarray(self.p2s[i]).ravel() for i in test_idx])
            self.r_test = pearson_r(u, e)
        else:
            self.r_test = float("nan")
        self.split_summary = {}
        for split in sorted(set(self.splits)):
            idx = [i for i, s in enumerate(self.splits) if s == split]
            self.split_summary[split] = {
                "n": len(idx),
                "mean_p2s": float(self.mean_p2s[idx].mean()),
                "mean_total_sd": float(self.mean_total_sd[idx].mean()),
            }


def calibration_report(sample_ids: list[str], splits: list[str],
                       predictions: list[PredictiveDistribution],
                       p2s_errors: list[np.ndarray]) -> UncertaintyReport:
    """Assemble the calibration report from aligned per-sample inputs."""
    return UncertaintyReport(
        sample_ids=list(sample_ids), splits=list(splits),
        aleatoric_var=[p.var_aleatoric for p in predictions],
        epistemic_var=[p.var_epistemic for p in predictions],
        p2s=[np.asarray(e, dtype=np.float64) for e in p2s_errors])


_G = "%.10g"


def write_uncertainty_csv(report: UncertaintyReport, path: str) -> None:
    """Per-sample summary rows; the pooled test Pearson r rides in a comment."""
    with open(path, "w", newline="") as f:
        f.write(f"# pearson_r_test={_G % report.r_test}\n")
        writer = csv.writer(f)
        writer.writerow(["sample_id", "split", "mean_p2s", "mean_aleatoric_sd",
                         "mean_epistemic_sd", "mean_total_sd"])
        for i, sid in enumerate(report.sample_ids):
            writer.writerow([sid, report.splits[i],
                             _G % report.mean_p2s[i],
                             _G % report.mean_aleatoric_sd[i],
                             _G % report.mean_epistemic_sd[i],
                             _G % report.mean_total_sd[i]])


def write_pointwise_csv(report: UncertaintyReport, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "point_index", "p2s", "sd"])
        for i, sid in enumerate(report.sample_ids):
            sd = point_uncertainty_scalar(report.aleatoric_var[i] + report.epistemic_var[i])
            errs = np.asarray(report.p2s[i]).ravel()
            for j in range(errs.shape[0]):
                writer.writerow([sid, j, _G % errs[j], _G % sd[j]])


def read_pearson_r(path: str) -> float:
    """Recover the pooled test Pearson r from an uncertainty.csv comment line."""
    with open(path) as f:
        first = f.readline().strip()
    if not first.startswith("# pearson_r_test="):
        raise DataError(f"{path}: missing pearson_r_test comment line")
    return float(first.split("=", 1)[1])
