"""Shape-model fitting and the SSM quality metric suite.

PCA on corresponded point sets via the Gram trick (N x N eigendecomposition
instead of 3M x 3M), plus the standard compactness / generalization /
specificity curves, a neighborhood-consistency mapping error, exact
point-to-surface distance, and a permutation-aligned correspondence error
against synthetic ground truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import PointSet, ShapeModel, TriangleMesh
from .errors import DataError, UndefinedStatisticError

# relative eigenvalue threshold below which a Gram direction counts as null
_RANK_TOL = 1e-10


@dataclass(frozen=True)
class MetricCurve:
    """Metric values indexed by the number of PCA modes used."""

    m_values: tuple
    values: np.ndarray
    auc: float

    def __post_init__(self):
        if len(self.m_values) != len(self.values) or len(self.values) < 1:
            raise DataError("metric curve needs aligned, non-empty m/value lists")


def _stack_flat(shapes) -> np.ndarray:
    """Cohort of ordered point sets -> (N, 3M) float64 matrix."""
    rows = []
    m = None
    for s in shapes:
        pts = s.points if isinstance(s, PointSet) else np.asarray(s, dtype=np.float64)
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"expected (M, 3) point arrays, got {pts.shape}")
        if m is None:
            m = pts.shape[0]
        elif pts.shape[0] != m:
            raise DataError(f"point count mismatch in cohort: {pts.shape[0]} vs {m}")
        rows.append(pts.reshape(-1))
    if not rows:
        raise DataError("empty cohort")
    return np.stack(rows)


def _orthonormal_completion(existing: np.ndarray, count: int) -> np.ndarray:
    """Deterministic orthonormal columns spanning directions not in existing."""
    dim = existing.shape[0]
    cols = []
    basis = existing
    for i in range(dim):
        if len(cols) == count:
            break
        v = np.zeros(dim)
        v[i] = 1.0
        v = v - basis @ (basis.T @ v)
        if cols:
            q = np.stack(cols, axis=1)
            v = v - q @ (q.T @ v)
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            cols.append(v / norm)
    if len(cols) < count:
        raise DataError("could not complete an orthonormal basis")
    return np.stack(cols, axis=1)


def fit_shape_model(cohort, n_modes: int | None = None) -> ShapeModel:
    """PCA shape model from N >= 2 corresponded point sets.

    Eigenpairs of the 3M x 3M sample covariance are recovered from the
    N x N Gram matrix; rank-deficient directions get zero eigenvalues and
    deterministic orthonormal filler vectors.
    """
    x = _stack_flat(cohort)
    n, dim = x.shape
    if n < 2:
        raise DataError(f"need at least 2 shapes, got {n}")
    k_max = min(n - 1, dim)
    k = k_max if n_modes is None else int(n_modes)
    if k < 1 or k > k_max:
        raise DataError(f"n_modes must lie in [1, {k_max}], got {k}")

    mean = x.mean(axis=0)
    centered = x - mean
    gram = centered @ centered.T
    w, u = np.linalg.eigh(gram)
    order = np.argsort(w)[::-1]
    w = w[order]
    u = u[:, order]

    positive = w > max(w[0], 0.0) * _RANK_TOL
    r = min(int(positive.sum()), k)
    eigenvalues = np.zeros(k)
    eigenvalues[:r] = w[:r] / (n - 1)
    if r > 0:
        vectors = centered.T @ (u[:, :r] / np.sqrt(w[:r]))
        # polish: QR re-orthonormalizes without reordering the near-orthonormal
        # columns; sign fix keeps each column aligned with its eigenvector
        q, rmat = np.linalg.qr(vectors)
        vectors = q * np.sign(np.diag(rmat))
    else:
        vectors = np.zeros((dim, 0))
    if r < k:
        vectors = np.concatenate(
            [vectors, _orthonormal_completion(vectors, k - r)], axis=1)
    return ShapeModel(mean_shape=mean, eigenvectors=vectors, eigenvalues=eigenvalues)


def project_reconstruct(model: ShapeModel, shape, m: int) -> PointSet:
    """Project a shape onto the first m modes and reconstruct it."""
    pts = shape.points if isinstance(shape, PointSet) else np.asarray(shape, dtype=np.float64)
    flat = np.asarray(pts, dtype=np.float64).reshape(-1)
    if flat.shape[0] != model.mean_shape.shape[0]:
        raise DataError("shape size does not match the model")
    if m < 0 or m > model.n_modes:
        raise DataError(f"m must lie in [0, {model.n_modes}], got {m}")
    if m == 0:
        recon = model.mean_shape
    else:
        v = model.eigenvectors[:, :m]
        recon = model.mean_shape + v @ (v.T @ (flat - model.mean_shape))
    return PointSet(recon.reshape(-1, 3), ordered=True)


def compactness(model: ShapeModel) -> MetricCurve:
    """Cumulative explained-variance fractions over mode count."""
    total = model.eigenvalues.sum()
    if total <= 0:
        raise UndefinedStatisticError("compactness undefined: all eigenvalues are zero")
    values = np.cumsum(model.eigenvalues) / total
    return MetricCurve(m_values=tuple(range(1, model.n_modes + 1)),
                       values=values, auc=float(values.mean()))


def _cd_bi(a: np.ndarray, b: np.ndarray) -> float:
    """Bidirectional Chamfer distance with squared per-point terms."""
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def _as_cloud(c) -> np.ndarray:
    pts = c.points if isinstance(c, PointSet) else np.asarray(c, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise DataError(f"expected a non-empty (M, 3) cloud, got {pts.shape}")
    return pts


def generalization(model: ShapeModel, pdms, clouds, m_values=None) -> MetricCurve:
    """Mean Chamfer distance between m-mode reconstructions and target clouds."""
    if len(pdms) == 0 or len(pdms) != len(clouds):
        raise DataError("generalization needs aligned, non-empty pdm/cloud lists")
    if m_values is None:
        m_values = tuple(range(1, model.n_modes + 1))
    m_values = tuple(int(m) for m in m_values)
    cloud_arrays = [_as_cloud(c) for c in clouds]
    values = np.empty(len(m_values))
    for idx, m in enumerate(m_values):
        acc = 0.0
        for pdm, cloud in zip(pdms, cloud_arrays):
            recon = project_reconstruct(model, pdm, m)
            acc += _cd_bi(recon.points, cloud)
        values[idx] = acc / len(pdms)
    return MetricCurve(m_values=m_values, values=values, auc=float(values.mean()))


def specificity(model: ShapeModel, training_clouds, n_samples: int = 1000,
                rng: np.random.Generator | None = None, m_values=None) -> MetricCurve:
    """Mean distance from random model samples to their nearest training cloud.

    For each mode count m, draws n_samples shapes mean + V_m diag(sqrt(lambda)) eps
    and averages the minimum bidirectional Chamfer distance over the clouds.
    """
    if n_samples < 1:
        raise DataError(f"n_samples must be >= 1, got {n_samples}")
    if len(training_clouds) == 0:
        raise DataError("specificity needs at least one training cloud")
    if rng is None:
        rng = np.random.default_rng()
    if m_values is None:
        m_values = tuple(range(1, model.n_modes + 1))
    m_values = tuple(int(m) for m in m_values)
    clouds = [_as_cloud(c) for c in training_clouds]
    sd = np.sqrt(np.clip(model.eigenvalues, 0.0, None))
    values = np.empty(len(m_values))
    for idx, m in enumerate(m_values):
        if m < 0 or m > model.n_modes:
            raise DataError(f"m must lie in [0, {model.n_modes}], got {m}")
        eps = rng.standard_normal((n_samples, m))
        samples = model.mean_shape + eps * sd[:m] @ model.eigenvectors[:, :m].T \
            if m > 0 else np.tile(model.mean_shape, (n_samples, 1))
        acc = 0.0
        for j in range(n_samples):
            pts = samples[j].reshape(-1, 3)
            acc += min(_cd_bi(pts, cloud) for cloud in clouds)
        values[idx] = acc / n_samples
    return MetricCurve(m_values=m_values, values=values, auc=float(values.mean()))


def mapping_error(pdms, k: int = 10, n_pairs: int = 100,
                  rng: np.random.Generator | None = None) -> float:
    """Neighborhood-consistency error over random ordered cohort pairs.

    For a pair (a, b): the k nearest neighbors of each point of a are looked
    up by index in b, and their mean distance to the matching b point is
    normalized by b's bounding-box diagonal.
    """
    x = _stack_flat(pdms).reshape(len(pdms), -1, 3)
    n, m = x.shape[0], x.shape[1]
    if n < 2:
        raise DataError("mapping error needs at least 2 shapes")
    if k < 1 or k >= m:
        raise DataError(f"k must lie in [1, {m - 1}], got {k}")
    if rng is None:
        rng = np.random.default_rng()
    total = 0.0
    for _ in range(n_pairs):
        i = int(rng.integers(n))
        j = int(rng.integers(n - 1))
        if j >= i:
            j += 1
        total += _mapping_error_pair(x[i], x[j], k)
    return total / n_pairs


def _mapping_error_pair(a: np.ndarray, b: np.ndarray, k: int) -> float:
    diag = np.linalg.norm(b.max(axis=0) - b.min(axis=0))
    if diag <= 0:
        raise DataError("degenerate shape: zero bounding-box diagonal")
    _, idx = cKDTree(a).query(a, k=k + 1)
    neighbors = idx[:, 1:]                       # drop each point itself
    spread = np.linalg.norm(b[:, None, :] - b[neighbors], axis=-1)
    return float(spread.mean() / diag)


# ---------------------------------------------------------------------------
# point-to-surface distance

_PAIR_BUDGET = 4_000_000


def _closest_sq_dist(p: np.ndarray, a, b, c) -> np.ndarray:
    """Exact squared point-triangle distances for a (P, F) grid.

    Region-case closest-point computation: vertex, edge, and face regions
    each get their closed form, selected by barycentric sign tests.
    """
    ab = b - a
    ac = c - a
    ap = p[:, None, :] - a[None, :, :]
    d1 = (ab[None] * ap).sum(-1)
    d2 = (ac[None] * ap).sum(-1)
    bp = p[:, None, :] - b[None, :, :]
    d3 = (ab[None] * bp).sum(-1)
    d4 = (ac[None] * bp).sum(-1)
    cp = p[:, None, :] - c[None, :, :]
    d5 = (ab[None] * cp).sum(-1)
    d6 = (ac[None] * cp).sum(-1)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_face = vb / denom
        w_face = vc / denom

    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    in_c = (d6 >= 0) & (d5 <= d6)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    v = np.where(in_a | in_b | in_c, 0.0, np.nan_to_num(v_face))
    w = np.where(in_a | in_b | in_c, 0.0, np.nan_to_num(w_face))
    v = np.where(in_b, 1.0, v)
    w = np.where(in_c, 1.0, w)
    v = np.where(on_ab, np.nan_to_num(t_ab), v)
    w = np.where(on_ab, 0.0, w)
    v = np.where(on_ac, 0.0, v)
    w = np.where(on_ac, np.nan_to_num(t_ac), w)
    v = np.where(on_bc, 1.0 - np.nan_to_num(t_bc), v)
    w = np.where(on_bc, np.nan_to_num(t_bc), w)

    closest = a[None] + v[..., None] * ab[None] + w[..., None] * ac[None]
    return ((p[:, None, :] - closest) ** 2).sum(-1)


def point_to_surface(points, mesh: TriangleMesh) -> np.ndarray:
    """Exact Euclidean distance from each point to the mesh surface."""
    p = _as_cloud(points)
    if mesh.faces.shape[0] == 0:
        raise DataError("mesh has no faces")
    tri = mesh.vertices[mesh.faces]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    n_faces = a.shape[0]
    chunk = max(1, _PAIR_BUDGET // n_faces)
    out = np.empty(p.shape[0])
    for start in range(0, p.shape[0], chunk):
        block = p[start:start + chunk]
        out[start:start + chunk] = _closest_sq_dist(block, a, b, c).min(axis=1)
    return np.sqrt(out)


# ---------------------------------------------------------------------------
# ground-truth correspondence error


def greedy_index_alignment(mean_pred: np.ndarray, mean_gt: np.ndarray) -> np.ndarray:
    """Greedy one-to-one index map from predicted points to ground-truth points."""
    m = mean_pred.shape[0]
    d2 = ((mean_pred[:, None, :] - mean_gt[None, :, :]) ** 2).sum(-1)
    perm = np.empty(m, dtype=np.int64)
    used = np.zeros(m, dtype=bool)
    for i in range(m):
        row = np.where(used, np.inf, d2[i])
        perm[i] = int(np.argmin(row))
        used[perm[i]] = True
    return perm


def gt_correspondence_error(predicted, ground_truth) -> float:
    """Mean point error after one cohort-wide index alignment.

    The permutation between the arbitrary predicted ordering and the
    ground-truth ordering is estimated greedily on the cohort mean shapes
    and then held fixed for every sample, so only orderings that are
    consistent across the cohort can score low.
    """
    pred = _stack_flat(predicted).reshape(len(predicted), -1, 3)
    gt = _stack_flat(ground_truth).reshape(len(ground_truth), -1, 3)
    if pred.shape[0] != gt.shape[0]:
        raise DataError("cohort size mismatch between predictions and ground truth")
    if pred.shape[1] != gt.shape[1]:
        raise DataError(
            f"point count mismatch: predicted {pred.shape[1]} vs ground truth {gt.shape[1]}")
    perm = greedy_index_alignment(pred.mean(axis=0), gt.mean(axis=0))
    aligned = gt[:, perm, :]
    return float(np.linalg.norm(pred - aligned, axis=-1).mean())


def farthest_point_indices(points, m: int) -> np.ndarray:
    """Deterministic farthest-point subset of size m, returned sorted.

    Starts from the point farthest from the centroid, then repeatedly adds
    the point maximizing the distance to the selected set.
    """
    pts = _as_cloud(points)
    n = pts.shape[0]
    if m < 1 or m > n:
        raise DataError(f"subset size must lie in [1, {n}], got {m}")
    centroid = pts.mean(axis=0)
    first = int(np.argmax(((pts - centroid) ** 2).sum(-1)))
    chosen = [first]
    min_d2 = ((pts - pts[first]) ** 2).sum(-1)
    for _ in range(m - 1):
        nxt = int(np.argmax(min_d2))
        chosen.append(nxt)
        min_d2 = np.minimum(min_d2, ((pts - pts[nxt]) ** 2).sum(-1))
    return np.sort(np.array(chosen, dtype=np.int64))


# ---------------------------------------------------------------------------
# CSV plumbing

_G = "%.10g"


def write_ssm_metrics_csv(curves: dict, path: str) -> None:
    """One row per curve point plus a <name>_auc row with m = 0."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "m", "value"])
        for name in sorted(curves):
            curve = curves[name]
            for m, value in zip(curve.m_values, curve.values):
                writer.writerow([name, m, _G % value])
            writer.writerow([f"{name}_auc", 0, _G % curve.auc])


def read_ssm_metrics_csv(path: str) -> dict:
    """Metric name -> list of (m, value) rows."""
    out: dict = {}
    with open(path) as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["metric", "m", "value"]:
            raise DataError(f"{path}: unexpected ssm metrics header {header}")
        for row in reader:
            if len(row) != 3:
                raise DataError(f"{path}: malformed row {row}")
            out.setdefault(row[0], []).append((int(row[1]), float(row[2])))
    return out
