"""Domain types and file IO.

All coordinates are physical (spacing-scaled), so losses and metrics come out
in millimetre-like units. Types are treated as immutable after construction
and are safe to share across concurrent readers.

File formats:
  volume     raw little-endian float32 payload (C order, H*W*D values) plus a
             text sidecar "<path>.hdr" with dims/spacing/origin
  point set  plain text, one "x y z" line per point (ShapeWorks-style
             .particles layout)
  mesh       minimal ASCII PLY: float vertex properties x y z, optional int
             property correspondence_id, triangular faces only
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, IOFormatError, MissingFileError

SPLITS = ("train", "val", "test", "outlier-shape", "outlier-image")

# enough digits to round-trip IEEE doubles through text exactly
_FMT = "%.17g"


@dataclass(frozen=True)
class Volume:
    """A 3D scalar image with physical spacing metadata.

    data is (H, W, D) float32, indexed [h][w][d]; spacing and origin are
    3-vectors in physical units.
    """

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"volume data must be 3-D with all dims >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains non-finite values")
        if not np.all(spacing > 0):
            raise DataError(f"volume spacing must be positive, got {spacing}")
        if not np.all(np.isfinite(origin)):
            raise DataError("volume origin contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def value_range(self) -> float:
        return float(self.data.max() - self.data.min())

    def voxel_centers(self) -> np.ndarray:
        """Physical coordinates of all voxel centers, shape (H*W*D, 3), C order."""
        h, w, d = self.data.shape
        axes = [self.origin[i] + self.spacing[i] * np.arange(n)
                for i, n in enumerate((h, w, d))]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)


@dataclass(frozen=True)
class PointSet:
    """A set of 3-D points.

    ordered=True marks a correspondence set / PDM, where row i means the same
    anatomical location across a cohort. ordered=False marks an unordered
    surface point cloud (a weak label).
    """

    points: np.ndarray
    ordered: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise DataError(f"point set must be (M, 3) with M >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataError("point set contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class TriangleMesh:
    """Triangle surface mesh; correspondence_ids are set by the synthetic generator."""

    vertices: np.ndarray
    faces: np.ndarray
    correspondence_ids: np.ndarray | None = None

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        faces = np.asarray(self.faces, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3 or verts.shape[0] < 3:
            raise DataError(f"mesh vertices must be (V, 3) with V >= 3, got {verts.shape}")
        if not np.all(np.isfinite(verts)):
            raise DataError("mesh vertices contain non-finite coordinates")
        if faces.ndim != 2 or faces.shape[1] != 3 or faces.shape[0] < 1:
            raise DataError(f"mesh faces must be (F, 3) with F >= 1, got {faces.shape}")
        if faces.min() < 0 or faces.max() >= verts.shape[0]:
            raise DataError(
                f"face index out of range [0, {verts.shape[0]}): "
                f"min {faces.min()}, max {faces.max()}")
        tri = verts[faces]
        areas = 0.5 * np.linalg.norm(
            np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        scale = float(np.ptp(verts, axis=0).max()) or 1.0
        bad = np.nonzero(areas <= 1e-14 * scale * scale)[0]
        if bad.size:
            raise DataError(f"degenerate (zero-area) faces at indices {bad[:8].tolist()}")
        if self.correspondence_ids is not None:
            ids = np.asarray(self.correspondence_ids, dtype=np.int64).reshape(-1)
            if ids.shape[0] != verts.shape[0]:
                raise DataError("correspondence_ids length must equal vertex count")
            object.__setattr__(self, "correspondence_ids", ids)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)

    def triangles(self) -> np.ndarray:
        """Face corner coordinates, shape (F, 3, 3)."""
        return self.vertices[self.faces]


@dataclass(frozen=True)
class LatentGaussian:
    """Diagonal Gaussian over the latent code: mean mu and log of the diagonal variance.

    Holds either numpy arrays or autodiff tensors; variance exp(log_var) is
    positive by construction. A leading batch dimension is allowed.
    """

    mu: object
    log_var: object

    def __post_init__(self):
        mu, log_var = self.mu, self.log_var
        if tuple(mu.shape) != tuple(log_var.shape):
            raise DataError(f"mu/log_var shape mismatch: {tuple(mu.shape)} vs {tuple(log_var.shape)}")
        if mu.shape[-1] < 1:
            raise DataError("latent dimension must be >= 1")
        if isinstance(mu, np.ndarray):
            if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(np.asarray(log_var)))):
                raise DataError("latent Gaussian contains non-finite entries")

    @property
    def latent_dim(self) -> int:
        return int(self.mu.shape[-1])


@dataclass(frozen=True)
class PredictiveDistribution:
    """Per-point predictive mean and variance, split into aleatoric and epistemic parts.

    var_total is aleatoric + epistemic exactly (the estimator identity in the
    uncertainty module guarantees it). samples optionally retains the decoded
    sample grid for diagnostics, flattened to (n_samples, M, 3).
    """

    mean: np.ndarray
    var_aleatoric: np.ndarray
    var_epistemic: np.ndarray
    samples: np.ndarray | None = None

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        va = np.asarray(self.var_aleatoric, dtype=np.float64).reshape(-1)
        ve = np.asarray(self.var_epistemic, dtype=np.float64).reshape(-1)
        if mean.ndim != 2 or mean.shape[1] != 3:
            raise DataError(f"predictive mean must be (M, 3), got {mean.shape}")
        m = mean.shape[0]
        if va.shape[0] != m or ve.shape[0] != m:
            raise DataError("variance vectors must have one entry per point")
        if np.any(va < 0) or np.any(ve < 0):
            raise DataError("negative predictive variance")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var_aleatoric", va)
        object.__setattr__(self, "var_epistemic", ve)

    @property
    def var_total(self) -> np.ndarray:
        return self.var_aleatoric + self.var_epistemic


@dataclass(frozen=True)
class ShapeModel:
    """PCA statistics of a cohort of ordered correspondence sets.

    mean_shape is the flattened (3M,) cohort mean; eigenvector columns are
    orthonormal; eigenvalues are non-increasing and nonnegative.
    """

    mean_shape: np.ndarray
    eigenvectors: np.ndarray
    eigenvalues: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=np.float64).reshape(-1)
        vecs = np.asarray(self.eigenvectors, dtype=np.float64)
        vals = np.asarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        if vecs.ndim != 2 or vecs.shape[0] != mean.shape[0]:
            raise DataError("eigenvectors must be (3M, K)")
        if vals.shape[0] != vecs.shape[1]:
            raise DataError("eigenvalue count must match eigenvector columns")
        if vals.shape[0] > mean.shape[0]:
            raise DataError("more modes than shape dimensions")
        if np.any(vals < -1e-12):
            raise DataError("negative eigenvalue")
        if np.any(np.diff(vals) > 1e-10 * max(1.0, float(vals[0]) if vals.size else 1.0)):
            raise DataError("eigenvalues must be non-increasing")
        gram = vecs.T @ vecs
        if np.abs(gram - np.eye(vecs.shape[1])).max() >= 1e-8:
            raise DataError("eigenvector columns are not orthonormal to 1e-8")
        object.__setattr__(self, "mean_shape", mean)
        object.__setattr__(self, "eigenvectors", vecs)
        object.__setattr__(self, "eigenvalues", np.clip(vals, 0.0, None))

    @property
    def n_modes(self) -> int:
        return int(self.eigenvalues.shape[0])


@dataclass
class CohortSample:
    """One generated sample: file paths plus generator metadata.

    Paths are absolute after manifest loading. gt_path and shape_params are
    optional; split is one of SPLITS.
    """

    id: str
    split: str
    volume_path: str
    cloud_path: str
    mesh_path: str
    gt_path: str | None = None
    shape_params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}; expected one of {SPLITS}")

    def check_files(self):
        paths = [self.volume_path, self.cloud_path, self.mesh_path]
        if self.gt_path is not None:
            paths.append(self.gt_path)
        for p in paths:
            if not os.path.isfile(p):
                raise MissingFileError(f"sample {self.id}: missing file {p}")
        if not os.path.isfile(self.volume_path + ".hdr"):
            raise MissingFileError(f"sample {self.id}: missing header {self.volume_path}.hdr")


# ---------------------------------------------------------------------------
# volume IO


def write_volume(volume: Volume, path: str) -> None:
    """Write the raw float32 payload to path and a text header to path + '.hdr'."""
    volume.data.astype("<f4").tofile(path)
    h, w, d = volume.data.shape
    with open(path + ".hdr", "w") as f:
        f.write(f"dims: {h} {w} {d}\n")
        f.write("spacing: " + " ".join(_FMT % s for s in volume.spacing) + "\n")
        f.write("origin: " + " ".join(_FMT % o for o in volume.origin) + "\n")


def read_volume(path: str) -> Volume:
    """Read a volume written by write_volume; round-trips bit-exactly."""
    hdr_path = path + ".hdr"
    if not os.path.isfile(path):
        raise MissingFileError(f"volume payload not found: {path}")
    if not os.path.isfile(hdr_path):
        raise MissingFileError(f"volume header not found: {hdr_path}")
    fields = {}
    with open(hdr_path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if ":" not in line:
                raise IOFormatError(f"{hdr_path}: malformed header line {line!r}")
            key, _, rest = line.partition(":")
            fields[key.strip()] = rest.split()
    try:
        dims = [int(v) for v in fields["dims"]]
        spacing = [float(v) for v in fields["spacing"]]
        origin = [float(v) for v in fields["origin"]]
    except (KeyError, ValueError) as exc:
        raise IOFormatError(f"{hdr_path}: missing or malformed field ({exc})") from exc
    if len(dims) != 3:
        raise IOFormatError(f"{hdr_path}: dims must have 3 entries, got {dims}")
    payload = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(dims))
    if payload.size != expected:
        raise IOFormatError(
            f"{path}: payload has {payload.size} values but header says "
            f"{dims[0]}x{dims[1]}x{dims[2]} = {expected}")
    return Volume(payload.reshape(dims), np.array(spacing), np.array(origin))


# ---------------------------------------------------------------------------
# point-set IO


def write_point_set(point_set: PointSet, path: str) -> None:
    with open(path, "w") as f:
        for x, y, z in point_set.points:
            f.write(f"{_FMT % x} {_FMT % y} {_FMT % z}\n")


def read_point_set(path: str, ordered: bool = False) -> PointSet:
    """Parse one "x y z" triple per line; row order is preserved exactly."""
    if not os.path.isfile(path):
        raise MissingFileError(f"point set not found: {path}")
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise IOFormatError(
                    f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise IOFormatError(f"{path}:{lineno}: non-numeric coordinate") from exc
    if not rows:
        raise IOFormatError(f"{path}: empty point set")
    pts = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        bad = int(np.nonzero(~np.isfinite(pts).all(axis=1))[0][0]) + 1
        raise IOFormatError(f"{path}:{bad}: non-finite coordinate")
    return PointSet(pts, ordered=ordered)


# ---------------------------------------------------------------------------
# mesh IO


def write_mesh(mesh: TriangleMesh, path: str) -> None:
    with_ids = mesh.correspondence_ids is not None
    v, f = mesh.vertices.shape[0], mesh.faces.shape[0]
    with open(path, "w") as out:
        out.write("ply\nformat ascii 1.0\n")
        out.write(f"element vertex {v}\n")
        out.write("property float64 x\nproperty float64 y\nproperty float64 z\n")
        if with_ids:
            out.write("property int correspondence_id\n")
        out.write(f"element face {f}\n")
        out.write("property list uchar int vertex_indices\nend_header\n")
        for i in range(v):
            line = " ".join(_FMT % c for c in mesh.vertices[i])
            if with_ids:
                line += f" {int(mesh.correspondence_ids[i])}"
            out.write(line + "\n")
        for a, b, c in mesh.faces:
            out.write(f"3 {a} {b} {c}\n")


def read_mesh(path: str) -> TriangleMesh:
    """Read a triangle mesh written by write_mesh (minimal ASCII PLY subset)."""
    if not os.path.isfile(path):
        raise MissingFileError(f"mesh not found: {path}")
    with open(path) as f:
        lines = [ln.strip() for ln in f]
    if not lines or lines[0] != "ply":
        raise IOFormatError(f"{path}: not an ASCII PLY file")
    n_vertex = n_face = None
    has_ids = False
    body_start = None
    current_element = None
    for i, line in enumerate(lines[1:], start=1):
        if line.startswith("element vertex"):
            current_element = "vertex"
            n_vertex = int(line.split()[-1])
        elif line.startswith("element face"):
            current_element = "face"
            n_face = int(line.split()[-1])
        elif line.startswith("property") and current_element == "vertex":
            if line.split()[-1] == "correspondence_id":
                has_ids = True
        elif line == "end_header":
            body_start = i + 1
            break
    if body_start is None or n_vertex is None or n_face is None:
        raise IOFormatError(f"{path}: incomplete PLY header")
    body = [ln for ln in lines[body_start:] if ln]
    if len(body) != n_vertex + n_face:
        raise IOFormatError(
            f"{path}: expected {n_vertex} vertex + {n_face} face lines, got {len(body)}")
    verts = np.empty((n_vertex, 3), dtype=np.float64)
    ids = np.empty(n_vertex, dtype=np.int64) if has_ids else None
    for i in range(n_vertex):
        parts = body[i].split()
        if len(parts) != (4 if has_ids else 3):
            raise IOFormatError(f"{path}: malformed vertex line {i}")
        verts[i] = [float(p) for p in parts[:3]]
        if has_ids:
            ids[i] = int(parts[3])
    faces = np.empty((n_face, 3), dtype=np.int64)
    for i in range(n_face):
        parts = body[n_vertex + i].split()
        if len(parts) != 4 or parts[0] != "3":
            raise IOFormatError(f"{path}: only triangular faces are supported (face line {i})")
        faces[i] = [int(p) for p in parts[1:]]
    return TriangleMesh(verts, faces, correspondence_ids=ids)
