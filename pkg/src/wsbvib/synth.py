"""Synthetic cohort generator.

Shapes are radial deformations of a fixed-topology unit icosphere: vertex i
sits at r(u_i) * u_i where u_i is the template direction and r is a smooth
closed-form radial field (ellipsoid base + cosine-tapered appendage bump +
azimuthal lobes). Because the template never changes, vertex i is a true
correspondence across the whole cohort, and every mesh is a star-shaped,
watertight surface.

Cohorts are written to disk as volumes (rasterized occupancy with a smooth
intensity profile, blur, and background texture), unordered surface point
clouds (the weak labels, with heteroscedastic positional noise), meshes, and
ordered ground-truth correspondence files, plus a line-oriented manifest.
Every stochastic choice derives from (config.seed, purpose, sample index), so
regeneration is byte-identical and samples are independent of each other.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .core import CohortSample, PointSet, TriangleMesh, Volume, write_mesh, write_point_set, write_volume
from .errors import ConfigError, DataError, IOFormatError, MissingFileError, RejectedParamsError
from .rng import np_rng

_FMT = "%.17g"

# minimum admissible radial-field value; below this the surface is treated as
# collapsed and the parameter draw is rejected
_MIN_RADIUS = 1e-3


@dataclass(frozen=True)
class ShapeParams:
    """Generative parameters of one synthetic shape.

    base_radii are ellipsoid semi-axes; appendage_angle = (polar, azimuth)
    orients the bump; global_scale multiplies the whole radial field.
    """

    base_radii: tuple[float, float, float]
    appendage_length: float
    appendage_angle: tuple[float, float]
    n_lobes: int
    lobe_amplitude: float
    global_scale: float

    def __post_init__(self):
        if len(self.base_radii) != 3 or any(r <= 0 for r in self.base_radii):
            raise DataError(f"base_radii must be 3 positive reals, got {self.base_radii}")
        if self.appendage_length < 0:
            raise DataError("appendage_length must be >= 0")
        if self.n_lobes < 0:
            raise DataError("n_lobes must be >= 0")
        if self.lobe_amplitude < 0:
            raise DataError("lobe_amplitude must be >= 0")
        if self.global_scale <= 0:
            raise DataError("global_scale must be > 0")

    def appendage_direction(self) -> np.ndarray:
        polar, azimuth = self.appendage_angle
        return np.array([
            math.sin(polar) * math.cos(azimuth),
            math.sin(polar) * math.sin(azimuth),
            math.cos(polar),
        ])

    def as_dict(self) -> dict[str, float]:
        return {
            "base_radius_a": self.base_radii[0],
            "base_radius_b": self.base_radii[1],
            "base_radius_c": self.base_radii[2],
            "appendage_length": self.appendage_length,
            "appendage_polar": self.appendage_angle[0],
            "appendage_azimuth": self.appendage_angle[1],
            "n_lobes": float(self.n_lobes),
            "lobe_amplitude": self.lobe_amplitude,
            "global_scale": self.global_scale,
        }


@dataclass(frozen=True)
class CohortConfig:
    """Cohort layout, sampling ranges, and image-formation settings."""

    n_train: int = 200
    n_val: int = 30
    n_test: int = 40
    n_shape_outliers: int = 10
    n_image_outliers: int = 10
    resolution: tuple[int, int, int] = (48, 48, 48)
    extent: float = 2.8
    subdivisions: int = 3
    m_cloud: int = 1024
    # parameter sampling ranges (uniform)
    radius_range: tuple[float, float] = (0.85, 1.05)
    appendage_range: tuple[float, float] = (0.2, 1.0)
    appendage_polar_max: float = 0.1
    lobe_range: tuple[float, float] = (0.0, 0.06)
    n_lobes_range: tuple[int, int] = (4, 4)
    scale_range: tuple[float, float] = (0.8, 1.2)
    appendage_width: float = 0.95
    # weak-label noise: points with z > 0 get the high level
    cloud_noise_lo: float = 0.0
    cloud_noise_hi: float = 0.0
    # image formation
    fg_level: float = 1.0
    bg_level: float = 0.08
    profile_amp: float = 0.15
    bg_texture: float = 0.03
    blur_sigma: float = 0.8
    acq_noise: float = 0.01
    corrupt_severity: tuple[float, float] = (0.5, 0.8)
    # image outliers render the anatomy enlarged (wrong-FOV acquisition)
    image_zoom_range: tuple[float, float] = (1.3, 1.55)
    seed: int = 0
    out_dir: str = "cohort"

    def __post_init__(self):
        counts = (self.n_train, self.n_val, self.n_test,
                  self.n_shape_outliers, self.n_image_outliers)
        if any(c < 0 for c in counts):
            raise ConfigError(f"split counts must be >= 0, got {counts}")
        if len(self.resolution) != 3 or any(r < 8 for r in self.resolution):
            raise ConfigError(f"resolution must be >= 8 per axis, got {self.resolution}")
        if self.extent <= 0:
            raise ConfigError("extent must be > 0")
        if not 0 <= self.subdivisions <= 5:
            raise ConfigError("subdivisions must be in [0, 5]")
        if self.m_cloud < 1:
            raise ConfigError("m_cloud must be >= 1")
        for name in ("radius_range", "appendage_range", "lobe_range",
                     "scale_range", "corrupt_severity", "image_zoom_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} must satisfy lo <= hi, got ({lo}, {hi})")
        if self.radius_range[0] <= 0 or self.scale_range[0] <= 0:
            raise ConfigError("radius and scale ranges must be positive")
        if self.image_zoom_range[0] <= 0:
            raise ConfigError("image_zoom_range must be positive")
        if self.n_lobes_range[0] > self.n_lobes_range[1] or self.n_lobes_range[0] < 0:
            raise ConfigError(f"bad n_lobes_range {self.n_lobes_range}")
        if self.appendage_width <= 0 or self.appendage_width > math.pi:
            raise ConfigError("appendage_width must be in (0, pi]")
        if self.cloud_noise_lo < 0 or self.cloud_noise_hi < 0:
            raise ConfigError("cloud noise levels must be >= 0")


SPLIT_FIELDS = (("train", "n_train"), ("val", "n_val"), ("test", "n_test"),
                ("outlier-shape", "n_shape_outliers"),
                ("outlier-image", "n_image_outliers"))


# ---------------------------------------------------------------------------
# icosphere template


@lru_cache(maxsize=8)
def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere with vertices exactly at +x and -x; returns (dirs (V,3), faces (F,3)).

    Vertex and face ordering is a pure function of the subdivision level, which
    is what makes correspondence ids stable across the cohort.
    """
    z = 1.0 / math.sqrt(5.0)
    r = 2.0 / math.sqrt(5.0)
    verts = [(1.0, 0.0, 0.0)]
    for i in range(5):
        a = 2.0 * math.pi * i / 5.0
        verts.append((z, r * math.cos(a), r * math.sin(a)))
    for i in range(5):
        a = 2.0 * math.pi * (i + 0.5) / 5.0
        verts.append((-z, r * math.cos(a), r * math.sin(a)))
    verts.append((-1.0, 0.0, 0.0))
    faces = []
    for i in range(5):
        j = (i + 1) % 5
        faces.append((0, 1 + i, 1 + j))
        faces.append((1 + i, 6 + i, 1 + j))
        faces.append((1 + j, 6 + i, 6 + j))
        faces.append((11, 6 + j, 6 + i))
    dirs = np.array(verts, dtype=np.float64)
    tris = np.array(faces, dtype=np.int64)
    for _ in range(subdivisions):
        dirs, tris = _subdivide(dirs, tris)
    dirs.setflags(write=False)
    tris.setflags(write=False)
    return dirs, tris


def _subdivide(dirs: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    verts = [tuple(v) for v in dirs]
    midpoint: dict[tuple[int, int], int] = {}

    def mid(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        if key not in midpoint:
            m = 0.5 * (dirs[a] + dirs[b])
            m /= np.linalg.norm(m)
            midpoint[key] = len(verts)
            verts.append(tuple(m))
        return midpoint[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        new_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    return np.array(verts, dtype=np.float64), np.array(new_faces, dtype=np.int64)


def radial_field(params: ShapeParams, dirs: np.ndarray, width: float = 0.95) -> np.ndarray:
    """Evaluate the closed-form radius r(u) at unit directions dirs (N, 3).

    width is the appendage bump half-angle in radians (a cohort-level setting,
    not a per-shape parameter).
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    a, b, c = params.base_radii
    r_ell = 1.0 / np.sqrt((dirs[:, 0] / a) ** 2
                          + (dirs[:, 1] / b) ** 2
                          + (dirs[:, 2] / c) ** 2)
    out = r_ell
    if params.lobe_amplitude > 0 and params.n_lobes > 0:
        azimuth = np.arctan2(dirs[:, 1], dirs[:, 0])
        sin2_polar = 1.0 - dirs[:, 2] ** 2
        out = out + params.lobe_amplitude * np.sin(params.n_lobes * azimuth) * sin2_polar
    out = params.global_scale * out
    if params.appendage_length > 0:
        cos_ang = np.clip(dirs @ params.appendage_direction(), -1.0, 1.0)
        ang = np.arccos(cos_ang)
        # cosine-tapered bump: 1 at the appendage axis, C1-smooth to 0 at the rim;
        # appendage_length is the tip extension in world units, so the body
        # scale does not rescale it
        taper = np.where(ang < width, np.cos(0.5 * math.pi * ang / width) ** 2, 0.0)
        out = out + params.appendage_length * taper
    return out


def sample_params(rng: np.random.Generator, config: CohortConfig,
                  outlier: bool = False) -> ShapeParams:
    """Draw shape parameters uniformly from the configured ranges.

    outlier=True pushes either one base radius or the global scale beyond its
    range by at least 4x the range half-width, leaving the rest inside. Those
    two field families are the ones whose excursions survive into clearly
    abnormal geometry at any draw; appendage and lobe excursions saturate
    (field-of-view clipping, sub-resolution surface texture) and would make
    outliers that are not reliably abnormal.
    """
    def u(lo: float, hi: float) -> float:
        return float(lo + (hi - lo) * rng.random())

    radii = [u(*config.radius_range) for _ in range(3)]
    appendage = u(*config.appendage_range)
    polar = u(0.0, config.appendage_polar_max)
    azimuth = u(0.0, 2.0 * math.pi)
    lo_n, hi_n = config.n_lobes_range
    n_lobes = int(rng.integers(lo_n, hi_n + 1))
    lobe = u(*config.lobe_range)
    scale = u(*config.scale_range)

    if outlier:
        fields = {
            "radius_0": config.radius_range, "radius_1": config.radius_range,
            "radius_2": config.radius_range,
            "scale": config.scale_range,
        }
        eligible = [k for k, (lo, hi) in fields.items() if hi > lo]
        if not eligible:
            raise ConfigError("outlier sampling needs at least one field with a nonzero range")
        pick = eligible[int(rng.integers(len(eligible)))]
        lo, hi = fields[pick]
        half = 0.5 * (hi - lo)
        value = hi + (4.0 + 2.0 * rng.random()) * half
        if pick.startswith("radius_"):
            radii[int(pick[-1])] = value
        else:
            scale = value

    return ShapeParams(
        base_radii=tuple(radii),
        appendage_length=appendage,
        appendage_angle=(polar, azimuth),
        n_lobes=n_lobes,
        lobe_amplitude=lobe,
        global_scale=scale,
    )


def build_mesh(params: ShapeParams, subdivisions: int = 3,
               width: float = 0.95) -> TriangleMesh:
    """Deform the template icosphere by the radial field of params.

    The result is watertight and star-shaped with respect to the origin;
    correspondence_ids are the template vertex indices 0..V-1. A radial field
    that dips to zero or below anywhere (checked at vertices and face
    centroids) means the surface would collapse or fold, and the draw is
    rejected.
    """
    dirs, faces = icosphere(subdivisions)
    radii = radial_field(params, dirs, width)
    centroids = dirs[faces].mean(axis=1)
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    r_cent = radial_field(params, centroids, width)
    worst = min(float(radii.min()), float(r_cent.min()))
    if worst <= _MIN_RADIUS:
        raise RejectedParamsError(
            f"radial field reaches {worst:.4g} (<= {_MIN_RADIUS}); "
            "amplitudes too large relative to base radii")
    verts = radii[:, None] * dirs
    return TriangleMesh(verts, np.array(faces),
                        correspondence_ids=np.arange(dirs.shape[0]))


def is_watertight(mesh: TriangleMesh) -> bool:
    """True when every directed edge appears exactly once with each orientation."""
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    fwd = {(int(a), int(b)) for a, b in directed}
    if len(fwd) != directed.shape[0]:
        return False
    return all((b, a) in fwd for a, b in fwd)


# ---------------------------------------------------------------------------
# rasterization


def grid_geometry(resolution: tuple[int, int, int],
                  extent: float) -> tuple[np.ndarray, np.ndarray]:
    """Spacing and origin of a voxel grid covering [-extent, extent] per axis."""
    res = np.asarray(resolution, dtype=np.float64)
    spacing = 2.0 * extent / res
    origin = -extent + 0.5 * spacing
    return spacing, origin


def occupancy_mask(mesh: TriangleMesh, resolution: tuple[int, int, int],
                   extent: float) -> np.ndarray:
    """Exact inside test of every voxel center against a star-shaped mesh.

    Casts the radial ray through each voxel center and compares against the
    surface radius in that direction: the ray hits exactly the face whose
    spherical projection contains the direction, located via a nearest-vertex
    candidate search with a brute-force fallback.
    """
    if not is_watertight(mesh):
        raise DataError("occupancy requires a watertight mesh")
    verts = mesh.vertices
    vnorm = np.linalg.norm(verts, axis=1)
    if vnorm.min() <= 0:
        raise DataError("mesh must be star-shaped around the origin")
    vdirs = verts / vnorm[:, None]
    faces = mesh.faces

    spacing, origin = grid_geometry(resolution, extent)
    h, w, d = resolution
    axes = [origin[i] + spacing[i] * np.arange(n) for i, n in enumerate((h, w, d))]
    grid = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([g.ravel() for g in grid], axis=1)
    cnorm = np.linalg.norm(centers, axis=1)
    inside = np.zeros(centers.shape[0], dtype=bool)
    at_origin = cnorm == 0.0
    inside[at_origin] = True

    todo = np.nonzero(~at_origin)[0]
    cdirs = centers[todo] / cnorm[todo, None]
    surface_r = _radial_ray_radius(vdirs, vnorm, faces, cdirs)
    inside[todo] = cnorm[todo] <= surface_r
    return inside.reshape(h, w, d)


def _radial_ray_radius(vdirs: np.ndarray, vnorm: np.ndarray, faces: np.ndarray,
                       query_dirs: np.ndarray) -> np.ndarray:
    """Distance from origin to the surface along each unit query direction."""
    n_faces = faces.shape[0]
    # inverse of the direction matrix per face: solves u = a*ua + b*ub + c*uc
    tri_dirs = vdirs[faces]
    mats = np.transpose(tri_dirs, (0, 2, 1))
    try:
        inv = np.linalg.inv(mats)
    except np.linalg.LinAlgError as exc:
        raise DataError("degenerate face directions; mesh not star-shaped") from exc
    # plane of each deformed face: normal and offset
    tri = (vnorm[faces][:, :, None] * tri_dirs)
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    offsets = np.einsum("fi,fi->f", tri[:, 0], normals)

    vert_faces = _vertex_face_table(faces, vdirs.shape[0])
    tree = cKDTree(vdirs)

    n = query_dirs.shape[0]
    out = np.full(n, np.nan)
    unresolved = np.arange(n)
    for k in (1, 8):
        if unresolved.size == 0:
            break
        dirs_u = query_dirs[unresolved]
        nn = tree.query(dirs_u, k=k)[1]
        if k == 1:
            nn = nn[:, None]
        cand = vert_faces[nn].reshape(unresolved.size, -1)
        out, unresolved = _resolve_radii(dirs_u, cand, inv, normals, offsets,
                                         out, unresolved)
    if unresolved.size:
        # brute force over all faces for the rare directions near degenerate
        # spherical-triangle boundaries
        all_faces = np.broadcast_to(np.arange(n_faces),
                                    (unresolved.size, n_faces))
        out, unresolved = _resolve_radii(query_dirs[unresolved], all_faces,
                                         inv, normals, offsets, out, unresolved)
    if unresolved.size:
        raise DataError("mesh is not star-shaped around the origin")
    return out


def _resolve_radii(dirs_u, cand, inv, normals, offsets, out, unresolved):
    valid_cand = cand >= 0
    cand_safe = np.where(valid_cand, cand, 0)
    bary = np.einsum("nkij,nj->nki", inv[cand_safe], dirs_u)
    hit = valid_cand & (bary >= -1e-12).all(axis=2)
    any_hit = hit.any(axis=1)
    first = hit.argmax(axis=1)
    rows = np.nonzero(any_hit)[0]
    face_idx = cand_safe[rows, first[rows]]
    denom = np.einsum("ni,ni->n", dirs_u[rows], normals[face_idx])
    radius = offsets[face_idx] / denom
    ok = np.isfinite(radius) & (radius > 0)
    out[unresolved[rows[ok]]] = radius[ok]
    resolved = np.zeros(dirs_u.shape[0], dtype=bool)
    resolved[rows[ok]] = True
    return out, unresolved[~resolved]


def _vertex_face_table(faces: np.ndarray, n_verts: int) -> np.ndarray:
    """(V, max_degree) table of face indices incident to each vertex, padded -1."""
    counts = np.zeros(n_verts, dtype=np.int64)
    np.add.at(counts, faces.ravel(), 1)
    table = np.full((n_verts, int(counts.max())), -1, dtype=np.int64)
    fill = np.zeros(n_verts, dtype=np.int64)
    for f_idx, (a, b, c) in enumerate(faces):
        for v in (a, b, c):
            table[v, fill[v]] = f_idx
            fill[v] += 1
    return table


def rasterize(mesh: TriangleMesh, config: CohortConfig,
              rng: np.random.Generator) -> Volume:
    """Render a mesh to an intensity volume.

    Occupancy is exact per voxel center; foreground gets a smooth per-sample
    multiplicative intensity profile, background gets low-amplitude smooth
    texture, then the whole image is blurred and lightly degraded with
    acquisition noise.
    """
    res = tuple(config.resolution)
    mask = occupancy_mask(mesh, res, config.extent)
    spacing, origin = grid_geometry(res, config.extent)

    axes = [(origin[i] + spacing[i] * np.arange(res[i])) / config.extent
            for i in range(3)]
    q = np.meshgrid(*axes, indexing="ij")
    freq = rng.uniform(0.3, 0.8, size=3)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=3)
    profile = 1.0 + config.profile_amp * sum(
        np.sin(2.0 * math.pi * freq[i] * q[i] + phase[i]) for i in range(3)) / 3.0

    texture = gaussian_filter(rng.standard_normal(res), 2.0)
    std = texture.std()
    if std > 0:
        texture /= std
    fg = config.fg_level * profile
    bg = config.bg_level + config.bg_texture * texture
    img = np.where(mask, fg, bg)
    if config.blur_sigma > 0:
        img = gaussian_filter(img, config.blur_sigma)
    signal = config.fg_level - config.bg_level
    img = img + config.acq_noise * signal * rng.standard_normal(res)
    return Volume(img.astype(np.float32), spacing, origin)


def corrupt_image(volume: Volume, rng: np.random.Generator,
                  severity: float) -> Volume:
    """Blend out-of-distribution artifacts into a volume.

    The fully corrupted image (bias field + heavy noise + contrast-inversion
    patches) is drawn independently of severity, then linearly blended:
    out = (1 - severity) * input + severity * corrupted. The artifact draw
    consumes the rng in a fixed order, so a fixed seed gives the same
    corruption pattern at any severity.
    """
    if severity < 0:
        raise DataError("severity must be >= 0")
    img = volume.data.astype(np.float64)
    vmin, vmax = float(img.min()), float(img.max())
    vrange = vmax - vmin
    res = img.shape

    axes = [np.linspace(-1.0, 1.0, n) for n in res]
    q = np.meshgrid(*axes, indexing="ij")
    grad = rng.standard_normal(3)
    grad /= np.linalg.norm(grad)
    bias = 1.0 + 0.6 * sum(grad[i] * q[i] for i in range(3))
    corrupted = vmin + (img - vmin) * bias
    corrupted = corrupted + 0.55 * vrange * rng.standard_normal(res)
    n_patches = int(rng.integers(1, 4))
    for _ in range(n_patches):
        size = [max(2, int(round(f * n)))
                for f, n in zip(rng.uniform(0.15, 0.3, size=3), res)]
        lo = [int(rng.integers(0, n - s + 1)) for s, n in zip(size, res)]
        sl = tuple(slice(l, l + s) for l, s in zip(lo, size))
        corrupted[sl] = (vmax + vmin) - corrupted[sl]

    out = (1.0 - severity) * img + severity * corrupted
    return Volume(out.astype(np.float32), volume.spacing, volume.origin)


# ---------------------------------------------------------------------------
# point clouds


def sample_point_cloud(mesh: TriangleMesh, m_cloud: int,
                       rng: np.random.Generator,
                       perm_rng: np.random.Generator | None = None) -> PointSet:
    """Sample m_cloud points uniformly by area, then shuffle the row order.

    The shuffle uses perm_rng (defaulting to rng) so the surface draw and the
    ordering can be controlled independently; either way no correspondence
    information survives in the row order.
    """
    if m_cloud < 1:
        raise DataError("m_cloud must be >= 1")
    tri = mesh.triangles()
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    probs = areas / areas.sum()
    face_idx = rng.choice(areas.shape[0], size=m_cloud, p=probs)
    u = rng.random(m_cloud)
    v = rng.random(m_cloud)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    t = tri[face_idx]
    pts = t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])
    if perm_rng is None:
        perm_rng = rng
    order = perm_rng.permutation(m_cloud)
    return PointSet(pts[order], ordered=False)


def perturb_cloud(points: np.ndarray, rng: np.random.Generator,
                  sigma_lo: float, sigma_hi: float) -> np.ndarray:
    """Add heteroscedastic Gaussian noise: points with z > 0 get sigma_hi."""
    sigma = np.where(points[:, 2] > 0, sigma_hi, sigma_lo)
    return points + sigma[:, None] * rng.standard_normal(points.shape)


# ---------------------------------------------------------------------------
# cohort generation and manifest


_PARAM_KEYS = ("base_radius_a", "base_radius_b", "base_radius_c",
               "appendage_length", "appendage_polar", "appendage_azimuth",
               "n_lobes", "lobe_amplitude", "global_scale")


def generate_cohort(config: CohortConfig) -> list[CohortSample]:
    """Generate and write a full cohort; returns the samples with absolute paths.

    The manifest lands at <out_dir>/manifest.txt. Sample g's randomness comes
    entirely from streams keyed by (config.seed, purpose, g), so any sample can
    be regenerated alone and regeneration is byte-identical.
    """
    out_dir = os.path.abspath(config.out_dir)
    for sub in ("volumes", "clouds", "meshes", "gt"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    samples: list[CohortSample] = []
    records: list[str] = []
    g = 0
    for split, count_field in SPLIT_FIELDS:
        for i in range(getattr(config, count_field)):
            sample_id = f"{split}_{i:03d}"
            params, mesh = _draw_valid_shape(config, g, outlier=(split == "outlier-shape"))
            if split == "outlier-image":
                # wrong-FOV acquisition: the image shows the anatomy enlarged
                # and degraded, while the stored labels keep the true shape
                crng = np_rng(config.seed, "corrupt", g)
                zoom = float(crng.uniform(*config.image_zoom_range))
                apparent = TriangleMesh(mesh.vertices * zoom, mesh.faces,
                                        mesh.correspondence_ids)
                volume = rasterize(apparent, config, np_rng(config.seed, "raster", g))
                lo, hi = config.corrupt_severity
                severity = float(lo + (hi - lo) * crng.random())
                volume = corrupt_image(volume, crng, severity)
            else:
                volume = rasterize(mesh, config, np_rng(config.seed, "raster", g))
            cloud = sample_point_cloud(
                mesh, config.m_cloud,
                np_rng(config.seed, "cloud-surface", g),
                np_rng(config.seed, "cloud-perm", g))
            noisy = perturb_cloud(cloud.points, np_rng(config.seed, "cloud-noise", g),
                                  config.cloud_noise_lo, config.cloud_noise_hi)
            cloud = PointSet(noisy, ordered=False)
            gt = PointSet(mesh.vertices, ordered=True)

            rel = {
                "volume": f"volumes/{sample_id}.raw",
                "cloud": f"clouds/{sample_id}.particles",
                "mesh": f"meshes/{sample_id}.ply",
                "gt": f"gt/{sample_id}.particles",
            }
            write_volume(volume, os.path.join(out_dir, rel["volume"]))
            write_point_set(cloud, os.path.join(out_dir, rel["cloud"]))
            write_mesh(mesh, os.path.join(out_dir, rel["mesh"]))
            write_point_set(gt, os.path.join(out_dir, rel["gt"]))

            pdict = params.as_dict()
            params_txt = ";".join(f"{k}:{_FMT % pdict[k]}" for k in _PARAM_KEYS)
            records.append(
                f"id={sample_id} split={split} volume={rel['volume']} "
                f"cloud={rel['cloud']} mesh={rel['mesh']} gt={rel['gt']} "
                f"params={params_txt}")
            samples.append(CohortSample(
                id=sample_id, split=split,
                volume_path=os.path.join(out_dir, rel["volume"]),
                cloud_path=os.path.join(out_dir, rel["cloud"]),
                mesh_path=os.path.join(out_dir, rel["mesh"]),
                gt_path=os.path.join(out_dir, rel["gt"]),
                shape_params=pdict))
            g += 1

    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("# cohort manifest v1\n")
        for line in records:
            f.write(line + "\n")
    return samples


def _draw_valid_shape(config: CohortConfig, g: int,
                      outlier: bool) -> tuple[ShapeParams, TriangleMesh]:
    last_error = None
    for attempt in range(16):
        rng = np_rng(config.seed, "shape-params", g, attempt)
        params = sample_params(rng, config, outlier=outlier)
        try:
            mesh = build_mesh(params, config.subdivisions, config.appendage_width)
            return params, mesh
        except RejectedParamsError as exc:
            last_error = exc
    raise RejectedParamsError(
        f"sample {g}: no admissible parameters after 16 draws ({last_error})")


def load_manifest(path: str) -> list[CohortSample]:
    """Read a manifest written by generate_cohort; paths come back absolute."""
    if not os.path.isfile(path):
        raise MissingFileError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    seen = set()
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = {}
            for token in line.split():
                key, sep, value = token.partition("=")
                if not sep:
                    raise IOFormatError(f"{path}:{lineno}: malformed token {token!r}")
                fields[key] = value
            try:
                sample_id = fields["id"]
                split = fields["split"]
                paths = {k: os.path.join(base, fields[k])
                         for k in ("volume", "cloud", "mesh", "gt")}
            except KeyError as exc:
                raise IOFormatError(f"{path}:{lineno}: missing field {exc}") from exc
            if sample_id in seen:
                raise IOFormatError(f"{path}:{lineno}: duplicate id {sample_id}")
            seen.add(sample_id)
            params = {}
            for pair in fields.get("params", "").split(";"):
                if not pair:
                    continue
                k, sep, v = pair.partition(":")
                if not sep:
                    raise IOFormatError(f"{path}:{lineno}: malformed params entry {pair!r}")
                params[k] = float(v)
            samples.append(CohortSample(
                id=sample_id, split=split,
                volume_path=paths["volume"], cloud_path=paths["cloud"],
                mesh_path=paths["mesh"], gt_path=paths["gt"],
                shape_params=params))
    if not samples:
        raise IOFormatError(f"{path}: manifest lists no samples")
    return samples

