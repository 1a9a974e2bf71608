from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.optimize import least_squares
from scipy.spatial import cKDTree

from errors import GeometryError
from volume_core import Volume3

log = logging.getLogger(__name__)


def kdtree_workers() -> int:
    """Worker count for k-d tree queries (AKIN_THREADS); results never depend on it."""
    try:
        return max(1, int(os.environ.get("AKIN_THREADS", "1")))
    except ValueError:
        return 1


def _unit(v: Sequence[float]) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise GeometryError("Zero-length direction vector")
    return v / n


@dataclass
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    radius: Optional[np.ndarray] = None
    valid: Optional[np.ndarray] = None
    attributes: Dict[str, np.ndarray] = field(default_factory=dict)
    _tree: Optional[cKDTree] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if self.valid is None:
            self.valid = np.ones(n, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.radius is not None:
            self.radius = np.asarray(self.radius, dtype=np.float64)
        for name, arr in (("normals", self.normals), ("radius", self.radius), ("valid", self.valid)):
            if arr is not None and len(arr) != n:
                raise GeometryError(f"PointCloud.{name} has {len(arr)} rows, expected {n}")
        self.attributes = {k: np.asarray(v, dtype=np.float64) for k, v in self.attributes.items()}

    def __len__(self) -> int:
        return len(self.points)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def subset(self, keep: np.ndarray) -> "PointCloud":
        keep = np.asarray(keep)
        return PointCloud(
            self.points[keep],
            None if self.normals is None else self.normals[keep],
            None if self.radius is None else self.radius[keep],
            self.valid[keep],
            {k: v[keep] for k, v in self.attributes.items()},
        )

    def evolve(self, **changes) -> "PointCloud":
        out = replace(self, **changes)
        if "points" not in changes:
            out._tree = self._tree
        return out


@dataclass
class CylinderFit:
    axis_point: np.ndarray
    axis_dir: np.ndarray
    radius: float
    inlier_count: int
    msac_score: float
    success: bool = True
    reason: str = ""


@dataclass
class CurvatureParams:
    k_neighbors: int = 60
    normal_neighbors: int = 30
    inlier_threshold_mm: float = 0.5
    max_iterations: int = 500
    axis_cone_deg: float = 30.0
    reference_axis: Tuple[float, float, float] = (0.0, 0.0, 1.0)   # S (inferior-superior)
    r_min_mm: float = 5.0
    r_max_mm: float = 100.0
    refine_alternations: int = 3
    slab_half_width_mm: float = 3.0
    max_failed_fraction: float = 0.5
    rng_seed: int = 0

    def validate(self) -> None:
        checks = [
            ("k_neighbors", self.k_neighbors >= 6),
            ("normal_neighbors", self.normal_neighbors >= 3),
            ("inlier_threshold_mm", self.inlier_threshold_mm > 0),
            ("max_iterations", self.max_iterations >= 1),
            ("axis_cone_deg", 0 < self.axis_cone_deg <= 90),
            ("reference_axis", len(self.reference_axis) == 3 and np.linalg.norm(self.reference_axis) > 0),
            ("r_min_mm", 0 < self.r_min_mm < self.r_max_mm),
            ("refine_alternations", self.refine_alternations >= 0),
            ("slab_half_width_mm", self.slab_half_width_mm > 0),
        ]
        for key, ok in checks:
            if not ok:
                raise GeometryError(f"Invalid curvature.{key}: {getattr(self, key)!r}")


# ---------------------------------------------------------------------------
# Wall points
# ---------------------------------------------------------------------------

def fill_lumen(mask: Volume3, iso: float = 0.5) -> Volume3:
    """Fill enclosed holes slice by slice (in-plane 4-connectivity) so only the external wall remains."""
    above = mask.data > iso
    structure = ndimage.generate_binary_structure(2, 1)[:, :, None]
    filled = ndimage.binary_fill_holes(above, structure=structure)
    return mask.with_data(filled.astype(np.float32))


def extract_wall_points(mask: Volume3, iso: float = 0.5) -> PointCloud:
    """Centres of voxels above iso with at least one in-volume face neighbour below iso."""
    above = mask.data > iso
    below = ~above
    if not above.any() or not below.any():
        raise GeometryError(
            f"Empty wall surface: mask has {int(above.sum())} voxels above iso={iso}. Check the mask threshold."
        )
    boundary = np.zeros_like(above)
    for axis in range(3):
        n = above.shape[axis]
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        lo, hi = tuple(lo), tuple(hi)
        boundary[lo] |= above[lo] & below[hi]
        boundary[hi] |= above[hi] & below[lo]
    idx = np.argwhere(boundary)
    if len(idx) == 0:
        raise GeometryError("Empty wall surface: no boundary voxels found")
    points = np.asarray(mask.origin) + idx * np.asarray(mask.spacing)
    log.info("extracted %d wall points", len(points))
    return PointCloud(points)


# ---------------------------------------------------------------------------
# Neighbourhoods and normals
# ---------------------------------------------------------------------------

def knn(cloud: PointCloud, query: Sequence[float], k: int) -> np.ndarray:
    """Indices of the k nearest points, ascending distance, ties broken by lower index."""
    n = len(cloud)
    if not 1 <= k <= n:
        raise GeometryError(f"k={k} is out of range for a cloud of {n} points")
    q = np.asarray(query, dtype=np.float64)
    dist, _ = cloud.tree.query(q, k=k)
    dk = float(np.atleast_1d(dist)[-1])
    cand = np.asarray(cloud.tree.query_ball_point(q, r=dk * (1.0 + 1e-9) + 1e-12), dtype=np.intp)
    d2 = np.sum((cloud.points[cand] - q) ** 2, axis=1)
    order = np.lexsort((cand, d2))
    return cand[order[:k]]


def knn_batch(cloud: PointCloud, k: int) -> np.ndarray:
    """(N, k) neighbour indices for every cloud point, each row sorted by (distance, index)."""
    n = len(cloud)
    if not 1 <= k <= n:
        raise GeometryError(f"k={k} is out of range for a cloud of {n} points")
    _, idx = cloud.tree.query(cloud.points, k=k, workers=kdtree_workers())
    idx = np.asarray(idx, dtype=np.intp).reshape(n, k)
    d2 = np.sum((cloud.points[idx] - cloud.points[:, None, :]) ** 2, axis=-1)
    order = np.lexsort((idx, d2), axis=-1)
    return np.take_along_axis(idx, order, axis=1)


def estimate_normals(cloud: PointCloud, k: int) -> PointCloud:
    """
    PCA plane fit: C = (1/k) sum (p_i - p_mean)(p_i - p_mean)^T over the k-NN;
    the normal is the eigenvector of the smallest eigenvalue (unoriented).
    Points whose two smallest eigenvalues coincide are marked invalid.
    """
    n = len(cloud)
    if not 3 <= k <= n:
        raise GeometryError(f"Normal estimation needs 3 <= k <= {n}, got k={k}")
    nbrs = knn_batch(cloud, k)
    nb = cloud.points[nbrs]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    degenerate = (evals[:, 1] - evals[:, 0]) <= 1e-12 * np.maximum(evals[:, 2], 0.0)
    normals[degenerate] = np.nan
    if degenerate.any():
        log.info("%d of %d points have degenerate neighbourhoods (no normal)", int(degenerate.sum()), n)
    return cloud.evolve(normals=normals, valid=cloud.valid & ~degenerate)


def orient_normals(cloud: PointCloud, reference_axis: Sequence[float], slab_half_width_mm: float = 3.0) -> PointCloud:
    """Flip normals to point away from the centroid of their axial slab (radially outward)."""
    if cloud.normals is None:
        raise GeometryError("orient_normals needs normals; run estimate_normals first")
    a = _unit(reference_axis)
    pts = cloud.points
    s = pts @ a
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    csum = np.vstack([np.zeros(3), np.cumsum(pts[order], axis=0)])
    lo = np.searchsorted(s_sorted, s - slab_half_width_mm, side="left")
    hi = np.searchsorted(s_sorted, s + slab_half_width_mm, side="right")
    count = hi - lo
    centroid = (csum[hi] - csum[lo]) / np.maximum(count, 1)[:, None]
    sparse = count < 4
    centroid[sparse] = pts.mean(axis=0)

    r = pts - centroid
    r_perp = r - (r @ a)[:, None] * a
    normals = cloud.normals.copy()
    flip = np.einsum("ij,ij->i", normals, r_perp) < 0
    flip &= cloud.valid
    normals[flip] *= -1.0
    return cloud.evolve(normals=normals)


# ---------------------------------------------------------------------------
# Cylinder fitting
# ---------------------------------------------------------------------------

def _project_to_cone(axis: np.ndarray, ref: np.ndarray, cone_rad: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    if axis @ ref < 0:
        axis = -axis
    if math.acos(min(1.0, float(axis @ ref))) <= cone_rad:
        return axis
    perp = axis - (axis @ ref) * ref
    pn = np.linalg.norm(perp)
    if pn < 1e-12:
        return ref.copy()
    return math.cos(cone_rad) * ref + math.sin(cone_rad) * perp / pn


def _plane_basis(axis: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def _axis_residuals(pts: np.ndarray, centers: np.ndarray, axes: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """|distance to axis - radius| for every (hypothesis, point): shape (H, n)."""
    v = pts[None, :, :] - centers[:, None, :]
    along = np.einsum("hnk,hk->hn", v, axes)
    perp = v - along[..., None] * axes[:, None, :]
    return np.abs(np.linalg.norm(perp, axis=-1) - radii[:, None])


def _kasa_circle(xy: np.ndarray) -> Optional[Tuple[float, float, float]]:
    a = np.column_stack([xy[:, 0], xy[:, 1], np.ones(len(xy))])
    b = np.sum(xy * xy, axis=1)
    sol, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < 3:
        return None
    cx, cy = sol[0] / 2.0, sol[1] / 2.0
    r2 = sol[2] + cx * cx + cy * cy
    if r2 <= 0:
        return None
    return float(cx), float(cy), float(math.sqrt(r2))


def _fit_circle(xy: np.ndarray) -> Optional[Tuple[float, float, float]]:
    init = _kasa_circle(xy)
    if init is None:
        return None
    res = least_squares(lambda q: np.hypot(xy[:, 0] - q[0], xy[:, 1] - q[1]) - q[2], np.asarray(init))
    cx, cy, r = res.x
    return float(cx), float(cy), float(abs(r))


def _hypotheses_from_normals(pts, normals, rng, params, ref, cos_cone):
    n = len(pts)
    pairs = rng.integers(0, n, size=(params.max_iterations, 2))
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    p1, p2 = pts[pairs[:, 0]], pts[pairs[:, 1]]
    n1, n2 = normals[pairs[:, 0]], normals[pairs[:, 1]]
    axis = np.cross(n1, n2)
    sin_ang = np.linalg.norm(axis, axis=1)
    ok = sin_ang > 1e-3
    axis[ok] /= sin_ang[ok, None]
    axis[(axis @ ref) < 0] *= -1.0
    ok &= (axis @ ref) >= cos_cone

    # closest points of the lines p1 + t n1 and p2 + s n2 lie on the axis
    w0 = p1 - p2
    b = np.einsum("ij,ij->i", n1, n2)
    d = np.einsum("ij,ij->i", n1, w0)
    e = np.einsum("ij,ij->i", n2, w0)
    denom = np.where(ok, 1.0 - b * b, 1.0)
    t = (b * e - d) / denom
    s = (e - b * d) / denom
    center = 0.5 * ((p1 + t[:, None] * n1) + (p2 + s[:, None] * n2))
    radius = 0.5 * (np.abs(t) + np.abs(s))
    return axis[ok], center[ok], radius[ok]


def _hypotheses_from_points(pts, rng, params, ref):
    """5-point algebraic circle fits with the axis fixed to the reference direction."""
    u, v = _plane_basis(ref)
    axes, centers, radii = [], [], []
    for _ in range(params.max_iterations):
        sample = pts[rng.choice(len(pts), size=5, replace=False)]
        xy = np.column_stack([sample @ u, sample @ v])
        circ = _kasa_circle(xy)
        if circ is None:
            continue
        cx, cy, r = circ
        axes.append(ref)
        centers.append(cx * u + cy * v)
        radii.append(r)
    if not axes:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
    return np.asarray(axes), np.asarray(centers), np.asarray(radii)


def _refine_axis_geometric(pts, axis, center, radius):
    u, v = _plane_basis(axis)

    def resid(q):
        ax = axis + q[0] * u + q[1] * v
        ax = ax / np.linalg.norm(ax)
        c = center + q[2] * u + q[3] * v
        w = pts - c
        perp = w - np.outer(w @ ax, ax)
        return np.linalg.norm(perp, axis=1) - q[4]

    res = least_squares(resid, np.array([0.0, 0.0, 0.0, 0.0, radius]))
    q = res.x
    ax = axis + q[0] * u + q[1] * v
    return ax / np.linalg.norm(ax), center + q[2] * u + q[3] * v


def _failed(reason: str, ref: np.ndarray) -> CylinderFit:
    return CylinderFit(np.zeros(3), ref.copy(), float("nan"), 0, float("inf"), success=False, reason=reason)


def fit_cylinder_msac(
    points: np.ndarray,
    params: CurvatureParams,
    normals: Optional[np.ndarray] = None,
    seed=None,
) -> CylinderFit:
    """
    MSAC cylinder fit with the axis held inside a cone around the reference
    axis. Hypotheses come from point+normal pairs when normals are given,
    otherwise from 5-point circle fits about the reference axis. The best
    hypothesis is refined by alternating a 2D circle fit in the plane normal
    to the axis with axis re-estimation.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 6:
        raise GeometryError(f"Cylinder fitting needs at least 6 points, got {len(pts)}")
    ref = _unit(params.reference_axis)
    cone = math.radians(params.axis_cone_deg)
    cos_cone = math.cos(cone)
    thr2 = params.inlier_threshold_mm ** 2
    rng = np.random.default_rng(params.rng_seed if seed is None else seed)

    if normals is not None:
        nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        keep = np.all(np.isfinite(nrm), axis=1)
        axes, centers, radii = _hypotheses_from_normals(pts[keep], nrm[keep], rng, params, ref, cos_cone) \
            if keep.sum() >= 2 else (np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    else:
        nrm = None
        axes, centers, radii = _hypotheses_from_points(pts, rng, params, ref)

    bounded = (radii >= params.r_min_mm) & (radii <= params.r_max_mm)
    axes, centers, radii = axes[bounded], centers[bounded], radii[bounded]
    if len(axes) == 0:
        return _failed("no hypothesis within the axis cone and radius bounds", ref)

    losses = np.minimum(_axis_residuals(pts, centers, axes, radii) ** 2, thr2).sum(axis=1)
    best = int(np.argmin(losses))
    axis, center, radius = axes[best], centers[best], float(radii[best])

    for step in range(params.refine_alternations + 1):
        res = _axis_residuals(pts, center[None], axis[None], np.array([radius]))[0]
        inliers = res < params.inlier_threshold_mm
        if inliers.sum() < 5:
            break
        u, v = _plane_basis(axis)
        rel = pts[inliers] - center
        circ = _fit_circle(np.column_stack([rel @ u, rel @ v]))
        if circ is None:
            break
        cx, cy, radius = circ
        center = center + cx * u + cy * v
        if step == params.refine_alternations:
            break
        if nrm is not None:
            sel = inliers & np.all(np.isfinite(nrm), axis=1)
            if sel.sum() >= 3:
                scatter = nrm[sel].T @ nrm[sel]
                axis = np.linalg.eigh(scatter)[1][:, 0]
        else:
            axis, center = _refine_axis_geometric(pts[inliers], axis, center, radius)
        axis = _project_to_cone(axis, ref, cone)

    axis = _project_to_cone(axis, ref, cone)
    res = _axis_residuals(pts, center[None], axis[None], np.array([radius]))[0]
    score = float(np.minimum(res ** 2, thr2).sum())
    inlier_count = int((res < params.inlier_threshold_mm).sum())
    fit = CylinderFit(center, axis, float(radius), inlier_count, score)
    if not (params.r_min_mm <= radius <= params.r_max_mm):
        fit.success = False
        fit.reason = f"radius {radius:.3f} mm outside [{params.r_min_mm}, {params.r_max_mm}]"
    return fit


def radius_of_curvature_field(cloud: PointCloud, params: CurvatureParams) -> PointCloud:
    """Local radius of curvature per point from an MSAC cylinder fit over its k-NN."""
    params.validate()
    n = len(cloud)
    k = params.k_neighbors
    if n < k:
        raise GeometryError(f"Cloud has {n} points, fewer than curvature.k_neighbors={k}")
    if cloud.normals is None:
        raise GeometryError("radius_of_curvature_field needs oriented normals")

    nbrs = knn_batch(cloud, k)
    radius = np.full(n, np.nan)
    fitted = np.zeros(n, dtype=bool)
    for i in range(n):
        sel = nbrs[i]
        fit = fit_cylinder_msac(cloud.points[sel], params, normals=cloud.normals[sel], seed=[params.rng_seed, i])
        if fit.success:
            radius[i] = fit.radius
            fitted[i] = True
        if (i + 1) % 5000 == 0:
            log.info("  curvature %d/%d points", i + 1, n)

    failed = ~fitted
    if failed.mean() > params.max_failed_fraction:
        raise GeometryError(
            f"{int(failed.sum())} of {n} cylinder fits failed; the geometry or curvature parameters are unsuitable"
        )

    filled = np.zeros(n, dtype=bool)
    for i in np.flatnonzero(failed):
        good = nbrs[i][fitted[nbrs[i]]]
        if len(good):
            radius[i] = float(np.median(radius[good]))
            filled[i] = True
    log.info("curvature: %d fits failed, %d filled from neighbours", int(failed.sum()), int(filled.sum()))

    attributes = dict(cloud.attributes)
    attributes["radius_filled"] = filled.astype(np.float64)
    valid = cloud.valid & np.isfinite(radius)
    return cloud.evolve(radius=radius, valid=valid, attributes=attributes)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _columns(cloud: PointCloud) -> Tuple[List[str], np.ndarray]:
    names = ["x", "y", "z"]
    cols = [cloud.points]
    if cloud.normals is not None:
        names += ["nx", "ny", "nz"]
        cols.append(cloud.normals)
    if cloud.radius is not None:
        names.append("radius")
        cols.append(cloud.radius[:, None])
    names.append("valid")
    cols.append(cloud.valid.astype(np.float64)[:, None])
    for key in sorted(cloud.attributes):
        names.append(key)
        cols.append(cloud.attributes[key].reshape(-1, 1))
    return names, np.hstack(cols)


def _from_columns(names: List[str], table: np.ndarray) -> PointCloud:
    col = {name: table[:, i] for i, name in enumerate(names)}
    missing = {"x", "y", "z"} - set(col)
    if missing:
        raise GeometryError(f"Point cloud is missing columns {sorted(missing)}")
    points = np.column_stack([col["x"], col["y"], col["z"]])
    normals = np.column_stack([col["nx"], col["ny"], col["nz"]]) if "nx" in col else None
    radius = col.get("radius")
    valid = col["valid"] > 0.5 if "valid" in col else None
    reserved = {"x", "y", "z", "nx", "ny", "nz", "radius", "valid"}
    attributes = {k: v for k, v in col.items() if k not in reserved}
    return PointCloud(points, normals, radius, valid, attributes)


def save_ply(cloud: PointCloud, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names, table = _columns(cloud)
    header = ["ply", "format ascii 1.0", "comment akin wall point cloud, units mm", f"element vertex {len(cloud)}"]
    header += [f"property double {name}" for name in names]
    header.append("end_header")
    with path.open("w", encoding="utf-8") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, table, fmt="%.17g")


def load_ply(path: Path) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise GeometryError(f"Point cloud not found: {path}")
    names: List[str] = []
    n_vertex = 0
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != "ply":
            raise GeometryError(f"{path} is not a PLY file")
        header_lines = 1
        for line in fh:
            header_lines += 1
            tokens = line.split()
            if not tokens:
                continue
            if tokens[0] == "format" and tokens[1] != "ascii":
                raise GeometryError(f"Only ASCII PLY is supported ({path})")
            if tokens[0] == "element" and tokens[1] == "vertex":
                n_vertex = int(tokens[2])
            elif tokens[0] == "property":
                names.append(tokens[-1])
            elif tokens[0] == "end_header":
                break
    table = np.loadtxt(path, skiprows=header_lines, ndmin=2) if n_vertex else np.zeros((0, len(names)))
    if len(table) != n_vertex:
        raise GeometryError(f"{path}: header declares {n_vertex} vertices, found {len(table)}")
    return _from_columns(names, table)


def save_cloud_csv(cloud: PointCloud, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names, table = _columns(cloud)
    pd.DataFrame(table, columns=names).to_csv(path, index=False, float_format="%.17g")


def load_cloud_csv(path: Path) -> PointCloud:
    df = pd.read_csv(path)
    return _from_columns(list(df.columns), df.to_numpy(dtype=np.float64))
