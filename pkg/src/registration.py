from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from errors import RegistrationError
from volume_core import (
    VectorVolume3,
    Volume3,
    VolumeGeometry,
    downsample2,
    smooth_array,
    trilinear,
)

log = logging.getLogger(__name__)


@dataclass
class RegistrationConfig:
    lam: float = 0.05                     # regularisation coefficient lambda
    lcc_sigma_voxels: float = 2.0         # Gaussian bandwidth w of the LCC windows
    control_spacing_voxels: Tuple[int, int, int] = (6, 6, 6)
    pyramid_levels: int = 3
    max_iterations: int = 200             # per level
    gradient_tolerance: Optional[float] = None   # absolute; None -> relative rule below
    relative_gradient_tolerance: float = 1e-5
    function_tolerance: float = 1e-9      # relative objective stagnation stop
    tv_epsilon_mm: float = 1e-3
    lcc_epsilon: float = 1e-6
    lbfgs_memory: int = 10
    rng_seed: int = 0

    def validate(self) -> None:
        checks = [
            ("lam", self.lam >= 0),
            ("lcc_sigma_voxels", self.lcc_sigma_voxels > 0),
            ("control_spacing_voxels", len(self.control_spacing_voxels) == 3
             and all(int(k) >= 1 for k in self.control_spacing_voxels)),
            ("pyramid_levels", self.pyramid_levels >= 1),
            ("max_iterations", self.max_iterations >= 1),
            ("gradient_tolerance", self.gradient_tolerance is None or self.gradient_tolerance >= 0),
            ("relative_gradient_tolerance", self.relative_gradient_tolerance >= 0),
            ("function_tolerance", self.function_tolerance >= 0),
            ("tv_epsilon_mm", self.tv_epsilon_mm > 0),
            ("lcc_epsilon", self.lcc_epsilon > 0),
            ("lbfgs_memory", self.lbfgs_memory >= 1),
        ]
        for key, ok in checks:
            if not ok:
                raise RegistrationError(f"Invalid registration.{key}: {getattr(self, key)!r}")


# ---------------------------------------------------------------------------
# Control grid
# ---------------------------------------------------------------------------

@dataclass
class ControlGrid:
    """
    Displacements (mm) on an evenly spaced lattice anchored to a volume
    geometry. Control point (a, b, c) sits at voxel (a*K1, b*K2, c*K3).
    """
    spacing_voxels: Tuple[int, int, int]
    displacements: np.ndarray             # (g1, g2, g3, 3)
    geometry: VolumeGeometry

    def __post_init__(self):
        self.spacing_voxels = tuple(int(k) for k in self.spacing_voxels)
        self.displacements = np.asarray(self.displacements, dtype=np.float64)
        if self.displacements.ndim != 4 or self.displacements.shape[-1] != 3:
            raise RegistrationError(f"Control displacements must be (g1, g2, g3, 3), got {self.displacements.shape}")
        for a in range(3):
            covered = (self.grid_dims[a] - 1) * self.spacing_voxels[a]
            if covered < self.geometry.dims[a] - 1:
                raise RegistrationError(
                    f"Control grid does not cover axis {a}: ({self.grid_dims[a]}-1)*{self.spacing_voxels[a]} "
                    f"< {self.geometry.dims[a]}-1"
                )

    @classmethod
    def zeros(cls, geometry: VolumeGeometry, spacing_voxels: Sequence[int]) -> "ControlGrid":
        k = tuple(int(x) for x in spacing_voxels)
        dims = tuple(int(math.ceil((n - 1) / kk)) + 1 for n, kk in zip(geometry.dims, k))
        return cls(k, np.zeros(dims + (3,)), geometry)

    @property
    def grid_dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.displacements.shape[:3])  # type: ignore[return-value]

    @property
    def point_count(self) -> int:
        return int(np.prod(self.grid_dims))

    @property
    def control_spacing_mm(self) -> np.ndarray:
        return np.asarray(self.geometry.spacing) * np.asarray(self.spacing_voxels)

    @property
    def cell_volume(self) -> float:
        """eta = v * K1 * K2 * K3"""
        return self.geometry.voxel_volume * float(np.prod(self.spacing_voxels))

    def with_displacements(self, displacements: np.ndarray) -> "ControlGrid":
        return ControlGrid(self.spacing_voxels, np.asarray(displacements).reshape(self.displacements.shape), self.geometry)

    def control_points(self) -> np.ndarray:
        """Control point positions in mm, shape (g1, g2, g3, 3)."""
        h = self.control_spacing_mm
        axes = [self.geometry.origin[a] + h[a] * np.arange(self.grid_dims[a]) for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


def interpolate_displacement(g: ControlGrid, p) -> np.ndarray:
    """First-order B-spline (trilinear) interpolation of control displacements at p (mm)."""
    pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
    t = (pts - np.asarray(g.geometry.origin)) / g.control_spacing_mm
    out = np.stack([trilinear(g.displacements[..., c], t)[0] for c in range(3)], axis=-1)
    return out[0] if np.ndim(p) == 1 else out


def _axis_weights(n_vox: int, n_grid: int, k: int) -> np.ndarray:
    """Dense (n_vox, n_grid) hat-function weights mapping control values to voxel centres."""
    t = np.arange(n_vox, dtype=np.float64) / k
    t = np.clip(t, 0.0, n_grid - 1)
    c = np.minimum(np.floor(t).astype(np.intp), n_grid - 2)
    f = t - c
    w = np.zeros((n_vox, n_grid))
    rows = np.arange(n_vox)
    w[rows, c] = 1.0 - f
    w[rows, c + 1] += f
    return w


def _grid_weights(g: ControlGrid) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return tuple(
        _axis_weights(g.geometry.dims[a], g.grid_dims[a], g.spacing_voxels[a]) for a in range(3)
    )  # type: ignore[return-value]


def _grid_to_dense(k: np.ndarray, weights) -> np.ndarray:
    wx, wy, wz = weights
    out = np.einsum("ia,abcd->ibcd", wx, k)
    out = np.einsum("jb,ibcd->ijcd", wy, out)
    return np.einsum("kc,ijcd->ijkd", wz, out)


def _dense_to_grid(d: np.ndarray, weights) -> np.ndarray:
    wx, wy, wz = weights
    out = np.einsum("kc,ijkd->ijcd", wz, d)
    out = np.einsum("jb,ijcd->ibcd", wy, out)
    return np.einsum("ia,ibcd->abcd", wx, out)


def dense_field(g: ControlGrid, geom: VolumeGeometry) -> VectorVolume3:
    if not g.geometry.matches(geom):
        raise RegistrationError(
            f"Geometry mismatch: grid anchored to dims={g.geometry.dims} spacing={g.geometry.spacing}, "
            f"requested dims={geom.dims} spacing={geom.spacing}"
        )
    d = _grid_to_dense(g.displacements, _grid_weights(g))
    return VectorVolume3(d, geom.spacing, geom.origin)


def upsample_grid(g: ControlGrid, geom: VolumeGeometry, spacing_voxels: Sequence[int]) -> ControlGrid:
    """Carry a grid onto another geometry by interpolating at the new control points."""
    target = ControlGrid.zeros(geom, spacing_voxels)
    pts = target.control_points().reshape(-1, 3)
    return target.with_displacements(interpolate_displacement(g, pts))


def warp_moving(moving: Volume3, g: ControlGrid) -> Volume3:
    """Moving image resampled into the fixed frame: out(x) = moving(x + d(x))."""
    d = dense_field(g, moving.geometry).data
    idx = moving.geometry.to_index(moving.geometry.voxel_centers() + d)
    values, _ = trilinear(moving.data, idx.reshape(-1, 3))
    return moving.with_data(values.reshape(moving.dims))


# ---------------------------------------------------------------------------
# Energies
# ---------------------------------------------------------------------------

class LccMetric:
    """
    Local correlation coefficient dissimilarity with its analytic gradient
    with respect to control displacements. Fixed-image statistics are
    computed once per instance.
    """

    def __init__(self, fixed: Volume3, moving: Volume3, cfg: RegistrationConfig):
        if not fixed.geometry.matches(moving.geometry):
            raise RegistrationError(
                f"Fixed and moving geometry differ: {fixed.geometry} vs {moving.geometry}; resample upstream"
            )
        self.geometry = fixed.geometry
        self.sigma = (cfg.lcc_sigma_voxels,) * 3
        self.F = fixed.data.astype(np.float64)
        self.M = moving.data.astype(np.float64)
        value_range = float(self.F.max() - self.F.min())
        self.eps = cfg.lcc_epsilon * (value_range ** 2 if value_range > 0 else 1.0)

        self.mF = smooth_array(self.F, self.sigma)
        self.varF = np.maximum(smooth_array(self.F * self.F, self.sigma) - self.mF ** 2, 0.0) + self.eps
        self.sqrt_varF = np.sqrt(self.varF)
        self.spacing = np.asarray(self.geometry.spacing)
        dims = self.geometry.dims
        self.base_idx = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"), axis=-1)
        self._weights: Dict[Tuple, Tuple[np.ndarray, ...]] = {}

    def _weights_for(self, g: ControlGrid):
        key = (g.grid_dims, g.spacing_voxels)
        if key not in self._weights:
            if not g.geometry.matches(self.geometry):
                raise RegistrationError("Control grid is anchored to a different geometry than the images")
            self._weights[key] = _grid_weights(g)
        return self._weights[key]

    def energy(self, g: ControlGrid, with_gradient: bool = True):
        weights = self._weights_for(g)
        dims = self.geometry.dims
        d = _grid_to_dense(g.displacements, weights)
        idx = self.base_idx + d / self.spacing
        W, dW = trilinear(self.M, idx.reshape(-1, 3), with_gradient=with_gradient)
        W = W.reshape(dims)

        G = lambda a: smooth_array(a, self.sigma)
        mW = G(W)
        varW_raw = G(W * W) - mW ** 2
        varW = np.maximum(varW_raw, 0.0) + self.eps
        cov = G(self.F * W) - self.mF * mW
        denom = self.sqrt_varF * np.sqrt(varW)
        v = self.geometry.voxel_volume
        e_d = -v * float(np.sum(cov / denom))
        if not with_gradient:
            return e_d, None

        GT = lambda a: smooth_array(a, self.sigma, adjoint=True)
        A = -v / denom
        B = np.where(varW_raw > 0.0, 0.5 * v * cov / (self.sqrt_varF * varW ** 1.5), 0.0)
        dE_dW = self.F * GT(A) + GT(-A * self.mF - 2.0 * B * mW) + 2.0 * W * GT(B)
        dE_dd = dE_dW[..., None] * dW.reshape(dims + (3,)) / self.spacing
        return e_d, _dense_to_grid(dE_dd, weights)


def lcc_energy(fixed: Volume3, moving: Volume3, g: ControlGrid, cfg: RegistrationConfig):
    return LccMetric(fixed, moving, cfg).energy(g)


def _axis_slices(ndim: int, axis: int):
    lo = [slice(None)] * ndim
    hi = [slice(None)] * ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return tuple(lo), tuple(hi)


def tv_energy(g: ControlGrid, tv_epsilon_mm: float = 1e-3):
    """
    Smoothed isotropic total variation of the control displacements.
    Forward differences per mm, zero at the far boundary; E_R(0) == 0.
    """
    k = g.displacements
    h = g.control_spacing_mm
    eta = g.cell_volume
    diffs = []
    s = np.zeros(g.grid_dims)
    for i in range(3):
        lo, hi = _axis_slices(4, i)
        di = np.zeros_like(k)
        di[lo] = (k[hi] - k[lo]) / h[i]
        s += np.sum(di * di, axis=-1)
        diffs.append(di)
    root = np.sqrt(s + tv_epsilon_mm ** 2)
    e_r = eta * float(np.sum(root - tv_epsilon_mm))

    grad = np.zeros_like(k)
    for i, di in enumerate(diffs):
        lo, hi = _axis_slices(4, i)
        q = eta * di / root[..., None] / h[i]
        grad[lo] -= q[lo]
        grad[hi] += q[lo]
    return e_r, grad


def objective(fixed: Volume3, moving: Volume3, g: ControlGrid, cfg: RegistrationConfig):
    e_d, g_d = lcc_energy(fixed, moving, g, cfg)
    e_r, g_r = tv_energy(g, cfg.tv_epsilon_mm)
    return e_d + cfg.lam * e_r, g_d + cfg.lam * g_r


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

@dataclass
class HistoryEntry:
    level: int
    iteration: int
    e_d: float
    e_r: float
    total: float


@dataclass
class RegistrationResult:
    control_grid: ControlGrid
    objective_history: List[HistoryEntry] = field(default_factory=list)
    iterations_used: List[int] = field(default_factory=list)   # coarse -> fine
    level_converged: List[bool] = field(default_factory=list)  # coarse -> fine
    message: str = ""

    @property
    def converged(self) -> bool:
        return bool(self.level_converged) and all(self.level_converged)


def build_pyramid(fixed: Volume3, moving: Volume3, levels: int) -> List[Tuple[Volume3, Volume3]]:
    """Image pairs ordered coarse -> fine."""
    pairs = [(fixed, moving)]
    while len(pairs) < levels:
        f, m = pairs[-1]
        if any(n < 4 for n in f.dims):
            log.info("pyramid limited to %d level(s): dims %s too small to halve", len(pairs), f.dims)
            break
        pairs.append((downsample2(f), downsample2(m)))
    return pairs[::-1]


class _LevelProblem:
    def __init__(self, metric: LccMetric, template: ControlGrid, cfg: RegistrationConfig):
        self.metric = metric
        self.template = template
        self.cfg = cfg
        self.cache: "OrderedDict[bytes, Tuple[float, float, float]]" = OrderedDict()

    def __call__(self, x: np.ndarray):
        g = self.template.with_displacements(x)
        e_d, g_d = self.metric.energy(g)
        e_r, g_r = tv_energy(g, self.cfg.tv_epsilon_mm)
        total = e_d + self.cfg.lam * e_r
        if not (math.isfinite(total) and np.all(np.isfinite(g_d))):
            raise RegistrationError("Non-finite objective; check the input images for NaN/Inf or constant regions")
        self.cache[x.tobytes()] = (e_d, e_r, total)
        if len(self.cache) > 32:
            self.cache.popitem(last=False)
        return total, (g_d + self.cfg.lam * g_r).ravel()

    def terms(self, x: np.ndarray) -> Tuple[float, float, float]:
        key = x.tobytes()
        if key not in self.cache:
            self(x)
        return self.cache[key]


def register(fixed: Volume3, moving: Volume3, cfg: RegistrationConfig) -> RegistrationResult:
    cfg.validate()
    if not fixed.geometry.matches(moving.geometry):
        raise RegistrationError(
            f"Fixed and moving geometry differ: {fixed.geometry} vs {moving.geometry}; resample upstream"
        )

    pairs = build_pyramid(fixed, moving, cfg.pyramid_levels)
    result = RegistrationResult(control_grid=ControlGrid.zeros(fixed.geometry, cfg.control_spacing_voxels))
    grid: Optional[ControlGrid] = None

    for i, (f_img, m_img) in enumerate(pairs):
        level = len(pairs) - 1 - i
        if grid is None:
            grid = ControlGrid.zeros(f_img.geometry, cfg.control_spacing_voxels)
        else:
            grid = upsample_grid(grid, f_img.geometry, cfg.control_spacing_voxels)

        problem = _LevelProblem(LccMetric(f_img, m_img, cfg), grid, cfg)
        x0 = grid.displacements.ravel().copy()
        total0, grad0 = problem(x0)
        gmax0 = float(np.max(np.abs(grad0)))
        tol = cfg.gradient_tolerance if cfg.gradient_tolerance is not None else cfg.relative_gradient_tolerance * gmax0

        e_d, e_r, total = problem.terms(x0)
        result.objective_history.append(HistoryEntry(level, 0, e_d, e_r, total))
        iteration = 0

        if gmax0 <= tol:
            result.iterations_used.append(0)
            result.level_converged.append(True)
            result.message = "gradient below tolerance at start"
            log.info("level %d dims=%s grid=%s: already converged (|g|=%.3g)", level, f_img.dims, grid.grid_dims, gmax0)
            continue

        def record(xk: np.ndarray) -> None:
            nonlocal iteration
            iteration += 1
            ed, er, tot = problem.terms(xk)
            if tot <= result.objective_history[-1].total:
                result.objective_history.append(HistoryEntry(level, iteration, ed, er, tot))

        res = minimize(
            problem,
            x0,
            jac=True,
            method="L-BFGS-B",
            callback=record,
            options={
                "maxiter": cfg.max_iterations,
                "gtol": tol,
                "ftol": cfg.function_tolerance,
                "maxcor": cfg.lbfgs_memory,
            },
        )
        _, grad_final = problem(res.x)
        gmax = float(np.max(np.abs(grad_final)))
        grid = grid.with_displacements(res.x)
        result.iterations_used.append(int(res.nit))
        result.level_converged.append(bool(gmax < tol or res.success))
        result.message = f"level {level}: {res.message}"
        if not result.level_converged[-1]:
            log.warning("level %d stopped before convergence: %s", level, res.message)
        log.info(
            "level %d dims=%s grid=%s: %d iterations, objective %.6g -> %.6g, |g| %.3g (tol %.3g)",
            level, f_img.dims, grid.grid_dims, res.nit, total0, float(res.fun), gmax, tol,
        )

    result.control_grid = grid if grid is not None else result.control_grid
    return result


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_control_grid(g: ControlGrid, path: Path) -> None:
    """
    Sidecar text header + raw little-endian float64 displacements,
    x fastest with components interleaved (d1, d2, d3 per control point).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw_path = path.with_suffix(".raw")
    geom = g.geometry
    lines = [
        "# akin control grid (raw little-endian float64, x fastest, components interleaved)",
        "spacing_voxels=" + " ".join(str(k) for k in g.spacing_voxels),
        "grid_dims=" + " ".join(str(n) for n in g.grid_dims),
        "ref_dims=" + " ".join(str(n) for n in geom.dims),
        "ref_spacing_mm=" + " ".join(repr(s) for s in geom.spacing),
        "ref_origin_mm=" + " ".join(repr(o) for o in geom.origin),
        f"data_file={raw_path.name}",
    ]
    np.ascontiguousarray(g.displacements.transpose(2, 1, 0, 3)).astype("<f8").tofile(raw_path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_control_grid(path: Path) -> ControlGrid:
    path = Path(path)
    if not path.exists():
        raise RegistrationError(f"Control grid not found: {path}. Run the register stage first.")
    fields: Dict[str, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    ints = lambda key: tuple(int(x) for x in fields[key].split())
    floats = lambda key: tuple(float(x) for x in fields[key].split())
    grid_dims = ints("grid_dims")
    raw = np.fromfile(path.parent / fields["data_file"], dtype="<f8")
    expected = int(np.prod(grid_dims)) * 3
    if raw.size != expected:
        raise RegistrationError(f"Control grid {path}: expected {expected} values, found {raw.size}")
    disp = raw.reshape(grid_dims[::-1] + (3,)).transpose(2, 1, 0, 3)
    geom = VolumeGeometry(ints("ref_dims"), floats("ref_spacing_mm"), floats("ref_origin_mm"))
    return ControlGrid(ints("spacing_voxels"), disp, geom)


def history_frame(result: RegistrationResult) -> pd.DataFrame:
    return pd.DataFrame(
        [{"level": h.level, "iteration": h.iteration, "E_D": h.e_d, "E_R": h.e_r, "total": h.total}
         for h in result.objective_history],
        columns=["level", "iteration", "E_D", "E_R", "total"],
    )


def write_history_csv(result: RegistrationResult, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history_frame(result).to_csv(path, index=False, float_format="%.17g")
