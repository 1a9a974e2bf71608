from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np
import yaml

from errors import SynthesisError
from surface_geometry import PointCloud
from volume_core import VectorVolume3, Volume3, VolumeGeometry, gaussian_smooth, trilinear

log = logging.getLogger(__name__)

PROFILES = ("sin2", "constant")
# keeps phantom fields invertible on the vessel axis; wall points lie far outside it
PHANTOM_CORE_RADIUS_MM = 5.0


@dataclass
class PhantomSpec:
    dims: Tuple[int, int, int] = (112, 112, 74)
    spacing: Tuple[float, float, float] = (0.63, 0.63, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    inner_radius_mm: float = 22.0
    outer_radius_mm: float = 25.0
    intensities: Tuple[float, float, float] = (-50.0, 120.0, 300.0)   # background, wall, lumen
    blur_sigma_voxels: float = 0.8
    noise_sigma: float = 10.0
    rng_seed: int = 0

    def validate(self) -> None:
        if len(self.dims) != 3 or any(int(n) < 2 for n in self.dims):
            raise SynthesisError(f"Invalid phantom.dims: {self.dims!r}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise SynthesisError(f"Invalid phantom.spacing: {self.spacing!r}")
        if len(self.intensities) != 3:
            raise SynthesisError(f"Invalid phantom.intensities: {self.intensities!r}")
        half = min((self.dims[a] - 1) * self.spacing[a] / 2.0 for a in (0, 1))
        if not 0 < self.inner_radius_mm:
            raise SynthesisError(f"Invalid phantom.inner_radius_mm: {self.inner_radius_mm!r} must be > 0")
        if not self.inner_radius_mm < self.outer_radius_mm:
            raise SynthesisError(
                f"Invalid phantom.outer_radius_mm: {self.outer_radius_mm!r} must exceed inner_radius_mm "
                f"{self.inner_radius_mm!r}"
            )
        if not self.outer_radius_mm < half:
            raise SynthesisError(
                f"Invalid phantom.outer_radius_mm: {self.outer_radius_mm!r} must be below half the lateral extent ({half:.2f} mm)"
            )
        if self.blur_sigma_voxels < 0:
            raise SynthesisError(f"Invalid phantom.blur_sigma_voxels: {self.blur_sigma_voxels!r}")
        if self.noise_sigma < 0:
            raise SynthesisError(f"Invalid phantom.noise_sigma: {self.noise_sigma!r}")

    @property
    def geometry(self) -> VolumeGeometry:
        return VolumeGeometry(tuple(int(n) for n in self.dims), tuple(self.spacing), tuple(self.origin))

    @property
    def axis_point(self) -> np.ndarray:
        """Vessel axis at the bottom slice, centred laterally."""
        o = np.asarray(self.origin, dtype=np.float64)
        half = (np.asarray(self.dims) - 1) * np.asarray(self.spacing) / 2.0
        return np.array([o[0] + half[0], o[1] + half[1], o[2]])

    @property
    def length_mm(self) -> float:
        return (self.dims[2] - 1) * self.spacing[2]


@dataclass
class AnalyticField:
    kind: str = "radial_inflation"
    dr_max_mm: float = 1.0
    axial_profile: str = "sin2"
    axis_point: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis_dir: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    length_mm: float = 73.0
    axial_mm: float = 0.0            # tangential (along-axis) amplitude, same profile
    core_radius_mm: float = 0.0      # >0: radial magnitude ramps as rho / core inside this radius

    def validate(self) -> None:
        if self.kind != "radial_inflation":
            raise SynthesisError(f"Invalid field.kind: {self.kind!r} (supported: radial_inflation)")
        if self.axial_profile not in PROFILES:
            raise SynthesisError(f"Invalid field.axial_profile: {self.axial_profile!r} (supported: {PROFILES})")
        if self.dr_max_mm < 0:
            raise SynthesisError(f"Invalid field.dr_max_mm: {self.dr_max_mm!r} must be >= 0")
        if self.length_mm <= 0:
            raise SynthesisError(f"Invalid field.length_mm: {self.length_mm!r} must be > 0")
        if self.core_radius_mm < 0:
            raise SynthesisError(f"Invalid field.core_radius_mm: {self.core_radius_mm!r} must be >= 0")
        if np.linalg.norm(self.axis_dir) == 0:
            raise SynthesisError("Invalid field.axis_dir: zero vector")

    def profile(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        inside = (z >= 0.0) & (z <= self.length_mm)
        if self.axial_profile == "constant":
            return inside.astype(np.float64)
        return np.where(inside, np.sin(math.pi * z / self.length_mm) ** 2, 0.0)


def field_for_phantom(spec: PhantomSpec, **overrides: Any) -> AnalyticField:
    """Field whose axis and support match the phantom vessel."""
    base = dict(
        axis_point=tuple(float(x) for x in spec.axis_point),
        axis_dir=(0.0, 0.0, 1.0),
        length_mm=float(spec.length_mm),
        core_radius_mm=PHANTOM_CORE_RADIUS_MM,
    )
    base.update(overrides)
    return AnalyticField(**base)


# ---------------------------------------------------------------------------
# Phantom
# ---------------------------------------------------------------------------

def _axis_distance(spec: PhantomSpec) -> np.ndarray:
    centers = spec.geometry.voxel_centers()
    c = spec.axis_point
    return np.hypot(centers[..., 0] - c[0], centers[..., 1] - c[1])


def generate_phantom(spec: PhantomSpec) -> Tuple[Volume3, Volume3]:
    """Cylindrical vessel along S: (blurred noisy intensity volume, unblurred wall annulus mask)."""
    spec.validate()
    rho = _axis_distance(spec)
    background, wall, lumen = spec.intensities
    is_lumen = rho < spec.inner_radius_mm
    is_wall = (rho >= spec.inner_radius_mm) & (rho <= spec.outer_radius_mm)

    data = np.full(rho.shape, background, dtype=np.float32)
    data[is_wall] = wall
    data[is_lumen] = lumen
    image = Volume3(data, spec.spacing, spec.origin)
    if spec.blur_sigma_voxels > 0:
        image = gaussian_smooth(image, tuple(spec.blur_sigma_voxels * s for s in spec.spacing))
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.rng_seed)
        noise = rng.normal(0.0, spec.noise_sigma, size=image.dims).astype(np.float32)
        image = image.with_data(image.data + noise)

    mask = Volume3(is_wall.astype(np.float32), spec.spacing, spec.origin)
    log.info("phantom: dims=%s wall voxels=%d", image.dims, int(is_wall.sum()))
    return image, mask


def vessel_mask(spec: PhantomSpec) -> Volume3:
    """Filled vessel (lumen and wall) indicator."""
    spec.validate()
    filled = _axis_distance(spec) <= spec.outer_radius_mm
    return Volume3(filled.astype(np.float32), spec.spacing, spec.origin)


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------

def eval_field(f: AnalyticField, p) -> np.ndarray:
    """Forward displacement (mm) at p; accepts a single point or an (N, 3) array."""
    pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
    a = np.asarray(f.axis_dir, dtype=np.float64)
    a = a / np.linalg.norm(a)
    r = pts - np.asarray(f.axis_point, dtype=np.float64)
    z = r @ a
    radial = r - z[:, None] * a
    rho = np.linalg.norm(radial, axis=1)
    prof = f.profile(z)

    on_axis = rho < 1e-9
    rho_hat = np.zeros_like(radial)
    rho_hat[~on_axis] = radial[~on_axis] / rho[~on_axis, None]
    scale = np.ones_like(rho)
    if f.core_radius_mm > 0:
        scale = np.minimum(1.0, rho / f.core_radius_mm)

    u = (f.dr_max_mm * prof * scale)[:, None] * rho_hat + (f.axial_mm * prof)[:, None] * a
    return u[0] if np.ndim(p) == 1 else u


def _forward(f: Union[AnalyticField, VectorVolume3], pts: np.ndarray) -> np.ndarray:
    if isinstance(f, VectorVolume3):
        return f.sample(pts).reshape(-1, 3)
    return eval_field(f, pts).reshape(-1, 3)


def invert_field(
    f: Union[AnalyticField, VectorVolume3],
    p,
    tol_mm: float = 1e-3,
    max_iterations: int = 50,
) -> np.ndarray:
    """Backward displacement v with p + v + u(p + v) = p, by fixed-point iteration v <- -u(p + v)."""
    pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
    v = -_forward(f, pts)
    for _ in range(max_iterations):
        v_new = -_forward(f, pts + v)
        delta = np.max(np.linalg.norm(v_new - v, axis=1)) if len(pts) else 0.0
        v = v_new
        if delta < tol_mm:
            break
    else:
        raise SynthesisError(
            f"Field inversion did not converge in {max_iterations} iterations (last update {delta:.3g} mm); "
            "reduce the displacement amplitude"
        )
    return v[0] if np.ndim(p) == 1 else v


def warp_volume(v: Volume3, f: Union[AnalyticField, VectorVolume3]) -> Volume3:
    """Forward-push warp: a feature at p in v appears at p + u(p) in the result."""
    geom = v.geometry
    centers = geom.voxel_centers().reshape(-1, 3)
    back = invert_field(f, centers)
    values, _ = trilinear(v.data, geom.to_index(centers + back))
    return v.with_data(values.reshape(v.dims))


def ground_truth_at_points(f: AnalyticField, cloud: PointCloud) -> np.ndarray:
    return eval_field(f, cloud.points).reshape(-1, 3)


# ---------------------------------------------------------------------------
# Parameters file
# ---------------------------------------------------------------------------

def _from_mapping(cls, data: Mapping[str, Any], section: str):
    known = {fld.name for fld in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise SynthesisError(f"Unknown {section} keys: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**values)


def _to_mapping(obj) -> Dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(obj).items()}


def field_from_config(data: Optional[Mapping[str, Any]], spec: PhantomSpec) -> AnalyticField:
    """Field keys from a config section; axis and support default to the phantom vessel."""
    data = dict(data or {})
    f = field_for_phantom(spec)
    merged = _to_mapping(f)
    merged.update(data)
    f = _from_mapping(AnalyticField, merged, "field")
    f.validate()
    return f


def phantom_from_config(data: Optional[Mapping[str, Any]]) -> PhantomSpec:
    spec = _from_mapping(PhantomSpec, dict(data or {}), "phantom")
    spec.validate()
    return spec


def write_truth_params(path: Path, spec: PhantomSpec, f: AnalyticField) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"phantom": _to_mapping(spec), "field": _to_mapping(f)}
    path.write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")


def load_truth_params(path: Path) -> Tuple[PhantomSpec, AnalyticField]:
    path = Path(path)
    if not path.exists():
        raise SynthesisError(f"Truth parameters not found: {path}. Run the synth stage first.")
    doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    spec = phantom_from_config(doc.get("phantom"))
    f = _from_mapping(AnalyticField, doc.get("field") or {}, "field")
    f.validate()
    return spec, f
