from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Sequence, Tuple

import nibabel as nib
import numpy as np
from scipy import ndimage

from errors import VolumeError

log = logging.getLogger(__name__)

Triple = Tuple[float, float, float]
IndexTriple = Tuple[int, int, int]

# NIfTI datatype codes accepted on load: int16, float32, uint16
NIFTI_DTYPES = {4: "int16", 16: "float32", 512: "uint16"}
SIDECAR_SUFFIXES = (".vol", ".txt", ".hdr")


def _triple(values: Sequence[float], name: str) -> Triple:
    vals = tuple(float(x) for x in values)
    if len(vals) != 3:
        raise VolumeError(f"{name} must have 3 components, got {len(vals)}")
    return vals  # type: ignore[return-value]


@dataclass(frozen=True)
class VolumeGeometry:
    dims: IndexTriple
    spacing: Triple
    origin: Triple

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def matches(self, other: "VolumeGeometry", tol: float = 1e-6) -> bool:
        return (
            tuple(self.dims) == tuple(other.dims)
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
        )

    def to_index(self, points: np.ndarray) -> np.ndarray:
        """Physical points (mm) -> continuous voxel indices."""
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_centers(self) -> np.ndarray:
        """All voxel centers in mm, shape (nx, ny, nz, 3)."""
        axes = [self.origin[a] + self.spacing[a] * np.arange(self.dims[a]) for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def extent_min(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    def extent_max(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.spacing) * (np.asarray(self.dims) - 1)


@dataclass(frozen=True)
class Volume3:
    """
    Axis-aligned scalar volume. data has shape (nx, ny, nz) and is indexed
    [i, j, k]; voxel (i, j, k) sits at origin + (i, j, k) * spacing.
    """
    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise VolumeError(f"Volume data must be 3D, got {data.ndim}D")
        if any(n < 2 for n in data.shape):
            raise VolumeError(f"Every dimension must be >= 2 voxels, got dims={data.shape}")
        spacing = _triple(self.spacing, "spacing")
        if any(s <= 0 for s in spacing):
            raise VolumeError(f"Spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @property
    def dims(self) -> IndexTriple:
        return tuple(int(n) for n in self.data.shape)  # type: ignore[return-value]

    @property
    def geometry(self) -> VolumeGeometry:
        return VolumeGeometry(self.dims, self.spacing, self.origin)

    @property
    def voxel_count(self) -> int:
        return self.geometry.voxel_count

    @property
    def voxel_volume(self) -> float:
        return self.geometry.voxel_volume

    def with_data(self, data: np.ndarray) -> "Volume3":
        return Volume3(data, self.spacing, self.origin)


@dataclass(frozen=True)
class VectorVolume3:
    """Three channels per voxel, data shape (nx, ny, nz, 3)."""
    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[-1] != 3:
            raise VolumeError(f"Vector volume data must have shape (nx, ny, nz, 3), got {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @property
    def dims(self) -> IndexTriple:
        return tuple(int(n) for n in self.data.shape[:3])  # type: ignore[return-value]

    @property
    def geometry(self) -> VolumeGeometry:
        return VolumeGeometry(self.dims, self.spacing, self.origin)

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Trilinear sample of all three channels at points (mm), clamped like sample_trilinear."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        idx = self.geometry.to_index(pts)
        out = np.stack([trilinear(self.data[..., c], idx)[0] for c in range(3)], axis=-1)
        return out[0] if np.ndim(points) == 1 else out


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _parse_sidecar(path: Path) -> Dict[str, str]:
    fields: Dict[str, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeError(f"Malformed sidecar line in {path}: {line!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    for key in ("dims", "spacing_mm", "origin_mm", "data_file"):
        if key not in fields:
            raise VolumeError(f"Sidecar {path} is missing '{key}'")
    return fields


def _load_sidecar(path: Path) -> Volume3:
    fields = _parse_sidecar(path)
    dims = tuple(int(x) for x in fields["dims"].split())
    if len(dims) != 3:
        raise VolumeError(f"Only 3D volumes are supported, sidecar {path} declares dims={dims}")
    spacing = [float(x) for x in fields["spacing_mm"].split()]
    origin = [float(x) for x in fields["origin_mm"].split()]
    raw_path = path.parent / fields["data_file"]
    if not raw_path.exists():
        raise VolumeError(f"Data file not found: {raw_path}")

    raw = np.fromfile(raw_path, dtype="<f4")
    expected = int(np.prod(dims))
    if raw.size != expected:
        raise VolumeError(
            f"Header/data size mismatch for {path}: dims {dims} need {expected} values, file has {raw.size}"
        )
    return Volume3(raw.reshape(dims, order="F"), spacing, origin)


def _save_sidecar(v: Volume3, path: Path) -> None:
    raw_path = path.with_suffix(".raw")
    header = [
        "# akin volume sidecar (raw little-endian float32, x fastest)",
        "dims=" + " ".join(str(n) for n in v.dims),
        "spacing_mm=" + " ".join(repr(s) for s in v.spacing),
        "origin_mm=" + " ".join(repr(o) for o in v.origin),
        f"data_file={raw_path.name}",
    ]
    v.data.astype("<f4").ravel(order="F").tofile(raw_path)
    path.write_text("\n".join(header) + "\n", encoding="utf-8")


def _load_nifti(path: Path) -> Volume3:
    img = nib.load(str(path))
    if not isinstance(img, nib.Nifti1Image):
        raise VolumeError(f"{path} is not a NIfTI-1 image")
    hdr = img.header
    ndim = int(hdr["dim"][0])
    if ndim != 3:
        raise VolumeError(f"Only 3D NIfTI images are supported, {path} has dim[0]={ndim}")
    code = int(hdr["datatype"])
    if code not in NIFTI_DTYPES:
        raise VolumeError(f"Unsupported NIfTI datatype code {code} in {path}; use int16, uint16 or float32")
    if hdr.endianness != "<":
        raise VolumeError(f"{path} is big-endian; only little-endian NIfTI is supported")

    affine = np.asarray(img.affine, dtype=np.float64)
    linear = affine[:3, :3]
    diag = np.diag(linear)
    if np.any(np.abs(linear - np.diag(diag)) > 1e-6) or np.any(diag <= 0):
        raise VolumeError(
            f"{path} has an oblique or flipped orientation; resample to axis-aligned (R, A, S) first"
        )
    data = img.get_fdata(dtype=np.float32)
    return Volume3(data, tuple(diag), tuple(affine[:3, 3]))


def _save_nifti(v: Volume3, path: Path) -> None:
    affine = np.eye(4)
    affine[:3, :3] = np.diag(v.spacing)
    affine[:3, 3] = v.origin
    img = nib.Nifti1Image(v.data.astype(np.float32), affine)
    img.header.set_qform(affine, code=1)
    img.header.set_sform(affine, code=1)
    nib.save(img, str(path))


def load_volume(path: Path) -> Volume3:
    path = Path(path)
    if not path.exists():
        raise VolumeError(f"Volume file not found: {path}")
    name = path.name.lower()
    try:
        if name.endswith(".nii.gz"):
            raise VolumeError(f"Compressed NIfTI is not supported: {path}")
        if name.endswith(".nii"):
            v = _load_nifti(path)
        elif path.suffix.lower() in SIDECAR_SUFFIXES:
            v = _load_sidecar(path)
        else:
            raise VolumeError(f"Unsupported volume format: {path} (expected .nii or a sidecar {SIDECAR_SUFFIXES})")
    except OSError as e:
        raise VolumeError(f"Could not read {path}: {e}") from e
    log.debug("loaded %s dims=%s spacing=%s", path, v.dims, v.spacing)
    return v


def save_volume(v: Volume3, path: Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.name.lower().endswith(".nii"):
            _save_nifti(v, path)
        else:
            _save_sidecar(v, path)
    except OSError as e:
        raise VolumeError(f"Could not write {path}: {e}") from e


def save_vector_volume(v: VectorVolume3, path: Path) -> None:
    """Sidecar + raw little-endian float64, x fastest with components interleaved."""
    path = Path(path)
    raw_path = path.with_suffix(".raw")
    header = [
        "# akin vector volume sidecar (raw little-endian float64, components interleaved, x fastest)",
        "dims=" + " ".join(str(n) for n in v.dims),
        "components=3",
        "spacing_mm=" + " ".join(repr(s) for s in v.spacing),
        "origin_mm=" + " ".join(repr(o) for o in v.origin),
        f"data_file={raw_path.name}",
    ]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(v.data.transpose(2, 1, 0, 3)).astype("<f8").tofile(raw_path)
        path.write_text("\n".join(header) + "\n", encoding="utf-8")
    except OSError as e:
        raise VolumeError(f"Could not write {path}: {e}") from e


def load_vector_volume(path: Path) -> VectorVolume3:
    path = Path(path)
    if not path.exists():
        raise VolumeError(f"Vector volume file not found: {path}")
    fields = _parse_sidecar(path)
    if fields.get("components") != "3":
        raise VolumeError(f"{path} is not a 3-component vector volume")
    dims = tuple(int(x) for x in fields["dims"].split())
    raw = np.fromfile(path.parent / fields["data_file"], dtype="<f8")
    if len(dims) != 3 or raw.size != int(np.prod(dims)) * 3:
        raise VolumeError(f"Header/data size mismatch for {path}: dims {dims}, file has {raw.size} values")
    data = raw.reshape(dims[2], dims[1], dims[0], 3).transpose(2, 1, 0, 3)
    spacing = [float(x) for x in fields["spacing_mm"].split()]
    origin = [float(x) for x in fields["origin_mm"].split()]
    return VectorVolume3(data, spacing, origin)


# ---------------------------------------------------------------------------
# Interpolation
# ---------------------------------------------------------------------------

def trilinear(data: np.ndarray, idx: np.ndarray, with_gradient: bool = False):
    """
    Trilinear interpolation of data at continuous indices idx (N, 3), clamped
    to the voxel-center box. Returns (values, dvalue/dindex or None).
    The derivative is zero along an axis where the index was clamped.
    """
    idx = np.asarray(idx, dtype=np.float64)
    shape = np.asarray(data.shape)
    hi = shape - 1
    clipped = np.clip(idx, 0.0, hi)
    base = np.minimum(np.floor(clipped).astype(np.intp), hi - 1)
    frac = clipped - base

    i0, j0, k0 = base[:, 0], base[:, 1], base[:, 2]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz

    arr = np.asarray(data, dtype=np.float64)
    c000 = arr[i0, j0, k0]
    c100 = arr[i0 + 1, j0, k0]
    c010 = arr[i0, j0 + 1, k0]
    c110 = arr[i0 + 1, j0 + 1, k0]
    c001 = arr[i0, j0, k0 + 1]
    c101 = arr[i0 + 1, j0, k0 + 1]
    c011 = arr[i0, j0 + 1, k0 + 1]
    c111 = arr[i0 + 1, j0 + 1, k0 + 1]

    c00 = c000 * gx + c100 * fx
    c10 = c010 * gx + c110 * fx
    c01 = c001 * gx + c101 * fx
    c11 = c011 * gx + c111 * fx
    c0 = c00 * gy + c10 * fy
    c1 = c01 * gy + c11 * fy
    values = c0 * gz + c1 * fz

    if not with_gradient:
        return values, None

    dx = ((c100 - c000) * gy + (c110 - c010) * fy) * gz + ((c101 - c001) * gy + (c111 - c011) * fy) * fz
    dy = (c10 - c00) * gz + (c11 - c01) * fz
    dz = c1 - c0
    grad = np.stack([dx, dy, dz], axis=-1)
    inside = (idx >= 0.0) & (idx <= hi)
    grad[~inside] = 0.0
    return values, grad


def sample_trilinear(v: Volume3, p) -> np.ndarray | float:
    """Intensity at physical point(s) p in mm; p is (3,) or (N, 3)."""
    pts = np.asarray(p, dtype=np.float64)
    values, _ = trilinear(v.data, v.geometry.to_index(np.atleast_2d(pts)))
    return float(values[0]) if pts.ndim == 1 else values


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------

def gaussian_kernel1d(sigma_vox: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma_vox))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return w / w.sum()


def smooth_array(
    arr: np.ndarray,
    sigma_vox: Sequence[float],
    adjoint: bool = False,
    edges: str = "renormalize",
) -> np.ndarray:
    """
    Separable Gaussian smoothing truncated at 3 sigma.

    edges="renormalize" zero-pads and renormalises the kernel at borders, so
    the output stays within the input range; adjoint=True applies the
    transpose operator (used for analytic metric gradients).
    edges="linear" pads by point reflection about the edge sample
    (2*edge - mirror), which reproduces linear ramps exactly up to the border.
    """
    if edges not in ("renormalize", "linear"):
        raise VolumeError(f"Unknown edge mode {edges!r}; use 'renormalize' or 'linear'")
    if adjoint and edges != "renormalize":
        raise VolumeError("The adjoint is only available for renormalised edges")
    out = np.asarray(arr, dtype=np.float64)
    for axis, s in enumerate(sigma_vox):
        if s <= 0:
            continue
        w = gaussian_kernel1d(float(s))
        n = out.shape[axis]
        if edges == "linear":
            r = len(w) // 2
            pad = [(0, 0)] * out.ndim
            pad[axis] = (r, r)
            padded = np.pad(out, pad, mode="reflect", reflect_type="odd")
            out = np.take(ndimage.correlate1d(padded, w, axis=axis, mode="nearest"), np.arange(r, r + n), axis=axis)
            continue
        norm = ndimage.correlate1d(np.ones(n), w, mode="constant", cval=0.0)
        shape = [1] * out.ndim
        shape[axis] = n
        norm = norm.reshape(shape)
        if adjoint:
            out = ndimage.correlate1d(out / norm, w, axis=axis, mode="constant", cval=0.0)
        else:
            out = ndimage.correlate1d(out, w, axis=axis, mode="constant", cval=0.0) / norm
    return out


def gaussian_smooth(v: Volume3, sigma: Sequence[float]) -> Volume3:
    sigma = _triple(sigma, "sigma")
    if any(s < 0 for s in sigma):
        raise VolumeError(f"sigma must be >= 0, got {sigma}")
    sigma_vox = [s / d for s, d in zip(sigma, v.spacing)]
    return v.with_data(smooth_array(v.data, sigma_vox))


def gradient_central(v: Volume3) -> VectorVolume3:
    """Central differences inside, one-sided at the borders, in intensity/mm."""
    parts = np.gradient(v.data.astype(np.float64), *v.spacing, edge_order=1)
    return VectorVolume3(np.stack(parts, axis=-1), v.spacing, v.origin)


# ---------------------------------------------------------------------------
# Geometry edits
# ---------------------------------------------------------------------------

def crop(v: Volume3, lo: Sequence[int], hi: Sequence[int]) -> Volume3:
    lo = tuple(int(x) for x in lo)
    hi = tuple(int(x) for x in hi)
    for a in range(3):
        if not (0 <= lo[a] < hi[a] <= v.dims[a]):
            raise VolumeError(f"Crop window out of range on axis {a}: lo={lo[a]} hi={hi[a]} dims={v.dims[a]}")
    data = v.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].copy()
    origin = tuple(o + l * s for o, l, s in zip(v.origin, lo, v.spacing))
    return Volume3(data, v.spacing, origin)


def downsample2(v: Volume3) -> Volume3:
    if any(n < 4 for n in v.dims):
        raise VolumeError(f"Volume too small to downsample: dims={v.dims} (need >= 4 per axis)")
    smoothed = smooth_array(v.data, (1.0, 1.0, 1.0), edges="linear")
    spacing = tuple(2.0 * s for s in v.spacing)
    return Volume3(smoothed[::2, ::2, ::2], spacing, v.origin)
