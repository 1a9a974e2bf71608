from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, Iterable, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import KinematicsError
from registration import ControlGrid, interpolate_displacement
from surface_geometry import PointCloud
from synthetic_truth import AnalyticField, eval_field
from volume_core import VectorVolume3

log = logging.getLogger(__name__)

FieldSource = Union[ControlGrid, VectorVolume3, AnalyticField, np.ndarray]

COHORT_COLUMNS = ("U_o", "u_o", "eps_o")


@dataclass
class KinematicsOptions:
    sign: int = 1                    # +1 or -1; converts the registration field to diastole->systole motion
    percentile: float = 99.0
    signed_percentiles: bool = False

    def validate(self) -> None:
        if self.sign not in (1, -1):
            raise KinematicsError(f"Invalid kinematics.sign: {self.sign!r} (expected 1 or -1)")
        if not 0.0 < self.percentile < 100.0:
            raise KinematicsError(f"Invalid kinematics.percentile: {self.percentile!r}")


class ChannelStats(NamedTuple):
    min: float
    max: float
    mean: float
    std: float


@dataclass
class WallKinematics:
    points: np.ndarray          # (N, 3) mm
    displacement: np.ndarray    # (N, 3) mm
    u_normal: np.ndarray        # (N,) mm, + outward
    tangential: np.ndarray      # (N, 3) mm
    radius: np.ndarray          # (N,) mm
    strain: np.ndarray          # (N,)
    green: np.ndarray           # (N, 3) E_rr, E_tt, E_zz
    valid: np.ndarray           # (N,) bool

    def __len__(self) -> int:
        return len(self.points)

    @property
    def t_magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.tangential, axis=1)

    @property
    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.displacement, axis=1)


@dataclass
class KinematicsSummary:
    U_o: float
    u_o: float
    eps_o: float
    displacement: ChannelStats
    u_normal: ChannelStats
    strain: ChannelStats
    n_valid: int
    n_invalid: int
    percentile: float = 99.0
    signed: bool = False


# ---------------------------------------------------------------------------
# Per-point formulas
# ---------------------------------------------------------------------------

def decompose_displacement(d: Sequence[float], n: Sequence[float]) -> Tuple[float, np.ndarray]:
    d = np.asarray(d, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise KinematicsError(f"Normal must be unit length, |n| = {np.linalg.norm(n):.12g}")
    u = float(d @ n)
    return u, d - u * n


def strain_at_point(u_normal: float, radius: float) -> float:
    """Circumferential strain Δr / r."""
    if not radius > 0:
        raise KinematicsError(f"Radius of curvature must be positive, got {radius!r}")
    return float(u_normal) / float(radius)


def green_tensor(eps: float) -> Tuple[float, float, float]:
    """
    Diagonal Green strain of a uniformly expanding incompressible cylinder:
    F = diag(1/(1+eps), 1+eps, 1), E = (F^T F - I) / 2.
    """
    if not eps > -1.0:
        raise KinematicsError(f"Strain must exceed -1, got {eps!r}")
    s = 1.0 + eps
    return 0.5 / (s * s) - 0.5, 0.5 * s * s - 0.5, 0.0


def _green_many(eps: np.ndarray) -> np.ndarray:
    s = 1.0 + eps
    return np.column_stack([0.5 / (s * s) - 0.5, 0.5 * s * s - 0.5, np.zeros_like(eps)])


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def _as_values(values: Iterable[float], what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise KinematicsError(f"{what} of an empty list is undefined")
    if np.isnan(arr).any():
        raise KinematicsError(f"{what}: input contains NaN")
    return arr


def percentile(values: Iterable[float], p: float) -> float:
    """Linear-interpolation percentile: rank (n - 1) * p / 100 on the sorted values."""
    arr = _as_values(values, "percentile")
    if not 0.0 <= p <= 100.0:
        raise KinematicsError(f"Percentile must lie in [0, 100], got {p!r}")
    return float(np.percentile(arr, p, method="linear"))


def summary_stats(values: Iterable[float]) -> ChannelStats:
    """(min, max, mean, sample std with n - 1); std is 0 for a single value."""
    arr = _as_values(values, "summary_stats")
    std = float(np.std(arr, ddof=1)) if arr.size >= 2 else 0.0
    return ChannelStats(float(arr.min()), float(arr.max()), float(arr.mean()), std)


# ---------------------------------------------------------------------------
# Wall kinematics
# ---------------------------------------------------------------------------

def sample_field(field: FieldSource, points: np.ndarray) -> np.ndarray:
    """Displacement (N, 3) at points from any supported source."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if isinstance(field, ControlGrid):
        _check_frame(field.geometry.extent_min(), field.geometry.extent_max(), np.asarray(field.geometry.spacing), points)
        return interpolate_displacement(field, points).reshape(-1, 3)
    if isinstance(field, VectorVolume3):
        geom = field.geometry
        _check_frame(geom.extent_min(), geom.extent_max(), np.asarray(geom.spacing), points)
        return field.sample(points).reshape(-1, 3)
    if isinstance(field, AnalyticField):
        return eval_field(field, points).reshape(-1, 3)
    arr = np.asarray(field, dtype=np.float64)
    if arr.shape != points.shape:
        raise KinematicsError(f"Per-point displacement array has shape {arr.shape}, cloud needs {points.shape}")
    return arr


def _check_frame(lo: np.ndarray, hi: np.ndarray, spacing: np.ndarray, points: np.ndarray) -> None:
    outside = np.any((points < lo - spacing) | (points > hi + spacing), axis=1)
    if outside.any():
        raise KinematicsError(
            f"{int(outside.sum())} wall points lie outside the displacement field's frame "
            f"[{lo.tolist()}, {hi.tolist()}]; surface and registration must share the fixed-image frame"
        )


def compute_wall_kinematics(
    cloud: PointCloud,
    field: FieldSource,
    sign: Optional[int] = None,
    options: Optional[KinematicsOptions] = None,
) -> Tuple[WallKinematics, KinematicsSummary]:
    opts = options or KinematicsOptions()
    if sign is not None:
        opts = replace(opts, sign=sign)
    opts.validate()
    if cloud.normals is None or cloud.radius is None:
        raise KinematicsError("Wall kinematics need a cloud with oriented normals and radii. Run the surface stage first.")

    d = opts.sign * sample_field(field, cloud.points)
    normals = cloud.normals
    radius = cloud.radius
    valid = cloud.valid & np.all(np.isfinite(normals), axis=1) & np.isfinite(radius) & (radius > 0)
    if not valid.any():
        raise KinematicsError("No valid wall points (every point lacks a normal or a radius of curvature)")

    nrm = np.where(valid[:, None], normals, 0.0)
    norm_err = np.abs(np.linalg.norm(nrm[valid], axis=1) - 1.0)
    if norm_err.max() > 1e-9:
        raise KinematicsError(f"Cloud normals are not unit length (max deviation {norm_err.max():.3g})")

    u = np.einsum("ij,ij->i", d, nrm)
    t = d - u[:, None] * nrm
    eps = np.full(len(cloud), np.nan)
    eps[valid] = u[valid] / radius[valid]
    if np.any(eps[valid] <= -1.0):
        raise KinematicsError("Normal displacement exceeds the local radius (strain <= -1)")
    green = np.full((len(cloud), 3), np.nan)
    green[valid] = _green_many(eps[valid])
    u[~valid] = np.nan
    t[~valid] = np.nan

    kin = WallKinematics(cloud.points.copy(), d, u, t, radius.copy(), eps, green, valid)
    summary = summarize(kin, opts)
    log.info(
        "kinematics: %d valid / %d invalid points, U_o=%.4f mm, u_o=%.4f mm, eps_o=%.5f",
        summary.n_valid, summary.n_invalid, summary.U_o, summary.u_o, summary.eps_o,
    )
    return kin, summary


def summarize(kin: WallKinematics, options: Optional[KinematicsOptions] = None) -> KinematicsSummary:
    opts = options or KinematicsOptions()
    v = kin.valid
    mag = kin.magnitude[v]
    un = kin.u_normal[v]
    eps = kin.strain[v]
    if not opts.signed_percentiles:
        un, eps = np.abs(un), np.abs(eps)
    p = opts.percentile
    return KinematicsSummary(
        U_o=percentile(mag, p),
        u_o=percentile(un, p),
        eps_o=percentile(eps, p),
        displacement=summary_stats(mag),
        u_normal=summary_stats(un),
        strain=summary_stats(eps),
        n_valid=int(v.sum()),
        n_invalid=int((~v).sum()),
        percentile=p,
        signed=opts.signed_percentiles,
    )


def kinematics_table(kin: WallKinematics) -> pd.DataFrame:
    return pd.DataFrame({
        "x": kin.points[:, 0], "y": kin.points[:, 1], "z": kin.points[:, 2],
        "d_x": kin.displacement[:, 0], "d_y": kin.displacement[:, 1], "d_z": kin.displacement[:, 2],
        "u_normal": kin.u_normal,
        "t_x": kin.tangential[:, 0], "t_y": kin.tangential[:, 1], "t_z": kin.tangential[:, 2],
        "t_magnitude": kin.t_magnitude,
        "radius": kin.radius,
        "strain": kin.strain,
        "E_rr": kin.green[:, 0], "E_tt": kin.green[:, 1], "E_zz": kin.green[:, 2],
        "valid": kin.valid.astype(int),
    })


def kinematics_from_table(df: pd.DataFrame) -> WallKinematics:
    required = {"x", "y", "z", "d_x", "d_y", "d_z", "t_x", "t_y", "t_z", "u_normal", "radius", "strain", "valid"}
    missing = required - set(df.columns)
    if missing:
        raise KinematicsError(f"Kinematics table is missing columns {sorted(missing)}")
    valid = df["valid"].to_numpy() > 0
    strain = df["strain"].to_numpy(dtype=np.float64)
    green = np.full((len(df), 3), np.nan)
    green[valid] = _green_many(strain[valid])
    return WallKinematics(
        points=df[["x", "y", "z"]].to_numpy(dtype=np.float64),
        displacement=df[["d_x", "d_y", "d_z"]].to_numpy(dtype=np.float64),
        u_normal=df["u_normal"].to_numpy(dtype=np.float64),
        tangential=df[["t_x", "t_y", "t_z"]].to_numpy(dtype=np.float64),
        radius=df["radius"].to_numpy(dtype=np.float64),
        strain=strain,
        green=green,
        valid=valid,
    )


def summary_to_dict(summary: KinematicsSummary) -> Dict[str, object]:
    def stats(s: ChannelStats) -> Dict[str, float]:
        return {"min": s.min, "max": s.max, "mean": s.mean, "std": s.std}

    return {
        "U_o_mm": summary.U_o,
        "u_o_mm": summary.u_o,
        "eps_o": summary.eps_o,
        "eps_o_percent": 100.0 * summary.eps_o,
        "percentile": summary.percentile,
        "signed_percentiles": summary.signed,
        "n_valid": summary.n_valid,
        "n_invalid": summary.n_invalid,
        "displacement_mm": stats(summary.displacement),
        "u_normal_mm": stats(summary.u_normal),
        "strain": stats(summary.strain),
    }


def cohort_table(rows: pd.DataFrame, strain_percent: bool = True) -> pd.DataFrame:
    """
    Per-case U_o, u_o, eps_o followed by Minimum / Maximum / Average /
    Standard deviation rows. eps_o is shown in percent unless strain_percent
    is False (values already in percent are passed through unchanged when the
    column is named eps_o_percent).
    """
    if "case_id" not in rows.columns:
        raise KinematicsError("Cohort rows need a case_id column")
    df = rows.copy()
    if "eps_o_percent" in df.columns:
        df["eps_o"] = df["eps_o_percent"]
    elif strain_percent:
        df["eps_o"] = 100.0 * df["eps_o"]
    missing = set(COHORT_COLUMNS) - set(df.columns)
    if missing:
        raise KinematicsError(f"Cohort rows are missing columns {sorted(missing)}")
    if df.empty:
        raise KinematicsError("Cohort table needs at least one case")

    table = df[["case_id", *COHORT_COLUMNS]].reset_index(drop=True)
    table["case_id"] = table["case_id"].astype(str)
    stats = {c: summary_stats(table[c].to_numpy(dtype=np.float64)) for c in COHORT_COLUMNS}
    extra = pd.DataFrame([
        {"case_id": "Minimum", **{c: stats[c].min for c in COHORT_COLUMNS}},
        {"case_id": "Maximum", **{c: stats[c].max for c in COHORT_COLUMNS}},
        {"case_id": "Average", **{c: stats[c].mean for c in COHORT_COLUMNS}},
        {"case_id": "Standard deviation", **{c: stats[c].std for c in COHORT_COLUMNS}},
    ])
    return pd.concat([table, extra], ignore_index=True)
