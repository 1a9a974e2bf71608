from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from errors import VerificationError
from kinematics import WallKinematics, percentile
from volume_core import Volume3

log = logging.getLogger(__name__)

CHANNELS = ("magnitude", "normal", "tangential", "strain")
NRMSE_MODES = ("range", "std")
_DEGENERATE = 1e-12


@dataclass
class VerificationOptions:
    nrmse_mode: str = "range"
    qq_points: int = 99
    histogram_bins: int = 40
    percentile: float = 99.0

    def validate(self) -> None:
        if self.nrmse_mode not in NRMSE_MODES:
            raise VerificationError(f"Invalid verification.nrmse_mode: {self.nrmse_mode!r} (expected one of {NRMSE_MODES})")
        if self.qq_points < 2:
            raise VerificationError(f"Invalid verification.qq_points: {self.qq_points!r}")
        if self.histogram_bins < 1:
            raise VerificationError(f"Invalid verification.histogram_bins: {self.histogram_bins!r}")
        if not 0.0 < self.percentile < 100.0:
            raise VerificationError(f"Invalid verification.percentile: {self.percentile!r}")


@dataclass
class AcceptanceThresholds:
    normal_r2_min: float = 0.95
    normal_nrmse_max: float = 0.05
    strain_percentile_rel_max: float = 0.10
    require_tangential_below_normal: bool = False


class HistogramFit(NamedTuple):
    edges: np.ndarray
    counts: np.ndarray
    mu: float
    sigma: float


@dataclass
class ChannelMetrics:
    n_points: int
    r_squared: Optional[float] = None
    nrmse: Optional[float] = None
    truth_percentile: Optional[float] = None
    estimate_percentile: Optional[float] = None
    percentile_rel_diff: Optional[float] = None
    undefined: Dict[str, str] = field(default_factory=dict)


@dataclass
class VerificationReport:
    channels: Dict[str, ChannelMetrics]
    qq_pairs: Dict[str, List[Tuple[float, float]]]
    histogram: HistogramFit
    angles: Dict[str, Optional[float]]
    t_test: Dict[str, Optional[float]]
    n_points: int
    n_excluded: int
    nrmse_mode: str = "range"
    percentile: float = 99.0
    intensity: Dict[str, float] = field(default_factory=dict)
    scatter: Optional[pd.DataFrame] = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _pair(truth, estimate) -> Tuple[np.ndarray, np.ndarray]:
    t = np.asarray(truth, dtype=np.float64).ravel()
    e = np.asarray(estimate, dtype=np.float64).ravel()
    if t.size != e.size:
        raise VerificationError(f"Length mismatch: {t.size} truth values vs {e.size} estimates")
    if t.size == 0:
        raise VerificationError("Empty input")
    return t, e


def _flat(t: np.ndarray) -> bool:
    return float(np.ptp(t)) <= _DEGENERATE * max(1.0, float(np.max(np.abs(t))))


def r_squared_identity(truth, estimate) -> float:
    """R^2 about the identity line y = x; may be negative."""
    t, e = _pair(truth, estimate)
    if _flat(t):
        raise VerificationError("R^2 is undefined: truth has zero variance")
    ss_res = float(np.sum((e - t) ** 2))
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    return 1.0 - ss_res / ss_tot


def nrmse(truth, estimate, mode: str = "range") -> float:
    t, e = _pair(truth, estimate)
    if mode not in NRMSE_MODES:
        raise VerificationError(f"Unknown NRMSE normalisation {mode!r}")
    if _flat(t):
        raise VerificationError("NRMSE is undefined: truth has zero range")
    rmse = math.sqrt(float(np.mean((e - t) ** 2)))
    if mode == "range":
        scale = float(np.ptp(t))
    else:
        scale = float(np.std(t, ddof=1)) if t.size > 1 else 0.0
    if scale <= 0:
        raise VerificationError("NRMSE is undefined: zero normalisation")
    return rmse / scale


def angle_between(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    """Angle in degrees, or None when either vector is shorter than 1e-12."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= 1e-12 or nb <= 1e-12:
        return None
    return float(np.degrees(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0))))


def angles_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise angle_between; NaN marks undefined rows."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 1e-12) & (nb > 1e-12)
    out = np.full(len(a), np.nan)
    cos = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
    out[ok] = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    return out


def qq_pairs(truth, estimate, n: int) -> List[Tuple[float, float]]:
    t = np.asarray(truth, dtype=np.float64).ravel()
    e = np.asarray(estimate, dtype=np.float64).ravel()
    if t.size == 0 or e.size == 0:
        raise VerificationError("Q-Q pairs need non-empty inputs")
    if n < 2:
        raise VerificationError(f"Q-Q pairs need n >= 2, got {n}")
    ps = np.linspace(0.5, 99.5, n)
    return [(percentile(t, p), percentile(e, p)) for p in ps]


def histogram_gaussian_fit(diffs, bins: int) -> HistogramFit:
    """Equal-width histogram over [min, max] plus a moment-matched normal (mean, sample std)."""
    d = np.asarray(diffs, dtype=np.float64).ravel()
    if d.size < 2:
        raise VerificationError(f"Histogram fit needs at least 2 values, got {d.size}")
    if bins < 1:
        raise VerificationError(f"Histogram needs bins >= 1, got {bins}")
    lo, hi = float(d.min()), float(d.max())
    if lo == hi:
        return HistogramFit(np.array([lo, hi]), np.array([d.size]), lo, 0.0)
    counts, edges = np.histogram(d, bins=bins, range=(lo, hi))
    return HistogramFit(edges, counts, float(d.mean()), float(d.std(ddof=1)))


def paired_t_statistic(truth, estimate) -> Tuple[Optional[float], Optional[float]]:
    """Two-sided paired t-test on estimate - truth; (None, None) when undefined."""
    t, e = _pair(truth, estimate)
    if t.size < 2 or np.ptp(e - t) == 0.0:
        return None, None
    res = stats.ttest_rel(e, t)
    return float(res.statistic), float(res.pvalue)


def intensity_alignment(fixed: Volume3, moving: Volume3, registered: Volume3) -> Dict[str, float]:
    """Mean absolute intensity difference to the fixed image before and after registration."""
    if not (fixed.geometry.matches(moving.geometry) and fixed.geometry.matches(registered.geometry)):
        raise VerificationError("Intensity alignment needs three volumes on the same geometry")
    before = float(np.mean(np.abs(fixed.data.astype(np.float64) - moving.data)))
    after = float(np.mean(np.abs(fixed.data.astype(np.float64) - registered.data)))
    return {
        "mean_abs_diff_before": before,
        "mean_abs_diff_after": after,
        "improvement_ratio": after / before if before > 0 else 0.0,
    }


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def _channel_values(kin: WallKinematics, valid: np.ndarray) -> Dict[str, np.ndarray]:
    return {
        "magnitude": kin.magnitude[valid],
        "normal": kin.u_normal[valid],
        "tangential": kin.t_magnitude[valid],
        "strain": kin.strain[valid],
    }


def _channel_metrics(t: np.ndarray, e: np.ndarray, opts: VerificationOptions, name: str) -> ChannelMetrics:
    m = ChannelMetrics(n_points=int(t.size))
    try:
        m.r_squared = r_squared_identity(t, e)
    except VerificationError as err:
        m.undefined["r_squared"] = str(err)
    try:
        m.nrmse = nrmse(t, e, opts.nrmse_mode)
    except VerificationError as err:
        m.undefined["nrmse"] = str(err)

    # strain and normal percentiles follow the kinematics summary: absolute values
    ta, ea = (np.abs(t), np.abs(e)) if name in ("normal", "strain") else (t, e)
    m.truth_percentile = percentile(ta, opts.percentile)
    m.estimate_percentile = percentile(ea, opts.percentile)
    if abs(m.truth_percentile) > 0:
        m.percentile_rel_diff = abs(m.estimate_percentile - m.truth_percentile) / abs(m.truth_percentile)
    else:
        m.undefined["percentile_rel_diff"] = "truth percentile is zero"
    return m


def build_report(
    truth_kin: WallKinematics,
    reg_kin: WallKinematics,
    options: Optional[VerificationOptions] = None,
) -> VerificationReport:
    opts = options or VerificationOptions()
    opts.validate()
    if len(truth_kin) != len(reg_kin):
        raise VerificationError(f"Point sets differ in size: truth {len(truth_kin)} vs registration {len(reg_kin)}")
    if not np.allclose(truth_kin.points, reg_kin.points, rtol=0.0, atol=1e-9):
        raise VerificationError("Truth and registration kinematics are evaluated on different point sets")
    if not np.array_equal(truth_kin.valid, reg_kin.valid):
        raise VerificationError("Truth and registration validity masks differ")
    valid = truth_kin.valid
    if valid.sum() < 2:
        raise VerificationError("Verification needs at least 2 valid points")

    truth = _channel_values(truth_kin, valid)
    est = _channel_values(reg_kin, valid)
    channels = {name: _channel_metrics(truth[name], est[name], opts, name) for name in CHANNELS}
    qq = {name: qq_pairs(truth[name], est[name], opts.qq_points) for name in CHANNELS}
    hist = histogram_gaussian_fit(est["normal"] - truth["normal"], opts.histogram_bins)

    disp_angle = angles_between(reg_kin.displacement[valid], truth_kin.displacement[valid])
    tan_angle = angles_between(reg_kin.tangential[valid], truth_kin.tangential[valid])

    def angle_stats(a: np.ndarray, key: str) -> Dict[str, Optional[float]]:
        ok = a[np.isfinite(a)]
        if ok.size == 0:
            return {f"{key}_mean_deg": None, f"{key}_median_deg": None, f"{key}_n_defined": 0}
        return {f"{key}_mean_deg": float(ok.mean()), f"{key}_median_deg": float(np.median(ok)),
                f"{key}_n_defined": int(ok.size)}

    angles = {**angle_stats(disp_angle, "displacement"), **angle_stats(tan_angle, "tangential")}
    t_stat, p_value = paired_t_statistic(truth["normal"], est["normal"])

    scatter = pd.DataFrame({"index": np.flatnonzero(valid)})
    for name in CHANNELS:
        scatter[f"{name}_truth"] = truth[name]
        scatter[f"{name}_registration"] = est[name]
    scatter["displacement_angle_deg"] = disp_angle
    scatter["tangential_angle_deg"] = tan_angle

    report = VerificationReport(
        channels=channels,
        qq_pairs=qq,
        histogram=hist,
        angles=angles,
        t_test={"normal_t": t_stat, "normal_p": p_value},
        n_points=int(valid.sum()),
        n_excluded=int((~valid).sum()),
        nrmse_mode=opts.nrmse_mode,
        percentile=opts.percentile,
        scatter=scatter,
    )
    n = channels["normal"]
    log.info("verification: normal R^2=%s NRMSE=%s over %d points", n.r_squared, n.nrmse, report.n_points)
    return report


def report_to_dict(report: VerificationReport) -> Dict[str, object]:
    return {
        "n_points": report.n_points,
        "n_excluded": report.n_excluded,
        "nrmse_mode": report.nrmse_mode,
        "percentile": report.percentile,
        "channels": {
            name: {
                "n_points": m.n_points,
                "r_squared": m.r_squared,
                "nrmse": m.nrmse,
                "truth_percentile": m.truth_percentile,
                "registration_percentile": m.estimate_percentile,
                "percentile_relative_difference": m.percentile_rel_diff,
                "undefined": m.undefined,
            }
            for name, m in report.channels.items()
        },
        "angles": report.angles,
        "paired_t_test": report.t_test,
        "histogram_normal_difference": {
            "edges": [float(x) for x in report.histogram.edges],
            "counts": [int(c) for c in report.histogram.counts],
            "mu": report.histogram.mu,
            "sigma": report.histogram.sigma,
        },
        "qq_pairs": {name: [[float(a), float(b)] for a, b in pairs] for name, pairs in report.qq_pairs.items()},
        "intensity_alignment": report.intensity,
    }


def write_report_json(report: VerificationReport, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report_to_dict(report), indent=2), encoding="utf-8")


def write_report_csvs(report: VerificationReport, out_dir: Path) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "scatter": out_dir / "scatter.csv",
        "qq": out_dir / "qq_pairs.csv",
        "histogram": out_dir / "histogram.csv",
    }
    if report.scatter is not None:
        report.scatter.to_csv(paths["scatter"], index=False, float_format="%.17g")
    pd.DataFrame(
        [{"channel": name, "truth_quantile": a, "registration_quantile": b}
         for name, pairs in report.qq_pairs.items() for a, b in pairs]
    ).to_csv(paths["qq"], index=False, float_format="%.17g")
    h = report.histogram
    pd.DataFrame({"left": h.edges[:-1], "right": h.edges[1:], "count": h.counts}).to_csv(
        paths["histogram"], index=False, float_format="%.17g"
    )
    return paths


PLOT_SCRIPT = '''"""Plots for the verification CSVs in this directory (needs matplotlib)."""
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

here = Path(__file__).resolve().parent
scatter = pd.read_csv(here / "scatter.csv")
qq = pd.read_csv(here / "qq_pairs.csv")
hist = pd.read_csv(here / "histogram.csv")
MU, SIGMA = {mu!r}, {sigma!r}

fig, axes = plt.subplots(2, 3, figsize=(14, 8))
for ax, name in zip(axes[0], ["magnitude", "normal", "tangential"]):
    t = scatter[name + "_truth"]
    r = scatter[name + "_registration"]
    sc = ax.scatter(t, r, s=2, c=scatter["displacement_angle_deg"], cmap="viridis")
    lim = [min(t.min(), r.min()), max(t.max(), r.max())]
    ax.plot(lim, lim, "k--", lw=1)
    ax.set_xlabel("ground truth (mm)")
    ax.set_ylabel("registration (mm)")
    ax.set_title(name)
fig.colorbar(sc, ax=axes[0, 2], label="angle (deg)")

q = qq[qq["channel"] == "normal"]
axes[1, 0].plot(q["truth_quantile"], q["registration_quantile"], ".")
lim = [q.min(numeric_only=True).min(), q.max(numeric_only=True).max()]
axes[1, 0].plot(lim, lim, "k--", lw=1)
axes[1, 0].set_title("Q-Q normal displacement")

width = hist["right"] - hist["left"]
axes[1, 1].bar(hist["left"], hist["count"], width=width, align="edge", alpha=0.6)
if SIGMA > 0:
    x = np.linspace(hist["left"].min(), hist["right"].max(), 200)
    pdf = np.exp(-0.5 * ((x - MU) / SIGMA) ** 2) / (SIGMA * np.sqrt(2 * np.pi))
    axes[1, 1].plot(x, pdf * hist["count"].sum() * width.mean(), "r-")
axes[1, 1].set_title("normal displacement difference")

s = scatter
axes[1, 2].scatter(s["strain_truth"], s["strain_registration"], s=2)
axes[1, 2].set_title("strain")
fig.tight_layout()
fig.savefig(here / "verification.png", dpi=150)
'''


def write_plot_script(report: VerificationReport, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "plot_verification.py"
    path.write_text(PLOT_SCRIPT.format(mu=report.histogram.mu, sigma=report.histogram.sigma), encoding="utf-8")
    return path


def check_acceptance(report: VerificationReport, thresholds: AcceptanceThresholds) -> List[str]:
    """Human-readable threshold violations; empty when the report passes."""
    violations: List[str] = []
    normal = report.channels["normal"]
    if normal.r_squared is None or normal.r_squared < thresholds.normal_r2_min:
        violations.append(f"normal R^2 {normal.r_squared} < {thresholds.normal_r2_min}")
    if normal.nrmse is None or normal.nrmse > thresholds.normal_nrmse_max:
        violations.append(f"normal NRMSE {normal.nrmse} > {thresholds.normal_nrmse_max}")
    strain = report.channels["strain"]
    if strain.percentile_rel_diff is None or strain.percentile_rel_diff > thresholds.strain_percentile_rel_max:
        violations.append(
            f"strain p{report.percentile:g} relative difference {strain.percentile_rel_diff} > "
            f"{thresholds.strain_percentile_rel_max}"
        )
    if thresholds.require_tangential_below_normal:
        tan = report.channels["tangential"]
        if tan.r_squared is None or normal.r_squared is None:
            reason = tan.undefined.get("r_squared") or normal.undefined.get("r_squared") or "no value"
            violations.append(f"tangential R^2 not evaluated ({reason})")
        elif not tan.r_squared < normal.r_squared:
            violations.append(f"tangential R^2 {tan.r_squared} is not below normal R^2 {normal.r_squared}")
    return violations
