from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from build_report_html import write_html_report
from errors import AcceptanceError, AkinError, VerificationError
from kinematics import (
    compute_wall_kinematics,
    cohort_table,
    kinematics_from_table,
    kinematics_table,
    summary_to_dict,
)
from pipeline_config import PipelineConfig, config_to_dict
from registration import (
    dense_field,
    load_control_grid,
    register,
    save_control_grid,
    warp_moving,
    write_history_csv,
)
from store_sqlite import KinematicsStore
from surface_geometry import (
    PointCloud,
    estimate_normals,
    extract_wall_points,
    fill_lumen,
    load_ply,
    orient_normals,
    radius_of_curvature_field,
    save_ply,
)
from synthetic_truth import generate_phantom, load_truth_params, warp_volume, write_truth_params
from verification import (
    build_report,
    check_acceptance,
    intensity_alignment,
    write_plot_script,
    write_report_csvs,
    write_report_json,
)
from volume_core import load_volume, save_vector_volume, save_volume

log = logging.getLogger(__name__)


def _write_json(path: Path, doc: Dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")


# ---------------------------------------------------------------------------
# Output locations
# ---------------------------------------------------------------------------

def synth_outputs(cfg: PipelineConfig) -> Dict[str, Path]:
    d = cfg.stage_dir("synth")
    return {
        "diastolic": d / "diastolic.vol",
        "systolic": d / "systolic.vol",
        "wall_mask": d / "wall_mask.vol",
        "truth": cfg.truth_path,
    }


def register_outputs(cfg: PipelineConfig) -> Dict[str, Path]:
    d = cfg.stage_dir("register")
    return {
        "control_grid": d / "control_grid.grid",
        "dense_field": d / "dense_field.vfield",
        "history": d / "history.csv",
        "registered": d / "registered.vol",
        "alignment": d / "alignment.json",
    }


def surface_outputs(cfg: PipelineConfig) -> Dict[str, Path]:
    return {"cloud": cfg.stage_dir("surface") / "wall.ply"}


def kinematics_outputs(cfg: PipelineConfig) -> Dict[str, Path]:
    d = cfg.stage_dir("kinematics")
    label = cfg.crop.label
    return {
        "table": d / f"kinematics_{label}.csv",
        "cloud": d / f"wall_kinematics_{label}.ply",
        "summary": d / f"summary_{label}.json",
        "truth_table": d / f"truth_kinematics_{label}.csv",
        "truth_summary": d / f"truth_summary_{label}.json",
    }


def verify_outputs(cfg: PipelineConfig) -> Dict[str, Path]:
    d = cfg.stage_dir("verify")
    return {"report": d / f"report_{cfg.crop.label}.json", "dir": d}


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig) -> Dict[str, Path]:
    cfg.validate()
    out = synth_outputs(cfg)
    spec = cfg.phantom
    field = cfg.analytic_field()

    diastolic, wall_mask = generate_phantom(spec)
    systolic = warp_volume(diastolic, field)

    save_volume(diastolic, out["diastolic"])
    save_volume(systolic, out["systolic"])
    save_volume(wall_mask, out["wall_mask"])
    write_truth_params(out["truth"], spec, field)
    log.info("synth: wrote %s", ", ".join(p.name for p in out.values()))
    return out


def cmd_register(cfg: PipelineConfig) -> Dict[str, Path]:
    cfg.validate(check_inputs=True)
    out = register_outputs(cfg)
    fixed = load_volume(cfg.fixed_path)
    moving = load_volume(cfg.moving_path)

    result = register(fixed, moving, cfg.registration)
    grid = result.control_grid
    save_control_grid(grid, out["control_grid"])
    save_vector_volume(dense_field(grid, fixed.geometry), out["dense_field"])
    write_history_csv(result, out["history"])

    registered = warp_moving(moving, grid)
    save_volume(registered, out["registered"])
    alignment = intensity_alignment(fixed, moving, registered)
    alignment.update({
        "converged": result.converged,
        "converged_per_level": result.level_converged,
        "iterations_per_level": result.iterations_used,
        "message": result.message,
    })
    _write_json(out["alignment"], alignment)
    if not result.converged:
        log.warning("registration stopped before convergence (per level, coarse to fine: %s)", result.level_converged)
    return out


def cmd_surface(cfg: PipelineConfig) -> Dict[str, Path]:
    cfg.validate(check_inputs=True)
    out = surface_outputs(cfg)
    mask = load_volume(cfg.mask_path)
    if cfg.surface.fill_lumen:
        mask = fill_lumen(mask, cfg.surface.iso)

    params = cfg.curvature
    cloud = extract_wall_points(mask, cfg.surface.iso)
    cloud = estimate_normals(cloud, params.normal_neighbors)
    cloud = orient_normals(cloud, params.reference_axis, params.slab_half_width_mm)
    cloud = radius_of_curvature_field(cloud, params)
    save_ply(cloud, out["cloud"])

    r = cloud.radius[cloud.valid]
    if r.size:
        log.info("surface: %d points, radius median %.2f mm [%.2f, %.2f]", len(cloud), np.median(r), r.min(), r.max())
    return out


def crop_cloud(cloud: PointCloud, cfg: PipelineConfig, geometry) -> PointCloud:
    if not cfg.crop.active:
        return cloud
    idx = geometry.to_index(cloud.points)
    lo = np.asarray(cfg.crop.lo, dtype=np.float64)
    hi = np.asarray(cfg.crop.hi, dtype=np.float64)
    keep = np.all((idx >= lo - 1e-9) & (idx < hi), axis=1)
    if not keep.any():
        raise AkinError(f"Crop window {cfg.crop.lo}..{cfg.crop.hi} contains no wall points")
    log.info("crop '%s': %d of %d wall points", cfg.crop.label, int(keep.sum()), len(cloud))
    return cloud.subset(keep)


def _kinematics_cloud(cloud: PointCloud, table: pd.DataFrame) -> PointCloud:
    attributes = dict(cloud.attributes)
    for col in ("d_x", "d_y", "d_z", "u_normal", "t_magnitude", "strain", "E_rr", "E_tt"):
        attributes[col] = table[col].to_numpy(dtype=np.float64)
    return cloud.evolve(attributes=attributes)


def cmd_kinematics(cfg: PipelineConfig) -> Dict[str, Path]:
    cfg.validate()
    out = kinematics_outputs(cfg)
    cloud_path = surface_outputs(cfg)["cloud"]
    if not cloud_path.exists():
        raise AkinError(f"Missing wall point cloud: {cloud_path}. Run the surface stage first.")
    cloud = load_ply(cloud_path)
    grid = load_control_grid(register_outputs(cfg)["control_grid"])
    cloud = crop_cloud(cloud, cfg, grid.geometry)

    opts = cfg.kinematics
    kin, summary = compute_wall_kinematics(cloud, grid, options=opts)
    table = kinematics_table(kin)
    out["table"].parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out["table"], index=False, float_format="%.17g")
    save_ply(_kinematics_cloud(cloud, table), out["cloud"])
    doc = {"case_id": cfg.case_id, "region": cfg.crop.label, **summary_to_dict(summary)}
    _write_json(out["summary"], doc)

    store = KinematicsStore(cfg.database_path)
    store.init_schema()
    store.upsert_summary(cfg.case_id, summary, region=cfg.crop.label)

    if cfg.truth_path.exists():
        _, field = load_truth_params(cfg.truth_path)
        truth_kin, truth_summary = compute_wall_kinematics(cloud, field, sign=1, options=opts)
        kinematics_table(truth_kin).to_csv(out["truth_table"], index=False, float_format="%.17g")
        _write_json(out["truth_summary"], {"case_id": cfg.case_id, "region": cfg.crop.label,
                                           **summary_to_dict(truth_summary)})
    return out


def cmd_verify(cfg: PipelineConfig) -> Dict[str, Path]:
    cfg.validate()
    kin_out = kinematics_outputs(cfg)
    out = verify_outputs(cfg)
    for key in ("table", "truth_table"):
        if not kin_out[key].exists():
            raise VerificationError(
                f"Missing {kin_out[key]}. Run the kinematics stage on a synthetic case (synth outputs present) first."
            )
    reg_kin = kinematics_from_table(pd.read_csv(kin_out["table"]))
    truth_kin = kinematics_from_table(pd.read_csv(kin_out["truth_table"]))
    report = build_report(truth_kin, reg_kin, cfg.verification)

    alignment_path = register_outputs(cfg)["alignment"]
    if alignment_path.exists():
        report.intensity = json.loads(alignment_path.read_text(encoding="utf-8"))

    write_report_json(report, out["report"])
    write_report_csvs(report, out["dir"])
    write_plot_script(report, out["dir"])
    return out


def run_acceptance(cfg: PipelineConfig) -> List[str]:
    """Rebuild the verification report from the kinematics tables; AcceptanceError on any violation."""
    report_path = verify_outputs(cfg)["report"]
    kin_out = kinematics_outputs(cfg)
    reg_kin = kinematics_from_table(pd.read_csv(kin_out["table"]))
    truth_kin = kinematics_from_table(pd.read_csv(kin_out["truth_table"]))
    report = build_report(truth_kin, reg_kin, cfg.verification)
    violations = check_acceptance(report, cfg.acceptance)
    if violations:
        raise AcceptanceError("Acceptance thresholds violated: " + "; ".join(violations) + f" (see {report_path})")
    log.info("acceptance: all thresholds met")
    return violations


def cmd_cohort(cfg: PipelineConfig, source: Optional[Path] = None) -> Dict[str, Path]:
    """Per-case rows plus min/max/mean/std over every stored case (or a CSV of case_id,U_o,u_o,eps_o)."""
    if source is not None:
        source = Path(source)
        if not source.exists():
            raise AkinError(f"Cohort source not found: {source}")
        rows = pd.read_csv(source)
    else:
        rows = KinematicsStore(cfg.database_path).load_summaries(region=cfg.crop.label)
    if rows.empty:
        raise AkinError("No kinematics summaries to aggregate. Run the kinematics stage first.")
    out = cfg.out / "cohort.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    cohort_table(rows).to_csv(out, index=False, float_format="%.6g")
    return {"cohort": out}


def cmd_report(cfg: PipelineConfig) -> Dict[str, Path]:
    kin_out = kinematics_outputs(cfg)
    if not kin_out["summary"].exists():
        raise AkinError(f"Missing kinematics summary: {kin_out['summary']}. Run the kinematics stage first.")
    out = cfg.out / "report.html"
    write_html_report(
        summary_json=kin_out["summary"],
        out_html=out,
        truth_summary_json=kin_out["truth_summary"] if kin_out["truth_summary"].exists() else None,
        verification_json=verify_outputs(cfg)["report"] if verify_outputs(cfg)["report"].exists() else None,
        config=config_to_dict(cfg),
    )
    return {"report": out}


STAGE_OUTPUTS = {
    "synth": synth_outputs,
    "register": register_outputs,
    "surface": surface_outputs,
    "kinematics": kinematics_outputs,
    "verify": verify_outputs,
}


def stage_complete(cfg: PipelineConfig, name: str) -> bool:
    """True when every file the stage writes already exists (used by --resume)."""
    outputs = STAGE_OUTPUTS[name](cfg)
    files = [p for key, p in outputs.items() if key != "dir"]
    if name == "kinematics" and not cfg.truth_path.exists():
        files = [outputs["table"], outputs["cloud"], outputs["summary"]]
    return all(p.exists() for p in files)
