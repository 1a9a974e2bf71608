from __future__ import annotations

import html as html_lib
import json
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from errors import AkinError

DEFAULT_TITLE = "Wall Kinematics Report"


def _safe(x: Any) -> str:
    if x is None:
        return ""
    return html_lib.escape(str(x))


def _fmt_pct(x: Any) -> str:
    try:
        if x is None:
            return ""
        return f"{float(x)*100:.2f}%"
    except Exception:
        return ""


def _fmt_num(x: Any, digits: int = 3) -> str:
    try:
        if x is None:
            return "undefined"
        return f"{float(x):,.{digits}f}"
    except Exception:
        return ""


def _load(path: Optional[Path]) -> Optional[Dict[str, Any]]:
    if path is None or not Path(path).exists():
        return None
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _summary_rows(label: str, s: Dict[str, Any]) -> str:
    return f"""
            <tr>
              <td class="name">{_safe(label)}</td>
              <td class="num">{_fmt_num(s.get('U_o_mm'))}</td>
              <td class="num">{_fmt_num(s.get('u_o_mm'))}</td>
              <td class="num">{_fmt_pct(s.get('eps_o'))}</td>
              <td class="num">{_safe(s.get('n_valid'))}</td>
              <td class="num">{_safe(s.get('n_invalid'))}</td>
            </tr>
            """


def _channel_rows(s: Dict[str, Any]) -> str:
    rows = []
    for key, unit in (("displacement_mm", "mm"), ("u_normal_mm", "mm"), ("strain", "")):
        c = s.get(key) or {}
        rows.append(
            f"""
            <tr>
              <td class="name">{_safe(key)}</td>
              <td class="num">{_fmt_num(c.get('min'), 4)}</td>
              <td class="num">{_fmt_num(c.get('max'), 4)}</td>
              <td class="num">{_fmt_num(c.get('mean'), 4)}</td>
              <td class="num">{_fmt_num(c.get('std'), 4)}</td>
              <td class="muted">{unit}</td>
            </tr>
            """
        )
    return "".join(rows)


def _verification_rows(v: Dict[str, Any]) -> str:
    rows = []
    for name, m in (v.get("channels") or {}).items():
        undefined = "; ".join(f"{k}: {why}" for k, why in (m.get("undefined") or {}).items())
        rows.append(
            f"""
            <tr>
              <td class="name">{_safe(name)}</td>
              <td class="num">{_fmt_num(m.get('r_squared'), 4)}</td>
              <td class="num">{_fmt_num(m.get('nrmse'), 4)}</td>
              <td class="num">{_fmt_num(m.get('truth_percentile'), 4)}</td>
              <td class="num">{_fmt_num(m.get('registration_percentile'), 4)}</td>
              <td class="num">{_fmt_pct(m.get('percentile_relative_difference'))}</td>
              <td class="muted">{_safe(undefined)}</td>
            </tr>
            """
        )
    return "".join(rows)


def render_html(
    summary: Dict[str, Any],
    title: str,
    truth: Optional[Dict[str, Any]] = None,
    verification: Optional[Dict[str, Any]] = None,
    config: Optional[Dict[str, Any]] = None,
) -> str:
    summary_rows: List[str] = [_summary_rows("registration", summary)]
    if truth is not None:
        summary_rows.append(_summary_rows("analytic truth", truth))

    verification_block = ""
    if verification is not None:
        angles = verification.get("angles") or {}
        align = verification.get("intensity_alignment") or {}
        verification_block = f"""
  <div class="card">
    <h2>Verification against ground truth</h2>
    <div class="summary-line">
      <span class="pill">Points: {_safe(verification.get('n_points'))}</span>
      <span class="pill">NRMSE: {_safe(verification.get('nrmse_mode'))}-normalised</span>
      <span class="pill">Mean angle: {_fmt_num(angles.get('displacement_mean_deg'), 1)}&deg;</span>
      <span class="pill">Median angle: {_fmt_num(angles.get('displacement_median_deg'), 1)}&deg;</span>
      <span class="pill">|I_F - I_M|: {_fmt_num(align.get('mean_abs_diff_before'), 2)} &rarr; {_fmt_num(align.get('mean_abs_diff_after'), 2)}</span>
    </div>
    <div class="table-wrap">
      <table>
        <thead>
          <tr>
            <th>Channel</th>
            <th class="num">R&sup2; (y = x)</th>
            <th class="num">NRMSE</th>
            <th class="num">Truth p{_safe(verification.get('percentile'))}</th>
            <th class="num">Registration p{_safe(verification.get('percentile'))}</th>
            <th class="num">Rel. diff</th>
            <th>Notes</th>
          </tr>
        </thead>
        <tbody>
          {_verification_rows(verification)}
        </tbody>
      </table>
    </div>
  </div>
"""

    config_block = ""
    if config is not None:
        config_block = f"""
  <details class="card">
    <summary>Configuration</summary>
    <pre>{_safe(yaml.safe_dump(config, sort_keys=False))}</pre>
  </details>
"""

    case_id = _safe(summary.get("case_id"))
    region = _safe(summary.get("region"))

    html = f"""<!doctype html>
<html lang="en">
<head>
  <meta charset="utf-8" />
  <meta name="viewport" content="width=device-width, initial-scale=1" />
  <title>{_safe(title)}</title>
  <style>
    body {{ margin: 0 auto; max-width: 980px; padding: 28px 20px; color: #1d2733; background: #f6f8fa;
            font-family: ui-sans-serif, system-ui, sans-serif; }}
    h1 {{ font-size: 21px; margin: 0 0 4px; }}
    h2 {{ font-size: 15px; margin: 0 0 8px; }}
    .sub, .muted, .footer {{ color: #5f6f80; }}
    .sub {{ margin-bottom: 16px; }}
    .card {{ background: #fff; border: 1px solid #d5dde6; border-radius: 8px; padding: 14px 16px; margin-bottom: 14px; }}
    table {{ width: 100%; border-collapse: collapse; font-size: 13px; }}
    th, td {{ padding: 6px 8px; border-bottom: 1px solid #e3e8ee; }}
    th {{ text-align: left; background: #eef2f6; }}
    .num {{ text-align: right; font-variant-numeric: tabular-nums; }}
    .name {{ font-weight: 600; }}
    .table-wrap {{ overflow-x: auto; }}
    .summary-line {{ display: flex; flex-wrap: wrap; gap: 8px; margin-bottom: 10px; }}
    .pill {{ border: 1px solid #c8d2dc; border-radius: 12px; padding: 2px 9px; font-size: 12px; }}
    pre {{ font-size: 12px; white-space: pre-wrap; }}
    .footer {{ font-size: 12px; }}
  </style>
</head>
<body>
  <h1>{_safe(title)}</h1>
  <div class="sub">Case: {case_id} &middot; Region: {region}</div>

  <div class="card">
    <h2>99th percentile summary</h2>
    <div class="table-wrap">
      <table>
        <thead>
          <tr>
            <th>Source</th>
            <th class="num">U_o (mm)</th>
            <th class="num">u_o (mm)</th>
            <th class="num">&epsilon;_o</th>
            <th class="num">Valid</th>
            <th class="num">Invalid</th>
          </tr>
        </thead>
        <tbody>{''.join(summary_rows)}</tbody>
      </table>
    </div>
  </div>

  <div class="card">
    <h2>Channel statistics (registration)</h2>
    <div class="table-wrap">
      <table>
        <thead>
          <tr><th>Channel</th><th class="num">Min</th><th class="num">Max</th><th class="num">Mean</th><th class="num">Std</th><th>Unit</th></tr>
        </thead>
        <tbody>{_channel_rows(summary)}</tbody>
      </table>
    </div>
    <div class="muted">Percentiles and statistics use {'signed' if summary.get('signed_percentiles') else 'absolute'} values.</div>
  </div>
{verification_block}{config_block}
  <div class="footer">Static HTML report generated by the akin pipeline.</div>
</body>
</html>
"""
    return html


def write_html_report(
    summary_json: Path,
    out_html: Path,
    truth_summary_json: Optional[Path] = None,
    verification_json: Optional[Path] = None,
    config: Optional[Dict[str, Any]] = None,
    title: str = DEFAULT_TITLE,
) -> Path:
    summary = _load(summary_json)
    if summary is None:
        raise AkinError(f"Missing input JSON: {summary_json}. Run the kinematics stage first.")
    html = render_html(summary, title, _load(truth_summary_json), _load(verification_json), config)
    out_html = Path(out_html)
    out_html.parent.mkdir(parents=True, exist_ok=True)
    out_html.write_text(html, encoding="utf-8")
    return out_html
