from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from errors import AkinError
from pipeline_config import DEFAULT_CONFIG, PipelineConfig, load_config
from stages import (
    cmd_cohort,
    cmd_kinematics,
    cmd_register,
    cmd_report,
    cmd_surface,
    cmd_synth,
    cmd_verify,
    run_acceptance,
    stage_complete,
)

log = logging.getLogger("akin")

StageFn = Callable[[PipelineConfig], Dict[str, Path]]

STEPS: List[Tuple[str, str, StageFn]] = [
    ("Synthetic phantom pair", "synth", cmd_synth),
    ("Registration", "register", cmd_register),
    ("Wall surface + curvature", "surface", cmd_surface),
    ("Wall kinematics", "kinematics", cmd_kinematics),
    ("Verification report", "verify", cmd_verify),
]

SUBCOMMANDS = {key: (name, fn) for name, key, fn in STEPS}


def progress_bar(i: int, total: int, width: int = 30) -> str:
    filled = int(width * i / total)
    bar = "█" * filled + "░" * (width - filled)
    return f"[{bar}] {i}/{total}"


def run_step(name: str, fn: StageFn, cfg: PipelineConfig, idx: int, total: int) -> Dict[str, Path]:
    print("\n" + progress_bar(idx, total))
    print(f"▶ Step {idx}/{total}: {name}")

    start = time.time()
    outputs = fn(cfg)
    elapsed = time.time() - start

    for p in outputs.values():
        print("  wrote:", p)
    print(f"✓ Completed {name} in {elapsed:.1f}s")
    return outputs


def pipeline_steps(cfg: PipelineConfig) -> List[Tuple[str, str, StageFn]]:
    """Synthetic runs use every stage; runs on given image pairs skip synth and verify."""
    if cfg.paths.fixed is None and cfg.paths.moving is None:
        return list(STEPS)
    return [s for s in STEPS if s[1] not in ("synth", "verify")]


def cmd_pipeline(cfg: PipelineConfig, resume: bool = False) -> int:
    steps = pipeline_steps(cfg)
    total = len(steps)
    for idx, (name, key, fn) in enumerate(steps, start=1):
        if resume and stage_complete(cfg, key):
            print("\n" + progress_bar(idx, total))
            print(f"↷ Step {idx}/{total}: {name} (outputs present, skipped)")
            continue
        try:
            run_step(name, fn, cfg, idx, total)
        except AkinError as e:
            print(f"✗ FAILED ({e.exit_code}): {name}")
            print(f"  {e}")
            return e.exit_code

    if any(key == "verify" for _, key, _ in steps):
        try:
            run_acceptance(cfg)
        except AkinError as e:
            print(f"✗ FAILED ({e.exit_code}): Acceptance")
            print(f"  {e}")
            return e.exit_code
        print("✓ Acceptance thresholds met")

    print("\n" + progress_bar(total, total))
    print("🎉 Pipeline finished.")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help=f"YAML config (default: {DEFAULT_CONFIG.name} if present)")
    common.add_argument("--output", type=Path, default=None, help="output directory (overrides paths.output)")
    common.add_argument("--seed", type=int, default=None, help="seed for phantom noise, registration and MSAC")
    common.add_argument("--resume", action="store_true", help="skip stages whose outputs already exist")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set registration.lambda=0.05 (repeatable)")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    p = argparse.ArgumentParser(description="Run the AKIN wall-kinematics pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    for key, (name, _) in SUBCOMMANDS.items():
        sub.add_parser(key, parents=[common], help=name)
    sub.add_parser("pipeline", parents=[common], help="synth -> register -> surface -> kinematics -> verify")
    cohort = sub.add_parser("cohort", parents=[common], help="cohort statistics over stored summaries")
    cohort.add_argument("--source", type=Path, default=None, help="CSV with case_id,U_o,u_o,eps_o instead of the database")
    sub.add_parser("report", parents=[common], help="static HTML report")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s: %(message)s",
    )

    config_path = args.config
    if config_path is None and DEFAULT_CONFIG.exists():
        config_path = DEFAULT_CONFIG

    try:
        cfg = load_config(config_path, args.overrides, output=args.output, seed=args.seed)
        if args.command == "pipeline":
            return cmd_pipeline(cfg, resume=args.resume)
        if args.command == "cohort":
            run_step("Cohort statistics", lambda c: cmd_cohort(c, args.source), cfg, 1, 1)
            return 0
        if args.command == "report":
            run_step("HTML report", cmd_report, cfg, 1, 1)
            return 0

        name, fn = SUBCOMMANDS[args.command]
        if args.resume and stage_complete(cfg, args.command):
            print(f"↷ {name}: outputs present, skipped")
            return 0
        run_step(name, fn, cfg, 1, 1)
        return 0
    except AkinError as e:
        print(f"✗ FAILED ({e.exit_code}): {args.command}")
        print(f"  {e}")
        log.debug("traceback", exc_info=True)
        return e.exit_code
    except (RuntimeError, ValueError, ArithmeticError) as e:
        print(f"✗ FAILED (2): {args.command}")
        print(f"  {e}")
        log.debug("traceback", exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
