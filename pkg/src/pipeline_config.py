from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import yaml

from errors import AkinError, ConfigError
from kinematics import KinematicsOptions
from registration import RegistrationConfig
from surface_geometry import CurvatureParams
from synthetic_truth import AnalyticField, PhantomSpec, field_from_config
from verification import AcceptanceThresholds, VerificationOptions

log = logging.getLogger(__name__)

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CONFIG = ROOT / "config" / "pipeline.yaml"

# YAML spelling -> dataclass field, per section
KEY_ALIASES = {"registration": {"lambda": "lam"}}


@dataclass
class PathsConfig:
    output: Path = Path("outputs")
    fixed: Optional[Path] = None      # default: synthetic systolic frame
    moving: Optional[Path] = None     # default: synthetic diastolic frame
    mask: Optional[Path] = None       # default: synthetic wall mask
    database: Optional[Path] = None   # default: <output>/kinematics.db


@dataclass
class SurfaceConfig:
    iso: float = 0.5
    fill_lumen: bool = True


@dataclass
class CropWindow:
    lo: Optional[Tuple[int, int, int]] = None    # voxel indices in the fixed frame
    hi: Optional[Tuple[int, int, int]] = None
    label: str = "full"

    @property
    def active(self) -> bool:
        return self.lo is not None and self.hi is not None


@dataclass
class PipelineConfig:
    case_id: str = "phantom"
    seed: Optional[int] = None
    paths: PathsConfig = field(default_factory=PathsConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    truth_field: Dict[str, Any] = field(default_factory=dict)   # YAML section "field"
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    surface: SurfaceConfig = field(default_factory=SurfaceConfig)
    curvature: CurvatureParams = field(default_factory=CurvatureParams)
    kinematics: KinematicsOptions = field(default_factory=lambda: KinematicsOptions(sign=-1))
    verification: VerificationOptions = field(default_factory=VerificationOptions)
    acceptance: AcceptanceThresholds = field(default_factory=AcceptanceThresholds)
    crop: CropWindow = field(default_factory=CropWindow)

    # --- derived locations -------------------------------------------------
    @property
    def out(self) -> Path:
        return Path(self.paths.output)

    def stage_dir(self, name: str) -> Path:
        return self.out / name

    @property
    def fixed_path(self) -> Path:
        return Path(self.paths.fixed) if self.paths.fixed else self.stage_dir("synth") / "systolic.vol"

    @property
    def moving_path(self) -> Path:
        return Path(self.paths.moving) if self.paths.moving else self.stage_dir("synth") / "diastolic.vol"

    @property
    def mask_path(self) -> Path:
        return Path(self.paths.mask) if self.paths.mask else self.stage_dir("synth") / "wall_mask.vol"

    @property
    def truth_path(self) -> Path:
        return self.stage_dir("synth") / "truth_params.yaml"

    @property
    def database_path(self) -> Path:
        return Path(self.paths.database) if self.paths.database else self.out / "kinematics.db"

    def analytic_field(self) -> AnalyticField:
        return field_from_config(self.truth_field, self.phantom)

    def validate(self, check_inputs: bool = False) -> None:
        try:
            self.phantom.validate()
            self.analytic_field()
            self.registration.validate()
            self.curvature.validate()
            self.kinematics.validate()
            self.verification.validate()
        except ConfigError:
            raise
        except AkinError as e:
            raise ConfigError(str(e)) from e
        if self.crop.active:
            lo, hi = self.crop.lo, self.crop.hi
            if len(lo) != 3 or len(hi) != 3 or any(a >= b or a < 0 for a, b in zip(lo, hi)):
                raise ConfigError(f"Invalid crop window: lo={lo} hi={hi} (need 0 <= lo < hi per axis)")
        elif (self.crop.lo is None) != (self.crop.hi is None):
            raise ConfigError("Invalid crop window: give both crop.lo and crop.hi")
        if check_inputs:
            for key in ("fixed", "moving", "mask"):
                p = getattr(self.paths, key)
                if p is not None and not Path(p).exists():
                    raise ConfigError(f"paths.{key} does not exist: {p}")
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"paths.output is not creatable: {self.out} ({e})") from e


SECTIONS = {
    "paths": PathsConfig,
    "phantom": PhantomSpec,
    "registration": RegistrationConfig,
    "surface": SurfaceConfig,
    "curvature": CurvatureParams,
    "kinematics": KinematicsOptions,
    "verification": VerificationOptions,
    "acceptance": AcceptanceThresholds,
    "crop": CropWindow,
}
PATH_KEYS = {"output", "fixed", "moving", "mask", "database"}


def _coerce(key: str, value: Any, section: str) -> Any:
    if isinstance(value, list):
        return tuple(value)
    if section == "paths" and value is not None and key in PATH_KEYS:
        return Path(value)
    return value


def _build_section(name: str, data: Optional[Mapping[str, Any]], base=None):
    cls = SECTIONS[name]
    data = dict(data or {})
    for alias, real in KEY_ALIASES.get(name, {}).items():
        if alias in data:
            data[real] = data.pop(alias)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"Unknown config key: {name}.{key}")
    values = asdict(base) if base is not None else {}
    values.update({k: _coerce(k, v, name) for k, v in data.items()})
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {name} section: {e}") from e


def config_from_dict(doc: Mapping[str, Any]) -> PipelineConfig:
    doc = dict(doc or {})
    allowed = set(SECTIONS) | {"field", "case_id", "seed"}
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"Unknown config section: {key}")
    defaults = PipelineConfig()
    kwargs: Dict[str, Any] = {}
    for name in SECTIONS:
        kwargs[name] = _build_section(name, doc.get(name), getattr(defaults, name))
    field_doc = doc.get("field") or {}
    known_field = {f.name for f in fields(AnalyticField)}
    for key in field_doc:
        if key not in known_field:
            raise ConfigError(f"Unknown config key: field.{key}")
    kwargs["truth_field"] = dict(field_doc)
    kwargs["case_id"] = str(doc.get("case_id", defaults.case_id))
    kwargs["seed"] = doc.get("seed")
    cfg = PipelineConfig(**kwargs)
    if cfg.seed is not None:
        apply_seed(cfg, int(cfg.seed))
    return cfg


def apply_seed(cfg: PipelineConfig, seed: int) -> None:
    cfg.seed = seed
    cfg.phantom.rng_seed = seed
    cfg.registration.rng_seed = seed
    cfg.curvature.rng_seed = seed


def parse_override(item: str) -> Tuple[List[str], Any]:
    if "=" not in item:
        raise ConfigError(f"Override must look like section.key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts or len(parts) > 2:
        raise ConfigError(f"Override key must be section.key or a top-level key, got {key!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"Could not parse override value for {key}: {e}") from e
    return parts, value


def apply_overrides(doc: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    doc = copy.deepcopy(doc)
    for item in overrides:
        parts, value = parse_override(item)
        if len(parts) == 1:
            doc[parts[0]] = value
        else:
            section = doc.get(parts[0])
            if section is None:
                section = doc[parts[0]] = {}
            if not isinstance(section, dict):
                raise ConfigError(f"{parts[0]} is not a config section")
            section[parts[1]] = value
    return doc


def read_config_file(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Could not parse {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must contain a mapping of config sections")
    return doc


def load_config(
    path: Optional[Path] = None,
    overrides: Sequence[str] = (),
    output: Optional[Path] = None,
    seed: Optional[int] = None,
) -> PipelineConfig:
    doc = apply_overrides(read_config_file(path), overrides)
    cfg = config_from_dict(doc)
    if output is not None:
        cfg.paths.output = Path(output)
    if seed is not None:
        apply_seed(cfg, seed)
    log.debug("config: %s", cfg)
    return cfg


def config_to_dict(cfg: PipelineConfig) -> Dict[str, Any]:
    """Plain YAML-safe mapping of the resolved configuration."""
    def plain(obj):
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        if isinstance(obj, Path):
            return obj.as_posix()
        return obj

    doc: Dict[str, Any] = {"case_id": cfg.case_id, "seed": cfg.seed}
    for name in SECTIONS:
        section = plain(asdict(getattr(cfg, name)))
        for alias, real in KEY_ALIASES.get(name, {}).items():
            section[alias] = section.pop(real)
        doc[name] = section
    doc["field"] = plain(dict(cfg.truth_field))
    return doc
