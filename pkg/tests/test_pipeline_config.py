from pathlib import Path

import pytest

from errors import ConfigError
from pipeline_config import (
    DEFAULT_CONFIG,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    load_config,
    parse_override,
)


def test_default_config_file():
    cfg = load_config(DEFAULT_CONFIG)
    assert cfg.registration.lam == 0.05
    assert cfg.registration.control_spacing_voxels == (6, 6, 6)
    assert cfg.phantom.dims == (112, 112, 74)
    assert cfg.kinematics.sign == -1
    assert cfg.truth_field["dr_max_mm"] == 1.0
    assert cfg.crop.label == "full" and not cfg.crop.active


def test_overrides_and_aliases(tmp_path):
    cfg = load_config(
        DEFAULT_CONFIG,
        ["registration.lambda=0.2", "phantom.dims=[40, 40, 10]", "case_id=c7", "field.axial_mm=0.5"],
        output=tmp_path,
        seed=5,
    )
    assert cfg.registration.lam == 0.2
    assert cfg.phantom.dims == (40, 40, 10)
    assert cfg.case_id == "c7"
    assert cfg.analytic_field().axial_mm == 0.5
    assert cfg.out == tmp_path
    assert (cfg.phantom.rng_seed, cfg.registration.rng_seed, cfg.curvature.rng_seed) == (5, 5, 5)
    assert cfg.fixed_path == tmp_path / "synth" / "systolic.vol"
    assert cfg.moving_path == tmp_path / "synth" / "diastolic.vol"
    assert cfg.database_path == tmp_path / "kinematics.db"


@pytest.mark.parametrize(
    "override, message",
    [
        ("registration.lamda=1", "registration.lamda"),
        ("plotting.dpi=300", "plotting"),
        ("field.amplitude=2", "field.amplitude"),
        ("registration", "section.key=value"),
        ("a.b.c=1", "section.key"),
    ],
)
def test_bad_overrides(override, message):
    with pytest.raises(ConfigError, match=message):
        load_config(DEFAULT_CONFIG, [override])


def test_parse_override_uses_yaml_scalars():
    assert parse_override("surface.fill_lumen=false") == (["surface", "fill_lumen"], False)
    assert parse_override("crop.lo=[0, 0, 10]") == (["crop", "lo"], [0, 0, 10])
    assert apply_overrides({}, ["seed=3"]) == {"seed": 3}


def test_validate_wraps_module_errors(tmp_path):
    cfg = load_config(DEFAULT_CONFIG, ["phantom.inner_radius_mm=30"], output=tmp_path)
    with pytest.raises(ConfigError, match="phantom.outer_radius_mm"):
        cfg.validate()

    cfg = load_config(DEFAULT_CONFIG, ["registration.lambda=-1"], output=tmp_path)
    with pytest.raises(ConfigError, match="registration.lam"):
        cfg.validate()

    cfg = load_config(DEFAULT_CONFIG, ["kinematics.sign=2"], output=tmp_path)
    with pytest.raises(ConfigError, match="kinematics.sign"):
        cfg.validate()


@pytest.mark.parametrize(
    "overrides",
    [
        ["crop.lo=[0, 0, 0]"],
        ["crop.lo=[0, 0, 10]", "crop.hi=[112, 112, 5]"],
    ],
)
def test_crop_window_validation(tmp_path, overrides):
    cfg = load_config(DEFAULT_CONFIG, overrides, output=tmp_path)
    with pytest.raises(ConfigError, match="crop"):
        cfg.validate()


def test_missing_input_files(tmp_path):
    cfg = load_config(DEFAULT_CONFIG, [f"paths.fixed={tmp_path / 'absent.nii'}"], output=tmp_path)
    cfg.validate()
    with pytest.raises(ConfigError, match="paths.fixed"):
        cfg.validate(check_inputs=True)


def test_config_round_trips_through_plain_mapping(tmp_path):
    cfg = load_config(DEFAULT_CONFIG, ["crop.lo=[0, 0, 0]", "crop.hi=[112, 112, 37]", "crop.label=distal"],
                      output=tmp_path)
    doc = config_to_dict(cfg)
    assert doc["registration"]["lambda"] == 0.05
    assert doc["paths"]["output"] == Path(tmp_path).as_posix()
    assert config_from_dict(doc) == cfg


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")
