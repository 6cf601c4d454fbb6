import json

import pytest

from app.config import RESOLVED_CONFIG_NAME, parse_config, write_resolved_config
from app.errors import ConfigError, GridDivisibilityError
from app.schemas import PatchGridSpec, RunConfig, TrainConfig


def test_missing_path_and_empty_file_give_defaults(tmp_path, monkeypatch):
    monkeypatch.setattr("app.config.DEFAULT_PRECISION", 32)
    empty = tmp_path / "empty.json"
    empty.write_text("")
    for cfg in (parse_config(), parse_config(empty)):
        assert cfg == RunConfig()
        assert cfg.train.grid.label == "8x8"
        assert cfg.train.epochs == 60


def test_non_dividing_grid_names_the_key():
    with pytest.raises(GridDivisibilityError) as info:
        parse_config(overrides={"train.grid": {"rows": 3, "cols": 3}})
    assert "grid" in info.value.key


def test_any_dividing_grid_is_accepted():
    wide = TrainConfig(crop_height=160, crop_width=128, grid=PatchGridSpec(rows=1, cols=1))
    assert wide.mlp_spec().hidden == 128
    assert TrainConfig(crop_height=48, crop_width=48, grid=PatchGridSpec(rows=3, cols=3)).grid.cells == 9


def test_sweep_grids_are_checked_against_the_crop():
    with pytest.raises(ConfigError) as info:
        parse_config(overrides={"sweep.grids": [{"rows": 1, "cols": 1}, {"rows": 3, "cols": 3}]})
    assert info.value.key == "sweep.grids[1]"


def test_overrides_beat_the_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train": {"epochs": 5, "lr": 2e-4}}))
    cfg = parse_config(path, {"train.epochs": 2, "train.lr": None})
    assert cfg.train.epochs == 2
    assert cfg.train.lr == pytest.approx(2e-4)


def test_invalid_documents_are_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        parse_config(bad)
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "absent.json")
    with pytest.raises(ConfigError) as info:
        parse_config(overrides={"train.unknown_knob": 1})
    assert "unknown_knob" in info.value.key


def test_out_of_range_value_names_the_key():
    with pytest.raises(ConfigError) as info:
        parse_config(overrides={"train.lambda_rec": -1})
    assert info.value.key == "train.lambda_rec"


def test_channel_mismatch_between_sections():
    with pytest.raises(ConfigError, match="in_channels"):
        parse_config(overrides={"data.source_channels": 2})


def test_grid_text_parsing():
    assert PatchGridSpec.parse("8x8").label == "8x8"
    assert PatchGridSpec.parse("4").label == "4x4"
    with pytest.raises(ConfigError):
        PatchGridSpec.parse("eight")


def test_resolved_config_round_trips(tmp_path):
    cfg = parse_config(overrides={"train.epochs": 3})
    path = write_resolved_config(cfg, tmp_path)
    assert path.name == RESOLVED_CONFIG_NAME
    assert parse_config(path) == cfg
