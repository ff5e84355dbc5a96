"""Run configuration: schema, precedence, file parsing, hashing."""

import pytest

from drive_constraints import config


def test_defaults_cover_the_schema():
    values = config.defaults()
    assert set(values) == set(config.SCHEMA)
    assert values["grid"] == "desk" and values["gap_m"] == 8.0
    assert values["lateral_count"] * values["speed_count"] == 91


def test_flags_beat_file_beat_environment_beat_defaults():
    env = {config.SEED_ENV: "11"}
    file_values = {"seed": 5, "vehicles": 20, "max_epochs": 4}
    flags = {"seed": "9", "vehicles": None, "grid": "full"}
    values = config.merge(file_values, flags, env)
    assert values["seed"] == 9  # flag
    assert values["vehicles"] == 20  # file; a None flag is not given
    assert values["max_epochs"] == 4  # file
    assert values["grid"] == "full"  # flag
    assert values["lanes"] == 3  # default
    assert config.merge({}, {}, env)["seed"] == 11
    assert config.merge({"seed": 5}, {}, env)["seed"] == 5
    assert config.merge({}, {}, {})["seed"] == 0


def test_coerce_parses_and_checks_values():
    assert config.coerce("vehicles", " 16 ") == 16
    assert config.coerce("freeze_backbone", "Yes") is True
    assert config.coerce("freeze_backbone", "off") is False
    assert config.coerce("duration", "12.5") == 12.5
    with pytest.raises(ValueError, match="unknown config key 'vehicle'"):
        config.coerce("vehicle", 3)
    with pytest.raises(ValueError, match="not a boolean"):
        config.coerce("freeze_backbone", "maybe")
    with pytest.raises(ValueError, match="outside"):
        config.coerce("calibration_quantile", 1.5)
    with pytest.raises(ValueError, match="not in"):
        config.coerce("backbone", "resnet")
    with pytest.raises(ValueError, match="not an integer"):
        config.coerce("lanes", 2.5)
    with pytest.raises(ValueError, match="'lanes'"):
        config.coerce("lanes", "three")


def test_speed_range_is_checked_after_merging():
    with pytest.raises(ValueError, match="speed_min"):
        config.merge({"speed_min": 20.0}, {"speed_max": "10"}, {})


def test_config_file_errors_name_the_line(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# demo\n\ngrid = full  # 0.5 m cells\nvehicles = 8\n")
    assert config.read_kv_file(path) == {"grid": "full", "vehicles": 8}
    path.write_text("grid = desk\nmax_epochs 4\n")
    with pytest.raises(ValueError, match=r"run\.cfg:2"):
        config.read_kv_file(path)
    path.write_text("grid = desk\n\nbogus = 1\n")
    with pytest.raises(ValueError, match=r"unknown config key 'bogus' \(.*run\.cfg:3\)"):
        config.read_kv_file(path)


def test_hash_ignores_seed_and_threads_only():
    base = config.defaults()
    h = config.config_hash(base)
    assert len(h) == 64
    assert config.config_hash({**base, "seed": 3, "threads": 8}) == h
    assert config.config_hash({**base, "vehicles": 13}) != h
    run = config.run_directory("runs", {**base, "seed": 3})
    assert run.name == f"seed3-{h[:10]}"


def test_typed_views_follow_the_values():
    values = config.merge({"lanes": 2, "vehicles": 6, "max_epochs": 3}, {}, {})
    synth = config.synth_config(values)
    assert synth.lanes == 2 and synth.vehicles == 6
    spec = config.sampling_spec(values)
    assert spec.n_candidates == 91 and spec.n_poses == 51
    inf = config.inference_config(values, gap_m=8.0)
    assert inf.max_epochs == 3 and inf.gap_m == 8.0
    assert config.beta_schedule(values).beta_max == values["beta_max"]
    assert config.grid_spec("full").pair_shape == (7, 128, 32)
    with pytest.raises(ValueError, match="grid preset"):
        config.grid_spec("huge")
