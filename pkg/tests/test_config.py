import dataclasses

import pytest

from softquad.config import (
    Config,
    ConfigError,
    PpoConfig,
    RewardConfig,
    config_from_dict,
    load_config,
)


def test_packaged_defaults_match_dataclasses():
    assert load_config() == Config()


def test_obs_dims():
    cfg = Config()
    assert cfg.obs_dim_student == 43
    assert cfg.obs_dim_teacher == 62


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="unknown section"):
        config_from_dict({"nope": {}})


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="physics.dtt"):
        config_from_dict({"physics": {"dtt": 0.1}})


def test_range_order_enforced():
    with pytest.raises(ConfigError, match="friction_range"):
        config_from_dict({"randomization": {"friction_range": [1.5, 0.2]}})


def test_penalty_sign_enforced():
    with pytest.raises(ConfigError, match="w_torques"):
        RewardConfig(w_torques=0.1).validate()
    with pytest.raises(ConfigError, match="w_tracking_lin_vel"):
        RewardConfig(w_tracking_lin_vel=-1.0).validate()
    # positive terms may be positive
    RewardConfig(w_feet_air_time=2.0).validate()


def test_ppo_bounds():
    with pytest.raises(ConfigError):
        PpoConfig(gamma=0.0).validate()
    with pytest.raises(ConfigError):
        PpoConfig(lr_init=1.0).validate()
    with pytest.raises(ConfigError):
        PpoConfig(kl_mode="nonsense").validate()


def test_hash_stable_under_key_reordering(tmp_path):
    a = tmp_path / "a.toml"
    b = tmp_path / "b.toml"
    a.write_text("[physics]\ndt = 0.002\ngravity = 9.0\n")
    b.write_text("[physics]\ngravity = 9.0\ndt = 0.002\n")
    assert load_config(a).hash() == load_config(b).hash()
    assert load_config(a).hash() != Config().hash()


def test_partial_override_keeps_other_defaults(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text("[train]\nnum_envs = 8\n")
    cfg = load_config(f)
    assert cfg.train.num_envs == 8
    assert cfg.train.iterations == Config().train.iterations
    assert cfg.physics == Config().physics


def test_json_config(tmp_path):
    f = tmp_path / "c.json"
    f.write_text('{"train": {"seed": 7}}')
    assert load_config(f).train.seed == 7


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_config("/nonexistent/path.toml")


def test_toml_parse_error(tmp_path):
    f = tmp_path / "bad.toml"
    f.write_text("[physics\ndt = 1")
    with pytest.raises(ConfigError, match="parse error"):
        load_config(f)


def test_config_is_frozen():
    cfg = Config()
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.physics.dt = 0.5  # type: ignore[misc]
