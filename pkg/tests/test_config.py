import logging

import pytest
import yaml

from modules.config import (
    ConfigError,
    apply_overrides,
    canonical_json,
    digest,
    experiment_from_dict,
    load_cfg,
    load_experiment_config,
    setup_logging,
)

from conftest import CONFIGS, small_experiment_dict


def test_default_experiment_loads():
    cfg = load_experiment_config(CONFIGS / "experiment_default.yaml")
    assert cfg.seed == 20251019
    assert cfg.edp.alpha_t == 0.3 and cfg.edp.alpha_m == 0.4
    assert cfg.train.reward_mode == "mar"
    assert cfg.train.group_size == 8
    assert cfg.env.num_tools == 18


def test_missing_seed_is_an_error():
    raw = small_experiment_dict()
    del raw["seed"]
    with pytest.raises(ConfigError, match="seed"):
        experiment_from_dict(raw, base_dir=CONFIGS)


def test_every_bad_field_is_reported():
    raw = small_experiment_dict(
        edp={"alpha_t": 1.5},
        train={"group_size": 0, "reward_mode": "bogus"},
        pool={"size": 0},
    )
    with pytest.raises(ConfigError) as ei:
        experiment_from_dict(raw, base_dir=CONFIGS)
    text = str(ei.value)
    for path in ("edp.alpha_t", "train.group_size", "train.reward_mode", "pool.size"):
        assert path in text
    assert len(ei.value.problems) >= 4


def test_bad_env_path_is_a_config_error(tmp_path):
    raw = small_experiment_dict(env="missing.yaml")
    with pytest.raises(ConfigError, match="not found"):
        experiment_from_dict(raw, base_dir=tmp_path)


def test_overrides_apply_dotted_keys_and_skip_none():
    raw = {"seed": 1, "train": {"steps": 5}}
    out = apply_overrides(raw, {"seed": 9, "train.steps": None, "edp.alpha_t": 0.0})
    assert out == {"seed": 9, "train": {"steps": 5}, "edp": {"alpha_t": 0.0}}
    assert raw == {"seed": 1, "train": {"steps": 5}}


def test_overrides_reach_sub_configs(tmp_path):
    p = tmp_path / "exp.yaml"
    p.write_text(yaml.safe_dump(small_experiment_dict(env=str(CONFIGS / "env_default.yaml"))))
    cfg = load_experiment_config(p, {"seed": 11, "train.group_size": 2, "edp.alpha_m": 0.0})
    assert cfg.seed == 11
    assert cfg.train.group_size == 2
    assert cfg.edp.alpha_m == 0.0
    assert cfg.edp.seed == 11


def test_config_digest_ignores_worker_count(small_cfg):
    raw = small_experiment_dict(train={"workers": 8})
    other = experiment_from_dict(raw, base_dir=CONFIGS)
    assert other.digest == small_cfg.digest
    changed = experiment_from_dict(small_experiment_dict(seed=8), base_dir=CONFIGS)
    assert changed.digest != small_cfg.digest


def test_load_cfg_rejects_non_mapping(tmp_path):
    p = tmp_path / "x.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_cfg(p)


def test_canonical_json_is_order_independent():
    assert canonical_json({"b": 1, "a": [1.5, 2]}) == '{"a":[1.5,2],"b":1}'
    assert digest({"a": 1, "b": 2}) == digest({"b": 2, "a": 1})


def test_log_level_from_environment(monkeypatch):
    monkeypatch.setenv("AGENT_LOG_LEVEL", "warning")
    setup_logging()
    assert logging.getLogger().level == logging.WARNING
    setup_logging("debug")
    assert logging.getLogger().level == logging.DEBUG
