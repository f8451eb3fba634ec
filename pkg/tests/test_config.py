import pytest
import yaml

from qlife.config import ConfigError, RunConfig, default_config_path, dump_config, load_config


def test_defaults_carry_method_constants():
    cfg = RunConfig()
    assert cfg.train.scl_weight == 0.1
    assert cfg.detection.batch_size == 20
    assert cfg.detection.percentile == 95
    assert cfg.detection.alpha == 0.05
    assert cfg.incremental.shots == 20
    assert (cfg.incremental.head_epochs, cfg.incremental.head_lr) == (15, 1e-3)
    assert (cfg.incremental.e2e_epochs, cfg.incremental.e2e_lr) == (15, 5e-5)
    assert cfg.dann.w_target == 0.5
    assert cfg.dann.shots == 5
    assert cfg.backbone.spp_levels == [4, 2, 1]


def test_bundled_desk_config_loads():
    cfg = load_config(default_config_path())
    assert cfg.new_class == "minor-damaged"


def test_unknown_key_is_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  epochz: 3\n")
    with pytest.raises(ConfigError, match="epochz"):
        load_config(path)
    path.write_text("colour: blue\n")
    with pytest.raises(ConfigError, match="colour"):
        load_config(path)


def test_flags_override_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\nincremental:\n  shots: 7\n")
    cfg = load_config(path, {"seed": 11, "incremental.shots": 4, "detection.alpha": None})
    assert cfg.seed == 11
    assert cfg.incremental.shots == 4
    assert cfg.detection.alpha == 0.05


def test_invalid_values_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    for text in ("data:\n  split: [0.5, 0.5, 0.5]\n", "detection:\n  alpha: 0\n", "new_class: rusty\n",
                 "seed: -1\n", "- a\n- b\n", "train: [\n"):
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_config(path)


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


def test_dump_round_trips(tmp_path):
    cfg = load_config(None, {"new_class": "minor", "dann.lambda_grl": 0.5})
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(dump_config(cfg)))
    assert load_config(path) == cfg
    assert cfg.new_class == "minor-damaged"
