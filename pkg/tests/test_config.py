import pytest

from config import (
    ExperimentConfig,
    build_config,
    config_hash,
    default_profile,
    dump_ini,
    env_settings,
    load_config,
    load_ini_text,
    parse_override,
    read_app_settings,
    SCRIPT_DIR,
)
from errors import ConfigError


def test_defaults_are_valid():
    cfg = ExperimentConfig()
    assert cfg.train.lr_for("ff", "ce") == 0.005
    assert cfg.train.lr_for("ff", "mse") == 0.01
    assert cfg.train.lr_for("cnn") == 0.01
    assert cfg.train.batch_for("ff") == 512 and cfg.train.batch_for("cnn") == 128


def test_profile_then_file_then_overrides(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[train]\nbase_lr = 0.2\nmax_epochs = 7\n", encoding="utf-8")
    cfg = load_config(path, "desk", ["train.max_epochs=9", "model.widths=4, 8"])
    assert cfg.train.base_lr == 0.2
    assert cfg.train.max_epochs == 9
    assert cfg.model.widths == [4, 8]
    assert cfg.train.warmup_updates == 3200


def test_full_profile():
    cfg = load_config(None, "full")
    assert cfg.data.source == "mnist1d"
    assert cfg.train.max_epochs == 300_000
    assert cfg.model.widths[-1] == 131_072


def test_shipped_configs_load():
    for path in sorted((SCRIPT_DIR / "configs").glob("*.ini")):
        load_config(path, "desk")


def test_unknown_key_names_dotted_key():
    with pytest.raises(ConfigError) as info:
        build_config({"train": {"learning_rate": "0.1"}})
    assert info.value.key == "train.learning_rate"


def test_unknown_section():
    with pytest.raises(ConfigError) as info:
        build_config({"optim": {"lr": "0.1"}})
    assert info.value.key == "optim"


def test_invalid_value_names_key():
    with pytest.raises(ConfigError) as info:
        build_config({"train": {"max_epochs": "lots"}})
    assert info.value.key == "train.max_epochs"
    with pytest.raises(ConfigError):
        build_config({"data": {"shuffle_fraction": "1.5"}})


def test_missing_file_and_profile(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")
    with pytest.raises(ConfigError):
        load_config(None, "nonexistent")


def test_parse_override():
    assert parse_override("train.base_lr=0.005") == ("train", "base_lr", "0.005")
    assert parse_override("data.path=a=b") == ("data", "path", "a=b")
    for bad in ("train.base_lr", "base_lr=1", "a.b.c=1"):
        with pytest.raises(ConfigError):
            parse_override(bad)


def test_none_values():
    cfg = build_config({"train": {"base_lr": "none", "batch_size": ""}})
    assert cfg.train.base_lr is None and cfg.train.batch_size is None


def test_dump_round_trip():
    cfg = load_config(None, "desk", ["data.noise_levels=0.0, 0.1, 0.15", "data.path=some/dir",
                                     "biasvar.xprime=test-point"])
    again = load_ini_text(dump_ini(cfg))
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)


def test_hash_is_stable_and_sensitive():
    a = ExperimentConfig()
    assert config_hash(a) == config_hash(ExperimentConfig())
    assert len(config_hash(a)) == 12
    b = build_config({"train": {"max_epochs": "101"}})
    assert config_hash(a) != config_hash(b)


def test_app_settings(tmp_path):
    path = tmp_path / "settings.ini"
    assert default_profile(path) == "desk"
    path.write_text("[Settings]\ndefault_profile = full\n", encoding="utf-8")
    assert read_app_settings(path) == {"default_profile": "full"}
    assert default_profile(path) == "full"


def test_env_settings(monkeypatch):
    monkeypatch.setenv("LIPDD_WORKERS", "3")
    monkeypatch.setenv("LIPDD_RUNS_DIR", "elsewhere")
    env = env_settings()
    assert env.workers == 3 and str(env.runs_dir) == "elsewhere"
    monkeypatch.setenv("LIPDD_WORKERS", "0")
    with pytest.raises(ConfigError) as info:
        env_settings()
    assert info.value.key == "LIPDD_WORKERS"
