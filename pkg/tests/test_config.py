import json

import pytest

from phycast.config import ConfigError, RunConfig, apply_overrides, load_config


def test_defaults_validate():
    cfg = RunConfig.from_dict({})
    assert cfg.train.lam == 1.0 and cfg.train.batch == 8 and cfg.train.patience == 10
    assert cfg.data.T == 10 and cfg.data.delta == 10 and cfg.model.frame_size == 32


def test_json_round_trip():
    cfg = RunConfig.from_dict({"train": {"lambda": 0.0}, "model": {"branch_mode": "phycell_only"}})
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg
    assert json.loads(cfg.to_json())["train"]["lambda"] == 0.0


def test_unknown_keys_named_by_path():
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({"model": {"phycell": {"kk": 3}}, "bogus": 1})
    assert "model.phycell.kk: unknown key" in info.value.problems
    assert "bogus: unknown key" in info.value.problems


def test_type_and_range_problems_collected():
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({"train": {"lr": "fast"}})
    assert any(p.startswith("train.lr") for p in info.value.problems)
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({"model": {"phycell": {"k": 4}}, "data": {"mask_ratio": 0.9}})
    probs = info.value.problems
    assert any(p.startswith("model.phycell.k") for p in probs)
    assert any(p.startswith("data.mask_ratio") for p in probs)


def test_generator_and_paths_are_exclusive():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"data": {"paths": {"train": "a", "val": "b", "test": "c"}}})
    cfg = RunConfig.from_dict({"data": {"generator": None, "paths": {"train": "a", "val": "b", "test": "c"}}})
    assert cfg.data.generator is None


def test_identity_encoder_needs_matching_channels():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"model": {"encoder": "identity", "latent_channels": 4}})
    RunConfig.from_dict({"model": {"encoder": "identity", "latent_channels": 1}})


def test_overrides_parse_json_values():
    doc = apply_overrides({}, ["train.lambda=0", "model.branch_mode=residual_only", "model.encoder_channels=[4,8]"])
    assert doc == {
        "train": {"lambda": 0},
        "model": {"branch_mode": "residual_only", "encoder_channels": [4, 8]},
    }
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_load_config_file_with_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"epochs": 3}}))
    cfg = load_config(str(path), ["train.epochs=5", "train.seed=2"])
    assert cfg.train.epochs == 5 and cfg.train.seed == 2
