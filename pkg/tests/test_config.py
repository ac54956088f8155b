"""Run-config parsing, presets, strict key and type checking."""

import dataclasses

import pytest

from nestvit.config import (PAPER_PARAM_TARGETS, PARAM_TOLERANCE, ConfigError,
                            DataConfig, RunConfig, load_preset,
                            load_run_config, preset_names,
                            run_config_from_dict, run_config_to_dict,
                            save_run_config)
from nestvit.generator import GenConfig
from nestvit.model import NestConfig

PRESETS = ("nest-micro", "nest-t-cifar", "nest-s-cifar", "nest-b-cifar",
           "nest-t-imagenet", "gen-64", "gen-micro")


def test_preset_inventory():
    assert preset_names() == sorted(PRESETS)


@pytest.mark.parametrize("name", PRESETS)
def test_preset_round_trips_through_dict(name):
    rc = load_preset(name)
    again = run_config_from_dict(run_config_to_dict(rc))
    assert again == rc
    expect = GenConfig if name.startswith("gen") else NestConfig
    assert isinstance(rc.model, expect)
    assert rc.kind == ("generator" if name.startswith("gen") else "classifier")


def test_unknown_preset_lists_alternatives():
    with pytest.raises(ConfigError, match="unknown preset 'nest-xxl'"):
        load_preset("nest-xxl")


def test_save_load_file_round_trip(tmp_path):
    rc = load_preset("nest-micro")
    rc.train.seed = 17
    rc.data.mean = (0.1, 0.2, 0.3)
    path = tmp_path / "run.yaml"
    save_run_config(path, rc)
    assert load_run_config(path) == rc


def test_unknown_keys_report_dotted_path():
    with pytest.raises(ConfigError, match="unknown key model.bogus"):
        run_config_from_dict({"model": {"bogus": 1}})
    with pytest.raises(ConfigError, match="unknown key extras"):
        run_config_from_dict({"extras": {}})
    with pytest.raises(ConfigError, match="unknown key train.lr"):
        run_config_from_dict({"train": {"lr": 0.1}})


def test_type_checking():
    with pytest.raises(ConfigError, match="train.seed: expected an integer"):
        run_config_from_dict({"train": {"seed": True}})
    with pytest.raises(ConfigError, match="train.seed: expected an integer"):
        run_config_from_dict({"train": {"seed": "zero"}})
    with pytest.raises(ConfigError, match="model.dims: expected a list"):
        run_config_from_dict({"model": {"dims": 8}})
    with pytest.raises(ConfigError, match="data.source: expected a string"):
        run_config_from_dict({"data": {"source": 3}})
    with pytest.raises(ConfigError, match="train.base_lr: expected a number"):
        run_config_from_dict({"train": {"base_lr": "fast"}})
    # ints are acceptable floats
    rc = run_config_from_dict({"train": {"base_lr": 1}})
    assert rc.train.base_lr == 1.0 and isinstance(rc.train.base_lr, float)


def test_kind_selects_model_class():
    rc = run_config_from_dict({"kind": "generator", "model": {}})
    assert isinstance(rc.model, GenConfig)
    assert isinstance(run_config_from_dict({}).model, NestConfig)
    with pytest.raises(ConfigError, match="kind: expected"):
        run_config_from_dict({"kind": "vae"})
    with pytest.raises(ConfigError, match="config root must be a mapping"):
        run_config_from_dict(["model"])


def test_model_validation_errors_are_config_errors():
    with pytest.raises(ConfigError, match="model:"):
        run_config_from_dict({"model": {"dims": [8], "heads": [2, 2]}})


def test_load_error_names_file(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("model:\n  bogus: 1\n")
    with pytest.raises(ConfigError, match="bad.yaml: unknown key model.bogus"):
        load_run_config(path)


def test_to_dict_drops_unset_optionals():
    raw = run_config_to_dict(RunConfig(kind="classifier", model=NestConfig()))
    assert "mean" not in raw["data"]
    raw2 = run_config_to_dict(RunConfig(
        kind="classifier", model=NestConfig(),
        data=DataConfig(mean=(0.5,), std=(0.25,))))
    assert raw2["data"]["mean"] == [0.5]


def test_paper_param_targets_pinned():
    assert PAPER_PARAM_TARGETS == {
        "nest-t-cifar": 6_200_000,
        "nest-s-cifar": 23_400_000,
        "nest-b-cifar": 90_100_000,
        "nest-t-imagenet": 17_000_000,
        "gen-64": 74_400_000,
    }
    assert PARAM_TOLERANCE == 0.02


def test_round_trip_is_lossless_for_every_field():
    rc = load_preset("nest-t-cifar")
    raw = run_config_to_dict(rc)
    for section in ("model", "train", "data"):
        obj = getattr(rc, section)
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is None:
                assert f.name not in raw[section]
            else:
                assert f.name in raw[section]
