import pytest
from hypothesis import given, strategies as st

from ledcnet.config import (ASPPConfig, FocalParams, ModelConfig, OCRConfig, RunConfig,
                            apply_overrides, dump_config, flatten, from_dict, load_config,
                            parse_pairs, preset, save_config, to_dict)
from ledcnet.errors import ConfigError


def test_flat_round_trip(tmp_path):
    cfg = preset("toy")
    path = tmp_path / "run.cfg"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_every_key_is_overridable():
    cfg = RunConfig()
    for key, value in flatten(cfg).items():
        assert flatten(apply_overrides(cfg, {key: value}))[key] == value


def test_override_types_and_copy():
    cfg = RunConfig()
    new = apply_overrides(cfg, {"model.backbone.stage_depths": "1,1,3,1", "train.lr": "0.01",
                                "model.use_ocr": "false"})
    assert new.model.backbone.stage_depths == [1, 1, 3, 1]
    assert new.train.lr == 0.01 and new.model.use_ocr is False
    assert cfg.model.backbone.stage_depths == [2, 2, 6, 2]


def test_overrides_validate_final_combination():
    # changing both fields at once is legal even though either alone is not
    cfg = apply_overrides(RunConfig(), {"model.num_classes": "5", "model.ocr.num_regions": "5"})
    assert cfg.model.num_classes == 5
    with pytest.raises(ConfigError, match="num_regions"):
        apply_overrides(RunConfig(), {"model.num_classes": "5"})


@pytest.mark.parametrize("pairs", [{"model.nope": "1"}, {"train.lr.x": "1"},
                                   {"model.backbone": "1"}, {"train.lr": "fast"},
                                   {"model.use_ocr": "maybe"}])
def test_bad_overrides(pairs):
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), pairs)


def test_file_precedence_over_preset(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("# toy tweaks\ntrain.epochs = 3\n\nmodel.fpn_width = 4  # narrower\n")
    cfg = load_config(path, preset("toy"))
    assert cfg.train.epochs == 3 and cfg.model.fpn_width == 4
    assert cfg.model.backbone.growth == preset("toy").model.backbone.growth


def test_parse_pairs_errors():
    with pytest.raises(ConfigError, match="line 2"):
        parse_pairs(["a = 1", "garbage"])
    with pytest.raises(ConfigError):
        load_config("/nonexistent/file.cfg")


def test_invariants():
    with pytest.raises(ConfigError):
        ASPPConfig(dilation_rates=[6, 6])
    with pytest.raises(ConfigError):
        ASPPConfig(dilation_rates=[])
    ASPPConfig(dilation_rates=[1])
    with pytest.raises(ConfigError):
        ModelConfig(num_classes=4)
    ModelConfig(num_classes=4, ocr=OCRConfig(num_regions=4))
    with pytest.raises(ConfigError):
        FocalParams(alpha=0)
    with pytest.raises(ConfigError):
        FocalParams(gamma=-1)
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), {"data.tile_size": "100"})
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), {"train.factor": "1"})


def test_presets():
    assert preset("large").model.backbone.stage_depths == [6, 6, 18, 6]
    assert preset("base") == RunConfig()
    with pytest.raises(ConfigError):
        preset("huge")


def test_dict_round_trip():
    cfg = preset("large").model
    assert from_dict(ModelConfig, to_dict(cfg)) == cfg
    assert from_dict(ModelConfig, {"fpn_width": 7}).fpn_width == 7


@given(st.lists(st.integers(1, 9), min_size=4, max_size=4), st.floats(1e-6, 1.0),
       st.booleans())
def test_dump_parse_property(depths, lr, use_aspp):
    cfg = apply_overrides(RunConfig(), {"model.backbone.stage_depths": ",".join(map(str, depths)),
                                        "train.lr": repr(lr), "model.use_aspp": str(use_aspp)})
    again = apply_overrides(RunConfig(), parse_pairs(dump_config(cfg).splitlines()))
    assert again == cfg
