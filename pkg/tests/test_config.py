import pytest

from latentmim.config import (
    DecoderConfig,
    TrainConfig,
    ViTConfig,
    build_config,
    config_id,
    format_config,
    load_config_file,
    parse_config_text,
)
from latentmim.errors import ConfigError


def test_defaults_follow_the_recipe():
    cfg = TrainConfig()
    assert cfg.mask_ratio == 0.75
    assert cfg.betas == (0.9, 0.95)
    assert cfg.weight_decay == 0.05
    assert cfg.effective_lr() == pytest.approx(1.5e-4 * 4096 / 256)


def test_vit_invariants():
    with pytest.raises(ConfigError, match="num_heads"):
        ViTConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ConfigError, match="ffn_ratio"):
        ViTConfig(ffn_ratio=0)


def test_decoder_variant_validated():
    with pytest.raises(ConfigError, match="variant"):
        DecoderConfig(variant="deep")


def test_axes_sync_into_decoder():
    cfg = build_config({"decoder": "full", "target": "pixel"})
    assert cfg.dec.variant == "full"
    assert cfg.dec.d_target == 3 * cfg.vit.patch_size**2
    assert cfg.loss_kind == "reconstruction"
    assert build_config({"decoder": "none"}).loss_kind == "kd"


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="vit.dept"):
        build_config({"vit.dept": "3"})


def test_bad_value_names_key():
    with pytest.raises(ConfigError, match="batch_size"):
        build_config({"batch_size": "many"})


def test_semantic_needs_attention_layer():
    with pytest.raises(ConfigError, match="semantic"):
        build_config({"teacher.depth": "0"})
    build_config({"teacher.depth": "0", "sampler": "uniform"})


def test_grid_mismatch_rejected():
    with pytest.raises(ConfigError, match="grid"):
        build_config({"teacher.patch_size": "4"})


def test_text_round_trip():
    cfg = build_config({"decoder": "full", "vit.depth": "3", "betas": "0.8, 0.99", "seed": "4"})
    again = build_config(parse_config_text(format_config(cfg)))
    assert again == cfg
    assert config_id(again) == config_id(cfg)


def test_parse_errors_cite_line():
    with pytest.raises(ConfigError, match=":2:"):
        parse_config_text("a = 1\nnot a pair\n", source="f.cfg")


def test_missing_file_named(tmp_path):
    with pytest.raises(ConfigError, match="nope.cfg"):
        load_config_file(tmp_path / "nope.cfg")


def test_desk_config_loads():
    from pathlib import Path

    cfg = build_config(load_config_file(Path(__file__).parent.parent / "configs" / "desk.cfg"))
    assert cfg.teacher.saliency == 4.0
    assert cfg.max_steps == 300
