import pytest

from recoding_lm.config import (ConfigError, RecodingConfig, TrainConfig, apply_items, desk_profile, dump_config,
                                load_config, parse_config)


def test_full_size_defaults():
    cfg = TrainConfig()
    assert (cfg.layers, cfg.embedding_size, cfg.hidden_size, cfg.batch_size) == (2, 650, 650, 64)
    assert (cfg.lr, cfg.clip, cfg.seq_len, cfg.epochs, cfg.dropout) == (20.0, 0.25, 35, 8, 0.15)
    rec = cfg.recoding
    assert (rec.k, rec.mc_dropout, rec.prior_scale, rec.weight_decay) == (15, 0.42, 0.29, 4.82e-5)


def test_default_alpha_per_signal():
    assert RecodingConfig(signal="surprisal").base_alpha == 5.0
    assert RecodingConfig(signal="mcd").base_alpha == 0.001
    assert RecodingConfig(signal="bae", alpha=0.2).base_alpha == 0.2


def test_desk_profile():
    cfg = parse_config("profile = desk\n")
    assert cfg == desk_profile()
    assert (cfg.embedding_size, cfg.hidden_size, cfg.batch_size, cfg.seq_len) == (64, 64, 16, 20)


def test_parse_keys_and_comments():
    cfg = parse_config("""
        # comment
        model.hidden_size = 32   # trailing
        recoding.enabled = true
        signal.kind = mcd
        recoding.alpha = 0.01
        recoding.alpha.1.c = 0.5
        recoding.predictor_hidden = 10, 5
    """)
    assert cfg.hidden_size == 32
    assert cfg.recoding.enabled and cfg.recoding.signal == "mcd"
    assert cfg.recoding.alpha_for(0, "h") == 0.01
    assert cfg.recoding.alpha_for(1, "c") == 0.5
    assert cfg.recoding.predictor_hidden == (10, 5)


@pytest.mark.parametrize("text", ["bogus.key = 1", "train.lr = abc", "train.dropout = 1.0", "model.layers = 0",
                                  "signal.kind = foo", "recoding.alpha.5.h = 1", "profile = huge",
                                  "just text", "recoding.enabled = maybe", "train.lr = -1"])
def test_invalid_config(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_dump_roundtrip(tmp_path):
    cfg = apply_items(desk_profile(), {"recoding.enabled": "true", "signal.kind": "bae", "recoding.alpha": "0.1",
                                       "recoding.alpha.0.h": "0.3", "train.lr": "0.1"})
    path = tmp_path / "c.cfg"
    path.write_text(dump_config(cfg), encoding="utf-8")
    assert load_config(path) == cfg
