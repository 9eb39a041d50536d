import pytest

from dgtts.config import ConfigError, ModelConfig, TrainConfig, build_config, parse_config_text


def test_parse_config_text():
    vals = parse_config_text("# comment\nbatch-size = 4\n\ng_lr=0.5  # trailing\n")
    assert vals == {"batch_size": ("4", 2), "g_lr": ("0.5", 4)}
    with pytest.raises(ConfigError, match=":2:"):
        parse_config_text("a = 1\nnot a pair\n", "f.cfg")


def test_precedence_defaults_file_flags():
    file_values = parse_config_text("batch_size = 4\nsteps = 7\n")
    cfg = build_config(TrainConfig, file_values, {"steps": 9, "seed": None})
    assert cfg.batch_size == 4  # file beats default
    assert cfg.steps == 9  # flag beats file
    assert cfg.seed == TrainConfig().seed  # unset flag keeps default


def test_bad_value_reports_line():
    with pytest.raises(ConfigError, match="f.cfg:2: bad value for steps"):
        build_config(TrainConfig, parse_config_text("seed = 1\nsteps = many\n"), {}, "f.cfg")


def test_meta_round_trip():
    m = ModelConfig.paper(n_speakers=3)
    assert ModelConfig.from_meta(m.to_meta()) == m
    t = TrainConfig(g_lr=3e-4, stage1_objective="recon")
    assert TrainConfig.from_meta(t.to_meta()) == t


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(hidden=33, n_heads=2)
    with pytest.raises(ConfigError):
        ModelConfig(disc_channels=(1, 2))
    with pytest.raises(ConfigError):
        ModelConfig.from_preset("huge")
    p = ModelConfig.paper()
    assert (p.hidden, p.n_fft_blocks, p.n_wavenet_blocks, p.mel_bins) == (256, 4, 20, 80)
