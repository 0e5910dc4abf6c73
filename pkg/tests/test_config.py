import textwrap

import pytest

from jomold.config import ExperimentConfig, OptimConfig, load_config, parse_mode
from jomold.errors import ConfigError


def write(tmp_path, body):
    path = tmp_path / "exp.toml"
    path.write_text(textwrap.dedent(body).lstrip())
    return path


def test_defaults_validate():
    cfg = ExperimentConfig()
    cfg.validate()
    assert cfg.seeds == (1, 2, 3, 4, 5)
    assert cfg.denoise.theta_audio == 0.6 and cfg.denoise.theta_visual == 1.8
    assert cfg.denoise.warmup_epochs == 0.9
    assert (cfg.optim.decay, cfg.optim.step_epochs, cfg.optim.epochs) == (0.25, 6, 25)


def test_lr_schedule():
    o = OptimConfig(lr=1.0)
    assert [o.lr_at(e) for e in (0, 5, 6, 11, 12, 24)] == [1.0, 1.0, 0.25, 0.25, 0.0625, 0.25 ** 4]


def test_load_full_config(tmp_path):
    path = write(tmp_path, """
        seeds = [7, 8]
        train_fraction = 0.75

        [generator]
        num_videos = 100
        p_both = [0.1, 0.2, 0.1]
        num_categories = 3
        event_length = [3, 5]

        [optim]
        lr = 0.05
        batch_size = 16

        [denoise]
        mode = "constant_ratio(0.3)"
        warmup_epochs = 0.0
    """)
    cfg = load_config(path)
    assert cfg.seeds == (7, 8)
    assert cfg.generator.p_both == (0.1, 0.2, 0.1)
    assert cfg.generator.event_length == (3, 5)
    assert cfg.optim.batch_size == 16 and cfg.optim.lr == 0.05
    assert parse_mode(cfg.denoise.mode) == ("constant_ratio", 0.3)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("body,line,fragment", [
    ("[optim]\nlr = 0.1\nbatch_size = 0\n", 3, "batch_size"),
    ("seeds = [1]\n\n[denoise]\nmode = \"cotta\"\n", 4, "unknown denoise mode"),
    ("[denoise]\nmode = \"constant_ratio(1.5)\"\n", 2, "[0, 1]"),
    ("[generator]\nnum_videos = 10\nevent_length = [0, 4]\n", 3, "event_length"),
    ("[generator]\nnoise_sigma = -1.0\n", 2, "noise_sigma"),
    ("[optim]\nlr = 0.1\nmomentum = 0.9\n", 3, "momentum"),
    ("seeds = [1]\n[bogus]\nx = 1\n", 2, "bogus"),
    ("train_fraction = 1.0\n", 1, "train_fraction"),
])
def test_errors_name_the_line(tmp_path, body, line, fragment):
    path = write(tmp_path, body)
    with pytest.raises(ConfigError) as info:
        load_config(path)
    msg = str(info.value)
    assert msg.startswith(f"{path}:{line}:"), msg
    assert fragment in msg


def test_syntax_error_reports_position(tmp_path):
    path = write(tmp_path, "seeds = [1,\n[optim\n")
    with pytest.raises(ConfigError, match=r"line \d+"):
        load_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.toml")


def test_probability_sum_error(tmp_path):
    path = write(tmp_path, "[generator]\np_both = 0.7\np_audio_only = 0.4\n")
    with pytest.raises(ConfigError, match="sum above 1"):
        load_config(path)


@pytest.mark.parametrize("mode", ["none", "jomold", "inmold", "audio_only", "visual_only"])
def test_parse_named_modes(mode):
    assert parse_mode(mode) == (mode, None)


@pytest.mark.parametrize("mode", ["constant_ratio", "constant_ratio()", "JoMoLD", ""])
def test_parse_rejects(mode):
    with pytest.raises(ConfigError):
        parse_mode(mode)


def test_replace_sections():
    cfg = ExperimentConfig().replace(denoise={"mode": "none"}, seeds=(3,))
    assert cfg.denoise.mode == "none" and cfg.seeds == (3,)
    assert cfg.denoise.theta_visual == 1.8
