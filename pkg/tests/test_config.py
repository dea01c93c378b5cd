import pytest

from charseq.config import PRESETS, RunConfig
from charseq.errors import UsageError


def test_defaults_build():
    cfg = RunConfig.build()
    assert cfg.frontend.variant == "direct"
    assert cfg.noise.rate is None


def test_layering_order(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[training]\npeak_lr = 0.01\nwarmup = 7\n[model]\nmodel_dim = 32\n")
    cfg = RunConfig.build("copy", ini, ["training.warmup=9"])
    assert cfg.training.peak_lr == 0.01
    assert cfg.training.warmup == 9
    assert cfg.model.model_dim == 32
    assert cfg.training.max_steps == PRESETS["copy"]["training"]["max_steps"]


def test_types_are_coerced():
    cfg = RunConfig.build(overrides=["frontend.lee_kernels=1:8,3:16", "training.clip_norm=5",
                                     "model.two_step=yes", "training.betas=0.9,0.998"])
    assert cfg.frontend.lee_kernels == ((1, 8), (3, 16))
    assert cfg.training.clip_norm == 5.0
    assert cfg.model.two_step is True
    assert cfg.training.betas == (0.9, 0.998)


@pytest.mark.parametrize("override", ["training.nope=1", "bogus.key=1", "training.warmup=many", "no_equals",
                                      "model.two_step=perhaps"])
def test_bad_overrides(override):
    with pytest.raises(UsageError):
        RunConfig.build(overrides=[override])


def test_unknown_section_in_file(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[extras]\nx = 1\n")
    with pytest.raises(UsageError, match="extras"):
        RunConfig.build(path=ini)


def test_ini_round_trip(tmp_path):
    cfg = RunConfig.build("reverse", overrides=["noise.rate=0.1"])
    path = tmp_path / "out.ini"
    path.write_text(cfg.to_ini())
    assert RunConfig.build(path=path) == cfg


def test_model_config_picks_decoder():
    gbst = RunConfig.build("gbst").model_config(20, 20)
    assert gbst.encoder.variant == "gbst" and gbst.decoder.variant == "lee" and gbst.two_step
    direct = RunConfig.build("copy").model_config(20, 20)
    assert not direct.two_step and direct.decoder.downsample == 1


def test_noise_rate_is_required():
    with pytest.raises(UsageError):
        RunConfig.build().noise.build()
    assert RunConfig.build(overrides=["noise.rate=0.2"]).noise.build().rate == 0.2


def test_unknown_preset():
    with pytest.raises(UsageError):
        RunConfig.build("huge")
