import pytest

from mvsr.config import PipelineConfig, load_config, parse_config
from mvsr.errors import ConfigError


def test_text_round_trip():
    cfg = PipelineConfig(seed=7, refine_steps_m=(0.04, 0.02), fusion_average=True, train_dtype="float64")
    assert parse_config(cfg.to_text()) == cfg


def test_every_field_has_a_key():
    text = PipelineConfig().to_text()
    assert len(text.splitlines()) == len(PipelineConfig.keys())
    assert "refine.steps_m = 0.05, 0.05, 0.025" in text
    assert "seed = 0" in text


def test_partial_file_overrides_defaults(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# desk run\nseed = 3\nfusion.rel_tol = 0.01  # tight\n\ndata.train_seeds = 1, 2\n")
    cfg = load_config(p)
    assert (cfg.seed, cfg.fusion_rel_tol, cfg.data_train_seeds) == (3, 0.01, (1, 2))
    assert cfg.sweep_count == 96


@pytest.mark.parametrize("text", [
    "colour = red",
    "refine_steps_m = 0.1",  # field name instead of key
    "seed 3",
    "seed = three",
    "fusion.average = maybe",
])
def test_rejects_bad_lines(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize("text", [
    "refine.direction = sideways",
    "train.mode = everything",
    "sweep.step = 0",
    "train.slice = 30",
    "refine.steps_m = 0.05, -0.01",
])
def test_rejects_invalid_values(text):
    with pytest.raises(ConfigError):
        parse_config(text)
