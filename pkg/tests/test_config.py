import pytest
from dotenv import dotenv_values
from pydantic import ValidationError

from app.config import Settings
from app.errors import InvalidParameterError
from app.models import CubeFormat, FLAT_KEYS, LbpParams, PipelineConfig, ProjectionKind


def test_defaults_match_module_defaults():
    config = PipelineConfig()
    assert (config.lbp.neighbors, config.lbp.radius, config.lbp.bins) == (8, 1, 16)
    assert config.features.window == 7
    assert (config.ensemble.k, config.ensemble.replicates, config.ensemble.clusters) == (100, 4, 2)
    assert config.ensemble.ensemble_size == 12
    assert config.fusion.output_labels is None


def test_flat_keys_layer_over_defaults():
    config = PipelineConfig.from_flat({"k": 50, "labels": 3, "projection": "achlioptas", "input_format": "raw"})
    assert config.ensemble.k == 50
    assert config.ensemble.clusters == 3
    assert config.ensemble.projection == ProjectionKind.achlioptas
    assert config.input_format == CubeFormat.raw
    assert config.ensemble.replicates == 4


def test_to_flat_feeds_back_into_from_flat():
    config = PipelineConfig.from_flat({"input": "cube.raw", "bins": 8, "max_sweeps": 3, "fusion_seed": 9})
    flat = config.to_flat()
    assert set(flat) == set(FLAT_KEYS)
    assert PipelineConfig.from_flat(flat) == config


def test_none_values_leave_base_untouched():
    base = PipelineConfig.from_flat({"k": 30})
    config = PipelineConfig.from_flat({"k": None, "seed": 4}, base=base)
    assert config.ensemble.k == 30
    assert config.ensemble.seed == 4


def test_unknown_key_rejected():
    with pytest.raises(InvalidParameterError, match="histogram_size"):
        PipelineConfig.from_flat({"histogram_size": 100})


@pytest.mark.parametrize("raw, expected", [("true", True), ("1", True), ("false", False), ("off", False)])
def test_dump_ensemble_strings(raw, expected):
    assert PipelineConfig.from_flat({"dump_ensemble": raw}).dump_ensemble is expected


def test_config_file_values(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk-scale run\nk=40\nlabels=3\nkmeans_tol=1e-5\nwindow=5\n")

    config = PipelineConfig.from_flat(dict(dotenv_values(path)))
    assert config.ensemble.k == 40
    assert config.ensemble.clusters == 3
    assert config.ensemble.tol == 1e-5
    assert config.features.window == 5


def test_invalid_values_rejected():
    with pytest.raises(ValidationError):
        PipelineConfig.from_flat({"window": 6})
    with pytest.raises(ValidationError):
        PipelineConfig.from_flat({"labels": 1})
    with pytest.raises(ValidationError):
        LbpParams(neighbors=4, bins=32)


def test_bins_capped_by_code_count():
    params = LbpParams(neighbors=4, bins=16)
    assert params.code_count == 16
    assert LbpParams(neighbors=16, radius=2).code_count == 65536
    with pytest.raises(ValidationError, match="16"):
        LbpParams(neighbors=4, bins=17)


def test_settings_normalize_log_level():
    assert Settings(_env_file=None, log_level="debug").log_level == "DEBUG"
    with pytest.raises(ValidationError):
        Settings(_env_file=None, log_level="chatty")


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("MAX_WORKERS", "3")
    monkeypatch.setenv("JOBS_DIR", "/tmp/dtseg-jobs")
    settings = Settings(_env_file=None)
    assert settings.max_workers == 3
    assert settings.jobs_dir == "/tmp/dtseg-jobs"


def test_settings_reject_zero_workers():
    with pytest.raises(ValidationError):
        Settings(_env_file=None, max_workers=0)
