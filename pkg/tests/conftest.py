import pytest
from unittest.mock import patch
import os
import sys

import numpy as np

# Add app directory to Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from app.config import settings
from app.models import PipelineConfig, SynthSpec
from app.services.synth import generate_synth, write_synth
from app.services.video_core import VideoCube


@pytest.fixture(autouse=True)
def mock_settings(tmp_path):
    """Point settings at per-test directories for all tests."""
    with patch.object(settings, "jobs_dir", str(tmp_path / "jobs")), \
         patch.object(settings, "output_dir", str(tmp_path / "runs")), \
         patch.object(settings, "environment", "test"), \
         patch.object(settings, "log_level", "INFO"), \
         patch.object(settings, "api_key", None), \
         patch.object(settings, "job_timeout_seconds", 60), \
         patch.object(settings, "max_concurrent_jobs", 1), \
         patch.object(settings, "max_workers", 1):
        yield settings


@pytest.fixture
def rng():
    """Seeded generator so random fixtures are reproducible."""
    return np.random.default_rng(20240611)


@pytest.fixture
def small_cube(rng):
    """12x12x12 random cube, the smallest sizes comfortably above the minimum."""
    return VideoCube(rng.integers(0, 256, size=(12, 12, 12), dtype=np.uint8))


@pytest.fixture
def synth_spec():
    return SynthSpec(height=32, width=32, frames=12, seed=3)


@pytest.fixture
def synth_fixture(tmp_path, synth_spec):
    """Two-region fixture written to disk: (result, {"cube", "ground_truth", "spec"})."""
    result = generate_synth(synth_spec)
    files = write_synth(result, synth_spec, tmp_path / "synth")
    return result, files


@pytest.fixture
def fast_config(tmp_path, synth_fixture):
    """Small pipeline config over the synthetic fixture."""
    _, files = synth_fixture
    return PipelineConfig.from_flat({
        "input": files["cube"],
        "ground_truth": files["ground_truth"],
        "output_dir": str(tmp_path / "run"),
        "k": 20,
        "replicates": 2,
        "labels": 2,
        "max_sweeps": 5,
        "seed": 7,
    })
