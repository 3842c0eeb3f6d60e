"""
Synthetic dynamic-texture fixtures: regions filled with moving sinusoidal
gratings whose mean and variance are matched, so only orientation and
motion tell them apart.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Union

import numpy as np

from app.models import SynthLayout, SynthSpec
from app.services.video_core import SegmentationMap, VideoCube, write_cube, write_labelmap

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthResult:
    cube: VideoCube
    ground_truth: SegmentationMap
    degenerate: bool = False


def region_mask(spec: SynthSpec) -> np.ndarray:
    """(H, W) region ids for the layout."""
    y, x = np.mgrid[0:spec.height, 0:spec.width]
    if spec.layout == SynthLayout.vertical_split:
        return (x >= spec.width // 2).astype(np.int32)
    if spec.layout == SynthLayout.horizontal_thirds:
        return np.minimum(y * 3 // spec.height, 2).astype(np.int32)
    return ((y >= spec.height // 2) * 2 + (x >= spec.width // 2)).astype(np.int32)


def is_degenerate(spec: SynthSpec) -> bool:
    textures = spec.region_textures()
    return spec.noise_sigma == 0 and all(texture == textures[0] for texture in textures)


def generate_synth(spec: SynthSpec) -> SynthResult:
    regions = region_mask(spec)
    t, y, x = np.mgrid[0:spec.frames, 0:spec.height, 0:spec.width].astype(np.float64)
    rng = np.random.default_rng(spec.seed)

    signal = np.zeros((spec.frames, spec.height, spec.width))
    for region, texture in enumerate(spec.region_textures()):
        theta = math.radians(texture.orientation)
        phase = 2.0 * math.pi * texture.frequency * (
            x * math.cos(theta) + y * math.sin(theta) - texture.speed * t
        )
        # random phase offset per region keeps fixtures with equal textures from aligning
        wave = np.sin(phase + rng.uniform(0.0, 2.0 * math.pi))
        inside = np.broadcast_to(regions == region, wave.shape)
        values = wave[inside]
        spread = values.std()
        standardized = (values - values.mean()) / spread if spread > 0 else np.zeros_like(values)
        signal[inside] = spec.mean + spec.std * standardized

    if spec.noise_sigma > 0:
        signal += rng.normal(0.0, spec.noise_sigma, size=signal.shape)
    voxels = np.clip(np.rint(signal), 0, 255).astype(np.uint8)

    degenerate = is_degenerate(spec)
    if degenerate:
        logger.warning("Synthetic fixture is degenerate: identical textures and zero noise, regions are unsegmentable")

    ground_truth = SegmentationMap.compacted(regions, order="id")
    return SynthResult(cube=VideoCube(voxels), ground_truth=ground_truth, degenerate=degenerate)


def region_moments(result: SynthResult) -> Dict[int, Dict[str, float]]:
    """Per-region mean and standard deviation of the generated intensities."""
    moments = {}
    labels = np.broadcast_to(result.ground_truth.labels, result.cube.voxels.shape)
    for region in range(result.ground_truth.n_labels):
        values = result.cube.voxels[labels == region].astype(np.float64)
        moments[region] = {"mean": float(values.mean()), "std": float(values.std())}
    return moments


def write_synth(result: SynthResult, spec: SynthSpec, output_dir: Union[str, Path]) -> Dict[str, str]:
    """cube.raw + ground_truth.pgm (+ sidecar) + synth.json under output_dir."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    cube_path = output_dir / "cube.raw"
    gt_path = output_dir / "ground_truth.pgm"
    spec_path = output_dir / "synth.json"

    write_cube(result.cube, cube_path)
    write_labelmap(result.ground_truth, gt_path)
    with open(spec_path, "w", encoding="utf-8") as f:
        json.dump(
            {"spec": spec.model_dump(mode="json"), "degenerate": result.degenerate, "moments": region_moments(result)},
            f,
            indent=2,
            sort_keys=True,
        )
    logger.info(f"Wrote synthetic fixture to {output_dir} ({spec.layout.value}, seed={spec.seed})")
    return {"cube": str(cube_path), "ground_truth": str(gt_path), "spec": str(spec_path)}
