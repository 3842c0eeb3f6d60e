"""
Pipeline orchestration: load -> features -> ensemble -> fusion -> outputs,
plus batch evaluation and the k-sweep experiment.
"""

import csv
import json
import logging
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.config import settings
from app.errors import CubeFormatError, DTSegError, StageError
from app.models import EvaluationRow, MetricsReport, PipelineConfig, StageTiming
from app.services.ensemble import EnsembleMember, build_ensemble, derive_seed, dump_members
from app.services.features import extract_features
from app.services.fusion import FusionResult, icm_fuse, member_energies
from app.services.metrics import evaluate
from app.services.video_core import (
    SegmentationMap,
    VideoCube,
    load_cube,
    read_labelmap,
    write_labelmap,
)

logger = logging.getLogger(__name__)

LABELMAP_SUFFIXES = {".pgm", ".png"}
SWEEP_COLUMNS = ["k", "avg_pr", "seconds"]

PathLike = Union[str, Path]


@dataclass
class SegmentationRun:
    consensus: SegmentationMap
    members: List[EnsembleMember]
    fusion: FusionResult
    manifest: Dict[str, Any]
    timings: List[StageTiming] = field(default_factory=list)
    total_seconds: float = 0.0
    report: Optional[MetricsReport] = None
    outputs: Dict[str, str] = field(default_factory=dict)


@dataclass
class SweepRow:
    k: int
    avg_pr: float
    seconds: float


@contextmanager
def _stage(name: str, timings: List[StageTiming], cancel: Optional[threading.Event] = None) -> Iterator[None]:
    """Time a stage and tag any failure with its name; a set `cancel` stops the run before the stage."""
    if cancel is not None and cancel.is_set():
        raise StageError(name, message="run cancelled")
    logger.info(f"▶ Stage {name}")
    started = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"Stage {name} failed: {str(e)}")
        raise StageError(name, e) from e
    finally:
        timings.append(StageTiming(stage=name, seconds=time.perf_counter() - started))
    logger.info(f"✅ Stage {name} done in {timings[-1].seconds:.2f}s")


def fusion_seed(config: PipelineConfig) -> int:
    if config.fusion.seed is not None:
        return config.fusion.seed
    return derive_seed(config.ensemble.seed, "fusion")


def _write_json(path: Path, payload: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def run_segmentation(
    config: PipelineConfig,
    cube: Optional[VideoCube] = None,
    write_outputs: bool = True,
    cancel: Optional[threading.Event] = None,
) -> SegmentationRun:
    """Run the full pipeline; `cube` skips the load stage when given."""
    timings: List[StageTiming] = []
    workers = config.workers or settings.max_workers
    started = time.perf_counter()

    with _stage("load", timings, cancel):
        if cube is None:
            if not config.input:
                raise CubeFormatError("No input given")
            cube = load_cube(config.input, config.input_format)
        ground_truth = read_labelmap(config.ground_truth) if config.ground_truth else None

    with _stage("features", timings, cancel):
        matrices = extract_features(cube, config.lbp, config.features)

    with _stage("ensemble", timings, cancel):
        members = build_ensemble(matrices, config.ensemble, workers=workers)
        ensemble = [member.segmentation for member in members]
        energies = member_energies(ensemble)

    seed = fusion_seed(config)
    with _stage("fusion", timings, cancel):
        fusion = icm_fuse(
            ensemble,
            n_labels=config.fusion.output_labels,
            max_sweeps=config.fusion.max_sweeps,
            seed=seed,
        )

    report = None
    if ground_truth is not None:
        with _stage("evaluate", timings, cancel):
            report = evaluate(fusion.segmentation, ground_truth)
        logger.info(f"PR={report.pr:.4f} GCE={report.gce:.4f} VoI={report.voi:.4f}")

    manifest = {
        "config": config.to_flat(),
        "cube": {"H": cube.height, "W": cube.width, "T": cube.frames},
        "seeds": {
            "master": config.ensemble.seed,
            "fusion": seed,
            "members": {member.name: member.seed for member in members},
        },
        "ensemble": [
            {
                "name": member.name,
                "labels": member.segmentation.n_labels,
                "inertia": member.inertia,
                "iterations": member.iterations,
                "energy": energy,
            }
            for member, energy in zip(members, energies)
        ],
        "fusion": {
            "init_member": members[fusion.init_index].name,
            "labels": fusion.n_labels,
            "initial_energy": fusion.initial_energy,
            "energy": fusion.energy,
            "sweeps": fusion.sweeps,
            "moves": fusion.moves,
            "converged": fusion.converged,
        },
        "metrics": report.model_dump() if report else None,
    }

    run = SegmentationRun(
        consensus=fusion.segmentation,
        members=members,
        fusion=fusion,
        manifest=manifest,
        timings=timings,
        report=report,
    )

    if write_outputs:
        with _stage("write", timings, cancel):
            run.outputs = _write_run(run, config)

    run.total_seconds = time.perf_counter() - started
    if write_outputs:
        _write_json(Path(config.output_dir) / "timings.json", {
            "stages": [timing.model_dump() for timing in timings],
            "total_seconds": run.total_seconds,
        })
    return run


def _write_run(run: SegmentationRun, config: PipelineConfig) -> Dict[str, str]:
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    outputs = {
        "consensus": str(output_dir / "consensus.pgm"),
        "energy_trace": str(output_dir / "energy_trace.json"),
        "manifest": str(output_dir / "manifest.json"),
        "timings": str(output_dir / "timings.json"),
    }
    write_labelmap(run.consensus, outputs["consensus"])
    _write_json(Path(outputs["energy_trace"]), run.fusion.energy_trace)
    if config.dump_ensemble:
        dump_members(run.members, output_dir / "members")
        outputs["members"] = str(output_dir / "members")
    run.manifest["outputs"] = {key: Path(value).name for key, value in sorted(outputs.items())}
    _write_json(Path(outputs["manifest"]), run.manifest)
    return outputs


def _labelmaps(directory: Path) -> Dict[str, Path]:
    return {
        path.stem: path
        for path in sorted(directory.iterdir())
        if path.is_file() and path.suffix.lower() in LABELMAP_SUFFIXES
    }


def _evaluate_pair(name: str, pred_path: Path, gt_path: Path) -> EvaluationRow:
    try:
        report = evaluate(read_labelmap(pred_path), read_labelmap(gt_path))
        return EvaluationRow(name=name, report=report)
    except DTSegError as e:
        logger.warning(f"Evaluation of {name} failed: {str(e)}")
        return EvaluationRow(name=name, error=str(e))


def average_row(rows: Sequence[EvaluationRow]) -> Optional[EvaluationRow]:
    reports = [row.report for row in rows if row.report is not None]
    if not reports:
        return None
    mean = {key: float(np.mean([getattr(report, key) for report in reports])) for key in ("pr", "gce", "voi", "pri", "f_measure")}
    return EvaluationRow(
        name="average",
        report=MetricsReport(n=int(round(np.mean([report.n for report in reports]))), **mean),
    )


def evaluate_paths(pred: PathLike, gt: PathLike) -> List[EvaluationRow]:
    """
    File mode: one row. Directory mode: one row per prediction matched to a
    ground truth of the same stem, then an "average" row over the successes.
    """
    pred, gt = Path(pred), Path(gt)
    if pred.is_file():
        gt_path = gt if gt.is_file() else gt / pred.name
        return [_evaluate_pair(pred.stem, pred, gt_path)]

    if not pred.is_dir():
        raise CubeFormatError(f"Prediction path not found: {pred}")
    if not gt.is_dir():
        raise CubeFormatError(f"Directory mode needs a ground-truth directory, got {gt}")

    truths = _labelmaps(gt)
    rows = []
    for name, pred_path in _labelmaps(pred).items():
        if name not in truths:
            rows.append(EvaluationRow(name=name, error=f"No ground truth named {name}"))
            continue
        rows.append(_evaluate_pair(name, pred_path, truths[name]))

    average = average_row(rows)
    if average is not None:
        rows.append(average)
    return rows


def sweep_k(
    config: PipelineConfig,
    k_values: Sequence[int],
    inputs: Sequence[Tuple[PathLike, PathLike]],
    cancel: Optional[threading.Event] = None,
) -> List[SweepRow]:
    """For each k, run the pipeline over every (cube, ground truth) input and average PR."""
    if not k_values:
        raise StageError("sweep", message="k list is empty")
    if not inputs:
        raise StageError("sweep", message="no inputs to sweep over")

    cubes = [(load_cube(cube_path), read_labelmap(gt_path)) for cube_path, gt_path in inputs]
    rows = []
    for k in k_values:
        run_config = config.model_copy(update={"ensemble": config.ensemble.model_copy(update={"k": k})})
        scores = []
        started = time.perf_counter()
        for cube, truth in cubes:
            run = run_segmentation(run_config, cube=cube, write_outputs=False, cancel=cancel)
            scores.append(evaluate(run.consensus, truth).pr)
        row = SweepRow(k=k, avg_pr=float(np.mean(scores)), seconds=time.perf_counter() - started)
        logger.info(f"k={k}: avg PR={row.avg_pr:.4f} in {row.seconds:.2f}s")
        rows.append(row)
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([row.k, f"{row.avg_pr:.6f}", f"{row.seconds:.4f}"])
