#!/usr/bin/env python3
"""
Command-line entry point for the segmentation pipeline.

Subcommands:
- segment: load -> LBP features -> projected k-means ensemble -> ICM fusion -> outputs
- evaluate: PR / GCE / VoI / PRI / F-measure of predictions against ground truth
- gen-synth: seeded synthetic moving-grating cubes with ground truth
- sweep-k: average PR and wall time as a function of the projection size k
- dump-features: write the per-family feature matrices (DTF1)
- serve: start the batch job API

Config precedence: module defaults < --config FILE (flat key=value) < flags.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import dotenv_values

from app.config import settings
from app.errors import DTSegError, InvalidParameterError, StageError
from app.models import CubeFormat, PipelineConfig, ProjectionKind, RegionTexture, SynthLayout, SynthSpec
from app.services.features import extract_features, write_features
from app.services.pipeline import evaluate_paths, run_segmentation, sweep_k, write_sweep_csv
from app.services.synth import generate_synth, write_synth
from app.services.video_core import load_cube

logger = logging.getLogger(__name__)

# flag dest -> flat config key
FLAG_KEYS = {
    "input": "input",
    "input_format": "input_format",
    "ground_truth": "ground_truth",
    "output_dir": "output_dir",
    "dump_ensemble": "dump_ensemble",
    "workers": "workers",
    "lbp_p": "lbp_p",
    "lbp_r": "lbp_r",
    "bins": "bins",
    "window": "window",
    "stride_t": "stride_t",
    "k": "k",
    "replicates": "replicates",
    "labels": "labels",
    "projection": "projection",
    "seed": "seed",
    "output_labels": "output_labels",
    "max_sweeps": "max_sweeps",
    "fusion_seed": "fusion_seed",
}


def texture_arg(value: str) -> RegionTexture:
    """FREQ:ORIENT:SPEED, e.g. 0.125:90:0.5 (cycles/pixel, degrees, pixels/frame)."""
    parts = value.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected FREQ:ORIENT:SPEED, got {value!r}")
    try:
        frequency, orientation, speed = (float(part) for part in parts)
        return RegionTexture(frequency=frequency, orientation=orientation, speed=speed)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid texture {value!r}: {e}") from e


def _pipeline_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="Flat key=value config file")
    p.add_argument("--input", help="Frame directory or raw DTC1 cube")
    p.add_argument("--input-format", choices=[f.value for f in CubeFormat])
    p.add_argument("--ground-truth", help="Ground-truth label map (PGM/PNG) to score the consensus against")
    p.add_argument("--output-dir")
    p.add_argument("--dump-ensemble", action="store_true", default=None, help="Also write every ensemble member map")
    p.add_argument("--workers", type=int, help="Concurrent ensemble jobs")
    p.add_argument("--lbp-p", type=int, help="LBP neighbors P")
    p.add_argument("--lbp-r", type=int, help="LBP radius R")
    p.add_argument("--bins", type=int, help="Requantized LBP bins Q")
    p.add_argument("--window", type=int, help="Histogram window Nw (odd)")
    p.add_argument("--stride-t", type=int, help="Temporal stride of retained slices")
    p.add_argument("--k", type=int, help="Random projection dimension")
    p.add_argument("--replicates", type=int, help="Projections per plane family K")
    p.add_argument("--labels", type=int, help="k-means clusters C per ensemble member; the consensus label count is --output-labels")
    p.add_argument("--projection", choices=[kind.value for kind in ProjectionKind])
    p.add_argument("--seed", type=int, help="Master seed")
    p.add_argument("--output-labels", type=int, help="Consensus label count C_out used by the ICM fusion (default: modal member label count)")
    p.add_argument("--max-sweeps", type=int)
    p.add_argument("--fusion-seed", type=int, help="ICM visiting-order seed (default: derived from --seed)")
    return p


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    p = argparse.ArgumentParser(prog="dtseg", description="Unsupervised dynamic texture segmentation")
    p.add_argument("--log-level", default=None, help="Overrides LOG_LEVEL")
    sub = p.add_subparsers(dest="command", required=True)
    flags = _pipeline_flags()

    sub.add_parser("segment", parents=[flags], help="Segment one video cube")

    ev = sub.add_parser("evaluate", help="Score label maps against ground truth")
    ev.add_argument("--pred", required=True, help="Prediction map, or a directory of maps")
    ev.add_argument("--gt", required=True, help="Ground-truth map, or a directory matched by file stem")
    ev.add_argument("--output", help="Write the JSON report here instead of stdout")

    gs = sub.add_parser("gen-synth", help="Generate a synthetic moving-texture fixture")
    gs.add_argument("--output-dir", required=True)
    gs.add_argument("--layout", choices=[layout.value for layout in SynthLayout], default=SynthLayout.vertical_split.value)
    gs.add_argument("--height", type=int, default=64)
    gs.add_argument("--width", type=int, default=64)
    gs.add_argument("--frames", type=int, default=16)
    gs.add_argument("--noise", type=float, default=2.0, help="Gaussian noise sigma in gray levels")
    gs.add_argument("--textures", type=texture_arg, nargs="+", metavar="FREQ:ORIENT:SPEED",
                    help="One texture per region, in layout order (default: built-in set)")
    gs.add_argument("--seed", type=int, default=0)

    sw = sub.add_parser("sweep-k", parents=[flags], help="Average PR and wall time per projection size k")
    sw.add_argument("--k-values", type=int, nargs="+", required=True)
    sw.add_argument("--pair", nargs=2, action="append", metavar=("CUBE", "GT"),
                    help="Cube and ground truth; repeatable (default: --input/--ground-truth)")
    sw.add_argument("--csv", help="CSV path (default: <output-dir>/sweep_k.csv)")

    df = sub.add_parser("dump-features", parents=[flags], help="Write per-family feature matrices")
    df.set_defaults(dump_features=True)

    sv = sub.add_parser("serve", help="Start the batch job API")
    sv.add_argument("--host", default="0.0.0.0")
    sv.add_argument("--port", type=int, default=int(os.getenv("PORT", "8000")))
    return p.parse_args(argv)


def load_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, then the config file, then any flag that was given."""
    base = None
    if args.config:
        if not Path(args.config).is_file():
            raise InvalidParameterError(f"Config file not found: {args.config}")
        base = PipelineConfig.from_flat(dict(dotenv_values(args.config)))

    overrides: Dict[str, Any] = {key: getattr(args, dest, None) for dest, key in FLAG_KEYS.items()}
    return PipelineConfig.from_flat(overrides, base=base)


def cmd_segment(args: argparse.Namespace) -> int:
    config = load_config(args)
    run = run_segmentation(config)
    logger.info(
        f"Consensus with {run.consensus.n_labels} labels, energy {run.fusion.energy:.6f} "
        f"after {run.fusion.sweeps} sweeps -> {config.output_dir}"
    )
    if run.report:
        print(json.dumps(run.report.model_dump(), indent=2))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    rows = evaluate_paths(args.pred, args.gt)
    payload = json.dumps([row.model_dump() for row in rows], indent=2)
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        with open(args.output, "w", encoding="utf-8") as f:
            f.write(payload + "\n")
    else:
        print(payload)

    failed = [row.name for row in rows if row.error]
    if failed:
        logger.error(f"❌ Evaluation failed for: {', '.join(failed)}")
        return 1
    return 0


def cmd_gen_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        height=args.height,
        width=args.width,
        frames=args.frames,
        layout=args.layout,
        textures=args.textures,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    result = generate_synth(spec)
    files = write_synth(result, spec, args.output_dir)
    logger.info(f"Wrote {spec.layout.value} fixture: {', '.join(sorted(files.values()))}")
    return 0


def cmd_sweep_k(args: argparse.Namespace) -> int:
    config = load_config(args)
    pairs: List = args.pair or []
    if not pairs and config.input and config.ground_truth:
        pairs = [(config.input, config.ground_truth)]
    rows = sweep_k(config, args.k_values, pairs)
    csv_path = args.csv or str(Path(config.output_dir) / "sweep_k.csv")
    write_sweep_csv(rows, csv_path)
    logger.info(f"Wrote {len(rows)} sweep rows to {csv_path}")
    return 0


def cmd_dump_features(args: argparse.Namespace) -> int:
    config = load_config(args)
    if not config.input:
        raise InvalidParameterError("--input is required")
    cube = load_cube(config.input, config.input_format)
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    for plane, matrix in extract_features(cube, config.lbp, config.features).items():
        path = output_dir / f"features_{plane.value}.dtf"
        write_features(matrix, path)
        logger.info(f"{plane.value}: {matrix.rows} x {matrix.dim} -> {path}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn
    uvicorn.run("app.main:app", host=args.host, port=args.port)
    return 0


COMMANDS = {
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "gen-synth": cmd_gen_synth,
    "sweep-k": cmd_sweep_k,
    "dump-features": cmd_dump_features,
    "serve": cmd_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    level = (args.log_level or settings.log_level).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )

    try:
        return COMMANDS[args.command](args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DTSegError as e:
        print(f"error: [{args.command}] {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: [{args.command}] {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        # pydantic validation of flag/config values
        print(f"error: [config] {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
