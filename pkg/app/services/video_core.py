"""
Video cube I/O and the three orthogonal slicing views (xy, xt, yt).

Cube voxels are stored as a (T, H, W) uint8 array, the same (t, y, x) order
as the raw DTC1 file, so frames stay contiguous.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, Optional, Union

import numpy as np
from PIL import Image

from app.errors import CubeFormatError, InvalidParameterError
from app.models import CubeFormat, PlaneFamily

logger = logging.getLogger(__name__)

MIN_SIDE = 9
RAW_MAGIC = b"DTC1"
RAW_HEADER = struct.Struct("<4sIII")  # magic, H, W, T
FRAME_SUFFIXES = {".pgm", ".png"}
MAX_LABELS = 255

PathLike = Union[str, Path]


@dataclass(frozen=True)
class VideoCube:
    voxels: np.ndarray  # (T, H, W) uint8

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise CubeFormatError(f"Cube data must be 3D, got shape {self.voxels.shape}")
        if self.voxels.dtype != np.uint8:
            raise CubeFormatError(f"Cube data must be 8-bit, got {self.voxels.dtype}")
        frames, height, width = self.voxels.shape
        if min(height, width, frames) < MIN_SIDE:
            raise CubeFormatError(
                f"Cube {height}x{width}x{frames} (HxWxT) is below the {MIN_SIDE}x{MIN_SIDE}x{MIN_SIDE} minimum"
            )
        self.voxels.setflags(write=False)

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]

    @property
    def frames(self) -> int:
        return self.voxels.shape[0]

    def at(self, y: int, x: int, t: int) -> int:
        return int(self.voxels[t, y, x])


@dataclass(frozen=True)
class Slice:
    plane: PlaneFamily
    fixed_index: int
    data: np.ndarray  # (rows, cols)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SegmentationMap:
    labels: np.ndarray  # (H, W) integer ids in [0, C), every id present

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise InvalidParameterError(f"Label map must be 2D, got shape {self.labels.shape}")
        if self.labels.size == 0:
            raise InvalidParameterError("Label map is empty")
        present = np.unique(self.labels)
        if present[0] != 0 or present[-1] != len(present) - 1:
            raise InvalidParameterError("Label ids must be compact: every id in [0, C) must occur")
        self.labels.setflags(write=False)

    @classmethod
    def compacted(cls, labels: np.ndarray, order: str = "size") -> "SegmentationMap":
        """
        Relabel arbitrary ids into [0, C).

        order="size" numbers segments by decreasing size (ties by lower original id);
        order="id" keeps the original id order.
        """
        labels = np.asarray(labels)
        uniq, inverse, counts = np.unique(labels.ravel(), return_inverse=True, return_counts=True)
        if order == "size":
            ranking = np.lexsort((uniq, -counts))
        elif order == "id":
            ranking = np.arange(len(uniq))
        else:
            raise InvalidParameterError(f"Unknown label order: {order}")
        new_ids = np.empty(len(uniq), dtype=np.int32)
        new_ids[ranking] = np.arange(len(uniq), dtype=np.int32)
        return cls(new_ids[inverse].reshape(labels.shape))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self):
        return self.labels.shape

    @property
    def n_labels(self) -> int:
        return int(self.labels.max()) + 1

    def histogram(self) -> Dict[int, int]:
        counts = np.bincount(self.labels.ravel(), minlength=self.n_labels)
        return {label: int(count) for label, count in enumerate(counts)}


def _infer_format(path: Path) -> CubeFormat:
    return CubeFormat.frames if path.is_dir() else CubeFormat.raw


def load_cube(path: PathLike, format: Optional[CubeFormat] = None) -> VideoCube:
    """Load a cube from a frame directory or a raw DTC1 file."""
    path = Path(path)
    if not path.exists():
        raise CubeFormatError(f"Input not found: {path}")

    fmt = format or _infer_format(path)
    if fmt == CubeFormat.frames:
        cube = _load_frame_directory(path)
    else:
        cube = _load_raw(path)

    logger.info(f"Loaded cube {path} ({fmt.value}): H={cube.height} W={cube.width} T={cube.frames}")
    return cube


def _read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as image:
            if image.mode != "L":
                raise CubeFormatError(f"{path.name}: only 8-bit grayscale is supported, got mode {image.mode}")
            return np.array(image, dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise CubeFormatError(f"{path.name}: unreadable image ({e})") from e


def _load_frame_directory(path: Path) -> VideoCube:
    if not path.is_dir():
        raise CubeFormatError(f"Frame directory expected: {path}")
    frame_paths = sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in FRAME_SUFFIXES)
    if not frame_paths:
        raise CubeFormatError(f"No PGM/PNG frames found in {path}")

    frames = []
    for frame_path in frame_paths:
        frame = _read_gray(frame_path)
        if frames and frame.shape != frames[0].shape:
            raise CubeFormatError(
                f"Mixed frame dimensions: {frame_path.name} is {frame.shape}, expected {frames[0].shape}"
            )
        frames.append(frame)
    return VideoCube(np.stack(frames, axis=0))


def _load_raw(path: Path) -> VideoCube:
    payload = path.read_bytes()
    if len(payload) < RAW_HEADER.size:
        raise CubeFormatError(f"{path.name}: truncated header ({len(payload)} bytes)")
    magic, height, width, frames = RAW_HEADER.unpack_from(payload)
    if magic != RAW_MAGIC:
        raise CubeFormatError(f"{path.name}: bad magic {magic!r}, expected {RAW_MAGIC!r}")

    expected = height * width * frames
    body = payload[RAW_HEADER.size:]
    if len(body) != expected:
        raise CubeFormatError(
            f"{path.name}: truncated or oversized body, expected {expected} bytes for "
            f"{height}x{width}x{frames}, got {len(body)}"
        )
    voxels = np.frombuffer(body, dtype=np.uint8).reshape(frames, height, width).copy()
    return VideoCube(voxels)


def write_cube(cube: VideoCube, path: PathLike) -> None:
    """Write a cube in the raw DTC1 format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(RAW_HEADER.pack(RAW_MAGIC, cube.height, cube.width, cube.frames))
        f.write(np.ascontiguousarray(cube.voxels).tobytes())


def plane_stack(cube: VideoCube, plane: PlaneFamily) -> np.ndarray:
    """All slices of a family as one (n_slices, rows, cols) view."""
    if plane == PlaneFamily.xy:
        return cube.voxels                       # [t, y, x]
    if plane == PlaneFamily.xt:
        return cube.voxels.transpose(1, 0, 2)    # [y, t, x]
    return cube.voxels.transpose(2, 0, 1)        # [x, t, y]


def slice_count(cube: VideoCube, plane: PlaneFamily) -> int:
    return plane_stack(cube, plane).shape[0]


def slice_cube(cube: VideoCube, plane: PlaneFamily, index: int) -> Slice:
    count = slice_count(cube, plane)
    if not 0 <= index < count:
        raise InvalidParameterError(f"{plane.value} slice index {index} out of range [0, {count})")
    return Slice(plane=plane, fixed_index=index, data=plane_stack(cube, plane)[index])


def iter_slices(cube: VideoCube, plane: PlaneFamily, stride: int = 1) -> Iterator[Slice]:
    if stride < 1:
        raise InvalidParameterError(f"stride must be >= 1, got {stride}")
    for index in range(0, slice_count(cube, plane), stride):
        yield slice_cube(cube, plane, index)


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def write_labelmap(seg: SegmentationMap, path: PathLike) -> None:
    """Write labels as an 8-bit P5 PGM plus a JSON sidecar with dims and histogram."""
    if seg.n_labels > MAX_LABELS:
        raise InvalidParameterError(f"Label map has {seg.n_labels} labels; PGM output supports at most {MAX_LABELS}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(seg.labels.astype(np.uint8)).save(path, format="PPM")

    sidecar = {
        "H": seg.height,
        "W": seg.width,
        "C": seg.n_labels,
        "histogram": {str(label): count for label, count in seg.histogram().items()},
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def read_labelmap(path: PathLike) -> SegmentationMap:
    """Read a label PGM/PNG; ids are compacted keeping their order."""
    path = Path(path)
    if not path.exists():
        raise CubeFormatError(f"Label map not found: {path}")
    return SegmentationMap.compacted(_read_gray(path), order="id")
