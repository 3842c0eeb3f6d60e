"""
LBP texture codes per slice and the per-pixel concatenated local-histogram features.
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Tuple, Union

import numpy as np

from app.errors import CubeFormatError, InvalidParameterError
from app.models import FeatureParams, LbpParams, PLANE_FAMILIES, PlaneFamily
from app.services.video_core import Slice, VideoCube, plane_stack

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"DTF1"
FEATURE_HEADER = struct.Struct("<4sII")  # magic, rows, D
_SNAP = 1e-9

PathLike = Union[str, Path]


@dataclass(frozen=True)
class LbpVolume:
    plane: PlaneFamily
    codes: np.ndarray  # (n_slices, rows, cols), requantized codes in [0, bins)
    bins: int


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray  # (H*W, D) float32, (y, x) row-major
    height: int
    width: int
    bins: int
    plane: Optional[PlaneFamily] = None

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


class TextureOperator(Protocol):
    """Maps a stack of slices to per-pixel codes in [0, n_bins)."""

    n_bins: int

    def codes(self, stack: np.ndarray) -> np.ndarray:
        ...


def neighbor_offsets(neighbors: int, radius: float) -> List[Tuple[float, float]]:
    """(row, col) offsets of the P circle samples; near-integer offsets are snapped."""
    offsets = []
    for p in range(neighbors):
        angle = 2.0 * math.pi * p / neighbors
        dy, dx = radius * math.sin(angle), radius * math.cos(angle)
        if abs(dy - round(dy)) < _SNAP:
            dy = float(round(dy))
        if abs(dx - round(dx)) < _SNAP:
            dx = float(round(dx))
        offsets.append((dy, dx))
    return offsets


def _bilinear(image: np.ndarray, row: int, col: int, dy: float, dx: float) -> float:
    """Sample at (row + dy, col + dx); weights come from the offset alone, as in lbp_codes."""
    oy, ox = math.floor(dy), math.floor(dx)
    wy, wx = dy - oy, dx - ox
    y0, x0 = row + oy, col + ox
    a = float(image[y0, x0])
    b = float(image[y0, x0 + 1]) if wx > 0 else a
    top = a + wx * (b - a)
    if wy == 0:
        return top
    c = float(image[y0 + 1, x0])
    d = float(image[y0 + 1, x0 + 1]) if wx > 0 else c
    bottom = c + wx * (d - c)
    return top + wy * (bottom - top)


def lbp_code(slice: Union[Slice, np.ndarray], row: int, col: int, params: LbpParams) -> int:
    """LBP code of one pixel: sum over p of s(q_p - q_c) * 2^p, with s(0) = 1."""
    image = slice.data if isinstance(slice, Slice) else np.asarray(slice)
    radius = params.radius
    rows, cols = image.shape
    if row - radius < 0 or col - radius < 0 or row + radius >= rows or col + radius >= cols:
        raise InvalidParameterError(
            f"LBP disc of radius {radius} at ({row}, {col}) leaves the {rows}x{cols} slice"
        )

    center = float(image[row, col])
    code = 0
    for p, (dy, dx) in enumerate(neighbor_offsets(params.neighbors, radius)):
        if _bilinear(image, row, col, dy, dx) >= center:
            code |= 1 << p
    return code


def lbp_codes(stack: np.ndarray, params: LbpParams) -> np.ndarray:
    """Raw LBP codes for the interior of every slice in a (n, rows, cols) stack."""
    radius = params.radius
    n, rows, cols = stack.shape
    if rows < 2 * radius + 1 or cols < 2 * radius + 1:
        raise InvalidParameterError(f"Slices {rows}x{cols} too small for LBP radius {radius}")

    # one extra pixel of padding keeps zero-weight reads in bounds
    image = np.pad(stack.astype(np.float64), ((0, 0), (1, 1), (1, 1)), mode="edge")
    inner_rows, inner_cols = rows - 2 * radius, cols - 2 * radius

    def window(oy: int, ox: int) -> np.ndarray:
        top, left = 1 + radius + oy, 1 + radius + ox
        return image[:, top:top + inner_rows, left:left + inner_cols]

    center = window(0, 0)
    codes = np.zeros((n, inner_rows, inner_cols), dtype=np.int64)
    for p, (dy, dx) in enumerate(neighbor_offsets(params.neighbors, radius)):
        y0, x0 = math.floor(dy), math.floor(dx)
        wy, wx = dy - y0, dx - x0
        a, b = window(y0, x0), window(y0, x0 + 1)
        c, d = window(y0 + 1, x0), window(y0 + 1, x0 + 1)
        top = a + wx * (b - a)
        bottom = c + wx * (d - c)
        value = top + wy * (bottom - top)
        codes |= (value >= center).astype(np.int64) << p
    return codes


def requantize(code, bins: int, neighbors: int = 8):
    """Uniform binning of [0, 2^P) codes into [0, Q); works on scalars and arrays."""
    if isinstance(code, np.ndarray):
        return (code.astype(np.int64) * bins) >> neighbors
    return (int(code) * bins) >> neighbors


class LbpOperator:
    """Base LBP with uniform requantization; border codes replicate the nearest interior code."""

    def __init__(self, params: Optional[LbpParams] = None):
        self.params = params or LbpParams()
        self.n_bins = self.params.bins

    def codes(self, stack: np.ndarray) -> np.ndarray:
        radius = self.params.radius
        interior = requantize(lbp_codes(stack, self.params), self.params.bins, self.params.neighbors)
        padded = np.pad(interior, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
        return padded.astype(np.uint16)


def lbp_volume(
    cube: VideoCube,
    plane: PlaneFamily,
    params: Optional[LbpParams] = None,
    operator: Optional[TextureOperator] = None,
) -> LbpVolume:
    operator = operator or LbpOperator(params)
    codes = operator.codes(plane_stack(cube, plane))
    return LbpVolume(plane=plane, codes=codes, bins=operator.n_bins)


def _window_bounds(length: int, half: int) -> Tuple[np.ndarray, np.ndarray]:
    centers = np.arange(length)
    return np.clip(centers - half, 0, length), np.clip(centers + half + 1, 0, length)


def window_counts(
    codes: np.ndarray,
    bins: int,
    window: int,
    rows: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Clipped window histograms for every pixel of every slice.

    codes: (n, R, C) codes in [0, bins). rows optionally restricts the window
    centers along axis 1. Returns (n, len(rows) or R, C, bins) int32 counts.
    """
    n, height, width = codes.shape
    half = window // 2
    onehot = (codes[..., None] == np.arange(bins)).astype(np.int32)
    integral = np.zeros((n, height + 1, width + 1, bins), dtype=np.int32)
    integral[:, 1:, 1:, :] = onehot.cumsum(axis=1).cumsum(axis=2)

    r_lo, r_hi = _window_bounds(height, half)
    if rows is not None:
        r_lo, r_hi = r_lo[rows], r_hi[rows]
    c_lo, c_hi = _window_bounds(width, half)

    hi_rows, lo_rows = integral[:, r_hi], integral[:, r_lo]
    return hi_rows[:, :, c_hi] - lo_rows[:, :, c_hi] - hi_rows[:, :, c_lo] + lo_rows[:, :, c_lo]


def feature_matrix(
    volume: LbpVolume,
    height: int,
    width: int,
    frames: int,
    window: int = 7,
    stride_t: int = 1,
) -> FeatureMatrix:
    """Concatenate, for each retained t, the window histogram at the pixel's projection into the family."""
    if window % 2 == 0 or window < 1:
        raise InvalidParameterError(f"window must be a positive odd number, got {window}")
    if stride_t < 1:
        raise InvalidParameterError(f"stride_t must be >= 1, got {stride_t}")

    times = np.arange(0, frames, stride_t)
    bins = volume.bins
    if volume.plane == PlaneFamily.xy:
        # slices [t], window at (y, x)
        counts = window_counts(volume.codes[times], bins, window)   # (nt, H, W, Q)
        blocks = counts.transpose(1, 2, 0, 3)
    elif volume.plane == PlaneFamily.xt:
        # slices [y], window at (t, x)
        counts = window_counts(volume.codes, bins, window, rows=times)  # (H, nt, W, Q)
        blocks = counts.transpose(0, 2, 1, 3)
    else:
        # slices [x], window at (t, y)
        counts = window_counts(volume.codes, bins, window, rows=times)  # (W, nt, H, Q)
        blocks = counts.transpose(2, 0, 1, 3)

    if blocks.shape[:2] != (height, width):
        raise InvalidParameterError(f"LBP volume does not match cube dims {height}x{width}")

    values = np.ascontiguousarray(blocks.reshape(height * width, len(times) * bins), dtype=np.float32)
    return FeatureMatrix(values=values, height=height, width=width, bins=bins, plane=volume.plane)


def extract_features(
    cube: VideoCube,
    lbp: Optional[LbpParams] = None,
    features: Optional[FeatureParams] = None,
    operator: Optional[TextureOperator] = None,
) -> Dict[PlaneFamily, FeatureMatrix]:
    """One feature matrix per plane family."""
    features = features or FeatureParams()
    matrices = {}
    for plane in PLANE_FAMILIES:
        volume = lbp_volume(cube, plane, lbp, operator)
        matrices[plane] = feature_matrix(
            volume, cube.height, cube.width, cube.frames, features.window, features.stride_t
        )
        logger.debug(f"Features {plane.value}: {matrices[plane].rows} x {matrices[plane].dim}")
    return matrices


def write_features(matrix: FeatureMatrix, path: PathLike) -> None:
    """DTF1 dump: header then float32 values row-major, little-endian."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(FEATURE_HEADER.pack(FEATURE_MAGIC, matrix.rows, matrix.dim))
        f.write(matrix.values.astype("<f4").tobytes())


def read_features(path: PathLike, height: Optional[int] = None, width: Optional[int] = None) -> FeatureMatrix:
    payload = Path(path).read_bytes()
    if len(payload) < FEATURE_HEADER.size:
        raise CubeFormatError(f"{path}: truncated feature header")
    magic, rows, dim = FEATURE_HEADER.unpack_from(payload)
    if magic != FEATURE_MAGIC:
        raise CubeFormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    body = payload[FEATURE_HEADER.size:]
    if len(body) != rows * dim * 4:
        raise CubeFormatError(f"{path}: expected {rows * dim * 4} value bytes, got {len(body)}")

    values = np.frombuffer(body, dtype="<f4").reshape(rows, dim).astype(np.float32)
    if height is None or width is None:
        height, width = rows, 1
    return FeatureMatrix(values=values, height=height, width=width, bins=0)
