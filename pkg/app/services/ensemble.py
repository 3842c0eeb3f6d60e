"""
Weak segmentation ensemble: per plane family, K seeded random projections of
the feature matrix, each clustered by k-means into C groups (J = 3K maps).
"""

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from app.errors import ConsistencyError, InvalidParameterError
from app.models import EnsembleConfig, FeatureParams, LbpParams, PLANE_FAMILIES, PlaneFamily, ProjectionKind, ProjectionSpec
from app.services.features import FeatureMatrix, extract_features
from app.services.video_core import SegmentationMap, VideoCube, write_labelmap

logger = logging.getLogger(__name__)

# relative slack for the per-iteration inertia check (float summation noise)
INERTIA_SLACK = 1e-9


@dataclass
class KMeansResult:
    segmentation: SegmentationMap
    inertia: float
    iterations: int
    inertia_history: List[float] = field(default_factory=list)


@dataclass
class EnsembleMember:
    plane: PlaneFamily
    replicate: int
    seed: int
    segmentation: SegmentationMap
    inertia: float
    iterations: int

    @property
    def name(self) -> str:
        return f"member_{self.plane.value}_{self.replicate}"


def derive_seed(master_seed: int, *parts) -> int:
    """Stable 63-bit seed from the master seed and a path such as (plane, replicate)."""
    key = ":".join([str(master_seed)] + [getattr(part, "value", str(part)) for part in parts])
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


def projection_matrix(spec: ProjectionSpec) -> np.ndarray:
    """Unscaled D x k matrix: N(0, 1) entries, or sqrt(3) * {-1, 0, +1} w.p. {1/6, 2/3, 1/6}."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == ProjectionKind.achlioptas:
        signs = rng.choice(np.array([-1.0, 0.0, 1.0]), size=(spec.input_dim, spec.k), p=[1 / 6, 2 / 3, 1 / 6])
        return math.sqrt(3.0) * signs
    return rng.standard_normal((spec.input_dim, spec.k))


def random_projection(
    X: Union[FeatureMatrix, np.ndarray],
    spec: ProjectionSpec,
    matrix: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    X_red = X . RP / sqrt(k).

    `matrix` overrides the seeded RP (used to check the scaling with an identity).
    """
    values = np.asarray(getattr(X, "values", X), dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != spec.input_dim:
        raise InvalidParameterError(f"Feature dim {values.shape[-1]} does not match projection input {spec.input_dim}")
    if spec.k > spec.input_dim:
        raise InvalidParameterError(f"k={spec.k} exceeds feature dimension D={spec.input_dim}")
    rp = projection_matrix(spec) if matrix is None else np.asarray(matrix, dtype=np.float64)
    return (values @ rp) / math.sqrt(spec.k)


def _kmeans_plus_plus(points: np.ndarray, clusters: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((clusters, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = cdist(points, centers[:1], "sqeuclidean").ravel()
    for index in range(1, clusters):
        total = closest.sum()
        if total <= 0:
            # all points coincide with chosen centers
            choice = rng.integers(n)
        else:
            choice = rng.choice(n, p=closest / total)
        centers[index] = points[choice]
        closest = np.minimum(closest, cdist(points, centers[index:index + 1], "sqeuclidean").ravel())
    return centers


def kmeans(
    points: np.ndarray,
    clusters: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-4,
    shape: Optional[Tuple[int, int]] = None,
) -> KMeansResult:
    """
    k-means++ seeding, then Lloyd iterations until the relative inertia
    improvement drops below tol or max_iter is reached. Empty clusters are
    dropped and labels are renumbered by decreasing cluster size.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if clusters < 1:
        raise InvalidParameterError(f"cluster count must be >= 1, got {clusters}")
    if n < clusters:
        raise InvalidParameterError(f"k-means needs at least {clusters} points, got {n}")
    shape = shape or (n, 1)

    rng = np.random.default_rng(seed)
    centers = _kmeans_plus_plus(points, clusters, rng)
    distances = cdist(points, centers, "sqeuclidean")
    labels = distances.argmin(axis=1)
    inertia = float(distances[np.arange(n), labels].sum())
    history = [inertia]

    iterations = 0
    for iterations in range(1, max_iter + 1):
        for cluster in range(clusters):
            members = labels == cluster
            if members.any():
                centers[cluster] = points[members].mean(axis=0)
        distances = cdist(points, centers, "sqeuclidean")
        labels = distances.argmin(axis=1)
        new_inertia = float(distances[np.arange(n), labels].sum())
        if new_inertia > inertia * (1.0 + INERTIA_SLACK) + INERTIA_SLACK:
            raise ConsistencyError(f"k-means inertia increased: {inertia} -> {new_inertia}")
        history.append(new_inertia)
        improvement = (inertia - new_inertia) / inertia if inertia > 0 else 0.0
        inertia = new_inertia
        if improvement < tol:
            break

    segmentation = SegmentationMap.compacted(labels.reshape(shape), order="size")
    return KMeansResult(segmentation=segmentation, inertia=inertia, iterations=iterations, inertia_history=history)


def _run_member(
    matrix: FeatureMatrix,
    plane: PlaneFamily,
    replicate: int,
    cfg: EnsembleConfig,
) -> EnsembleMember:
    seed = derive_seed(cfg.seed, plane, replicate)
    spec = ProjectionSpec(input_dim=matrix.dim, k=cfg.k, seed=seed, kind=cfg.projection)
    reduced = random_projection(matrix, spec)
    result = kmeans(
        reduced,
        cfg.clusters,
        seed=seed,
        max_iter=cfg.max_iter,
        tol=cfg.tol,
        shape=(matrix.height, matrix.width),
    )
    logger.debug(
        f"Member {plane.value}/{replicate}: {result.segmentation.n_labels} labels, "
        f"inertia={result.inertia:.3f} after {result.iterations} iterations"
    )
    return EnsembleMember(
        plane=plane,
        replicate=replicate,
        seed=seed,
        segmentation=result.segmentation,
        inertia=result.inertia,
        iterations=result.iterations,
    )


def build_ensemble(
    matrices: Dict[PlaneFamily, FeatureMatrix],
    cfg: EnsembleConfig,
    workers: int = 1,
) -> List[EnsembleMember]:
    """Projection + clustering jobs for every (family, replicate); output order is fixed."""
    for plane, matrix in matrices.items():
        if cfg.k > matrix.dim:
            raise InvalidParameterError(f"k={cfg.k} exceeds {plane.value} feature dimension D={matrix.dim}")

    jobs = [(matrices[plane], plane, replicate) for plane in PLANE_FAMILIES for replicate in range(cfg.replicates)]
    if workers <= 1:
        return [_run_member(matrix, plane, replicate, cfg) for matrix, plane, replicate in jobs]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_member, matrix, plane, replicate, cfg) for matrix, plane, replicate in jobs]
        return [future.result() for future in futures]


def generate_ensemble(
    cube: VideoCube,
    lbp: Optional[LbpParams] = None,
    cfg: Optional[EnsembleConfig] = None,
    features: Optional[FeatureParams] = None,
    workers: int = 1,
) -> List[SegmentationMap]:
    """J = 3K weak segmentations of the cube, deterministic in the master seed."""
    cfg = cfg or EnsembleConfig()
    matrices = extract_features(cube, lbp, features)
    return [member.segmentation for member in build_ensemble(matrices, cfg, workers)]


def dump_members(members: List[EnsembleMember], output_dir: Union[str, Path]) -> List[Path]:
    output_dir = Path(output_dir)
    paths = []
    for member in members:
        path = output_dir / f"{member.name}.pgm"
        write_labelmap(member.segmentation, path)
        paths.append(path)
    return paths
