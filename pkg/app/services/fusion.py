"""
Consensus fusion of an ensemble of label maps.

The objective is the mean GCE* between a candidate map and every ensemble
member. Per member, with n_ab = |a ∩ b|:

    sum_p LRE(cand, member, p) = n - sum_a (sum_b n_ab^2) / |a|
    sum_p LRE(member, cand, p) = n - sum_b (sum_a n_ab^2) / |b|

so the energy only depends on the intersection tables and their squared row
and column sums. A single-pixel relabel touches two cells per member, which
is what makes every ICM label trial O(J).
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import ConsistencyError, DimensionMismatchError, EmptyEnsembleError, InvalidParameterError
from app.services.contingency import contingency_table
from app.services.video_core import SegmentationMap

logger = logging.getLogger(__name__)

AUDIT_TOLERANCE = 1e-9
MIN_IMPROVEMENT = 1e-12

Pixel = Union[int, Tuple[int, int]]


def _labels(seg) -> np.ndarray:
    return np.asarray(getattr(seg, "labels", seg))


def _flat_index(shape: Tuple[int, ...], pixel: Pixel) -> int:
    if isinstance(pixel, tuple):
        return int(np.ravel_multi_index(pixel, shape))
    return int(pixel)


def lre(seg_a, seg_b, pixel: Pixel) -> float:
    """Local refinement error |s_A(p) minus s_B(p)| / |s_A(p)|."""
    a, b = _labels(seg_a), _labels(seg_b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Label maps differ in shape: {a.shape} vs {b.shape}")
    a, b = a.ravel(), b.ravel()
    p = _flat_index(_labels(seg_a).shape, pixel)
    in_a = a == a[p]
    outside_b = b != b[p]
    return float(np.count_nonzero(in_a & outside_b)) / float(np.count_nonzero(in_a))


def refinement_error_sum(counts: np.ndarray) -> float:
    """Sum over pixels of LRE(rows, cols, p) for a contingency table."""
    counts = counts.astype(np.float64)
    sizes = counts.sum(axis=1)
    keep = sizes > 0
    return float(sizes.sum() - ((counts[keep] ** 2).sum(axis=1) / sizes[keep]).sum())


def gce_star(seg_a, seg_b) -> float:
    """Symmetrized GCE*: (sum LRE(A,B) + sum LRE(B,A)) / 2n, from the contingency table."""
    table = contingency_table(seg_a, seg_b)
    n = table.n
    value = (refinement_error_sum(table.counts) + refinement_error_sum(table.counts.T)) / (2.0 * n)
    return min(max(value, 0.0), 1.0)


def _check_ensemble(ensemble: Sequence) -> Tuple[int, ...]:
    if len(ensemble) == 0:
        raise EmptyEnsembleError("Ensemble is empty")
    shape = _labels(ensemble[0]).shape
    for index, member in enumerate(ensemble):
        if _labels(member).shape != shape:
            raise DimensionMismatchError(f"Ensemble member {index} has shape {_labels(member).shape}, expected {shape}")
    return shape


def consensus_energy(candidate, ensemble: Sequence) -> float:
    """Mean GCE* of the candidate against every ensemble member."""
    shape = _check_ensemble(ensemble)
    if _labels(candidate).shape != shape:
        raise DimensionMismatchError(f"Candidate shape {_labels(candidate).shape} differs from ensemble {shape}")
    return float(np.mean([gce_star(candidate, member) for member in ensemble]))


def member_energies(ensemble: Sequence) -> List[float]:
    """Consensus energy of each member used as the candidate."""
    _check_ensemble(ensemble)
    count = len(ensemble)
    pairwise = np.zeros((count, count))
    for i in range(count):
        for j in range(i + 1, count):
            pairwise[i, j] = pairwise[j, i] = gce_star(ensemble[i], ensemble[j])
    return [float(value) for value in pairwise.mean(axis=1)]


def init_candidate_index(ensemble: Sequence) -> int:
    energies = member_energies(ensemble)
    return int(np.argmin(energies))  # first minimum wins ties


def init_candidate(ensemble: Sequence) -> SegmentationMap:
    """The ensemble member with minimal consensus energy (lowest index on ties)."""
    member = ensemble[init_candidate_index(ensemble)]
    if isinstance(member, SegmentationMap):
        return member
    return SegmentationMap.compacted(_labels(member), order="id")


@dataclass
class IntersectionTable:
    """Counts between candidate segments (rows) and one member's segments (columns)."""

    counts: np.ndarray           # (C_out, B) int64
    candidate_sizes: np.ndarray  # (C_out,)
    member_sizes: np.ndarray     # (B,)

    @classmethod
    def rebuild(cls, candidate: np.ndarray, member: np.ndarray, n_labels: int, n_member_labels: int) -> "IntersectionTable":
        candidate, member = np.asarray(candidate).ravel(), np.asarray(member).ravel()
        flat = np.bincount(candidate * n_member_labels + member, minlength=n_labels * n_member_labels)
        counts = flat.reshape(n_labels, n_member_labels).astype(np.int64)
        return cls(counts=counts, candidate_sizes=counts.sum(axis=1), member_sizes=counts.sum(axis=0))

    def move(self, old_label: int, new_label: int, member_label: int) -> None:
        self.counts[old_label, member_label] -= 1
        self.counts[new_label, member_label] += 1
        self.candidate_sizes[old_label] -= 1
        self.candidate_sizes[new_label] += 1

    def gce(self) -> float:
        n = int(self.counts.sum())
        return (refinement_error_sum(self.counts) + refinement_error_sum(self.counts.T)) / (2.0 * n)

    def equals(self, other: "IntersectionTable") -> bool:
        return (
            np.array_equal(self.counts, other.counts)
            and np.array_equal(self.candidate_sizes, other.candidate_sizes)
            and np.array_equal(self.member_sizes, other.member_sizes)
        )


class FusionState:
    """
    Candidate labels plus one intersection table per member, stacked as
    (J, C_out, B_max) so a label trial is a handful of vector ops over J.
    """

    def __init__(self, candidate: np.ndarray, members: np.ndarray, n_labels: int):
        self.shape = candidate.shape
        self.candidate = np.asarray(candidate, dtype=np.int64).ravel().copy()
        self.members = np.asarray(members, dtype=np.int64).reshape(len(members), -1)
        self.n_labels = n_labels
        self.n = self.candidate.size
        self.J = self.members.shape[0]
        if self.members.shape[1] != self.n:
            raise DimensionMismatchError("Members and candidate differ in pixel count")
        if self.candidate.min() < 0 or self.candidate.max() >= n_labels:
            raise InvalidParameterError(f"Candidate labels must lie in [0, {n_labels})")

        self.member_label_counts = self.members.max(axis=1) + 1
        self.b_max = int(self.member_label_counts.max())
        self._rows = np.arange(self.J)
        self.counts = np.stack([
            IntersectionTable.rebuild(self.candidate, member, n_labels, self.b_max).counts
            for member in self.members
        ])
        self.candidate_sizes = self.counts[0].sum(axis=1)
        self.member_sizes = self.counts.sum(axis=1)
        # padded member labels have size 0; divide by 1 instead, their counts stay 0
        self._member_divisor = np.where(self.member_sizes > 0, self.member_sizes, 1).astype(np.float64)
        self.row_sq = (self.counts.astype(np.float64) ** 2).sum(axis=2)  # (J, C_out)
        self.col_sq = (self.counts.astype(np.float64) ** 2).sum(axis=1)  # (J, B_max)
        self.sweeps = 0
        self.energy = self._energy_from_sums()

    def _energy_from_sums(self) -> float:
        sizes = self.candidate_sizes.astype(np.float64)
        keep = sizes > 0
        gain = (self.row_sq[:, keep] / sizes[keep]).sum() + (self.col_sq / self._member_divisor).sum()
        return float(1.0 - gain / (2.0 * self.n * self.J))

    def energy_deltas(self, pixel: int) -> np.ndarray:
        """Energy change for relabeling `pixel` to each label (0 for its current label)."""
        current = self.candidate[pixel]
        member_labels = self.members[:, pixel]
        n_cur = self.counts[self._rows, current, member_labels].astype(np.float64)    # (J,)
        n_new = self.counts[self._rows, :, member_labels].astype(np.float64)          # (J, C)
        sizes = self.candidate_sizes.astype(np.float64)
        size_cur = sizes[current]

        old_cur = self.row_sq[:, current] / size_cur
        new_cur = (self.row_sq[:, current] - 2.0 * n_cur + 1.0) / (size_cur - 1.0) if size_cur > 1 else np.zeros(self.J)
        with np.errstate(divide="ignore", invalid="ignore"):
            old_new = np.where(sizes > 0, self.row_sq / np.where(sizes > 0, sizes, 1.0), 0.0)
        new_new = (self.row_sq + 2.0 * n_new + 1.0) / (sizes + 1.0)
        col_term = (2.0 * (n_new - n_cur[:, None]) + 2.0) / self._member_divisor[self._rows, member_labels][:, None]

        gain = ((new_cur - old_cur)[:, None] + new_new - old_new + col_term).sum(axis=0)
        deltas = -gain / (2.0 * self.n * self.J)
        deltas[current] = 0.0
        return deltas

    def move(self, pixel: int, new_label: int, delta: Optional[float] = None) -> None:
        current = int(self.candidate[pixel])
        if new_label == current:
            return
        if delta is None:
            delta = float(self.energy_deltas(pixel)[new_label])
        member_labels = self.members[:, pixel]
        n_cur = self.counts[self._rows, current, member_labels].astype(np.float64)
        n_new = self.counts[self._rows, new_label, member_labels].astype(np.float64)

        self.row_sq[:, current] += -2.0 * n_cur + 1.0
        self.row_sq[:, new_label] += 2.0 * n_new + 1.0
        self.col_sq[self._rows, member_labels] += 2.0 * (n_new - n_cur) + 2.0
        self.counts[self._rows, current, member_labels] -= 1
        self.counts[self._rows, new_label, member_labels] += 1
        self.candidate_sizes[current] -= 1
        self.candidate_sizes[new_label] += 1
        self.candidate[pixel] = new_label
        self.energy += delta

    def tables(self) -> List[IntersectionTable]:
        return [
            IntersectionTable(
                counts=self.counts[j, :, : self.member_label_counts[j]].copy(),
                candidate_sizes=self.candidate_sizes.copy(),
                member_sizes=self.member_sizes[j, : self.member_label_counts[j]].copy(),
            )
            for j in range(self.J)
        ]

    def rebuilt_tables(self) -> List[IntersectionTable]:
        return [
            IntersectionTable.rebuild(self.candidate, member, self.n_labels, int(count))
            for member, count in zip(self.members, self.member_label_counts)
        ]

    def candidate_map(self) -> np.ndarray:
        return self.candidate.reshape(self.shape)

    def from_scratch_energy(self) -> float:
        candidate = self.candidate_map()
        return consensus_energy(candidate, [member.reshape(self.shape) for member in self.members])

    def audit(self, tolerance: float = AUDIT_TOLERANCE) -> float:
        """Compare tracked tables and energy with a rebuild; resync the energy."""
        for index, (tracked, rebuilt) in enumerate(zip(self.tables(), self.rebuilt_tables())):
            if not tracked.equals(rebuilt):
                raise ConsistencyError(f"Intersection table for member {index} drifted from rebuild")
        exact = self.from_scratch_energy()
        if abs(exact - self.energy) > tolerance:
            raise ConsistencyError(f"Tracked energy {self.energy:.12f} differs from rebuild {exact:.12f}")
        self.energy = exact
        return exact


@dataclass
class FusionResult:
    segmentation: SegmentationMap
    energy_trace: List[float] = field(default_factory=list)
    initial_energy: float = 0.0
    init_index: int = 0
    n_labels: int = 0
    sweeps: int = 0
    moves: int = 0
    converged: bool = False

    @property
    def energy(self) -> float:
        return self.energy_trace[-1] if self.energy_trace else self.initial_energy


def modal_label_count(ensemble: Sequence) -> int:
    counts = [int(_labels(member).max()) + 1 for member in ensemble]
    return int(np.argmax(np.bincount(counts)))


def _fit_labels(labels: np.ndarray, n_labels: int) -> np.ndarray:
    fitted = np.asarray(labels, dtype=np.int64).copy()
    extra = fitted >= n_labels
    if extra.any():
        logger.warning(f"Initial candidate has labels beyond C_out={n_labels}; merging them into label {n_labels - 1}")
        fitted[extra] = n_labels - 1
    return fitted


def icm_fuse(
    ensemble: Sequence,
    n_labels: Optional[int] = None,
    max_sweeps: int = 20,
    seed: int = 0,
) -> FusionResult:
    """
    Iterated conditional modes over single-pixel relabels.

    Starts from the best ensemble member, visits pixels in a fresh seeded
    random order each sweep and commits the strictly best label (ties keep the
    current one). Stops after a sweep without changes or at max_sweeps.
    """
    shape = _check_ensemble(ensemble)
    if max_sweeps < 1:
        raise InvalidParameterError(f"max_sweeps must be >= 1, got {max_sweeps}")
    n_labels = n_labels if n_labels is not None else max(modal_label_count(ensemble), 2)
    if n_labels < 2:
        raise InvalidParameterError(f"C_out must be >= 2, got {n_labels}")

    init_index = init_candidate_index(ensemble)
    members = np.stack([_labels(member).ravel() for member in ensemble])
    state = FusionState(_fit_labels(_labels(ensemble[init_index]), n_labels).reshape(shape), members, n_labels)
    initial_energy = state.audit()
    logger.info(f"ICM start: member {init_index} of {len(ensemble)}, C_out={n_labels}, energy={initial_energy:.6f}")

    rng = np.random.default_rng(seed)
    trace: List[float] = []
    total_moves = 0
    converged = False
    for sweep in range(max_sweeps):
        changes = 0
        for pixel in rng.permutation(state.n):
            deltas = state.energy_deltas(int(pixel))
            deltas[state.candidate_sizes == 0] = np.inf  # no label births
            best = int(np.argmin(deltas))
            if deltas[best] < -MIN_IMPROVEMENT:
                state.move(int(pixel), best, float(deltas[best]))
                changes += 1
        state.sweeps = sweep + 1
        energy = state.audit()
        trace.append(energy)
        total_moves += changes
        logger.debug(f"ICM sweep {sweep + 1}: {changes} changes, energy={energy:.8f}")
        if changes == 0:
            converged = True
            break

    segmentation = SegmentationMap.compacted(state.candidate_map(), order="size")
    logger.info(f"ICM done after {state.sweeps} sweeps ({total_moves} moves), energy={state.energy:.6f}")
    return FusionResult(
        segmentation=segmentation,
        energy_trace=trace,
        initial_energy=initial_energy,
        init_index=init_index,
        n_labels=n_labels,
        sweeps=state.sweeps,
        moves=total_moves,
        converged=converged,
    )
