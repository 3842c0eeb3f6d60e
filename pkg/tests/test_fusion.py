import numpy as np
import pytest

from app.errors import DimensionMismatchError, EmptyEnsembleError, InvalidParameterError
from app.services.fusion import (
    FusionState,
    IntersectionTable,
    consensus_energy,
    gce_star,
    icm_fuse,
    init_candidate,
    lre,
    member_energies,
    modal_label_count,
)
from app.services.video_core import SegmentationMap


def brute_lre_sum(a, b):
    """Per-pixel sum of |s_A(p) \\ s_B(p)| / |s_A(p)| by direct set counting."""
    a, b = a.ravel().tolist(), b.ravel().tolist()
    total = 0.0
    for p in range(len(a)):
        segment_a = {q for q in range(len(a)) if a[q] == a[p]}
        segment_b = {q for q in range(len(b)) if b[q] == b[p]}
        total += len(segment_a - segment_b) / len(segment_a)
    return total


def brute_gce(a, b):
    return (brute_lre_sum(a, b) + brute_lre_sum(b, a)) / (2 * a.size)


def random_map(rng, max_side=8, max_labels=4):
    h, w = rng.integers(1, max_side + 1, size=2)
    return rng.integers(0, rng.integers(1, max_labels + 1), size=(h, w))


def test_lre_example():
    a = np.zeros((2, 2), dtype=int)
    b = np.array([[0, 0], [1, 1]])
    assert lre(a, b, (0, 0)) == 0.5
    assert lre(b, a, (0, 0)) == 0.0


def test_gce_matches_oracle(rng):
    for _ in range(500):
        a = random_map(rng)
        b = rng.integers(0, rng.integers(1, 5), size=a.shape)
        assert gce_star(a, b) == pytest.approx(brute_gce(a, b), abs=1e-12)


@pytest.mark.parametrize("side", [2, 4, 8])
def test_gce_one_segment_against_singletons(side):
    n = side * side
    whole = np.zeros((side, side), dtype=int)
    singletons = np.arange(n).reshape(side, side)
    assert gce_star(whole, singletons) == pytest.approx((n - 1) / (2 * n), abs=1e-15)


def test_gce_axioms(rng):
    for _ in range(50):
        a = rng.integers(0, 4, size=(6, 7))
        b = rng.integers(0, 3, size=(6, 7))
        assert gce_star(a, a) == 0.0
        assert gce_star(a, b) == pytest.approx(gce_star(b, a), abs=1e-15)
        assert 0.0 <= gce_star(a, b) <= 1.0


def test_refinement_is_one_sided(rng):
    coarse = rng.integers(0, 3, size=(8, 8))
    fine = coarse * 2 + rng.integers(0, 2, size=(8, 8))
    assert brute_lre_sum(fine, coarse) == 0.0
    assert sum(lre(fine, coarse, p) for p in range(64)) == 0.0


def test_gce_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        gce_star(np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int))


def test_consensus_energy_is_mean_gce(rng):
    ensemble = [rng.integers(0, 3, size=(5, 5)) for _ in range(4)]
    candidate = rng.integers(0, 2, size=(5, 5))
    expected = np.mean([brute_gce(candidate, member) for member in ensemble])
    assert consensus_energy(candidate, ensemble) == pytest.approx(expected, abs=1e-12)


def test_consensus_energy_errors():
    with pytest.raises(EmptyEnsembleError):
        consensus_energy(np.zeros((2, 2), dtype=int), [])
    with pytest.raises(DimensionMismatchError):
        consensus_energy(np.zeros((2, 2), dtype=int), [np.zeros((3, 3), dtype=int)])


def test_init_candidate_is_lowest_energy_member():
    shared = np.array([[0, 0, 1], [0, 1, 1], [0, 1, 1]])
    outlier = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    ensemble = [outlier, shared, shared.copy()]

    energies = member_energies(ensemble)
    assert energies[1] == energies[2] < energies[0]
    assert np.array_equal(init_candidate(ensemble).labels, shared)


def test_intersection_table_move_matches_rebuild(rng):
    candidate = rng.integers(0, 3, size=36)
    member = rng.integers(0, 4, size=36)
    table = IntersectionTable.rebuild(candidate, member, 3, 4)

    pixel = int(np.flatnonzero(candidate == 0)[0])
    table.move(0, 2, int(member[pixel]))
    candidate[pixel] = 2
    assert table.equals(IntersectionTable.rebuild(candidate, member, 3, 4))
    assert table.gce() == pytest.approx(gce_star(candidate, member), abs=1e-12)


def test_incremental_state_survives_random_flips(rng):
    """1000 single-pixel flips: tracked energy and tables equal a from-scratch rebuild."""
    shape = (16, 16)
    n_labels = 4
    members = np.stack([rng.integers(0, rng.integers(2, 6), size=shape).ravel() for _ in range(6)])
    candidate = rng.integers(0, n_labels, size=shape)
    state = FusionState(candidate, members, n_labels)

    for _ in range(1000):
        pixel = int(rng.integers(state.n))
        new_label = int(rng.integers(n_labels))
        state.move(pixel, new_label)

    assert state.energy == pytest.approx(state.from_scratch_energy(), abs=1e-9)
    for tracked, rebuilt in zip(state.tables(), state.rebuilt_tables()):
        assert tracked.equals(rebuilt)
    state.audit()


def test_energy_deltas_match_recomputation(rng):
    members = np.stack([rng.integers(0, 3, size=25) for _ in range(3)])
    candidate = rng.integers(0, 3, size=(5, 5))
    state = FusionState(candidate, members, 3)
    before = state.from_scratch_energy()

    deltas = state.energy_deltas(7)
    for label in range(3):
        trial = candidate.ravel().copy()
        trial[7] = label
        after = consensus_energy(trial.reshape(5, 5), [m.reshape(5, 5) for m in members])
        assert deltas[label] == pytest.approx(after - before, abs=1e-12)


def test_icm_on_identical_copies(rng):
    seg = SegmentationMap.compacted(rng.integers(0, 3, size=(12, 12)))
    result = icm_fuse([seg] * 5, max_sweeps=10, seed=1)

    assert gce_star(result.segmentation, seg) == 0.0
    assert result.sweeps == 1
    assert result.converged
    assert result.energy == pytest.approx(0.0, abs=1e-12)


def test_icm_trace_non_increasing(rng):
    for run in range(50):
        ensemble = [rng.integers(0, 3, size=(8, 8)) for _ in range(4)]
        result = icm_fuse(ensemble, n_labels=3, max_sweeps=6, seed=run)

        trace = result.energy_trace
        assert 1 <= result.sweeps <= 6
        assert len(trace) == result.sweeps
        assert trace[0] <= result.initial_energy + 1e-12
        assert all(later <= earlier + 1e-12 for earlier, later in zip(trace, trace[1:]))
        assert result.energy == pytest.approx(consensus_energy(result.segmentation, ensemble), abs=1e-9)


def test_icm_does_not_exceed_best_member(rng):
    truth = np.zeros((10, 10), dtype=int)
    truth[:, 5:] = 1
    ensemble = []
    for _ in range(6):
        noisy = truth.copy()
        flips = rng.random(truth.shape) < 0.1
        noisy[flips] = 1 - noisy[flips]
        ensemble.append(noisy)

    result = icm_fuse(ensemble, seed=0)
    assert result.segmentation.n_labels <= 2
    assert result.energy <= min(member_energies(ensemble)) + 1e-12


def test_icm_merges_surplus_initial_labels():
    four = np.arange(16).reshape(4, 4) % 4
    ensemble = [four, four.copy(), four.copy()]
    result = icm_fuse(ensemble, n_labels=2, seed=0)
    assert result.n_labels == 2
    assert result.segmentation.n_labels <= 2


def test_modal_label_count():
    ensemble = [np.array([[0, 1]]), np.array([[0, 1]]), np.array([[0, 2]])]
    assert modal_label_count(ensemble) == 2


def test_icm_rejects_bad_arguments():
    with pytest.raises(EmptyEnsembleError):
        icm_fuse([])
    with pytest.raises(InvalidParameterError):
        icm_fuse([np.zeros((3, 3), dtype=int)], max_sweeps=0)
    with pytest.raises(DimensionMismatchError):
        icm_fuse([np.zeros((3, 3), dtype=int), np.zeros((3, 4), dtype=int)])


def relabel(labels, rng):
    """Same partition under a random permutation of the label ids."""
    labels = np.asarray(labels)
    permutation = rng.permutation(int(labels.max()) + 1)
    return permutation[labels]


def test_consensus_energy_ignores_label_ids(rng):
    for _ in range(100):
        candidate = rng.integers(0, 4, size=(7, 9))
        ensemble = [rng.integers(0, rng.integers(1, 5), size=(7, 9)) for _ in range(4)]
        relabeled = [relabel(member, rng) for member in ensemble]

        expected = consensus_energy(candidate, ensemble)
        assert consensus_energy(candidate, relabeled) == pytest.approx(expected, abs=1e-12)
        assert consensus_energy(relabel(candidate, rng), relabeled) == pytest.approx(expected, abs=1e-12)


def test_icm_energy_ignores_label_ids(rng):
    for run in range(20):
        ensemble = [rng.integers(0, 2, size=(8, 8)) for _ in range(5)]
        swapped = [1 - member for member in ensemble]
        for index in rng.choice(5, size=2, replace=False):
            swapped[index] = ensemble[index]

        original = icm_fuse(ensemble, n_labels=2, max_sweeps=8, seed=run)
        relabeled = icm_fuse(swapped, n_labels=2, max_sweeps=8, seed=run)

        assert relabeled.energy == pytest.approx(original.energy, abs=1e-12)
        assert gce_star(relabeled.segmentation, original.segmentation) == pytest.approx(0.0, abs=1e-12)
