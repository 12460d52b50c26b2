import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mistseg.errors import CohortMismatch
from mistseg.evaluate import MetricsTable, evaluate_run, write_results_csv
from mistseg.metrics import ClassSpec
from mistseg.nifti import write_nifti
from mistseg.postprocess import (
    FillHoles,
    MorphClean,
    PostprocessStrategy,
    RemoveSmall,
    TopK,
    apply_op,
    apply_strategies,
    connected_components,
    improvement_score,
    load_strategies,
    parse_strategies,
    run_postprocess,
)
from mistseg.volume import LABELS, Volume
from oracles import flood_fill_components, flood_fill_holes
from oracles import neighbour_offsets as offsets


def blobs(shape, specs):
    m = np.zeros(shape, np.uint8)
    for lo, hi, label in specs:
        m[tuple(slice(a, b) for a, b in zip(lo, hi))] = label
    return m


class TestComponents:
    def test_two_blobs(self):
        m = blobs((6, 6, 6), [((0, 0, 0), (2, 1, 1), 1), ((4, 4, 4), (6, 5, 5), 1)])
        _, sizes = connected_components(m)
        assert sizes == [2, 2]

    def test_diagonal_connectivity(self):
        m = np.zeros((3, 3, 3), bool)
        m[0, 0, 0] = m[1, 1, 1] = True
        assert len(connected_components(m, 26)[1]) == 1
        assert len(connected_components(m, 6)[1]) == 2
        m2 = np.zeros((3, 3, 3), bool)
        m2[0, 0, 1] = m2[0, 1, 0] = True
        assert len(connected_components(m2, 18)[1]) == 1
        assert len(connected_components(m2, 6)[1]) == 2

    @pytest.mark.parametrize("connectivity", [6, 18, 26])
    @pytest.mark.parametrize("seed", range(4))
    def test_flood_fill_oracle(self, connectivity, seed):
        rng = np.random.default_rng(seed)
        shape = tuple(int(n) for n in rng.integers(3, 17, 3))
        mask = rng.random(shape) < 0.25
        labels, sizes = connected_components(mask, connectivity)
        want, n = flood_fill_components(mask, connectivity)
        np.testing.assert_array_equal(labels, want)
        assert sizes == sorted(np.bincount(want.ravel())[1:].tolist(), reverse=True)


class TestOps:
    def test_top_k(self):
        m = blobs((20, 20, 20), [((0, 0, 0), (10, 1, 1), 1), ((5, 5, 5), (10, 6, 6), 1), ((15, 15, 15), (17, 16, 16), 1)])
        out = apply_op(m, {1}, TopK(2))
        np.testing.assert_array_equal(out, np.where(np.arange(20)[:, None, None] >= 15, 0, m))
        assert out.sum() == 15

    def test_top_k_ties_break_by_scan_order(self):
        m = blobs((10, 10, 10), [((6, 0, 0), (8, 1, 1), 1), ((0, 0, 5), (2, 1, 6), 1)])
        out = apply_op(m, {1}, TopK(1))
        assert out[0, 0, 5] == 1 and out[6, 0, 0] == 0

    @pytest.mark.parametrize("connectivity", [6, 26])
    def test_fill_hollow_cube(self, connectivity):
        m = np.zeros((9, 9, 9), np.uint8)
        m[2:7, 2:7, 2:7] = 1
        m[3:6, 3:6, 3:6] = 0
        out = apply_op(m, {1}, FillHoles(2), connectivity)
        holes = flood_fill_holes(m == 1, connectivity)
        assert holes.sum() == 27
        np.testing.assert_array_equal(out, np.where(holes, 2, m))

    @pytest.mark.parametrize("seed", range(4))
    def test_fill_holes_oracle(self, seed):
        rng = np.random.default_rng(seed)
        m = (rng.random((10, 9, 8)) < 0.6).astype(np.uint8)
        out = apply_op(m, {1}, FillHoles(3), 26)
        np.testing.assert_array_equal(out == 3, flood_fill_holes(m == 1, 26))

    def test_fill_only_background(self):
        m = np.zeros((7, 7, 7), np.uint8)
        m[1:6, 1:6, 1:6] = 1
        m[2:5, 2:5, 2:5] = 0
        m[3, 3, 3] = 4
        out = apply_op(m, {1}, FillHoles(2))
        assert out[3, 3, 3] == 4 and out[2, 2, 2] == 2

    def test_remove_small_min_one_is_identity(self, rng):
        m = rng.integers(0, 3, (8, 8, 8)).astype(np.uint8)
        np.testing.assert_array_equal(apply_op(m, {1, 2}, RemoveSmall(1)), m)

    def test_remove_small_replacement_label(self):
        m = blobs((10, 10, 10), [((0, 0, 0), (4, 4, 4), 3), ((8, 8, 8), (9, 9, 9), 3), ((5, 5, 5), (6, 6, 6), 1)])
        out = apply_op(m, {3}, RemoveSmall(5, replace_label=2))
        assert out[8, 8, 8] == 2 and out[0, 0, 0] == 3 and out[5, 5, 5] == 1

    def test_morph_clean_removes_spur(self):
        m = np.zeros((15, 15, 15), np.uint8)
        m[3:10, 3:10, 3:10] = 1
        m[10:14, 6, 6] = 1  # one-voxel-thick spur
        out = apply_op(m, {1}, MorphClean(1))
        assert not out[11:14, 6, 6].any()
        assert out[6, 6, 6] == 1

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.uint8, (7, 6, 5), elements=st.integers(0, 3)), st.sampled_from([6, 18, 26]))
    def test_idempotent_and_label_closed(self, m, connectivity):
        ops = [RemoveSmall(3), TopK(2), MorphClean(1), FillHoles(2)]
        for op in ops:
            once = apply_op(m, {1, 3}, op, connectivity)
            twice = apply_op(once, {1, 3}, op, connectivity)
            np.testing.assert_array_equal(once, twice)
            assert set(np.unique(once)) <= set(np.unique(m)) | {0, 2}
            # non-target labels are untouched, except background filled by fill_holes
            untouched = (m != 1) & (m != 3) & ~((m == 0) & isinstance(op, FillHoles))
            np.testing.assert_array_equal(once[untouched], m[untouched])

    def test_volume_in_volume_out(self):
        shell = np.pad(np.ones((3, 3, 3), np.uint8), 1)
        shell[2, 2, 2] = 0
        out = apply_op(Volume(shell, kind=LABELS), {1}, FillHoles(300))
        assert isinstance(out, Volume) and out.kind == LABELS
        assert out.array[2, 2, 2] == 300 and out.array[1, 1, 1] == 1


class TestStrategies:
    def test_parse(self, tmp_path):
        spec = [
            {"labels": [3], "connectivity": 6, "ops": [{"op": "remove_small", "min_voxels": 5, "replace_label": 2}]},
            {"labels": [1, 2, 3], "ops": [{"op": "top_k", "k": 1}, {"op": "fill_holes", "fill_label": 1}]},
        ]
        (tmp_path / "s.json").write_text(json.dumps(spec))
        strategies = load_strategies(tmp_path / "s.json")
        assert strategies[0] == PostprocessStrategy(frozenset({3}), (RemoveSmall(5, 2),), 6)
        assert strategies[1].ops == (TopK(1), FillHoles(1))

    @pytest.mark.parametrize(
        "bad",
        [
            {"labels": [1], "ops": [{"op": "top_k", "k": 0}]},
            {"labels": [1], "ops": [{"op": "remove_small", "min_voxels": 0}]},
            {"labels": [1], "ops": [{"op": "morph_clean", "radius": 0}]},
            {"labels": [1], "ops": [{"op": "explode"}]},
            {"labels": [1], "connectivity": 8, "ops": []},
            {"labels": [], "ops": []},
        ],
    )
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            parse_strategies([bad])

    def test_fill_label_must_be_dataset_label(self):
        strategy = parse_strategies({"labels": [1], "ops": [{"op": "fill_holes", "fill_label": 9}]})[0]
        with pytest.raises(ValueError):
            strategy.validate([0, 1, 2])

    def test_ordered_application(self):
        m = blobs((10, 10, 10), [((0, 0, 0), (3, 3, 3), 1), ((6, 6, 6), (8, 8, 8), 1)])
        strategies = parse_strategies([
            {"labels": [1], "ops": [{"op": "top_k", "k": 1}]},
            {"labels": [1], "ops": [{"op": "remove_small", "min_voxels": 30}]},
        ])
        assert not apply_strategies(m, strategies).any()


SPECS = [ClassSpec("fg", frozenset({1}))]


@pytest.fixture
def cohort(tmp_path):
    """Truth cubes and predictions that add a spurious far-away blob."""
    truth_dir, pred_dir = tmp_path / "truth", tmp_path / "preds"
    truth_dir.mkdir()
    pred_dir.mkdir()
    for i in range(3):
        truth = blobs((20, 20, 20), [((3 + i, 3, 3), (9 + i, 9, 9), 1)])
        pred = truth.copy()
        pred[14:19, 14:19, 14:19] = 1
        write_nifti(Volume(truth, kind=LABELS), truth_dir / f"c{i}.nii.gz")
        write_nifti(Volume(pred, kind=LABELS), pred_dir / f"c{i}.nii.gz")
    baseline = evaluate_run(pred_dir, truth_dir, SPECS, ("dice", "hd95"))
    return truth_dir, pred_dir, baseline


class TestRunPostprocess:
    def test_removing_spurious_blob_improves(self, cohort, tmp_path):
        truth_dir, pred_dir, baseline = cohort
        strategies = parse_strategies({"labels": [1], "ops": [{"op": "top_k", "k": 1}]})
        _, table, score = run_postprocess(pred_dir, strategies, truth_dir, baseline, tmp_path / "out", SPECS)
        assert table.means()[("fg", "dice")] == 1.0 > baseline.means()[("fg", "dice")]
        assert table.means()[("fg", "hd95")] < baseline.means()[("fg", "hd95")]
        assert score > 0

    def test_destructive_op_hurts(self, cohort, tmp_path):
        truth_dir, pred_dir, baseline = cohort
        strategies = parse_strategies({"labels": [1], "ops": [{"op": "remove_small", "min_voxels": 300}]})
        assert run_postprocess(pred_dir, strategies, truth_dir, baseline, tmp_path / "out", SPECS)[2] < 0

    def test_noop_scores_zero(self, cohort, tmp_path):
        truth_dir, pred_dir, baseline = cohort
        strategies = parse_strategies({"labels": [1], "ops": [{"op": "remove_small", "min_voxels": 1}]})
        assert run_postprocess(pred_dir, strategies, truth_dir, baseline, tmp_path / "out", SPECS)[2] == 0.0
        write_results_csv(baseline, tmp_path / "baseline.csv")
        score = run_postprocess(pred_dir, strategies, truth_dir, tmp_path / "baseline.csv", tmp_path / "out2", SPECS)[2]
        assert score == 0.0

    def test_improvement_formula(self):
        cols = [("a", "dice"), ("a", "hd95")]
        base = MetricsTable(cols, {"p": [0.5, 10.0]})
        new = MetricsTable(cols, {"p": [0.7, 6.0]})
        assert improvement_score(base, new) == pytest.approx(0.5 * 0.2 + 0.5 * 4.0)
        assert improvement_score(base, new, {cols[0]: 1.0}) == pytest.approx(0.2)

    def test_cohort_mismatch(self):
        cols = [("a", "dice")]
        with pytest.raises(CohortMismatch):
            improvement_score(MetricsTable(cols, {"p": [1.0]}), MetricsTable(cols, {"q": [1.0]}))
