import numpy as np
import pytest

from mistseg.errors import EmptySurface, GeometryMismatch, ShapeMismatch
from mistseg.metrics import (
    ClassSpec,
    SurfaceDistanceSet,
    asd,
    compose_class,
    dice,
    evaluate_pair,
    hd95,
    surface_dice,
    surface_distances,
)
from mistseg.volume import LABELS, Volume, diagonal_mm, reorient
from oracles import percentile as percentile_oracle
from oracles import surface_distance_sets as brute_distances

def random_blob(rng, shape, p=0.35):
    m = rng.random(shape) < p
    if not m.any():
        m[tuple(s // 2 for s in shape)] = True
    return m


class TestDice:
    def test_identical(self, rng):
        m = random_blob(rng, (6, 6, 6))
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4, 4), bool)
        b = a.copy()
        a[0], b[3] = True, True
        assert dice(a, b) == 0.0

    def test_two_thirds(self):
        p = np.zeros((3, 3, 3), bool)
        t = p.copy()
        p[0, 0, 0] = p[0, 0, 1] = True
        t[0, 0, 0] = True
        assert dice(p, t) == pytest.approx(2 / 3, abs=1e-15)

    def test_empty_policy(self):
        z = np.zeros((3, 3, 3), bool)
        o = z.copy()
        o[1, 1, 1] = True
        assert dice(z, z) == 1.0 and dice(z, o) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    @pytest.mark.parametrize("seed", range(5))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_blob(rng, (7, 5, 6)), random_blob(rng, (7, 5, 6))
        assert dice(a, b) == dice(b, a)


class TestCompose:
    def test_whole_tumour(self, rng):
        m = rng.integers(0, 5, (5, 5, 5))
        wt = compose_class(m, ClassSpec("WT", frozenset({1, 2, 3})))
        np.testing.assert_array_equal(wt, (m >= 1) & (m <= 3))

    def test_background_class(self):
        assert compose_class(np.zeros((2, 2, 2), int), ClassSpec("bg", frozenset({0}))).all()

    def test_singleton(self, rng):
        m = rng.integers(0, 4, (4, 4, 4))
        np.testing.assert_array_equal(compose_class(m, ClassSpec("x", frozenset({2}))), m == 2)

    def test_empty_name_rejected(self):
        with pytest.raises(ValueError):
            ClassSpec("", frozenset({1}))


class TestSurfaceDistances:
    def test_identical(self, rng):
        m = random_blob(rng, (8, 8, 8))
        sd = surface_distances(m, m)
        assert not sd.pooled.any()
        assert hd95(sd) == 0 and asd(sd) == 0 and surface_dice(sd) == 1

    def test_single_voxels_three_mm(self):
        a = np.zeros((5, 5, 5), bool)
        b = a.copy()
        a[1, 2, 2] = True
        b[4, 2, 2] = True
        sd = surface_distances(a, b, spacing=(1.0, 1.0, 1.0))
        assert sd.d_pred_to_truth.tolist() == [3.0] and sd.d_truth_to_pred.tolist() == [3.0]

    @pytest.mark.parametrize("seed", range(40))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        shape = tuple(int(n) for n in rng.integers(2, 17, 3))
        pred, truth = random_blob(rng, shape, rng.uniform(0.05, 0.6)), random_blob(rng, shape)
        spacing = tuple(rng.uniform(0.5, 3, 3)) if seed % 2 else (1.0, 1.0, 1.0)
        sd = surface_distances(pred, truth, spacing)
        want_p, want_t = brute_distances(pred, truth, spacing)
        np.testing.assert_allclose(np.sort(sd.d_pred_to_truth), np.sort(want_p), atol=1e-9, rtol=0)
        np.testing.assert_allclose(np.sort(sd.d_truth_to_pred), np.sort(want_t), atol=1e-9, rtol=0)
        pooled = np.concatenate([want_p, want_t]).tolist()
        assert hd95(sd) == pytest.approx(percentile_oracle(pooled, 95), abs=1e-9)
        assert asd(sd) == pytest.approx(sum(pooled) / len(pooled), abs=1e-9)

    def test_edge_voxels_are_surface(self):
        full = np.ones((3, 3, 3), bool)
        sd = surface_distances(full, full)
        assert sd.d_pred_to_truth.size == 26  # all but the centre

    def test_empty_surface(self):
        m = np.zeros((3, 3, 3), bool)
        o = m.copy()
        o[1, 1, 1] = True
        with pytest.raises(EmptySurface):
            surface_distances(m, o)

    @pytest.mark.parametrize("seed", range(5))
    def test_symmetry_and_bounds(self, seed):
        rng = np.random.default_rng(50 + seed)
        a, b = random_blob(rng, (9, 8, 7)), random_blob(rng, (9, 8, 7), 0.1)
        ab, ba = surface_distances(a, b), surface_distances(b, a)
        assert hd95(ab) == hd95(ba) and asd(ab) == asd(ba)
        assert hd95(ab) <= ab.pooled.max() and asd(ab) <= ab.pooled.max()
        tols = [0.0, 0.5, 1.0, 1.5, 2.0, 5.0]
        sds = [surface_dice(ab, t) for t in tols]
        assert sds == sorted(sds)


class TestSummaries:
    def sd(self, a, b=()):
        return SurfaceDistanceSet(np.asarray(a, float), np.asarray(b, float), (1.0, 1.0, 1.0))

    def test_tolerance_threshold(self):
        sd = self.sd([2.0] * 4, [2.0] * 3)
        assert surface_dice(sd, 1.0) == 0.0 and surface_dice(sd, 2.0) == 1.0

    def test_percentile_interpolation(self):
        values = [0.0] * 95 + [10.0] * 5
        sd = self.sd(values[:50], values[50:])
        # rank 0.95 * 99 = 94.05 lies between a zero and a ten
        assert hd95(sd) == percentile_oracle(values, 95) == pytest.approx(0.5)


class TestEvaluatePair:
    SPECS = [ClassSpec("WT", frozenset({1, 2, 3})), ClassSpec("TC", frozenset({1, 3})),
             ClassSpec("ET", frozenset({3})), ClassSpec("ED", frozenset({2}))]

    def test_perfect(self, rng):
        m = Volume(rng.integers(0, 4, (8, 8, 8)), kind=LABELS)
        out = evaluate_pair(m, m, self.SPECS, ("dice", "hd95"))
        assert all(out[(s.name, "dice")] == 1.0 and out[(s.name, "hd95")] == 0.0 for s in self.SPECS)

    def test_empty_prediction_penalty(self):
        truth = np.zeros((6, 7, 8), int)
        truth[2:4, 2:4, 2:4] = 3
        spacing = (1.0, 2.0, 0.5)
        out = evaluate_pair(np.zeros_like(truth), truth, self.SPECS[2:3], ("dice", "hd95", "asd", "surf_dice"), spacing)
        diag = np.sqrt(6**2 + 14**2 + 4**2)
        assert out[("ET", "dice")] == 0.0 and out[("ET", "surf_dice")] == 0.0
        assert out[("ET", "hd95")] == pytest.approx(diag) == diagonal_mm((6, 7, 8), spacing)
        assert out[("ET", "asd")] == pytest.approx(diag)

    def test_both_empty(self):
        z = np.zeros((4, 4, 4), int)
        out = evaluate_pair(z, z, self.SPECS[:1], ("dice", "hd95", "asd", "surf_dice"))
        assert out == {("WT", "dice"): 1.0, ("WT", "hd95"): 0.0, ("WT", "asd"): 0.0, ("WT", "surf_dice"): 1.0}

    def test_matches_standalone(self, rng):
        p, t = rng.integers(0, 3, (7, 7, 7)), rng.integers(0, 3, (7, 7, 7))
        spec = ClassSpec("one", frozenset({1}))
        out = evaluate_pair(p, t, [spec], ("dice", "hd95", "asd", "surf_dice"), tolerance=1.5)
        sd = surface_distances(p == 1, t == 1)
        assert out[("one", "dice")] == dice(p == 1, t == 1)
        assert out[("one", "hd95")] == hd95(sd) and out[("one", "asd")] == asd(sd)
        assert out[("one", "surf_dice")] == surface_dice(sd, 1.5)

    def test_geometry_mismatch(self):
        a = Volume(np.zeros((3, 3, 3), int), kind=LABELS)
        b = Volume(np.zeros((3, 3, 3), int), spacing=(1, 1, 2), kind=LABELS)
        with pytest.raises(GeometryMismatch):
            evaluate_pair(a, b, self.SPECS)

    def test_reorientation_invariance(self, rng):
        direction = np.array([[0.0, 1, 0], [-1, 0, 0], [0, 0, 1]])
        p = Volume(rng.integers(0, 4, (6, 7, 8)), spacing=(1, 2, 3), direction=direction, kind=LABELS)
        t = Volume(rng.integers(0, 4, (6, 7, 8)), spacing=(1, 2, 3), direction=direction, kind=LABELS)
        metrics = ("dice", "hd95", "asd", "surf_dice")
        before = evaluate_pair(p, t, self.SPECS, metrics)
        after = evaluate_pair(reorient(p, "RAI"), reorient(t, "RAI"), self.SPECS, metrics)
        for key in before:
            assert after[key] == pytest.approx(before[key], abs=1e-9)
