import numpy as np
import pytest

from lesionseg.fusion import extract_lesions
from lesionseg.metrics import (DETECTION_CUTOFFS, EvalReport, boundary_voxels,
                               detection_curve, evaluate_cases, global_dice,
                               localization_error, match_lesions, subject_scores,
                               surface_dice, threshold_buckets)


def _oracle_voxel_scores(pred, gt):
    """Brute-force voxel counting, independent of the library internals."""
    tp = fp = fn = 0
    for idx in np.ndindex(pred.shape):
        p, g = bool(pred[idx]), bool(gt[idx])
        tp += p and g
        fp += p and not g
        fn += g and not p
    both_empty = tp + fp + fn == 0
    def div(n, d):
        return (1.0 if both_empty else 0.0) if d == 0 else n / d
    return {
        "dice": div(2 * tp, 2 * tp + fp + fn),
        "iou": div(tp, tp + fp + fn),
        "recall": div(tp, tp + fn),
        "precision": div(tp, tp + fp),
    }


def _oracle_boundary(mask):
    out = np.zeros_like(mask, dtype=bool)
    for idx in np.ndindex(mask.shape):
        if not mask[idx]:
            continue
        for axis in range(3):
            for step in (-1, 1):
                n = list(idx)
                n[axis] += step
                if n[axis] < 0 or n[axis] >= mask.shape[axis]:
                    out[idx] = True
                    break
                if not mask[tuple(n)]:
                    out[idx] = True
                    break
            if out[idx]:
                break
    return out


def _oracle_surface_dice(pred, gt, tol, spacing):
    """O(n^2) pairwise squared distances between boundary voxel sets."""
    bp = np.argwhere(_oracle_boundary(pred > 0))
    bg = np.argwhere(_oracle_boundary(gt > 0))
    if len(bp) == 0 and len(bg) == 0:
        return 1.0
    sp = np.asarray(spacing, dtype=np.float64)
    tol_sq = float(tol) ** 2

    def hits(src, dst):
        if len(src) == 0 or len(dst) == 0:
            return 0
        count = 0
        for s in src:
            d_sq = (((s - dst) * sp) ** 2).sum(axis=1).min()
            count += d_sq <= tol_sq
        return count

    return (hits(bp, bg) + hits(bg, bp)) / (len(bp) + len(bg))


class TestVoxelScores:
    def test_matches_oracle_on_200_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            density = rng.uniform(0.05, 0.6)
            pred = (rng.random((8, 8, 8)) < density).astype(np.uint8)
            gt = (rng.random((8, 8, 8)) < density).astype(np.uint8)
            got = subject_scores(pred, gt)
            want = _oracle_voxel_scores(pred, gt)
            for key, value in want.items():
                assert getattr(got, key) == value, key

    def test_dice_iou_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pred = (rng.random((6, 6, 6)) < 0.4).astype(np.uint8)
            gt = (rng.random((6, 6, 6)) < 0.4).astype(np.uint8)
            s = subject_scores(pred, gt)
            assert s.dice == pytest.approx(2 * s.iou / (1 + s.iou), abs=1e-12)
            assert s.iou <= s.dice

    def test_superset_prediction_double_volume(self):
        gt = np.zeros((8, 8, 8), np.uint8)
        gt[2:4, 2:4, 2:4] = 1                      # 8 voxels
        pred = gt.copy()
        pred[4:6, 2:4, 2:4] = 1                    # 16 voxels total
        s = subject_scores(pred, gt)
        assert s.recall == 1.0
        assert s.precision == 0.5
        assert s.dice == pytest.approx(2 / 3)
        assert s.iou == 0.5

    def test_empty_empty_scores_one(self):
        z = np.zeros((4, 4, 4), np.uint8)
        s = subject_scores(z, z)
        assert (s.dice, s.iou, s.recall, s.precision, s.surface_dice) == (1, 1, 1, 1, 1)

    def test_identical_masks_score_one(self):
        rng = np.random.default_rng(2)
        m = (rng.random((6, 6, 6)) < 0.3).astype(np.uint8)
        s = subject_scores(m, m)
        assert (s.dice, s.iou, s.recall, s.precision, s.surface_dice) == (1, 1, 1, 1, 1)


class TestGlobalDice:
    def test_pooled_counts_example(self):
        # one subject perfect (10 voxels), one fully missed (10 voxels)
        gt = np.zeros((5, 5, 5), np.uint8)
        gt[0, 0, :5] = 1
        gt[1, 1, :5] = 1
        perfect = (gt.copy(), gt.copy())
        missed = (np.zeros_like(gt), gt.copy())
        assert global_dice([perfect, missed]) == pytest.approx(2 * 10 / (20 + 0 + 10))

    def test_single_subject_equals_subject_dice(self):
        rng = np.random.default_rng(3)
        pred = (rng.random((6, 6, 6)) < 0.4).astype(np.uint8)
        gt = (rng.random((6, 6, 6)) < 0.4).astype(np.uint8)
        assert global_dice([(pred, gt)]) == subject_scores(pred, gt).dice

    def test_perfect_predictions(self):
        rng = np.random.default_rng(4)
        pairs = []
        for _ in range(3):
            m = (rng.random((5, 5, 5)) < 0.3).astype(np.uint8)
            pairs.append((m, m.copy()))
        assert global_dice(pairs) == 1.0

    def test_matches_brute_force_pooled_formula(self):
        rng = np.random.default_rng(5)
        pairs = [
            ((rng.random((6, 6, 6)) < 0.4).astype(np.uint8),
             (rng.random((6, 6, 6)) < 0.4).astype(np.uint8))
            for _ in range(4)
        ]
        tp = fp = fn = 0
        for pred, gt in pairs:
            for idx in np.ndindex(pred.shape):
                p, g = bool(pred[idx]), bool(gt[idx])
                tp += p and g
                fp += p and not g
                fn += g and not p
        assert global_dice(pairs) == 2 * tp / (2 * tp + fp + fn)


class TestSurfaceDice:
    def test_identical_masks(self):
        m = np.zeros((8, 8, 8), np.uint8)
        m[2:6, 2:6, 2:6] = 1
        assert surface_dice(m, m, 1.5) == 1.0

    def test_one_voxel_shift_within_tolerance(self):
        a = np.zeros((10, 10, 10), np.uint8)
        b = np.zeros((10, 10, 10), np.uint8)
        a[2:6, 2:6, 2:6] = 1
        b[3:7, 2:6, 2:6] = 1            # shifted by 1 voxel at 1 mm spacing
        assert surface_dice(a, b, 1.5) == 1.0

    def test_three_voxel_shift_below_one(self):
        a = np.zeros((12, 12, 12), np.uint8)
        b = np.zeros((12, 12, 12), np.uint8)
        a[1:7, 1:9, 1:9] = 1
        b[4:10, 1:9, 1:9] = 1           # 3 voxel shift
        assert surface_dice(a, b, 1.5) < 1.0

    def test_both_empty_is_one_by_convention(self):
        z = np.zeros((4, 4, 4), np.uint8)
        assert surface_dice(z, z, 1.5) == 1.0
        assert surface_dice(z, np.ones_like(z), 1.5) == 0.0

    def test_boundary_extraction_matches_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            m = (rng.random((7, 7, 7)) < 0.4).astype(np.uint8)
            np.testing.assert_array_equal(boundary_voxels(m), _oracle_boundary(m))

    @pytest.mark.parametrize("tol", [0.0, 1.0, 1.5])
    @pytest.mark.parametrize("spacing", [(1.0, 1.0, 1.0), (1.0, 0.8, 0.8)])
    def test_matches_pairwise_oracle_exactly(self, tol, spacing):
        rng = np.random.default_rng(7)
        for _ in range(8):
            pred = (rng.random((9, 9, 9)) < 0.35).astype(np.uint8)
            gt = (rng.random((9, 9, 9)) < 0.35).astype(np.uint8)
            assert surface_dice(pred, gt, tol, spacing) == \
                _oracle_surface_dice(pred, gt, tol, spacing)

    def test_matches_oracle_on_12_cube(self):
        rng = np.random.default_rng(8)
        pred = np.zeros((12, 12, 12), np.uint8)
        gt = np.zeros((12, 12, 12), np.uint8)
        pred[2:9, 3:8, 2:10] = 1
        gt[3:10, 2:9, 3:9] = 1
        for tol in (0.0, 1.0, 1.5):
            assert surface_dice(pred, gt, tol) == _oracle_surface_dice(pred, gt, tol,
                                                                       (1, 1, 1))


def _lesion_set(cubes, shape=(24, 24, 24)):
    mask = np.zeros(shape, np.uint8)
    for lo, size in cubes:
        sl = tuple(slice(o, o + s) for o, s in zip(lo, size))
        mask[sl] = 1
    return extract_lesions(mask)


class TestDetection:
    def test_perfect_prediction_f1_one_everywhere(self):
        lesions = _lesion_set([((2, 2, 2), (4, 4, 4)), ((12, 12, 12), (5, 5, 5))])
        curve = detection_curve(lesions, lesions)
        assert curve.f1 == [1.0] * 9
        assert curve.ap == curve.ar == curve.af1 == 1.0

    def test_missed_lesion_conventions(self):
        gt = _lesion_set([((2, 2, 2), (4, 4, 4))])
        curve = detection_curve([], gt)
        assert curve.recall == [0.0] * 9
        assert curve.precision == [0.0] * 9
        assert curve.f1 == [0.0] * 9

    def test_pair_with_dice_045_flips_between_cutoffs(self):
        # overlap engineered to land at pairwise Dice 0.45: |A|=|B|=20, |A∩B|=9
        mask_a = np.zeros((32, 10, 10), np.uint8)
        mask_b = np.zeros((32, 10, 10), np.uint8)
        mask_a[0:20, 0, 0] = 1
        mask_b[11:31, 0, 0] = 1              # 20 voxels from 11..30, overlap 9
        a = extract_lesions(mask_a)
        b = extract_lesions(mask_b)
        matches = match_lesions(a, b)
        assert matches[0][2] == pytest.approx(0.45)
        curve = detection_curve(a, b)
        for cutoff, f1 in zip(curve.cutoffs, curve.f1):
            if cutoff <= 0.4:
                assert f1 == 1.0
            else:
                assert f1 == 0.0

    def test_recall_non_increasing_and_tp_monotone(self):
        rng = np.random.default_rng(9)
        pred = (rng.random((16, 16, 16)) < 0.2).astype(np.uint8)
        gt = (rng.random((16, 16, 16)) < 0.2).astype(np.uint8)
        curve = detection_curve(extract_lesions(pred), extract_lesions(gt))
        for earlier, later in zip(curve.recall, curve.recall[1:]):
            assert later <= earlier

    def test_averages_are_arithmetic_means(self):
        lesions = _lesion_set([((2, 2, 2), (4, 4, 4))])
        shifted = _lesion_set([((3, 2, 2), (4, 4, 4))])
        curve = detection_curve(shifted, lesions)
        assert curve.ap == pytest.approx(float(np.mean(curve.precision)))
        assert curve.ar == pytest.approx(float(np.mean(curve.recall)))
        assert curve.af1 == pytest.approx(float(np.mean(curve.f1)))

    def test_matching_is_one_to_one(self):
        # two predictions overlap one ground-truth lesion; only one may match
        gt = _lesion_set([((4, 4, 4), (6, 6, 6))])
        pred_mask = np.zeros((24, 24, 24), np.uint8)
        pred_mask[4:10, 4:10, 4:7] = 1
        pred_mask[4:10, 4:10, 8:10] = 0  # split predictions
        pred_mask[4:10, 4:10, 8:10] = 1
        pred_mask[:, :, 7] = 0
        preds = extract_lesions(pred_mask)
        assert len(preds) == 2
        matches = match_lesions(preds, gt)
        assert len(matches) == 1


class TestLocalization:
    def test_identical_lesions_zero_distance(self):
        lesions = _lesion_set([((2, 2, 2), (4, 4, 4))])
        mean, std, n = localization_error(lesions, lesions)
        assert (mean, std, n) == (0.0, 0.0, 1)

    def test_known_offset(self):
        a = _lesion_set([((2, 2, 2), (4, 4, 4))])
        b = _lesion_set([((5, 2, 2), (4, 4, 4))])
        mean, std, n = localization_error(b, a, reporting_cutoff=0.1)
        assert mean == pytest.approx(3.0)
        assert n == 1

    def test_no_matches_flagged(self):
        a = _lesion_set([((2, 2, 2), (4, 4, 4))])
        mean, std, n = localization_error([], a)
        assert mean is None and std is None and n == 0


class TestBuckets:
    def test_all_perfect_empties_low_buckets(self):
        buckets = threshold_buckets([1.0, 1.0, 1.0])
        assert all(v == 0 for v in buckets["below"].values())
        assert all(v == 3 for v in buckets["at_or_above"].values())

    def test_035_subject_counted_strictly_below(self):
        buckets = threshold_buckets([0.35])
        assert buckets["below"]["0.3"] == 0
        assert buckets["below"]["0.4"] == 1
        assert buckets["below"]["0.5"] == 1
        assert buckets["at_or_above"]["0.5"] == 0

    def test_boundary_value_at_threshold(self):
        buckets = threshold_buckets([0.5])
        assert buckets["below"]["0.5"] == 0          # strict <
        assert buckets["at_or_above"]["0.5"] == 1    # inclusive >=


class TestEvalReport:
    def _entries(self):
        rng = np.random.default_rng(10)
        entries = []
        for i in range(3):
            gt = np.zeros((16, 16, 16), np.uint8)
            gt[4:9, 4:9, 4:9] = 1
            pred = gt.copy()
            if i == 2:
                pred[:] = 0
            entries.append((f"s{i}", pred, gt, (1.0, 1.0, 1.0)))
        return entries

    def test_report_fields_populated_and_consistent(self):
        rep = evaluate_cases(self._entries())
        assert rep.global_dice == pytest.approx(
            2 * rep.pooled_counts["tp"]
            / (2 * rep.pooled_counts["tp"] + rep.pooled_counts["fp"]
               + rep.pooled_counts["fn"])
        )
        assert len(rep.subjects) == 3
        assert rep.means["dice"] == pytest.approx(
            float(np.mean([s.dice for s in rep.subjects]))
        )
        assert rep.detection.n_gt == 3
        assert rep.buckets["below"]["0.1"] == 1      # the all-miss subject

    def test_json_roundtrip_reproduces_aggregates(self, tmp_path):
        rep = evaluate_cases(self._entries())
        path = tmp_path / "report.json"
        rep.to_json(path)
        back = EvalReport.from_json(path)
        assert back.global_dice == rep.global_dice
        assert back.means == rep.means
        assert [s.dice for s in back.subjects] == [s.dice for s in rep.subjects]
        assert back.detection.af1 == rep.detection.af1

    def test_csv_has_one_row_per_subject(self, tmp_path):
        rep = evaluate_cases(self._entries())
        path = tmp_path / "subjects.csv"
        rep.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 4
