"""Evaluation metrics: Dice, surface distances, lines, paired testing."""

import logging

import numpy as np
import pytest
import scipy.stats

from hoarefine import (
    DEFAULT_BOUNDARIES,
    LandmarkSet,
    MetricError,
    MetricReport,
    MetricRow,
    MetricUndefinedError,
    PairedSampleTable,
    benjamini_hochberg,
    dice,
    evaluate_pair,
    extract_protocol_surface,
    extract_separation_line,
    line_metrics,
    pasd,
    wilcoxon_fdr,
    wilcoxon_signed_rank,
)

from conftest import make_volume
from oracles import brute_dice, brute_pasd, brute_separation_line, brute_wilcoxon


def _spec(region, surface):
    for s in DEFAULT_BOUNDARIES:
        if s.region == region and s.surface == surface:
            return s
    raise KeyError((region, surface))


class TestDice:
    def test_basic_values(self):
        gt = make_volume(np.array([[[6, 6, 6, 0]]], dtype=np.int16))
        pred = make_volume(np.array([[[6, 6, 0, 6]]], dtype=np.int16))
        assert dice(pred, gt, 6) == 2 * 2 / (3 + 3)
        assert dice(gt, gt, 6) == 1.0
        assert dice(pred, gt, 10) == 1.0  # label absent from both

    def test_disjoint(self):
        gt = make_volume(np.array([[[6, 0]]], dtype=np.int16))
        pred = make_volume(np.array([[[0, 6]]], dtype=np.int16))
        assert dice(pred, gt, 6) == 0.0

    def test_both_empty_warns(self, caplog):
        vol = make_volume(np.zeros((2, 2, 2), dtype=np.int16))
        with caplog.at_level(logging.WARNING, logger="hoarefine.metrics"):
            assert dice(vol, vol, 6) == 1.0
        assert any("both masks empty" in r.message for r in caplog.records)

    def test_dimension_mismatch(self):
        a = make_volume(np.zeros((2, 2, 2), dtype=np.int16))
        b = make_volume(np.zeros((2, 2, 3), dtype=np.int16))
        with pytest.raises(MetricError, match="mismatch"):
            dice(a, b, 6)

    def test_matches_reference_count(self):
        rng = np.random.default_rng(2)
        a = make_volume(rng.integers(0, 3, size=(6, 5, 4)).astype(np.int16))
        b = make_volume(rng.integers(0, 3, size=(6, 5, 4)).astype(np.int16))
        assert dice(a, b, 2) == brute_dice(a, b, 2)


class TestLineMetrics:
    def test_hand_values(self):
        mae, sigma = line_metrics([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
        assert mae == 1.0
        assert sigma == pytest.approx(np.sqrt(2.0 / 3.0), abs=1e-15)
        _, sigma = line_metrics([7.0, 8.0, 7.0, 8.0], [7.0] * 4)
        assert sigma == 0.5

    def test_constant_line_is_exactly_zero(self):
        vals = [2.1000000000000001] * 7  # mean rounding must not leak in
        _, sigma = line_metrics(vals, [0.0] * 7)
        assert sigma == 0.0

    def test_errors(self):
        with pytest.raises(MetricUndefinedError):
            line_metrics([], [])
        with pytest.raises(MetricError):
            line_metrics([1.0, 2.0], [1.0])


class TestSeparationLine:
    def _volume(self, a_cols, b_cols, n_rows=5, spacing=1.0, origin=0.0):
        data = np.zeros((12, 3, n_rows), dtype=np.int16)
        data[a_cols, 1, :] = 6
        data[b_cols, 1, :] = 10
        return make_volume(data, spacing=spacing, origin=origin)

    def test_ascending_scan(self):
        vol = self._volume(slice(0, 7), slice(7, 12))
        rows, pos = extract_separation_line(vol, 1, 1, (6, 10), 0)
        assert rows.tolist() == [0, 1, 2, 3, 4]
        assert np.all(pos == 7.0)

    def test_descending_scan(self):
        vol = self._volume(slice(7, 12), slice(0, 7))
        _, pos = extract_separation_line(vol, 1, 1, (6, 10), 0)
        assert np.all(pos == 6.0)  # last B voxel met from the A side

    def test_world_units(self):
        vol = self._volume(slice(0, 7), slice(7, 12),
                           spacing=0.7, origin=(-2.0, 0.0, 0.0))
        _, pos = extract_separation_line(vol, 1, 1, (6, 10), 0)
        assert np.allclose(pos, -2.0 + 0.7 * 7)

    def test_jagged_boundary(self):
        data = np.zeros((12, 3, 4), dtype=np.int16)
        for r in range(4):
            start = 7 + (r % 2)
            data[:start, 1, r] = 6
            data[start:, 1, r] = 10
        vol = make_volume(data)
        rows, pos = extract_separation_line(vol, 1, 1, (6, 10), 0)
        assert pos.tolist() == [7.0, 8.0, 7.0, 8.0]
        _, sigma = line_metrics(pos, pos)
        assert sigma == 0.5

    def test_matches_reference_scan(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            data = rng.choice([0, 6, 10], size=(10, 3, 6),
                              p=[0.3, 0.35, 0.35]).astype(np.int16)
            vol = make_volume(data, spacing=0.9)
            ref = brute_separation_line(vol, 1, 1, (6, 10), 0)
            try:
                rows, pos = extract_separation_line(vol, 1, 1, (6, 10), 0)
            except MetricUndefinedError:
                assert ref is None
                continue
            assert ref is not None
            assert np.array_equal(rows, ref[0])
            assert np.array_equal(pos, ref[1])

    def test_errors(self):
        vol = self._volume(slice(0, 7), slice(7, 12))
        with pytest.raises(MetricUndefinedError, match="lacks label"):
            extract_separation_line(vol, 1, 1, (6, 4), 0)
        with pytest.raises(MetricError, match="scan axis"):
            extract_separation_line(vol, 1, 1, (6, 10), 1)
        with pytest.raises(MetricError, match="outside"):
            extract_separation_line(vol, 1, 9, (6, 10), 0)
        sym = np.zeros((5, 3, 1), dtype=np.int16)
        sym[[0, 4], 1, 0] = 6
        sym[2, 1, 0] = 10
        with pytest.raises(MetricUndefinedError, match="symmetric"):
            extract_separation_line(make_volume(sym), 1, 1, (6, 10), 0)


class TestPasd:
    # putamen anterior face against contact landmark #1, 0.7 mm grid
    def _gt(self):
        data = np.full((4, 6, 2), 10, dtype=np.int16)
        data[:, 4:, :] = 6
        return make_volume(data, spacing=0.7)

    def _lms(self):
        return LandmarkSet({1: np.array([0.0, 3 * 0.7, 0.0])})

    def test_surface_on_landmark_slice(self):
        spec = _spec("Put", "anterior")
        pts = extract_protocol_surface(self._gt(), spec, self._lms(), "left")
        assert pts.shape == (8, 3)
        assert np.allclose(pts[:, 1], 2.1)

    def test_perfect_match_is_zero(self):
        spec = _spec("Put", "anterior")
        gt = self._gt()
        assert pasd(gt, gt, spec, self._lms(), "left") == 0.0

    def test_one_slice_retreat_costs_spacing(self):
        spec = _spec("Put", "anterior")
        gt = self._gt()
        retreated = gt.data.copy()
        retreated[:, 3, :] = 6  # putamen face pulled back one slice
        pred = make_volume(retreated, spacing=0.7)
        assert pasd(gt, pred, spec, self._lms(), "left") == pytest.approx(
            0.7, abs=1e-12)
        # one-way by construction: the retreated volume has no face
        # voxels on the landmark slice at all
        with pytest.raises(MetricUndefinedError, match="absent"):
            pasd(pred, gt, spec, self._lms(), "left")

    def test_side_filter_excludes_far_side(self):
        spec = _spec("Put", "anterior")
        gt = self._gt()
        data = np.full((4, 6, 2), 6, dtype=np.int16)
        data[:, 0, :] = 10           # kept: posterior of the landmark
        data[:, 5, :] = 10           # anterior of it: filtered out
        pred = make_volume(data, spacing=0.7)
        assert pasd(gt, pred, spec, self._lms(), "left") == pytest.approx(
            3 * 0.7, abs=1e-12)
        assert pasd(gt, pred, spec, self._lms(), "left",
                    side_filter=False) == pytest.approx(2 * 0.7, abs=1e-12)

    def test_lateral_surface(self):
        spec = _spec("NAcc", "lateral")
        data = np.zeros((6, 1, 2), dtype=np.int16)
        data[0:3, 0, :] = 6
        data[3:6, 0, :] = 10
        gt = make_volume(data)
        pts = extract_protocol_surface(gt, spec, LandmarkSet({}), "left")
        assert sorted(map(tuple, pts)) == [(2.0, 0.0, 0.0), (2.0, 0.0, 1.0)]
        assert pasd(gt, gt, spec, LandmarkSet({}), "left") == 0.0

    def test_exclusive_boundary_shifts_one_slice(self):
        spec = _spec("IH", "posterior")
        data = np.zeros((2, 6, 2), dtype=np.int16)
        data[:, 0:4, :] = 1    # ventricle up to the landmark slice
        data[:, 4:6, :] = 17   # horn strictly anterior
        gt = make_volume(data)
        lms = LandmarkSet({13: np.array([0.0, 3.0, 0.0])})
        pts = extract_protocol_surface(gt, spec, lms, "left")
        assert np.allclose(pts[:, 1], 4.0)  # one slice beyond the landmark
        assert pasd(gt, gt, spec, lms, "left") == 0.0

    def test_undefined_cases(self):
        spec = _spec("Put", "anterior")
        gt = self._gt()
        empty = make_volume(np.zeros((4, 6, 2), dtype=np.int16), spacing=0.7)
        with pytest.raises(MetricUndefinedError, match="no predicted voxels"):
            pasd(gt, empty, spec, self._lms(), "left")
        far = LandmarkSet({1: np.array([0.0, 70.0, 0.0])})
        with pytest.raises(MetricUndefinedError, match="outside"):
            pasd(gt, gt, spec, far, "left")
        with pytest.raises(MetricUndefinedError, match="missing"):
            pasd(gt, gt, spec, LandmarkSet({}), "left")

    def test_alignment_and_side_checks(self):
        spec = _spec("Put", "anterior")
        gt = self._gt()
        other = make_volume(gt.data.copy(), spacing=0.8)
        with pytest.raises(MetricError, match="affine"):
            pasd(gt, other, spec, self._lms(), "left")
        with pytest.raises(MetricError, match="no side"):
            spec.side("mid")

    def test_matches_reference_distances(self):
        rng = np.random.default_rng(6)
        spec_post = _spec("NAcc", "posterior")
        spec_lat = _spec("NAcc", "lateral")
        checked = 0
        for _ in range(12):
            dims = tuple(rng.integers(8, 14, size=3))
            gt = make_volume(
                rng.choice([0, 6, 10], size=dims).astype(np.int16), spacing=0.8)
            pred = make_volume(
                rng.choice([0, 6, 10], size=dims).astype(np.int16), spacing=0.8)
            y_lm = 0.8 * float(rng.integers(0, dims[1]))
            lms = LandmarkSet({7: np.array([0.0, y_lm, 0.0])})
            for spec in (spec_post, spec_lat):
                ref = brute_pasd(gt, pred, spec, lms, "left")
                try:
                    got = pasd(gt, pred, spec, lms, "left")
                except MetricUndefinedError:
                    assert ref is None
                    continue
                assert ref == pytest.approx(got, abs=1e-9)
                checked += 1
        assert checked >= 8  # random fields must actually exercise the path


class TestWilcoxon:
    def test_five_positive_pairs(self):
        w, p = wilcoxon_signed_rank([11, 12, 13, 14, 15], [10] * 5)
        assert w == 15.0
        assert p == 0.0625  # 2 of 32 sign patterns reach W+ = 15

    def test_symmetric_differences(self):
        a = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0]
        w, p = wilcoxon_signed_rank(a, [0.0] * 6)
        assert w == 10.5
        assert p == 1.0

    def test_eight_same_sign(self):
        _, p = wilcoxon_signed_rank(list(range(1, 9)), [0] * 8)
        assert p == 2 / 256

    def test_zeros_dropped(self):
        w, p = wilcoxon_signed_rank([10, 10, 11, 12, 13, 14, 15],
                                    [10, 10, 10, 10, 10, 10, 10])
        assert (w, p) == (15.0, 0.0625)
        with pytest.raises(MetricUndefinedError, match="5"):
            wilcoxon_signed_rank([1, 2, 3, 4, 0], [0, 0, 0, 0, 0])

    @pytest.mark.parametrize("seed", range(6))
    def test_exact_path_matches_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(6, 13))
        diffs = rng.integers(-4, 5, size=n)
        diffs[diffs == 0] = 1  # keep n nonzero pairs
        a = diffs.astype(float)
        b = np.zeros(n)
        w_ref, p_ref = brute_wilcoxon(a, b)
        w, p = wilcoxon_signed_rank(a, b)
        assert w == w_ref
        assert p == p_ref  # identical dyadic rationals

    def test_large_sample_matches_normal_approximation(self):
        rng = np.random.default_rng(9)
        a = rng.normal(0.3, 1.0, size=25)
        b = np.zeros(25)
        w, p = wilcoxon_signed_rank(a, b)
        res = scipy.stats.wilcoxon(a, b, zero_method="wilcox",
                                   correction=False, method="approx")
        assert p == pytest.approx(res.pvalue, abs=1e-12)


class TestBenjaminiHochberg:
    def test_examples(self):
        flags = benjamini_hochberg([0.01, 0.02, 0.04], 0.05)
        assert flags.tolist() == [True, True, True]
        # step-up: a late passer rescues earlier ranks
        flags = benjamini_hochberg([0.04, 0.049, 0.01], 0.05)
        assert flags.tolist() == [True, True, True]
        flags = benjamini_hochberg([0.04, 0.5, 0.9], 0.05)
        assert flags.tolist() == [False, False, False]
        assert benjamini_hochberg([], 0.05).size == 0

    def test_monotone_in_q(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            p = rng.random(8)
            lo = benjamini_hochberg(p, 0.01)
            hi = benjamini_hochberg(p, 0.05)
            assert not np.any(lo & ~hi)


class TestWilcoxonFdr:
    def _table(self):
        rng = np.random.default_rng(3)
        n = 12
        a = np.column_stack([
            rng.normal(1.0, 0.2, n),   # clearly shifted
            rng.normal(1.0, 0.2, n),   # clearly shifted
            np.full(n, 0.5),           # degenerate: zero differences
        ])
        b = np.column_stack([a[:, 0] - 1.0, a[:, 1] - 1.0, np.full(n, 0.5)])
        subjects = tuple(f"s{i}" for i in range(n))
        return PairedSampleTable(subjects, ("dice", "pasd", "flat"), a, b)

    def test_degenerate_column_gets_nan(self):
        rows = wilcoxon_fdr(self._table(), q=0.05)
        assert [r["column"] for r in rows] == ["dice", "pasd", "flat"]
        assert rows[0]["significant"] and rows[1]["significant"]
        assert np.isnan(rows[2]["p_value"])
        assert rows[2]["significant"] is False

    def test_table_shape_validation(self):
        with pytest.raises(MetricError, match="match"):
            PairedSampleTable(("s1",), ("c1", "c2"), np.zeros((1, 1)),
                              np.zeros((1, 1)))


class TestMetricReport:
    def _report(self):
        return MetricReport("sub-01", [
            MetricRow("dice", "Put", "", "left", 0.97),
            MetricRow("dice", "Put", "", "right", 0.95),
            MetricRow("pasd", "Put", "anterior", "left", 0.4),
        ])

    def test_json_round_trip(self):
        rep = self._report()
        back = MetricReport.from_json(rep.to_json())
        assert back.subject == "sub-01"
        assert back.rows == rep.rows

    def test_csv_layout(self):
        lines = self._report().to_csv().strip().splitlines()
        assert lines[0] == "subject,metric,region,surface,side,value"
        assert lines[1].startswith("sub-01,dice,Put,,left,")

    def test_mean(self):
        rep = self._report()
        assert rep.mean("dice") == pytest.approx(0.96)
        with pytest.raises(MetricUndefinedError):
            rep.mean("mae")


def test_evaluate_pair_self_comparison(phantom0, refined0):
    _, lms = phantom0
    report = evaluate_pair(refined0, refined0, lms, subject="phantom0")
    by_metric = {}
    for row in report.rows:
        by_metric.setdefault(row.metric, []).append(row.value)
    assert len(by_metric["dice"]) == 26
    assert all(v == 1.0 for v in by_metric["dice"])
    assert len(by_metric["pasd"]) == 15
    assert all(v == 0.0 for v in by_metric["pasd"])
    assert len(by_metric["sigma_y"]) == 15
    assert all(v == 0.0 for v in by_metric["sigma_y"])
    assert all(v == 0.0 for v in by_metric["mae"])
    assert report.mean("dice") == 1.0
